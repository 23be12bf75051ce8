"""3D Gaussian splat data model, raw-parameter activation, density field and splat files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, ParameterDomainError

CENTER_BOUND = 0.9
MIN_SCALE = 1e-4
QUAT_EPS = 1e-8
N_PARAMS = 14

SPLAT_MAGIC = b"UGSP"
SPLAT_VERSION = 1
_HEADER = struct.Struct("<4sIBI")
_RECORD_BYTES = N_PARAMS * 4


class Kind(IntEnum):
    TEXTURE = 0
    NORMAL = 1


@dataclass(frozen=True)
class Gaussian:
    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity: float
    color: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.center, self.scale, self.rotation, [self.opacity], self.color])

    def check(self, tol: float = 1e-6) -> None:
        if abs(np.linalg.norm(self.rotation) - 1.0) > tol:
            raise ParameterDomainError("rotation is not a unit quaternion")
        if np.any(self.scale <= 0):
            raise ParameterDomainError("scale must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ParameterDomainError("opacity outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ParameterDomainError("color outside [0, 1]")


class Splats(NamedTuple):
    """Tensor view of a Gaussian set used by the differentiable renderer."""

    centers: torch.Tensor  # (N, 3)
    scales: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4)
    opacities: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Ordered Gaussians stored as float32 columns, tagged texture or normal."""

    params: np.ndarray  # (N, 14) float32, columns as in the splat file
    kind: Kind = Kind.TEXTURE

    def __post_init__(self):
        p = np.ascontiguousarray(self.params, dtype=np.float32).reshape(-1, N_PARAMS)
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "kind", Kind(self.kind))

    @classmethod
    def empty(cls, kind=Kind.TEXTURE) -> "GaussianSet":
        return cls(np.zeros((0, N_PARAMS), np.float32), kind)

    @classmethod
    def from_gaussians(cls, gaussians, kind=Kind.TEXTURE) -> "GaussianSet":
        rows = [g.as_vector() for g in gaussians]
        return cls(np.array(rows, dtype=np.float32).reshape(-1, N_PARAMS), kind)

    @classmethod
    def from_splats(cls, splats: Splats, kind=Kind.TEXTURE) -> "GaussianSet":
        cols = [splats.centers, splats.scales, splats.rotations,
                splats.opacities[:, None], splats.colors]
        return cls(torch.cat([c.detach() for c in cols], dim=1).cpu().numpy(), kind)

    def __len__(self) -> int:
        return self.params.shape[0]

    def __getitem__(self, i) -> Gaussian:
        row = self.params[i].astype(np.float64)
        return Gaussian(row[0:3], row[3:6], row[6:10], float(row[10]), row[11:14])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianSet):
            return NotImplemented
        return self.kind == other.kind and self.params.tobytes() == other.params.tobytes()

    centers = property(lambda self: self.params[:, 0:3])
    scales = property(lambda self: self.params[:, 3:6])
    rotations = property(lambda self: self.params[:, 6:10])
    opacities = property(lambda self: self.params[:, 10])
    colors = property(lambda self: self.params[:, 11:14])

    def to_splats(self, dtype=torch.float64) -> Splats:
        t = torch.from_numpy(self.params.astype(np.float64)).to(dtype)
        return Splats(t[:, 0:3], t[:, 3:6], t[:, 6:10], t[:, 10], t[:, 11:14])

    def check(self, tol: float = 1e-6) -> None:
        p = self.params.astype(np.float64)
        if not np.all(np.isfinite(p)):
            raise ParameterDomainError("non-finite Gaussian parameters")
        if np.any(np.abs(np.linalg.norm(p[:, 6:10], axis=1) - 1.0) > tol):
            raise ParameterDomainError("rotation is not a unit quaternion")
        if np.any(p[:, 3:6] <= 0):
            raise ParameterDomainError("scale must be strictly positive")
        if np.any((p[:, 10] < 0) | (p[:, 10] > 1)):
            raise ParameterDomainError("opacity outside [0, 1]")
        if np.any((p[:, 11:14] < 0) | (p[:, 11:14] > 1)):
            raise ParameterDomainError("color outside [0, 1]")


def activate(raw: torch.Tensor) -> Splats:
    """Map unconstrained (..., 14) tensors to valid Gaussian attributes."""
    center = CENTER_BOUND * torch.tanh(raw[..., 0:3])
    scale = MIN_SCALE + F.softplus(raw[..., 3:6])
    q = raw[..., 6:10]
    # divide by the largest component first so the norm neither overflows nor underflows
    peak = q.abs().amax(dim=-1, keepdim=True)
    qs = q / torch.where(peak > 0, peak, torch.ones_like(peak))
    unit_norm = qs.norm(dim=-1, keepdim=True)
    identity = torch.zeros_like(q)
    identity[..., 0] = 1.0
    small = peak * unit_norm < QUAT_EPS
    rotation = torch.where(small, identity, qs / torch.where(small, torch.ones_like(unit_norm), unit_norm))
    opacity = torch.sigmoid(raw[..., 10])
    color = torch.sigmoid(raw[..., 11:14])
    return Splats(center, scale, rotation, opacity, color)


def activate_raw_params(raw) -> Gaussian:
    """Activate a single 14-vector of network outputs into a Gaussian."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.shape != (N_PARAMS,):
        raise ParameterDomainError(f"expected {N_PARAMS} raw parameters, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterDomainError("raw parameters must be finite")
    s = activate(torch.from_numpy(arr))
    return Gaussian(s.centers.numpy(), s.scales.numpy(), s.rotations.numpy(),
                    float(s.opacities), s.colors.numpy())


def quat_to_rotmat(q):
    """Rotation matrices from (w, x, y, z) quaternions; works for numpy and torch, normalizes."""
    if isinstance(q, torch.Tensor):
        q = q / q.norm(dim=-1, keepdim=True)
        w, x, y, z = q.unbind(-1)
        stack = torch.stack
    else:
        q = np.asarray(q, dtype=np.float64)
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        w, x, y, z = np.moveaxis(q, -1, 0)
        stack = np.stack
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    m = stack(rows, -1)
    return m.reshape(*m.shape[:-1], 3, 3)


def covariances(scales, rotations):
    """World-space covariance matrices R diag(s^2) R^T."""
    r = quat_to_rotmat(rotations)
    if isinstance(r, torch.Tensor):
        return (r * (scales ** 2).unsqueeze(-2)) @ r.transpose(-1, -2)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return (r * s2[..., None, :]) @ np.swapaxes(r, -1, -2)


def density_at(gset: GaussianSet, point) -> float:
    """Opacity-weighted sum of unnormalized Gaussian kernels at ``point``."""
    if len(gset) == 0:
        return 0.0
    p = gset.params.astype(np.float64)
    d = np.asarray(point, dtype=np.float64)[None, :] - p[:, 0:3]
    inv = np.linalg.inv(covariances(p[:, 3:6], p[:, 6:10]))
    q = np.einsum("ni,nij,nj->n", d, inv, d)
    return float(np.sum(p[:, 10] * np.exp(-0.5 * q)))


def save_splat(gset: GaussianSet, path) -> None:
    data = _HEADER.pack(SPLAT_MAGIC, SPLAT_VERSION, int(gset.kind), len(gset))
    data += gset.params.astype("<f4").tobytes()
    Path(path).write_bytes(data)


def load_splat(path) -> GaussianSet:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != SPLAT_MAGIC:
        raise FormatError("magic", f"bad magic bytes {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise FormatError("header", f"header truncated at {len(data)} bytes")
    _, version, kind, count = _HEADER.unpack_from(data)
    if version != SPLAT_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if kind not in (0, 1):
        raise FormatError("kind", f"invalid kind byte {kind}")
    body = data[_HEADER.size:]
    if len(body) < count * _RECORD_BYTES:
        index = len(body) // _RECORD_BYTES
        raise FormatError("record", f"truncated at record {index} of {count}", record=index)
    if len(body) > count * _RECORD_BYTES:
        raise FormatError("count", f"{len(body) - count * _RECORD_BYTES} trailing bytes after {count} records")
    params = np.frombuffer(body, dtype="<f4").reshape(count, N_PARAMS).astype(np.float32)
    return GaussianSet(params, Kind(kind))
