"""Orthographic cameras.

Camera space is right-handed with x right, y up and the camera looking down
-z; depth is ``-z_cam`` so larger depth means farther away. Pixel centres
sit at integer coordinates and the principal point is ``(W/2, H/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InputError

SCENE_EXTENT = 2.0  # the normalized scene box is [-1, 1]^3


@dataclass(frozen=True, eq=False)
class CameraSpec:
    rotation: np.ndarray  # 3x3 world -> camera
    translation: np.ndarray
    width: int
    height: int
    pixel_scale: float  # world units per pixel
    name: str = field(default="", compare=False)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise InputError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise InputError("camera resolution must be at least 1x1")
        if not self.pixel_scale > 0:
            raise InputError("pixel_scale must be positive")

    @property
    def principal_point(self):
        return 0.5 * self.width, 0.5 * self.height

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def view_dir(self) -> np.ndarray:
        """World-space direction the camera looks along."""
        return -self.rotation[2]

    def jacobian(self) -> np.ndarray:
        """2x3 map from world displacements to pixel displacements."""
        return np.diag([1.0, -1.0]) @ self.rotation[:2] / self.pixel_scale

    def project(self, points):
        """World points (N, 3) -> pixel coordinates (N, 2) and depth (N,); numpy or torch."""
        cx, cy = self.principal_point
        if isinstance(points, torch.Tensor):
            r = torch.as_tensor(self.rotation, dtype=points.dtype)
            t = torch.as_tensor(self.translation, dtype=points.dtype)
            pc = points @ r.T + t
            u = cx + pc[:, 0] / self.pixel_scale
            v = cy - pc[:, 1] / self.pixel_scale
            return torch.stack([u, v], dim=1), -pc[:, 2]
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        uv = np.stack([cx + pc[:, 0] / self.pixel_scale, cy - pc[:, 1] / self.pixel_scale], axis=1)
        return uv, -pc[:, 2]

    def __eq__(self, other):
        if not isinstance(other, CameraSpec):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and (self.width, self.height, self.pixel_scale)
                == (other.width, other.height, other.pixel_scale))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes(),
                     self.width, self.height, self.pixel_scale))


def orbit_camera(azimuth_deg: float, width: int = 128, height: int | None = None,
                 pixel_scale: float | None = None, distance: float = 3.0,
                 name: str = "") -> CameraSpec:
    """Camera on the horizontal circle; azimuth 0 sits on +z looking at the origin (front view)."""
    height = width if height is None else height
    if pixel_scale is None:
        pixel_scale = SCENE_EXTENT / min(width, height)
    th = math.radians(azimuth_deg)
    z_axis = np.array([math.sin(th), 0.0, math.cos(th)])
    x_axis = np.array([math.cos(th), 0.0, -math.sin(th)])
    y_axis = np.array([0.0, 1.0, 0.0])
    rot = np.stack([x_axis, y_axis, z_axis])
    # exact values on the axis-aligned views keep front/back renders free of 1e-17 noise
    rot[np.abs(rot) < 1e-15] = 0.0
    pos = distance * z_axis
    return CameraSpec(rot, -rot @ pos, width, height, pixel_scale, name=name or f"az{azimuth_deg:g}")


def circle_cameras(n: int = 8, width: int = 128, pixel_scale: float | None = None,
                   distance: float = 3.0) -> list[CameraSpec]:
    return [orbit_camera(360.0 * i / n, width, pixel_scale=pixel_scale, distance=distance)
            for i in range(n)]


def front_back_cameras(width: int = 256, pixel_scale: float | None = None):
    return [orbit_camera(0.0, width, pixel_scale=pixel_scale, name="front"),
            orbit_camera(180.0, width, pixel_scale=pixel_scale, name="back")]
