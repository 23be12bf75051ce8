"""Indexed triangle meshes: validation, normals, connectivity, I/O and z-buffer shading."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import _backend
from .camera import CameraSpec
from .errors import FormatError, InputError


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise InputError("vertex color count does not match vertex count")
            object.__setattr__(self, "colors", c)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InputError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.colors)

    def with_colors(self, colors) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, colors)

    def face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.maximum(n, 1e-300)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        c = self.face_cross()
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], c)
        n = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(n, 1e-300)

    def signed_volume(self) -> float:
        v = self.vertices
        f = self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), sorted."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def check(self, area_tol: float = 1e-12) -> None:
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.n_vertices):
            raise InputError("face index out of range")
        if np.any(self.face_areas() <= area_tol):
            raise InputError("mesh has degenerate faces")


def remove_degenerate(mesh: TriMesh, area_tol: float = 1e-12) -> TriMesh:
    f = mesh.faces
    keep = (mesh.face_areas() > area_tol) & (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return compact(TriMesh(mesh.vertices, f[keep], mesh.colors))


def compact(mesh: TriMesh) -> TriMesh:
    """Drop unreferenced vertices, keeping the relative vertex order."""
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    remap = np.cumsum(used) - 1
    colors = None if mesh.colors is None else mesh.colors[used]
    return TriMesh(mesh.vertices[used], remap[mesh.faces], colors)


def weld(mesh: TriMesh, decimals: int = 9) -> TriMesh:
    """Merge vertices with identical rounded positions."""
    key = np.round(mesh.vertices, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    idx = first[order]
    colors = None if mesh.colors is None else mesh.colors[idx]
    return TriMesh(mesh.vertices[idx], rank[inverse.reshape(-1)][mesh.faces], colors)


def largest_component(mesh: TriMesh) -> TriMesh:
    """Keep the connected component (via shared vertices) with the largest surface area."""
    if mesh.is_empty():
        return mesh
    nv = mesh.n_vertices
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    n_comp, labels = connected_components(adj, directed=False)
    if n_comp == 1:
        return mesh
    face_label = labels[f[:, 0]]
    area = np.bincount(face_label, weights=mesh.face_areas(), minlength=n_comp)
    best = int(np.argmax(area))
    return compact(TriMesh(mesh.vertices, f[face_label == best], mesh.colors))


def vertex_adjacency(n_vertices: int, faces: np.ndarray) -> sp.csr_matrix:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1.0
    return adj


# ---------------------------------------------------------------- rasterization

def rasterize(mesh: TriMesh, cam: CameraSpec, supersample: int = 1):
    """Hard z-buffer raster; returns (face_id, barycentrics) at ``supersample`` x resolution."""
    if mesh.is_empty():
        raise InputError("cannot rasterize an empty mesh")
    s = int(supersample)
    hi = CameraSpec(cam.rotation, cam.translation, cam.width * s, cam.height * s, cam.pixel_scale / s)
    xy, depth = hi.project(mesh.vertices)
    # supersampled pixel centres are offset so that each block of s x s samples is centred on a pixel
    xy = xy + 0.5 * (s - 1)
    core = _backend.get_core()
    face_id, bary, _ = core.raster_mesh(np.ascontiguousarray(xy), np.ascontiguousarray(depth),
                                        mesh.faces, hi.width, hi.height)
    return face_id, bary


def _downsample(img: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return img
    h, w = img.shape[0] // s, img.shape[1] // s
    return img.reshape(h, s, w, s, *img.shape[2:]).mean(axis=(1, 3))


def shade(mesh: TriMesh, cam: CameraSpec, attribute: np.ndarray, background, supersample: int = 1,
          renormalize: bool = False):
    """Interpolate a per-vertex attribute over the visible surface.

    Returns (image (H, W, C), coverage (H, W)). With ``renormalize`` the
    interpolated vectors are rescaled to unit length before averaging
    (used for normal maps).
    """
    face_id, bary = rasterize(mesh, cam, supersample)
    attribute = np.asarray(attribute, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    covered = face_id >= 0
    fi = np.where(covered, face_id, 0)
    corners = attribute[mesh.faces[fi]]  # (H, W, 3, C)
    val = np.einsum("hwk,hwkc->hwc", bary, corners)
    if renormalize:
        val = val / np.maximum(np.linalg.norm(val, axis=-1, keepdims=True), 1e-12)
    s = int(supersample)
    cov = _downsample(covered.astype(np.float64), s)
    summed = _downsample(np.where(covered[..., None], val, 0.0), s)
    mean = summed / np.maximum(cov[..., None], 1e-12)
    if renormalize:
        mean = mean / np.maximum(np.linalg.norm(mean, axis=-1, keepdims=True), 1e-12)
    img = cov[..., None] * mean + (1.0 - cov[..., None]) * bg
    return img, cov


def render_color(mesh: TriMesh, cam: CameraSpec, background=(1.0, 1.0, 1.0), supersample: int = 2):
    colors = mesh.colors if mesh.colors is not None else np.full((mesh.n_vertices, 3), 0.5)
    return shade(mesh, cam, colors, background, supersample)


def render_normal(mesh: TriMesh, cam: CameraSpec, supersample: int = 2):
    """World-space smooth normals encoded as (n + 1) / 2 over a 0.5 grey background."""
    img, cov = shade(mesh, cam, mesh.vertex_normals(), (0.0, 0.0, 0.0), supersample, renormalize=True)
    return 0.5 * (img + 1.0) * cov[..., None] + 0.5 * (1.0 - cov[..., None]), cov


def render_face_labels(mesh: TriMesh, cam: CameraSpec, face_labels: np.ndarray) -> np.ndarray:
    """Per-pixel label of the visible face (0 where uncovered), sampled at pixel centres."""
    face_id, _ = rasterize(mesh, cam, 1)
    labels = np.asarray(face_labels)
    return np.where(face_id >= 0, labels[np.maximum(face_id, 0)], 0).astype(np.uint8)


# ---------------------------------------------------------------- I/O

def save_obj(mesh: TriMesh, path) -> None:
    lines = []
    if mesh.colors is not None:
        for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.colors):
            lines.append(f"v {x:.7f} {y:.7f} {z:.7f} {r:.5f} {g:.5f} {b:.5f}")
    else:
        lines.extend(f"v {x:.7f} {y:.7f} {z:.7f}" for x, y, z in mesh.vertices)
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, colors, faces = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"vertex needs 3 coordinates, got {len(parts) - 1}")
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise FormatError(f"line {lineno}", str(exc)) from None
    if colors and len(colors) != len(verts):
        raise FormatError("v", "vertex colors present on only some vertices")
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    c = np.array(colors, dtype=np.float64) if colors else None
    return TriMesh(v, np.array(faces, dtype=np.int64).reshape(-1, 3), c)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def save_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY with float32 positions and optional uchar colors."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    vert = np.zeros(mesh.n_vertices, dtype=fields)
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T.astype(np.float32)
    if mesh.colors is not None:
        rgb = np.round(np.clip(mesh.colors, 0, 1) * 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = rgb.T
    face = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face["n"] = 3
    face["idx"] = mesh.faces
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + vert.tobytes() + face.tobytes())


def load_ply(path) -> TriMesh:
    data = Path(path).read_bytes()
    try:
        return _parse_ply(data)
    except FormatError:
        raise
    except (ValueError, IndexError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError("body", f"malformed PLY data: {exc}") from None


def _parse_ply(data: bytes) -> TriMesh:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("header", "not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
    if fmt not in ("binary_little_endian", "ascii"):
        raise FormatError("format", f"unsupported PLY format {fmt}")
    verts = colors = faces = None
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            if name == "face":
                out = []
                for _ in range(count):
                    n = int(tokens[pos]); idx = [int(t) for t in tokens[pos + 1:pos + 1 + n]]
                    pos += 1 + n
                    out.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, n - 1))
                faces = np.array(out, dtype=np.int64).reshape(-1, 3)
            else:
                k = len(props)
                rows = np.array(tokens[pos:pos + k * count], dtype=np.float64).reshape(count, k)
                pos += k * count
                if name == "vertex":
                    names = [p[-1] for p in props]
                    verts = rows[:, [names.index(a) for a in "xyz"]]
                    if "red" in names:
                        colors = rows[:, [names.index(a) for a in ("red", "green", "blue")]] / 255.0
        return TriMesh(verts, faces if faces is not None else np.zeros((0, 3)), colors)
    offset = body_start
    for name, count, props in elements:
        if props and props[0][0] == "list":
            ctype, itype = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
            out = []
            for _ in range(count):
                n = int(np.frombuffer(data, ctype, 1, offset)[0]); offset += np.dtype(ctype).itemsize
                idx = np.frombuffer(data, "<" + itype, n, offset); offset += n * np.dtype(itype).itemsize
                out.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, n - 1))
            if name == "face":
                faces = np.array(out, dtype=np.int64).reshape(-1, 3)
        else:
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            if offset + dt.itemsize * count > len(data):
                raise FormatError(name, "truncated element data")
            rec = np.frombuffer(data, dt, count, offset)
            offset += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
                if "red" in dt.names:
                    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    return TriMesh(verts, faces if faces is not None else np.zeros((0, 3)), colors)


def load_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise FormatError("suffix", f"unsupported mesh format {suffix!r}")


def save_mesh(mesh: TriMesh, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        save_obj(mesh, path)
    elif suffix == ".ply":
        save_ply(mesh, path)
    else:
        raise FormatError("suffix", f"unsupported mesh format {suffix!r}")


# ---------------------------------------------------------------- primitives

def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = {}
        verts = list(v)
        new_faces = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in edges:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                edges[key] = len(verts) - 1
            return edges[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(new_faces)
    return TriMesh(v * radius, f)


def box(half_extent=(0.5, 0.5, 0.5), split_faces: bool = True) -> TriMesh:
    """Axis-aligned box; with ``split_faces`` each side has its own 4 vertices (flat normals)."""
    hx, hy, hz = half_extent
    sides = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            u, w = [a for a in range(3) if a != axis]
            quad = []
            for su, sw in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = np.zeros(3)
                p[axis] = sign
                p[u] = su
                p[w] = sw
                quad.append(p)
            quad = np.array(quad)
            n = np.zeros(3); n[axis] = sign
            if np.dot(np.cross(quad[1] - quad[0], quad[2] - quad[0]), n) < 0:
                quad = quad[::-1]
            sides.append(quad)
    verts = np.concatenate(sides) * np.array([hx, hy, hz])
    faces = []
    for s in range(6):
        b = 4 * s
        faces += [[b, b + 1, b + 2], [b, b + 2, b + 3]]
    mesh = TriMesh(verts, np.array(faces))
    return mesh if split_faces else weld(mesh)
