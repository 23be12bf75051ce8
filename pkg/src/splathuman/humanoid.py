"""Procedural articulated humanoids built from capsules and ellipsoids.

The body is the smooth union of primitive signed distance fields, polygonized
with marching cubes into one closed surface. Every vertex is labelled with
the body part whose primitive is nearest, which gives exact part masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from .errors import InputError
from .mesh import TriMesh, largest_component, remove_degenerate

PARTS = ("head", "torso", "left_arm", "right_arm", "left_hand", "right_hand", "left_leg", "right_leg")
PART_IDS = {name: i + 1 for i, name in enumerate(PARTS)}
HEIGHT_CM = 180.0
HEIGHT_WORLD = 1.8


@dataclass(frozen=True)
class HumanoidConfig:
    # (low, high) ranges in degrees, sampled uniformly per seed
    arm_abduction: tuple = (22.0, 45.0)
    arm_flexion: tuple = (-15.0, 25.0)
    elbow_flexion: tuple = (0.0, 35.0)
    leg_abduction: tuple = (3.0, 10.0)
    hip_flexion: tuple = (-8.0, 12.0)
    knee_flexion: tuple = (0.0, 20.0)
    head_yaw: tuple = (-15.0, 15.0)
    # body proportions as multiplicative jitter around the template
    proportion_jitter: float = 0.08
    grid_resolution: int = 160
    blend: float = 0.025
    palette: dict = field(default_factory=lambda: {
        "skin": [(0.93, 0.76, 0.62), (0.80, 0.60, 0.45), (0.55, 0.38, 0.26), (0.36, 0.24, 0.16)],
        "shirt": [(0.80, 0.15, 0.15), (0.15, 0.35, 0.75), (0.20, 0.60, 0.30), (0.90, 0.75, 0.20),
                  (0.45, 0.25, 0.60), (0.25, 0.25, 0.28)],
        "pants": [(0.15, 0.18, 0.35), (0.30, 0.30, 0.32), (0.55, 0.45, 0.30), (0.10, 0.10, 0.10)],
        "hair": [(0.10, 0.07, 0.05), (0.35, 0.22, 0.10), (0.70, 0.55, 0.30)],
    })

    def validate(self) -> None:
        for name in ("arm_abduction", "arm_flexion", "elbow_flexion", "leg_abduction",
                     "hip_flexion", "knee_flexion", "head_yaw"):
            lo, hi = getattr(self, name)
            if not (-90.0 <= lo <= hi <= 90.0):
                raise InputError(f"{name} range {lo, hi} must satisfy -90 <= low <= high <= 90")
        if self.arm_abduction[0] < 10.0:
            raise InputError("arm_abduction below 10 degrees merges the arms into the torso silhouette")
        if not 0.0 <= self.proportion_jitter <= 0.25:
            raise InputError("proportion_jitter must lie in [0, 0.25]")
        if not 48 <= self.grid_resolution <= 512:
            raise InputError("grid_resolution must lie in [48, 512]")
        if not 0.0 < self.blend < 0.2:
            raise InputError("blend must lie in (0, 0.2)")


def _capsule(p, a, b, r):
    pa = p - a
    ba = b - a
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[:, None] * ba, axis=1) - r


def _ellipsoid(p, c, radii, rot=None):
    q = p - c
    if rot is not None:
        q = q @ rot
    k0 = np.linalg.norm(q / radii, axis=1)
    k1 = np.linalg.norm(q / (radii * radii), axis=1)
    return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)


def _smin(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def _rot_y(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), 0, math.sin(t)], [0, 1, 0], [-math.sin(t), 0, math.cos(t)]])


def _limb_dir(abduction, flexion, side):
    """Unit vector hanging down (-y), swung outward by abduction and forward (+z) by flexion."""
    a, f = math.radians(abduction), math.radians(flexion)
    d = np.array([side * math.sin(a) * math.cos(f), -math.cos(a) * math.cos(f), math.sin(f)])
    return d / np.linalg.norm(d)


@dataclass
class Primitive:
    part: str
    kind: str
    args: tuple
    region: str  # palette region

    def bounds(self):
        if self.kind == "capsule":
            a, b, r = self.args
            return np.minimum(a, b) - r, np.maximum(a, b) + r
        c, radii = self.args[0], self.args[1]
        return c - radii.max(), c + radii.max()

    def sdf(self, p):
        return _capsule(p, *self.args) if self.kind == "capsule" else _ellipsoid(p, *self.args)


def build_primitives(rng: np.random.Generator, cfg: HumanoidConfig):
    u = lambda rng_range: rng.uniform(*rng_range)
    jit = lambda: 1.0 + rng.uniform(-cfg.proportion_jitter, cfg.proportion_jitter)
    shoulder_w, hip_w = 0.19 * jit(), 0.095 * jit()
    upper_arm, fore_arm = 0.29 * jit(), 0.25 * jit()
    thigh, shin = 0.42 * jit(), 0.41 * jit()
    girth = jit()
    prims = [
        Primitive("head", "ellipsoid", (np.array([0.0, 0.76, 0.0]), np.array([0.085, 0.11, 0.095]) * jit(),
                                        _rot_y(u(cfg.head_yaw))), "skin"),
        Primitive("torso", "capsule", (np.array([0.0, 0.58, 0.0]), np.array([0.0, 0.68, 0.0]), 0.045), "skin"),
        Primitive("torso", "ellipsoid", (np.array([0.0, 0.36, 0.0]), np.array([0.17, 0.24, 0.105]) * girth, None), "shirt"),
        Primitive("torso", "ellipsoid", (np.array([0.0, 0.08, 0.0]), np.array([0.155, 0.14, 0.1]) * girth, None), "pants"),
    ]
    flex_a = u(cfg.arm_flexion)
    for side, name in ((1.0, "left"), (-1.0, "right")):
        shoulder = np.array([side * shoulder_w, 0.53, 0.0])
        d1 = _limb_dir(u(cfg.arm_abduction), flex_a + rng.uniform(-5, 5), side)
        elbow = shoulder + upper_arm * d1
        d2 = _limb_dir(math.degrees(math.atan2(abs(d1[0]), -d1[1])) * 0.9,
                       math.degrees(math.asin(np.clip(d1[2], -1, 1))) + u(cfg.elbow_flexion), side)
        wrist = elbow + fore_arm * d2
        hand = wrist + 0.13 * d2
        prims += [
            # shoulder yoke keeps the arm attached to the torso for every proportion draw
            Primitive("torso", "capsule", (np.array([0.0, 0.5, 0.0]), shoulder, 0.05 * girth), "shirt"),
            Primitive(f"{name}_arm", "capsule", (shoulder, elbow, 0.052 * girth), "shirt"),
            Primitive(f"{name}_arm", "capsule", (elbow, wrist, 0.041), "shirt"),
            Primitive(f"{name}_hand", "capsule", (wrist + 0.02 * d2, hand, 0.036), "skin"),
        ]
        hip = np.array([side * hip_w, 0.0, 0.0])
        hip_flex = u(cfg.hip_flexion)
        d3 = _limb_dir(u(cfg.leg_abduction), hip_flex, side)
        knee = hip + thigh * d3
        d4 = _limb_dir(math.degrees(math.atan2(abs(d3[0]), -d3[1])), hip_flex - u(cfg.knee_flexion), side)
        ankle = knee + shin * d4
        prims += [
            Primitive(f"{name}_leg", "capsule", (hip, knee, 0.078 * girth), "pants"),
            Primitive(f"{name}_leg", "capsule", (knee, ankle, 0.056 * girth), "pants"),
            Primitive(f"{name}_leg", "capsule", (ankle, ankle + np.array([side * 0.02, -0.035, 0.12]), 0.042), "shoes"),
        ]
    return prims


def build_palette(rng: np.random.Generator, cfg: HumanoidConfig) -> dict:
    pick = lambda key: np.array(cfg.palette[key][rng.integers(len(cfg.palette[key]))], dtype=np.float64)
    shirt = np.clip(pick("shirt") + rng.uniform(-0.05, 0.05, 3), 0.02, 0.95)
    return {"skin": pick("skin"), "shirt": shirt, "pants": pick("pants"), "hair": pick("hair"),
            "shoes": np.array([0.12, 0.1, 0.09])}


def synth_humanoid(seed: int, cfg: HumanoidConfig | None = None):
    """Build (mesh with vertex colors, per-face part ids) for one seed."""
    cfg = cfg or HumanoidConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    prims = build_primitives(rng, cfg)
    palette = build_palette(rng, cfg)
    short_sleeves = bool(rng.integers(2))

    n = cfg.grid_resolution
    lin = np.linspace(-1.0, 1.0, n)
    spacing = lin[1] - lin[0]
    # only the lattice block around the body is evaluated; the rest stays outside (positive)
    lo, hi = np.min([p.bounds()[0] for p in prims], axis=0), np.max([p.bounds()[1] for p in prims], axis=0)
    margin = 2.0 * cfg.blend + 2.0 * spacing
    ia = np.clip(np.floor((lo - margin + 1.0) / spacing).astype(int), 0, n - 1)
    ib = np.clip(np.ceil((hi + margin + 1.0) / spacing).astype(int), 0, n - 1)
    axes = [lin[ia[d]:ib[d] + 1] for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    block = None
    for prim in prims:
        d = prim.sdf(pts)
        block = d if block is None else _smin(block, d, cfg.blend)
    field = np.ones((n, n, n))
    field[ia[0]:ib[0] + 1, ia[1]:ib[1] + 1, ia[2]:ib[2] + 1] = block.reshape([len(a) for a in axes])
    verts, faces, _, _ = marching_cubes(field, level=0.0, spacing=(spacing,) * 3,
                                        gradient_direction="ascent")
    verts = verts - 1.0
    mesh = largest_component(remove_degenerate(TriMesh(verts, faces)))
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])

    # normalize: vertical extent -> 1.8 world units, centred in the box
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    scale = HEIGHT_WORLD / (hi[1] - lo[1])
    centre = np.array([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])])
    # part assignment and colors are evaluated in the primitive frame, before rescaling
    dists = np.stack([p.sdf(v) for p in prims], axis=1)
    nearest = np.argmin(dists, axis=1)
    part_of_prim = np.array([PART_IDS[p.part] for p in prims])
    vlabel = part_of_prim[nearest]
    colors = np.zeros_like(v)
    for k, prim in enumerate(prims):
        colors[nearest == k] = palette[prim.region]
    # hair cap on the upper back of the head
    head_c = prims[0].args[0]
    hair = (vlabel == PART_IDS["head"]) & ((v[:, 1] > head_c[1] + 0.035) | ((v[:, 2] < head_c[2] - 0.02) & (v[:, 1] > head_c[1] - 0.05)))
    colors[hair] = palette["hair"]
    # forearm sleeves: short sleeves expose skin below the elbow
    if short_sleeves:
        for k, prim in enumerate(prims):
            if prim.part.endswith("_arm") and prim.args[2] < 0.045:
                colors[nearest == k] = palette["skin"]
    vertices = (v - centre) * scale
    flabel = _face_labels(mesh.faces, vlabel)
    return TriMesh(vertices, mesh.faces, np.clip(colors, 0.0, 1.0)), flabel


def _face_labels(faces, vlabel):
    """Majority vote of the three corner labels (first corner on a three-way tie)."""
    a, b, c = vlabel[faces[:, 0]], vlabel[faces[:, 1]], vlabel[faces[:, 2]]
    return np.where(b == c, b, a).astype(np.uint8)
