"""Scan samples, on-disk datasets and the manifest with its quality gate."""
from __future__ import annotations

import fcntl
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .camera import orbit_camera
from .errors import InputError, IntegrityError
from .humanoid import HEIGHT_CM, HEIGHT_WORLD, PARTS, HumanoidConfig, synth_humanoid
from .mesh import TriMesh, load_mesh, render_color, render_face_labels, save_obj
from .render import to_uint8

SCHEMA_VERSION = 1
SOURCES = ("synthetic", "imported")
STATUSES = ("pending", "accepted", "rejected")
# label PNG palette: index = part id, 0 is background
LABEL_PALETTE = [(0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
                 (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230)]


@dataclass(frozen=True)
class ScanMeta:
    id: str
    source: str = "synthetic"
    height_cm: float = HEIGHT_CM
    seed: int | None = None


@dataclass(frozen=True, eq=False)
class ScanSample:
    mesh: TriMesh
    label_mask: np.ndarray  # (H, W) uint8 part ids
    front_image: np.ndarray  # (H, W, 3) float32 in [0, 1], white background
    meta: ScanMeta

    def silhouette(self) -> np.ndarray:
        return np.any(self.front_image < 1.0 - 1e-6, axis=-1)

    def label_iou(self) -> float:
        a, b = self.silhouette(), self.label_mask > 0
        union = np.count_nonzero(a | b)
        return 1.0 if union == 0 else np.count_nonzero(a & b) / union

    def check(self, min_iou: float = 0.98) -> None:
        if self.meta.source not in SOURCES:
            raise InputError(f"unknown source {self.meta.source!r}")
        if self.label_mask.shape != self.front_image.shape[:2]:
            raise InputError("label mask and front image sizes differ")
        if self.label_mask.max(initial=0) > len(PARTS):
            raise InputError("label ids must lie in 0..8")
        v = self.mesh.vertices
        if np.abs(v).max() > 1.0:
            raise InputError("mesh leaves the [-1, 1]^3 box")
        extent = v[:, 1].max() - v[:, 1].min()
        if abs(extent - HEIGHT_WORLD) > 1e-3 * HEIGHT_WORLD:
            raise InputError(f"vertical extent {extent:.4f} does not map to {HEIGHT_CM:g} cm")
        iou = self.label_iou()
        if iou < min_iou:
            raise InputError(f"silhouette/label IoU {iou:.4f} below {min_iou}")


def synth_scan(seed: int, cfg: HumanoidConfig | None = None, image_size: int = 128,
               scan_id: str | None = None) -> ScanSample:
    """Procedural humanoid with its canonical front render and exact part mask."""
    if image_size < 32:
        raise InputError("image_size must be at least 32")
    mesh, face_labels = synth_humanoid(seed, cfg)
    cam = orbit_camera(0.0, image_size, name="front")
    # one sample per pixel keeps the silhouette aligned with the label raster
    image, _ = render_color(mesh, cam, supersample=1)
    labels = render_face_labels(mesh, cam, face_labels)
    meta = ScanMeta(scan_id or f"synth_{seed}", "synthetic", HEIGHT_CM, int(seed))
    return ScanSample(mesh, labels, image.astype(np.float32), meta)


def save_label_png(labels: np.ndarray, path) -> None:
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette([c for rgb in LABEL_PALETTE for c in rgb])
    img.save(path, optimize=False)


def load_label_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise InputError(f"label mask {path} must be a palette or grey PNG, got mode {img.mode}")
    return np.array(img, dtype=np.uint8)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def import_scan(mesh_path, mask_path, image_path, scan_id: str) -> ScanSample:
    """Wrap an external scan (OBJ/PLY mesh, label PNG, front PNG) as a sample."""
    sample = ScanSample(load_mesh(mesh_path), load_label_png(mask_path), load_image(image_path),
                        ScanMeta(scan_id, "imported", HEIGHT_CM, None))
    sample.check()
    return sample


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    files: dict  # role -> path relative to the manifest directory
    source: str = "synthetic"
    status: str = "accepted"
    seed: int | None = None

    def to_json(self) -> dict:
        return {"id": self.id, "files": dict(sorted(self.files.items())), "source": self.source,
                "status": self.status, "seed": self.seed}


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: Path
    journal: tuple = ()
    version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise IntegrityError(next(i for i in ids if ids.count(i) > 1), "duplicate id")
        for e in self.entries:
            if e.status not in STATUSES:
                raise IntegrityError(e.id, f"unknown status {e.status!r}")

    def accepted(self) -> list:
        return [e for e in self.entries if e.status == "accepted"]

    def path(self, entry: ManifestEntry, role: str) -> Path:
        return self.root / entry.files[role]

    def to_json(self) -> dict:
        return {"schema_version": self.version, "extra": self.extra,
                "entries": [e.to_json() for e in self.entries], "journal": list(self.journal)}


MANIFEST_NAME = "manifest.json"


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root / MANIFEST_NAME
    text = json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n"
    with open(path, "a+") as fh:  # single writer per manifest file
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0)
            fh.truncate()
            fh.write(text)
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise IntegrityError("<manifest>", f"unsupported schema version {doc.get('schema_version')}")
    entries = tuple(ManifestEntry(e["id"], e["files"], e["source"], e["status"], e.get("seed"))
                    for e in doc["entries"])
    manifest = DatasetManifest(entries, path.parent, tuple(doc.get("journal", ())), SCHEMA_VERSION,
                               doc.get("extra", {}))
    for e in entries:
        for role, rel in e.files.items():
            if not (path.parent / rel).is_file():
                raise IntegrityError(e.id, f"missing {role} file {rel}")
    return manifest


def save_scan(sample: ScanSample, out_dir) -> dict:
    sid = sample.meta.id
    d = Path(out_dir) / sid
    d.mkdir(parents=True, exist_ok=True)
    files = {"mesh": f"{sid}/mesh.obj", "labels": f"{sid}/labels.png", "front": f"{sid}/front.png",
             "meta": f"{sid}/meta.json"}
    root = Path(out_dir)
    save_obj(sample.mesh, root / files["mesh"])
    save_label_png(sample.label_mask, root / files["labels"])
    Image.fromarray(to_uint8(sample.front_image)).save(root / files["front"], optimize=False)
    meta = {"id": sid, "source": sample.meta.source, "height_cm": sample.meta.height_cm, "seed": sample.meta.seed}
    (root / files["meta"]).write_text(json.dumps(meta, sort_keys=True) + "\n")
    return files


def load_scan(manifest: DatasetManifest, entry: ManifestEntry) -> ScanSample:
    meta = json.loads(manifest.path(entry, "meta").read_text())
    return ScanSample(load_mesh(manifest.path(entry, "mesh")), load_label_png(manifest.path(entry, "labels")),
                      load_image(manifest.path(entry, "front")),
                      ScanMeta(meta["id"], meta["source"], meta["height_cm"], meta["seed"]))


def derived_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def build_dataset(n: int, seed: int, out_dir, cfg: HumanoidConfig | None = None,
                  image_size: int = 128) -> DatasetManifest:
    """Generate ``n`` synthetic scans under ``out_dir`` and write the manifest."""
    if n < 1:
        raise InputError("n must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"{out} is not writable")
    entries = []
    for i, s in enumerate(derived_seeds(seed, n)):
        sample = synth_scan(s, cfg, image_size, scan_id=f"scan_{i:04d}")
        sample.check()
        entries.append(ManifestEntry(sample.meta.id, save_scan(sample, out), "synthetic", "accepted", s))
    manifest = DatasetManifest(tuple(entries), out, (), SCHEMA_VERSION,
                               {"seed": seed, "n": n, "image_size": image_size})
    save_manifest(manifest)
    return manifest


def null_predicate(entry: ManifestEntry, manifest: DatasetManifest) -> bool:
    return True


def quality_filter(manifest: DatasetManifest,
                   predicate: Callable[[ManifestEntry, DatasetManifest], bool] = null_predicate) -> DatasetManifest:
    """Apply an external accept/reject predicate to every entry and journal each decision.

    A predicate that raises leaves its entry pending; processing continues.
    """
    entries, journal = [], list(manifest.journal)
    for e in manifest.entries:
        try:
            status = "accepted" if predicate(e, manifest) else "rejected"
            note = ""
        except Exception as exc:  # the hook is external code
            status, note = "pending", f"{type(exc).__name__}: {exc}"
        entries.append(replace(e, status=status))
        journal.append({"id": e.id, "decision": status, "note": note})
    return replace(manifest, entries=tuple(entries), journal=tuple(journal))


def load_samples(manifest: DatasetManifest) -> list[ScanSample]:
    """Accepted entries only."""
    return [load_scan(manifest, e) for e in manifest.accepted()]
