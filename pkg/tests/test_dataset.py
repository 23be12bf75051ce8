import json
from dataclasses import replace

import numpy as np
import pytest

from splathuman.dataset import (
    ScanSample,
    build_dataset,
    derived_seeds,
    import_scan,
    load_label_png,
    load_manifest,
    load_samples,
    quality_filter,
    save_label_png,
    save_manifest,
    synth_scan,
)
from splathuman.errors import InputError, IntegrityError
from splathuman.humanoid import HEIGHT_WORLD, PARTS, HumanoidConfig, synth_humanoid
from splathuman.mesh import save_mesh
from splathuman.render import save_png


def test_synth_scan_deterministic(coarse_humanoid):
    a = synth_scan(11, coarse_humanoid, image_size=64)
    b = synth_scan(11, coarse_humanoid, image_size=64)
    assert a.mesh.vertices.tobytes() == b.mesh.vertices.tobytes()
    assert a.mesh.faces.tobytes() == b.mesh.faces.tobytes()
    assert a.label_mask.tobytes() == b.label_mask.tobytes()
    assert a.front_image.tobytes() == b.front_image.tobytes()
    c = synth_scan(12, coarse_humanoid, image_size=64)
    assert c.mesh.vertices.shape != a.mesh.vertices.shape or not np.array_equal(c.mesh.vertices, a.mesh.vertices)


def test_synth_scan_invariants(scan128):
    scan128.check()
    v = scan128.mesh.vertices
    assert np.abs(v).max() <= 1.0
    assert v[:, 1].max() - v[:, 1].min() == pytest.approx(HEIGHT_WORLD)
    assert scan128.mesh.colors is not None and scan128.mesh.colors.min() >= 0 and scan128.mesh.colors.max() <= 1
    ids = set(np.unique(scan128.label_mask).tolist())
    assert ids == set(range(len(PARTS) + 1))
    assert scan128.meta.height_cm == 180.0 and scan128.meta.source == "synthetic"


def test_label_iou_over_50_seeds():
    cfg = HumanoidConfig()
    ious = []
    for seed in range(50):
        s = synth_scan(seed, cfg)
        ious.append(s.label_iou())
        assert set(np.unique(s.label_mask).tolist()) == set(range(9)), seed
    assert min(ious) >= 0.98


def test_humanoid_config_validation():
    with pytest.raises(InputError):
        synth_humanoid(0, HumanoidConfig(arm_abduction=(5.0, 20.0)))
    with pytest.raises(InputError):
        synth_humanoid(0, HumanoidConfig(knee_flexion=(30.0, 10.0)))
    with pytest.raises(InputError):
        synth_humanoid(0, HumanoidConfig(grid_resolution=8))
    with pytest.raises(InputError):
        synth_scan(0, image_size=16)


def test_sample_check_rejects_bad_samples(scan64):
    bad_mask = scan64.label_mask.copy()
    bad_mask[:] = 0
    with pytest.raises(InputError):
        replace(scan64, label_mask=bad_mask).check()
    with pytest.raises(InputError):
        replace(scan64, mesh=scan64.mesh.with_vertices(scan64.mesh.vertices * 1.2)).check()
    with pytest.raises(InputError):
        replace(scan64, meta=replace(scan64.meta, source="web")).check()


def test_label_png_round_trip(tmp_path, scan64):
    save_label_png(scan64.label_mask, tmp_path / "l.png")
    np.testing.assert_array_equal(load_label_png(tmp_path / "l.png"), scan64.label_mask)


def test_import_scan(tmp_path, scan64):
    save_mesh(scan64.mesh, tmp_path / "m.ply")
    save_label_png(scan64.label_mask, tmp_path / "l.png")
    save_png(scan64.front_image, tmp_path / "f.png")
    s = import_scan(tmp_path / "m.ply", tmp_path / "l.png", tmp_path / "f.png", "ext_1")
    assert isinstance(s, ScanSample) and s.meta.source == "imported"
    np.testing.assert_array_equal(s.label_mask, scan64.label_mask)


def test_derived_seeds_stable():
    assert derived_seeds(5, 3) == derived_seeds(5, 3)
    assert derived_seeds(5, 4)[:3] == derived_seeds(5, 3)
    assert len(set(derived_seeds(5, 50))) == 50


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_dataset_files_and_determinism(tmp_path, coarse_humanoid):
    m = build_dataset(4, 3, tmp_path / "a", coarse_humanoid, image_size=64)
    assert [e.id for e in m.entries] == ["scan_0000", "scan_0001", "scan_0002", "scan_0003"]
    assert all(e.status == "accepted" for e in m.entries)
    for e in m.entries:
        for role in ("mesh", "labels", "front", "meta"):
            assert m.path(e, role).is_file()
    build_dataset(4, 3, tmp_path / "b", coarse_humanoid, image_size=64)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert doc["schema_version"] == 1
    loaded = load_manifest(tmp_path / "a")
    assert loaded.entries == m.entries
    samples = load_samples(loaded)
    assert len(samples) == 4
    for s in samples:
        s.check()
    with pytest.raises(InputError):
        build_dataset(0, 3, tmp_path / "c")


def test_missing_file_raises_integrity_error(tmp_path, coarse_humanoid):
    m = build_dataset(2, 0, tmp_path, coarse_humanoid, image_size=64)
    m.path(m.entries[1], "mesh").unlink()
    with pytest.raises(IntegrityError) as exc:
        load_manifest(tmp_path)
    assert exc.value.entry_id == "scan_0001"


def test_quality_filter_hooks(tmp_path, coarse_humanoid):
    m = build_dataset(4, 1, tmp_path, coarse_humanoid, image_size=64)
    assert all(e.status == "accepted" for e in quality_filter(m).entries)
    rejected = quality_filter(m, lambda e, _: False)
    assert all(e.status == "rejected" for e in rejected.entries)

    def odd_only(entry, _):
        return int(entry.id.split("_")[1]) % 2 == 1

    f = quality_filter(m, odd_only)
    assert [e.status for e in f.entries] == ["rejected", "accepted", "rejected", "accepted"]
    assert [(j["id"], j["decision"]) for j in f.journal] == [
        ("scan_0000", "rejected"), ("scan_0001", "accepted"), ("scan_0002", "rejected"), ("scan_0003", "accepted")]

    def flaky(entry, _):
        if entry.id == "scan_0002":
            raise RuntimeError("assessor timeout")
        return True

    g = quality_filter(m, flaky)
    assert [e.status for e in g.entries] == ["accepted", "accepted", "pending", "accepted"]
    assert "assessor timeout" in g.journal[2]["note"]

    # training consumers only see accepted entries
    save_manifest(f)
    reloaded = load_manifest(tmp_path)
    assert [s.meta.id for s in load_samples(reloaded)] == ["scan_0001", "scan_0003"]
    assert len(reloaded.journal) == 4


def test_duplicate_ids_rejected(tmp_path, coarse_humanoid):
    m = build_dataset(2, 2, tmp_path, coarse_humanoid, image_size=64)
    with pytest.raises(IntegrityError):
        replace(m, entries=(m.entries[0], m.entries[0]))
