"""Synthetic corpus generator checks: determinism, geometry, annotations."""

import numpy as np
import pytest

from slabdet.metaimage import read_annotations, read_volume, world_to_voxel
from slabdet.synth import (HU_AIR, HU_BODY, HU_LUNG, HU_NODULE, SynthConfig,
                           SynthError, generate_corpus, generate_scan)

SMALL = SynthConfig(n_scans=4, dims=(24, 48, 48), spacing=(2.5, 1.0, 1.0),
                    seed=7)


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(n_scans=0)
    with pytest.raises(SynthError):
        SynthConfig(dims=(4, 4, 4))
    with pytest.raises(SynthError):
        SynthConfig(nodule_count_probs=(0.5, 0.4, 0.2))
    with pytest.raises(SynthError):
        SynthConfig(diameter_range_mm=(-1.0, 5.0))


def test_generate_scan_deterministic():
    a, ann_a = generate_scan(SMALL, 2)
    b, ann_b = generate_scan(SMALL, 2)
    assert np.array_equal(a.voxels, b.voxels)
    assert ann_a == ann_b


def test_scans_differ_by_index():
    a, _ = generate_scan(SMALL, 0)
    b, _ = generate_scan(SMALL, 1)
    assert not np.array_equal(a.voxels, b.voxels)


def test_hu_population():
    vol, _ = generate_scan(SynthConfig(n_scans=1, dims=(24, 48, 48),
                                       noise_sd_hu=0.0, seed=1), 0)
    vox = vol.voxels
    # corners are air, the middle of the chest is body, lungs are near lung HU
    assert vox[0, 0, 0] == HU_AIR
    assert vox[12, 24, 24] in (HU_BODY, HU_LUNG)
    values = set(np.unique(vox))
    assert HU_AIR in values and HU_BODY in values and HU_LUNG in values


def test_meta_fields():
    vol, _ = generate_scan(SMALL, 0)
    assert vol.meta.dims == SMALL.dims
    assert vol.meta.spacing == SMALL.spacing
    assert vol.meta.element_type == "MET_SHORT"
    assert vol.meta.origin[0] == 0.0
    assert vol.meta.origin[1] == pytest.approx(-SMALL.dims[1] * SMALL.spacing[1] / 2)


def test_nodule_annotation_lands_on_bright_voxel():
    """World center, mapped through the stored meta, must hit nodule HU."""
    cfg = SynthConfig(n_scans=12, dims=(32, 64, 64), noise_sd_hu=0.0, seed=3)
    found = 0
    for index in range(cfg.n_scans):
        vol, annotations = generate_scan(cfg, index)
        for ann in annotations:
            x, y, z = ann.center_world
            vz, vy, vx = world_to_voxel(np.array([z, y, x]), vol.meta)
            idx = tuple(int(round(v)) for v in (vz, vy, vx))
            assert vol.voxels[idx] == HU_NODULE
            found += 1
    assert found >= 3


def test_diameters_within_range():
    cfg = SynthConfig(n_scans=16, dims=(32, 64, 64), seed=5)
    lo, hi = cfg.diameter_range_mm
    for index in range(cfg.n_scans):
        _, annotations = generate_scan(cfg, index)
        for ann in annotations:
            assert lo <= ann.diameter_mm <= hi


def test_nodules_inside_lung_mask():
    """Nodule centers sit where lung tissue would be without the nodule."""
    cfg = SynthConfig(n_scans=10, dims=(32, 64, 64), noise_sd_hu=0.0, seed=11)
    for index in range(cfg.n_scans):
        vol, annotations = generate_scan(cfg, index)
        for ann in annotations:
            x, y, z = ann.center_world
            vz, vy, vx = (int(round(v)) for v in
                          world_to_voxel(np.array([z, y, x]), vol.meta))
            patch = vol.voxels[max(0, vz - 1):vz + 2,
                               max(0, vy - 12):vy + 13,
                               max(0, vx - 12):vx + 13]
            assert (patch == HU_LUNG).any()


def test_generate_corpus_files(tmp_path):
    summary = generate_corpus(SMALL, tmp_path)
    assert len(summary) == SMALL.n_scans
    for scan_id, _ in summary:
        assert (tmp_path / f"{scan_id}.mhd").exists()
        assert (tmp_path / f"{scan_id}.raw").exists()
    annotations = read_annotations(tmp_path / "annotations.csv")
    assert len(annotations) == sum(n for _, n in summary)
    vol = read_volume(tmp_path / f"{summary[0][0]}.mhd")
    assert vol.meta.dims == SMALL.dims


def test_generate_corpus_deterministic(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    generate_corpus(SMALL, a_dir)
    generate_corpus(SMALL, b_dir)
    for name in ("synth-000.raw", "annotations.csv"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()


def test_noise_changes_voxels_but_not_annotations():
    noisy = SynthConfig(n_scans=1, dims=(24, 48, 48), seed=9)
    clean = SynthConfig(n_scans=1, dims=(24, 48, 48), noise_sd_hu=0.0, seed=9)
    vol_n, ann_n = generate_scan(noisy, 0)
    vol_c, ann_c = generate_scan(clean, 0)
    assert not np.array_equal(vol_n.voxels, vol_c.voxels)
    assert ann_n == ann_c


def test_some_scans_have_no_nodules():
    cfg = SynthConfig(n_scans=20, dims=(24, 48, 48), seed=13)
    counts = [len(generate_scan(cfg, i)[1]) for i in range(cfg.n_scans)]
    assert 0 in counts
    assert max(counts) >= 1
