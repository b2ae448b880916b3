import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mariseg.data import (FrameAnnotation, LABEL_IGNORE, LABEL_OBSTACLE, LABEL_WATER,
                          Obstacle, SegSample, imu_mask_from_horizon, load_dataset,
                          save_sample, synth_generate)
from mariseg.errors import ConfigError, DatasetError


# ---------------------------------------------------------------------------
# IMU mask from horizon line


def test_horizontal_line_fills_rows_above():
    mask = imu_mask_from_horizon((0, 3), (7, 3), height=6, width=8)
    assert mask[:3].all() and not mask[3:].any()


def test_line_at_row_zero_gives_empty_mask():
    mask = imu_mask_from_horizon((0, 0), (7, 0), height=4, width=8)
    assert not mask.any()


def test_diagonal_line_matches_per_pixel_side_test():
    mask = imu_mask_from_horizon((0, 0), (3, 3), height=4, width=4)
    for r in range(4):
        for c in range(4):
            assert mask[r, c] == (1 if r < c else 0)


def test_vertical_endpoints_rejected():
    with pytest.raises(ConfigError):
        imu_mask_from_horizon((2, 0), (2, 5), height=4, width=4)


# ---------------------------------------------------------------------------
# synthetic generator invariants


def _file_bytes(root):
    return {p.relative_to(root): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_synth_deterministic_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_generate(seed=11, count=3, height=64, width=64, out_dir=a)
    synth_generate(seed=11, count=3, height=64, width=64, out_dir=b)
    fa, fb = _file_bytes(a), _file_bytes(b)
    assert list(fa) == list(fb)
    for name in fa:
        assert fa[name] == fb[name], f"{name} differs"


def test_synth_label_alphabet(synth_samples):
    for sample in synth_samples:
        values = set(np.unique(sample.label).tolist())
        assert values <= {0, 1, 2, 4}


def test_synth_bbox_coverage_at_least_point_nine(synth_samples):
    boxes = 0
    for sample in synth_samples:
        for obstacle in sample.annotation.obstacles:
            x, y, w, h = obstacle.bbox
            region = sample.label[y:y + h, x:x + w]
            coverage = (region == LABEL_OBSTACLE).sum() / (w * h)
            assert coverage >= 0.9, obstacle.bbox
            boxes += 1
    assert boxes > 0


def test_synth_polyline_is_topmost_water_per_column(synth_samples):
    for sample in synth_samples:
        edge = dict(sample.annotation.water_edge)
        height, width = sample.label.shape
        for c in range(width):
            rows = np.nonzero(sample.label[:, c] == LABEL_WATER)[0]
            if rows.size:
                assert edge[c] == rows[0]
            else:
                assert c not in edge


def test_synth_imu_agrees_with_generating_line(synth_samples):
    for sample in synth_samples:
        p0, p1 = sample.annotation.horizon
        height, width = sample.imu.shape
        expected = imu_mask_from_horizon(p0, p1, height, width)
        assert np.array_equal(sample.imu, expected)


def test_synth_danger_flags_follow_bottom_row_proxy(synth_samples):
    for sample in synth_samples:
        boundary = sample.annotation.danger_zone_row
        for o in sample.annotation.obstacles:
            assert o.danger == (o.bbox[1] + o.bbox[3] - 1 >= boundary)


def test_synth_rejects_bad_resolution(tmp_path):
    with pytest.raises(ConfigError):
        synth_generate(seed=0, count=1, height=60, width=64, out_dir=tmp_path / "x")


def test_synth_zero_count_is_valid_empty_dataset(tmp_path):
    out = tmp_path / "empty"
    stems = synth_generate(seed=0, count=0, height=64, width=64, out_dir=out)
    assert stems == []
    assert load_dataset(out) == []
    manifest = json.loads((out / "dataset.json").read_text())
    assert manifest["stems"] == []


# ---------------------------------------------------------------------------
# loading


def test_round_trip_save_then_load_is_exact(tmp_path, synth_samples):
    sample = synth_samples[0]
    root = tmp_path / "rt"
    save_sample(root, sample)
    loaded = load_dataset(root, [sample.stem])[0]
    assert np.array_equal(loaded.label, sample.label)
    assert np.array_equal(loaded.imu, sample.imu)
    assert np.array_equal(loaded.image, sample.image)
    assert loaded.annotation.to_dict() == sample.annotation.to_dict()


def test_empty_split_returns_empty(synth_root):
    assert load_dataset(synth_root, []) == []


def test_unknown_label_remapped_with_warning(tmp_path):
    root = tmp_path / "weird"
    sample = SegSample(image=np.zeros((3, 32, 32), dtype=np.float32),
                       label=np.full((32, 32), LABEL_WATER, dtype=np.uint8),
                       imu=np.zeros((32, 32), dtype=np.uint8), stem="s0")
    save_sample(root, sample)
    mask = np.full((32, 32), LABEL_WATER, dtype=np.uint8)
    mask[0, 0] = 7
    Image.fromarray(mask).save(root / "masks" / "s0.png")
    with pytest.warns(UserWarning, match="remapped to ignore"):
        loaded = load_dataset(root, ["s0"])[0]
    assert loaded.label[0, 0] == LABEL_IGNORE


def test_missing_files_listed_per_sample(tmp_path, synth_samples):
    root = tmp_path / "broken"
    save_sample(root, synth_samples[0])
    (root / "imus" / f"{synth_samples[0].stem}.png").unlink()
    with pytest.raises(DatasetError, match=synth_samples[0].stem):
        load_dataset(root, [synth_samples[0].stem])


def test_imu_255_encoding_accepted(tmp_path, synth_samples):
    root = tmp_path / "imu255"
    sample = synth_samples[0]
    save_sample(root, sample)
    Image.fromarray((sample.imu * 255).astype(np.uint8)).save(
        root / "imus" / f"{sample.stem}.png")
    loaded = load_dataset(root, [sample.stem])[0]
    assert np.array_equal(loaded.imu, sample.imu)


def test_non_binary_imu_rejected(tmp_path, synth_samples):
    root = tmp_path / "imubad"
    sample = synth_samples[0]
    save_sample(root, sample)
    bad = sample.imu.astype(np.uint8).copy()
    bad[0, 0] = 7
    Image.fromarray(bad).save(root / "imus" / f"{sample.stem}.png")
    with pytest.raises(DatasetError, match="non-binary"):
        load_dataset(root, [sample.stem])


def test_annotation_validation():
    ann = FrameAnnotation(water_edge=[(0, 5), (0, 6)])
    with pytest.raises(ConfigError):
        ann.validate()
    ann = FrameAnnotation(obstacles=[Obstacle(bbox=(0, 0, 0, 3), danger=False)])
    with pytest.raises(ConfigError):
        ann.validate()
    ann = FrameAnnotation(obstacles=[Obstacle(bbox=(10, 10, 10, 10), danger=False)])
    with pytest.raises(ConfigError):
        ann.validate(height=16, width=16)


def test_annotation_dict_round_trip(synth_samples):
    ann = synth_samples[0].annotation
    clone = FrameAnnotation.from_dict(json.loads(json.dumps(ann.to_dict())))
    assert clone.to_dict() == ann.to_dict()
