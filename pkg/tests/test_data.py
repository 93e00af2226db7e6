import csv
import os

import numpy as np
import pytest
from PIL import Image

from mams.data import (CHESTXRAY14_CLASSES, IMAGENET_MEAN, IMAGENET_STD, SynthConfig, batch, export_dataset,
                       generate_synthetic, ingest_chestxray14, load_exported, load_radiograph,
                       parse_finding_labels, repeat_batches, split, stage1_filter)
from mams.errors import ConfigError, InputError, UsageError


def test_prevalences_follow_geometric_tail():
    cfg = SynthConfig(num_images=4000, image_size=8)
    np.testing.assert_allclose(cfg.prevalences(), 0.5 * 0.7 ** np.arange(14))
    ds = generate_synthetic(cfg)
    emp = ds.prevalence()
    sd = np.sqrt(cfg.prevalences() * (1 - cfg.prevalences()) / 4000)
    assert np.all(np.abs(emp - cfg.prevalences()) < 4 * sd + 5 / 4000)
    assert ds.labels.sum(axis=0).min() >= 5
    assert ds.load([0]).shape == (1, 3, 8, 8)


def test_synthetic_is_deterministic():
    cfg = SynthConfig(num_images=500, num_classes=3, image_size=8, seed=4)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_synthetic(SynthConfig(num_images=500, num_classes=3, image_size=8, seed=5))
    assert not np.array_equal(a.images, c.images)


def test_min_positive_rule():
    with pytest.raises(ConfigError):
        SynthConfig(num_images=1000).validate()  # p_14 = 0.5 * 0.7^13 ~ 0.0048 < 5/1000
    SynthConfig(num_images=20000).validate()
    for bad in (dict(tail_ratio=0.0), dict(head_prevalence=1.5), dict(image_size=2)):
        with pytest.raises(ConfigError):
            SynthConfig(**bad).validate()


def test_class_signal_is_visible():
    ds = generate_synthetic(SynthConfig(num_classes=2, num_images=2000, image_size=16, noise=0.05, seed=1))
    energy = np.abs(ds.images[:, 0]).sum(axis=(1, 2))
    has = ds.labels.any(axis=1)
    assert energy[has].mean() > 1.5 * energy[~has].mean()


@pytest.mark.parametrize("field,expect,unknown", [
    ("No Finding", [], []),
    ("Cardiomegaly", ["Cardiomegaly"], []),
    ("Effusion|Mass|Hernia", ["Effusion", "Mass", "Hernia"], []),
    ("Pleural_Thickening", ["Pleural_Thickening"], []),
    ("Pleural Thickening", ["Pleural_Thickening"], []),
    ("Nodule|Covid", ["Nodule"], ["Covid"]),
])
def test_parse_finding_labels(field, expect, unknown):
    vec, unk = parse_finding_labels(field)
    assert [CHESTXRAY14_CLASSES[i] for i in np.flatnonzero(vec)] == sorted(expect, key=CHESTXRAY14_CLASSES.index)
    assert unk == unknown


def _write_fixture(root, rows, present):
    img_dir = root / "images"
    img_dir.mkdir()
    for name in present:
        arr = (np.arange(64 * 48).reshape(48, 64) % 256).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(img_dir / name)
    csv_path = root / "Data_Entry_2017.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Image Index", "Finding Labels", "Follow-up #", "Patient ID"])
        for r in rows:
            w.writerow(r)
    return csv_path, img_dir


def test_ingest_chestxray14(tmp_path, caplog):
    rows = [
        ["00000001_000.png", "Cardiomegaly", 0, 1],
        ["00000001_001.png", "Cardiomegaly|Emphysema", 1, 1],
        ["00000002_000.png", "No Finding", 0, 2],
        ["00000003_000.png", "Hernia|Alien", 0, 3],
        ["00000004_000.png", "Mass", 0, 4],  # file missing
    ]
    csv_path, img_dir = _write_fixture(tmp_path, rows, [r[0] for r in rows[:4]])
    with caplog.at_level("WARNING"):
        ds = ingest_chestxray14(csv_path, img_dir, image_size=32)
    assert "Alien" in caplog.text and "1 rows dropped" in caplog.text
    assert len(ds) == 4 and ds.dropped == 1
    assert ds.labels[2].sum() == 0
    assert ds.labels[1, CHESTXRAY14_CLASSES.index("Emphysema")] == 1
    assert list(ds.groups) == ["1", "1", "2", "3"]
    imgs = ds.load([0, 3])
    assert imgs.shape == (2, 3, 32, 32)
    # channel c holds (gray - mean_c) / std_c, so the three channels are affine images of one another
    gray0 = imgs[0, 0] * IMAGENET_STD[0] + IMAGENET_MEAN[0]
    gray1 = imgs[0, 1] * IMAGENET_STD[1] + IMAGENET_MEAN[1]
    np.testing.assert_allclose(gray0, gray1, atol=1e-12)
    assert 0.0 <= gray0.min() and gray0.max() <= 1.0


def test_ingest_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("Image,Labels\na.png,Mass\n")
    with pytest.raises(InputError):
        ingest_chestxray14(bad, tmp_path)
    csv_path, img_dir = _write_fixture(tmp_path, [["x.png", "Mass", 0, 1]], [])
    with pytest.raises(InputError):
        ingest_chestxray14(csv_path, img_dir)


def test_load_radiograph_resizes(tmp_path):
    Image.fromarray(np.full((10, 20), 255, np.uint8), mode="L").save(tmp_path / "w.png")
    arr = load_radiograph(str(tmp_path / "w.png"), 8)
    np.testing.assert_allclose(arr[:, 0, 0], (1.0 - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD))


def test_split_sizes_disjoint_and_seeded(small_synth):
    a = split(small_synth, (0.7, 0.1, 0.2), seed=3)
    b = split(small_synth, (0.7, 0.1, 0.2), seed=3)
    c = split(small_synth, (0.7, 0.1, 0.2), seed=4)
    np.testing.assert_array_equal(a.split_tags, b.split_tags)
    assert not np.array_equal(a.split_tags, c.split_tags)
    sizes = [a.indices(s).size for s in ("train", "val", "test")]
    assert sizes == [840, 120, 240]
    assert sum(sizes) == len(small_synth)
    with pytest.raises(UsageError):
        small_synth.indices("train")


def test_split_by_group_keeps_patients_together(small_synth):
    import dataclasses

    ds = dataclasses.replace(small_synth, groups=np.arange(len(small_synth)) // 3)
    s = split(ds, (0.6, 0.2, 0.2), seed=0, by_group=True)
    for g in np.unique(ds.groups):
        assert len(set(s.split_tags[ds.groups == g])) == 1
    with pytest.raises(ConfigError):
        split(small_synth, (0.6, 0.2, 0.2), by_group=True)


@pytest.mark.parametrize("fr", [(0.5, 0.5), (0.7, 0.2, 0.2), (1.2, -0.1, -0.1)])
def test_split_fraction_validation(small_synth, fr):
    with pytest.raises(ConfigError):
        split(small_synth, fr)


def test_empty_split_rejected(small_synth):
    import dataclasses

    tiny = dataclasses.replace(small_synth, labels=small_synth.labels[:5], images=small_synth.images[:5])
    with pytest.raises(ConfigError):
        split(tiny, (0.9, 0.05, 0.05))


def test_stage1_filter_and_batches(small_split):
    idx = small_split.indices("train")
    kept = stage1_filter(small_split, idx)
    assert small_split.labels[kept].any(axis=1).all()
    assert kept.size == small_split.labels[idx].any(axis=1).sum()
    seen = []
    for b in batch(small_split, "train", 64, shuffle_seed=1, positive_only=True):
        assert (b.labels.sum(axis=1) > 0).all()
        seen.append(len(b))
    assert all(n == 64 for n in seen[:-1]) and sum(seen) == kept.size
    full = list(batch(small_split, "train", 128, shuffle_seed=1, drop_last=True))
    assert all(len(b) == 128 for b in full)


def test_repeat_batches_reshuffles_each_epoch(small_split):
    n = small_split.indices("val").size  # 120
    it = repeat_batches(small_split, "val", 60, seed=0)
    e1 = np.concatenate([next(it).indices for _ in range(2)])
    e2 = np.concatenate([next(it).indices for _ in range(2)])
    assert sorted(e1) == sorted(e2) and e1.size == n
    assert not np.array_equal(e1, e2)


def test_repeat_batches_drops_partial_batches(small_split):
    it = repeat_batches(small_split, "val", 50, seed=0)  # 120 = 50 + 50 + 20
    assert all(len(next(it)) == 50 for _ in range(7))


def test_repeat_batches_small_pool(small_split, caplog):
    with caplog.at_level("WARNING"):
        it = repeat_batches(small_split, "val", 500, seed=0)
        assert len(next(it)) == 120
    assert "whole pool" in caplog.text


def test_export_round_trip(tmp_path, small_split):
    export_dataset(small_split, tmp_path / "exp")
    back = load_exported(tmp_path / "exp")
    np.testing.assert_array_equal(back.labels, small_split.labels)
    np.testing.assert_array_equal(back.split_tags, small_split.split_tags)
    np.testing.assert_array_equal(back.load([3, 7]), small_split.load([3, 7]))
    assert back.class_names == small_split.class_names
    assert os.path.exists(tmp_path / "exp" / "labels.csv")
