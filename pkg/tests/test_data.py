import json

import numpy as np
import pytest

from recttt.data import (BG_RANGE, CLASSES, CORRUPTIONS, FG_RANGE, SEVERITY, CorruptionSpec, Dataset,
                         batch_iter, corrupt, export_dataset, gen_dataset, hflip, import_dataset)
from recttt.tensor import Rng


def test_same_seed_same_samples():
    a, b = gen_dataset(Rng(42), 8), gen_dataset(Rng(42), 8)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_dataset(Rng(43), 8).images)


def test_class_balance():
    ds = gen_dataset(Rng(0), 400)
    assert np.bincount(ds.labels, minlength=len(CLASSES)).tolist() == [100] * 4


def test_pixel_statistics_and_range():
    ds = gen_dataset(Rng(1), 10_000, "test")
    assert ds.images.shape == (10_000, 3, 32, 32) and ds.images.dtype == np.float32
    assert ds.images.min() >= BG_RANGE[0] - 1e-6 and ds.images.max() <= FG_RANGE[1] + 1e-6
    mean = float(ds.images.mean(dtype=np.float64))
    assert sum(BG_RANGE) / 2 < mean < sum(FG_RANGE) / 2


def test_samples_have_ids():
    ds = gen_dataset(Rng(0), 3, "test")
    s = ds[2]
    assert s.id == "test-2" and s.label == int(ds.labels[2]) and s.image.shape == (3, 32, 32)


def test_labels_survive_flip():
    ds = gen_dataset(Rng(5), 64)
    flipped = hflip(ds.images)
    # every class is mirror-symmetric up to pose, so the foreground area is unchanged
    fg = ds.images.mean(axis=1) > 0.5
    assert np.array_equal(fg.sum(axis=(1, 2)), (flipped.mean(axis=1) > 0.5).sum(axis=(1, 2)))


def test_zero_noise_is_identity():
    x = gen_dataset(Rng(3), 4).images
    assert np.array_equal(corrupt(x, CorruptionSpec("gaussian_noise"), Rng(0), level=0.0), x)


def test_brightness_shift():
    x = np.full((1, 3, 4, 4), 0.5, np.float32)
    out = corrupt(x, CorruptionSpec("brightness"), Rng(0), level=0.2)
    np.testing.assert_allclose(out, 0.7, atol=1e-7)


@pytest.mark.parametrize("severity", [3, 5])
def test_pixelate_is_blocky(severity):
    x = gen_dataset(Rng(9), 6).images
    out = corrupt(x, CorruptionSpec("pixelate", severity), Rng(0))
    blocks = out.reshape(6, 3, 8, 4, 8, 4)
    assert np.all(np.ptp(blocks, axis=(3, 5)) == 0)


def test_corruptions_preserve_shape_and_range():
    x = gen_dataset(Rng(2), 8).images
    for kind in CORRUPTIONS:
        for s in range(1, 6):
            out = corrupt(x, CorruptionSpec(kind, s), Rng(s))
            assert out.shape == x.shape and out.dtype == np.float32
            assert out.min() >= 0.0 and out.max() <= 1.0


def test_severity_monotone_over_100_seeds():
    for kind in CORRUPTIONS:
        dist = []
        for s in range(1, 6):
            total = 0.0
            for seed in range(100):
                x = gen_dataset(Rng(seed), 2).images
                out = corrupt(x, CorruptionSpec(kind, s), Rng(seed).spawn("c"))
                total += float(np.sqrt(((out - x).astype(np.float64) ** 2).sum(axis=(1, 2, 3))).mean())
            dist.append(total / 100)
        assert all(a < b for a, b in zip(dist, dist[1:])), (kind, dist)


def test_corruption_is_deterministic():
    x = gen_dataset(Rng(0), 4).images
    spec = CorruptionSpec("impulse_noise", 4)
    assert np.array_equal(corrupt(x, spec, Rng(8)), corrupt(x, spec, Rng(8)))


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("fog")
    with pytest.raises(ValueError):
        CorruptionSpec("contrast", 6)
    assert CorruptionSpec("contrast", 5).level == SEVERITY["contrast"][4]


def test_hflip_examples(rng_np):
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
    assert hflip(x).tolist() == [[[[2.0, 1.0], [4.0, 3.0]]]]
    y = rng_np.standard_normal((2, 3, 5, 6)).astype(np.float32)
    assert np.array_equal(hflip(hflip(y)), y)
    sym = np.concatenate([y[..., :3], y[..., :3][..., ::-1]], axis=-1)
    assert np.array_equal(hflip(sym), sym)


def test_batch_iter_examples():
    ds = Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10))
    assert [len(y) for _, y in batch_iter(ds, 4)] == [4, 4, 2]
    assert np.concatenate([y for _, y in batch_iter(ds, 4)]).tolist() == list(range(10))
    a = np.concatenate([y for _, y in batch_iter(ds, 3, Rng(1), shuffle=True)])
    b = np.concatenate([y for _, y in batch_iter(ds, 3, Rng(1), shuffle=True)])
    assert np.array_equal(a, b) and sorted(a.tolist()) == list(range(10))


def test_export_round_trip(tmp_path):
    ds = gen_dataset(Rng(4), 5, "test")
    root = export_dataset(ds, tmp_path / "export")
    index = json.loads((root / "index.json").read_text())
    assert index["shape"] == [3, 32, 32]
    assert [s["id"] for s in index["samples"]] == ds.ids
    assert (root / "test-0.f32").stat().st_size == 3 * 32 * 32 * 4
    back = import_dataset(root)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.split == "test"
