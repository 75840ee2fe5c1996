import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwdadapt.data import (CORRUPTIONS, SEVERITY, Corruption, DataConfigError, SyntheticDataset, corrupt,
                           export_split, make_drls_sets, read_export)


def test_same_seed_same_batch(dataset):
    a, ya = dataset.sample_batch("source_train", 16, seed=3)
    b, yb = dataset.sample_batch("source_train", 16, seed=3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ya, yb)
    c, _ = dataset.sample_batch("source_train", 16, seed=4)
    assert not np.array_equal(a, c)


def test_individual_samples_regenerate_bitwise(dataset):
    full = dataset.images("test", [5, 6, 7])
    np.testing.assert_array_equal(dataset.images("test", [6])[0], full[1])


def test_dataset_seed_changes_samples():
    a = SyntheticDataset(0).images("test", [0])
    b = SyntheticDataset(1).images("test", [0])
    assert not np.array_equal(a, b)


def test_shapes_range_and_balance(dataset):
    x, y = dataset.full_split("source_train")
    assert x.shape == (4096, 1, 16, 16)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert np.all(np.bincount(y) == 4096 // 8)


def test_unknown_split_and_bad_sizes(dataset):
    with pytest.raises(DataConfigError):
        dataset.sample_batch("validation", 4)
    with pytest.raises(DataConfigError):
        dataset.sample_batch("test", 0)
    with pytest.raises(DataConfigError):
        dataset.images("source_holdout", [5000])


def test_corruption_validation():
    with pytest.raises(DataConfigError):
        Corruption("fog")
    with pytest.raises(DataConfigError):
        Corruption("contrast", 6)


def test_severity_tables_are_monotone():
    for kind, table in SEVERITY.items():
        diffs = np.diff(table)
        # contrast and pixelate parameters shrink as the perturbation grows
        assert np.all(diffs > 0) or (kind in ("contrast", "pixelate") and np.all(diffs < 0))


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_higher_severity_moves_pixels_further(dataset, kind):
    clean = dataset.images("test", range(32))
    dev = [((dataset.images("test", range(32), Corruption(kind, s)) - clean) ** 2).mean() for s in (1, 5)]
    assert dev[1] > dev[0]


def test_corruption_keeps_labels(dataset):
    _, y_clean = dataset.sample_batch("test", 20, seed=1)
    _, y_noisy = dataset.sample_batch("test", 20, Corruption("speckle_noise", 3), seed=1)
    np.testing.assert_array_equal(y_clean, y_noisy)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(CORRUPTIONS), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_corruptions_stay_in_pixel_range(kind, severity, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(16, 16))
    out = corrupt(img, Corruption(kind, severity), rng)
    assert out.shape == img.shape and out.min() >= 0.0 and out.max() <= 1.0


def test_pixelate_is_blockwise_constant():
    img = np.random.default_rng(0).uniform(size=(16, 16))
    out = corrupt(img, Corruption("pixelate", 5), np.random.default_rng(0))
    assert len(np.unique(out)) <= 16


def test_drls_sets(dataset):
    d_id, d_ood = make_drls_sets(dataset, 64, Corruption("speckle_noise", 5), seed=0)
    assert d_id.shape == d_ood.shape == (64, 1, 16, 16)
    again = make_drls_sets(dataset, 64, Corruption("speckle_noise", 5), seed=0)
    np.testing.assert_array_equal(again[0], d_id)
    np.testing.assert_array_equal(again[1], d_ood)
    # ID and OOD come from disjoint holdout samples, none from the test split
    holdout = dataset.images("source_holdout", range(1024))
    flat = holdout.reshape(1024, -1)
    id_rows = {np.flatnonzero((flat == r.ravel()).all(axis=1))[0] for r in d_id}
    assert len(id_rows) == 64
    one = make_drls_sets(dataset, 1, Corruption("contrast", 5))
    assert one[0].shape == (1, 1, 16, 16)
    with pytest.raises(DataConfigError):
        make_drls_sets(dataset, 600, Corruption("contrast", 5))
    with pytest.raises(DataConfigError):
        make_drls_sets(dataset, 0, Corruption("contrast", 5))


def test_export_round_trip(dataset, tmp_path):
    x, y = dataset.full_split("test", 10, Corruption("box_blur", 2))
    path = tmp_path / "t.bin"
    export_split(path, x, y, 8)
    raw = path.read_bytes()
    assert raw[:4] == b"FWDA" and len(raw) == 16 + 10 * 256 * 4 + 10 * 2
    xi, yi, classes = read_export(path)
    np.testing.assert_array_equal(xi, x.astype(np.float32))
    np.testing.assert_array_equal(yi, y)
    assert classes == 8
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataConfigError):
        read_export(path)
