import numpy as np
import pytest

import kda


def test_dct_roundtrip_and_energy():
    rng = np.random.default_rng(0)
    x = rng.random((32, 32))
    c = kda.dct2(x)
    assert np.allclose(kda.idct2(c), x, atol=1e-12)
    assert np.isclose(np.linalg.norm(c), np.linalg.norm(x))


def test_dct_matches_scipy():
    scipy_fft = pytest.importorskip("scipy.fft")
    x = np.random.default_rng(1).random((8, 12))
    assert np.allclose(kda.dct2(x), scipy_fft.dctn(x, norm="ortho"), atol=1e-12)


def test_mask_is_keyed_and_local():
    key = kda.SecretKey.from_seed(3)
    m = kda.sign_flip_mask(key, 2, 1, "H")
    signs = m.signs
    assert m.subband == "H"
    assert set(np.unique(signs)) <= {-1, 1}
    outside = np.ones_like(signs, dtype=bool)
    outside[16:, :16] = False
    assert (signs[outside] == 1).all()
    again = kda.sign_flip_mask(kda.SecretKey.from_seed(3), 2, 1, "H").signs
    other = kda.sign_flip_mask(kda.SecretKey.from_seed(4), 2, 1, "H").signs
    assert (signs == again).all()
    assert (signs != other).any()


def test_pipeline_is_involution():
    x = np.random.default_rng(2).random((3, 32, 32))
    m = kda.sign_flip_mask(kda.SecretKey.from_seed(5), 1, 1, "V")
    y = kda.apply_pipeline(x, m)
    assert not np.allclose(y, x)
    assert np.allclose(kda.apply_pipeline(y, m), x, atol=1e-9)


def test_prefilter_replaces_isolated_spike():
    x = np.zeros((1, 8, 8))
    x[0, 4, 4] = 1.0
    y = kda.median_outlier_filter(x)
    assert y[0, 4, 4] == pytest.approx(1.0 / 9.0)
    assert np.array_equal(kda.median_outlier_filter(x, enabled=False), x)


def test_toy_dataset_shape_and_labels():
    images, labels = kda.toy_dataset(1, 2, "test")
    assert images.shape == (20, 3, 32, 32)
    assert sorted(labels) == sorted(list(range(10)) * 2)
    with pytest.raises(ValueError):
        kda.toy_dataset(1, 2, "validation")


def test_experiment_rows(tmp_path):
    key = tmp_path / "m.key"
    kda.SecretKey.from_seed(9).save(str(key))
    rows = kda.run_experiment(
        {
            "train-n": "40",
            "test-n": "10",
            "epochs": "1",
            "channels": "3",
            "key": str(key),
            "seed": "2",
        }
    )
    assert [r["config"] for r in rows] == ["vanilla", "3"]
    assert all(r["attack"] == "none" and r["n"] == 10 for r in rows)


def test_bad_spec_raises():
    with pytest.raises(ValueError):
        kda.run_experiment({"attack": "fgsm", "key": "x"})
