import numpy as np
import pytest
from scipy import stats
from sklearn.base import clone

from nsdser.features import (FEATURE_NAMES, NoiseStatistics, dct, extract_features, read_features_csv, stat5,
                             write_features_csv)


def _dct_oracle(v):
    n = v.size
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    scale = np.full(n, np.sqrt(2 / n))
    scale[0] = np.sqrt(1 / n)
    return scale * (basis @ v)


def test_stat5_matches_scipy(rng):
    v = rng.gamma(2.0, size=(4, 301))
    got = stat5(v)
    np.testing.assert_allclose(got[:, 0], v.mean(1))
    np.testing.assert_allclose(got[:, 1], v.var(1, ddof=1))
    np.testing.assert_allclose(got[:, 2], stats.skew(v, axis=1, bias=True))
    np.testing.assert_allclose(got[:, 3], stats.kurtosis(v, axis=1, fisher=True, bias=True))
    np.testing.assert_allclose(got[:, 4], stats.iqr(v, axis=1))


def test_stat5_constant_and_short_input():
    assert stat5(np.full(10, 3.0)).tolist() == [3.0, 0.0, 0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        stat5([1.0, 2.0, 3.0])


def test_dct_matches_direct_formula(rng):
    v = rng.standard_normal(48)
    np.testing.assert_allclose(dct(v), _dct_oracle(v), atol=1e-12)
    per_channel = dct(v, channels=4)
    np.testing.assert_allclose(per_channel[:12], _dct_oracle(v[:12]), atol=1e-12)
    np.testing.assert_allclose(per_channel[36:], _dct_oracle(v[36:]), atol=1e-12)
    with pytest.raises(ValueError):
        dct(v, channels=5)


def test_dct_energy_preserved(rng):
    v = rng.standard_normal((50, 64))
    np.testing.assert_allclose((dct(v, 4) ** 2).sum(1), (v ** 2).sum(1), rtol=1e-12)


def test_feature_vector_layout(rng):
    x = rng.standard_normal((3, 64))
    F = extract_features(x, 4)
    assert F.shape == (3, 10) and len(FEATURE_NAMES) == 10
    np.testing.assert_allclose(F[:, :5], stat5(x))
    np.testing.assert_allclose(F[:, 5:], stat5(dct(x, 4)))


def test_transformer_api(rng):
    t = NoiseStatistics(channels=4, domains="dct")
    assert clone(t).get_params() == {"channels": 4, "domains": "dct"}
    X = rng.standard_normal((5, 64))
    assert t.fit_transform(X).shape == (5, 5)
    assert list(t.get_feature_names_out()) == list(FEATURE_NAMES[5:])
    with pytest.raises(ValueError):
        NoiseStatistics(domains="pixels").fit_transform(X)


def test_features_csv_roundtrip(tmp_path, rng):
    F = rng.standard_normal((4, 10))
    write_features_csv(tmp_path / "f.csv", F, ["cover"] * 2 + ["stego"] * 2)
    G, labels = read_features_csv(tmp_path / "f.csv")
    assert np.array_equal(F, G) and labels.tolist() == ["cover", "cover", "stego", "stego"]
