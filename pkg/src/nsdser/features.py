"""Noise-space statistics: five moments/quantiles of the inverted noise and
of its per-channel orthonormal DCT, concatenated into a 10-dim feature."""
from __future__ import annotations

import csv

import numpy as np
from scipy.fft import dct as _scipy_dct
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

FEATURE_NAMES = tuple(
    f"{dom}_{stat}" for dom in ("noise", "dct") for stat in ("mean", "var", "skew", "kurt", "iqr")
)


def stat5(v) -> np.ndarray:
    """Mean, unbiased variance, skewness, excess kurtosis and IQR.

    Works on the last axis, so a batch ``(n, d)`` gives ``(n, 5)``. Skewness
    and kurtosis use population central moments and are defined as 0 for a
    constant input. Quantiles interpolate linearly at rank ``p * (n - 1)``.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    if n < 4:
        raise ValueError("stat5 needs at least 4 values")
    mean = np.mean(v, axis=-1)
    c = v - mean[..., None]
    m2 = np.mean(c * c, axis=-1)
    m3 = np.mean(c ** 3, axis=-1)
    m4 = np.mean(c ** 4, axis=-1)
    var = m2 * n / (n - 1)
    flat = m2 <= 0
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe ** 1.5)
    kurt = np.where(flat, 0.0, m4 / safe ** 2 - 3.0)
    q25, q75 = np.quantile(v, [0.25, 0.75], axis=-1, method="linear")
    iqr = np.maximum(q75 - q25, 0.0)
    return np.stack([mean, var, skew, kurt, iqr], axis=-1)


def dct(v, channels: int = 1) -> np.ndarray:
    """Orthonormal DCT-II applied per channel of the flattened last axis."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    if d % channels:
        raise ValueError("length must be divisible by the channel count")
    split = v.reshape(v.shape[:-1] + (channels, d // channels))
    return _scipy_dct(split, type=2, norm="ortho", axis=-1).reshape(v.shape)


def extract_features(x_T, channels: int = 1) -> np.ndarray:
    """``[stat5(x), stat5(dct(x))]`` for one vector or each row of a batch."""
    x = np.asarray(x_T, dtype=float)
    return np.concatenate([stat5(x), stat5(dct(x, channels))], axis=-1)


class NoiseStatistics(TransformerMixin, BaseEstimator):
    """Stateless transformer from inverted noise to the 10-dim feature.

    ``domains`` selects ``"both"``, ``"noise"`` (first five) or ``"dct"``.
    """

    def __init__(self, channels: int = 1, domains: str = "both"):
        self.channels = channels
        self.domains = domains

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X)
        F = extract_features(X, self.channels)
        if self.domains == "noise":
            return F[:, :5]
        if self.domains == "dct":
            return F[:, 5:]
        if self.domains != "both":
            raise ValueError(f"unknown domains {self.domains!r}")
        return F

    def get_feature_names_out(self, input_features=None):
        names = np.array(FEATURE_NAMES)
        return {"noise": names[:5], "dct": names[5:]}.get(self.domains, names)


def write_features_csv(path, F: np.ndarray, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i + 1}" for i in range(F.shape[1])])
        for lab, row in zip(labels, F):
            w.writerow([lab] + [format(x, ".17g") for x in row])


def read_features_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ValueError("missing header")
    labels = np.array([r[0] for r in rows[1:]])
    F = np.array([[float(x) for x in r[1:]] for r in rows[1:]]).reshape(len(rows) - 1, len(rows[0]) - 1)
    return F, labels
