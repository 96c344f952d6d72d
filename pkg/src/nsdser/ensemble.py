"""Ensemble of Fisher linear discriminants over random feature subspaces.

Each base learner sees a bootstrap sample of the training pairs and a random
subset of the (median/MAD standardized) features; its bias minimises the
balanced error ``(P_FA + P_MD) / 2`` on its own bootstrap. Learners vote and
the ensemble size is picked by out-of-bag voting error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import kvformat as kv

MAD_TO_STD = 1.4826


@dataclass(frozen=True)
class FldLearner:
    subspace: np.ndarray
    w: np.ndarray
    b: float

    def project(self, Z: np.ndarray) -> np.ndarray:
        return Z[:, self.subspace] @ self.w

    def vote(self, Z: np.ndarray) -> np.ndarray:
        return self.project(Z) > self.b


@dataclass
class TrainReport:
    oob_error: float
    n_learners: int
    d_sub: int
    train_accuracy: dict
    oob_errors: dict = field(default_factory=dict)
    resampled: int = 0


def balanced_threshold(p_neg: np.ndarray, p_pos: np.ndarray) -> float:
    """Bias minimising ``(P_FA + P_MD) / 2`` for the rule ``p > b``.

    Candidates are midpoints between consecutive distinct projections (plus
    one below and one above the range). Among minimisers the midpoint of the
    extreme ones is returned, which makes the rule exactly antisymmetric
    under a label swap.
    """
    vals = np.unique(np.concatenate([p_neg, p_pos]))
    if vals.size == 1:
        return float(vals[0])
    cand = np.concatenate([[vals[0] - 1.0], 0.5 * (vals[1:] + vals[:-1]), [vals[-1] + 1.0]])
    neg = np.sort(p_neg)
    pos = np.sort(p_pos)
    p_fa = (neg.size - np.searchsorted(neg, cand, side="right")) / neg.size
    p_md = np.searchsorted(pos, cand, side="right") / pos.size
    err = 0.5 * (p_fa + p_md)
    best = np.flatnonzero(err == err.min())
    return float(0.5 * (cand[best[0]] + cand[best[-1]]))


def _fld_direction(Zn, Zp, ridge):
    mn, mp = Zn.mean(axis=0), Zp.mean(axis=0)
    Cn, Cp = Zn - mn, Zp - mp
    Sw = Cn.T @ Cn + Cp.T @ Cp
    tr = np.trace(Sw)
    if not tr > 0 or not np.isfinite(tr):
        return None
    Sw = Sw + ridge * tr / Sw.shape[0] * np.eye(Sw.shape[0])
    try:
        w = np.linalg.solve(Sw, mp - mn)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(w)) or not np.any(w):
        return None
    return w


class FldEnsemble(ClassifierMixin, BaseEstimator):
    """Majority-vote FLD ensemble with out-of-bag ensemble-size selection.

    Parameters
    ----------
    n_learners_grid : tuple of odd ints
        Candidate ensemble sizes; the OOB-best is kept.
    d_sub : int
        Random subspace dimension (clipped to the feature count).
    ridge : float
        Relative ridge; the regulariser is ``ridge * trace(S_w) / d_sub``.
    random_state : int
    min_class_size : int
        Fewer training samples per class raise ``ValueError``.
    """

    def __init__(self, n_learners_grid=(11, 31, 51, 101), d_sub=5, ridge=1e-6, random_state=0,
                 min_class_size=50):
        self.n_learners_grid = n_learners_grid
        self.d_sub = d_sub
        self.ridge = ridge
        self.random_state = random_state
        self.min_class_size = min_class_size

    def _standardize(self, X):
        return (X - self.center_) / self.scale_

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError("need exactly two classes")
        grid = sorted(int(L) for L in self.n_learners_grid)
        if any(L < 1 or L % 2 == 0 for L in grid):
            raise ValueError("ensemble sizes must be odd")
        neg_idx = np.flatnonzero(y == self.classes_[0])
        pos_idx = np.flatnonzero(y == self.classes_[1])
        if min(neg_idx.size, pos_idx.size) < self.min_class_size:
            raise ValueError(f"need at least {self.min_class_size} samples per class")
        self.n_features_in_ = X.shape[1]
        self.center_ = np.median(X, axis=0)
        mad = MAD_TO_STD * np.median(np.abs(X - self.center_), axis=0)
        self.scale_ = np.where(mad > 0, mad, 1.0)
        Z = self._standardize(X)
        Zn, Zp = Z[neg_idx], Z[pos_idx]
        nn, npos = Zn.shape[0], Zp.shape[0]
        paired = nn == npos
        D = X.shape[1]
        d_sub = max(1, min(int(self.d_sub), D))
        rng = np.random.default_rng(self.random_state)

        learners, resampled = [], 0
        oob_votes = np.zeros((grid[-1], nn + npos), dtype=np.int8)  # +1 pos, -1 neg, 0 in-bag
        while len(learners) < grid[-1]:
            if paired:
                bn = rng.integers(0, nn, nn)
                bp = bn
            else:
                bn = rng.integers(0, nn, nn)
                bp = rng.integers(0, npos, npos)
            sub = np.sort(rng.choice(D, size=d_sub, replace=False))
            w = _fld_direction(Zn[bn][:, sub], Zp[bp][:, sub], self.ridge)
            if w is None:
                resampled += 1
                if resampled > 100 * grid[-1]:
                    raise ValueError("within-class scatter is singular for every subspace")
                continue
            b = balanced_threshold(Zn[bn][:, sub] @ w, Zp[bp][:, sub] @ w)
            learner = FldLearner(sub, w, b)
            j = len(learners)
            oob_n = np.ones(nn, dtype=bool)
            oob_n[bn] = False
            oob_p = np.ones(npos, dtype=bool)
            oob_p[bp] = False
            v = np.where(learner.vote(Z), 1, -1).astype(np.int8)
            mask = np.concatenate([oob_n, oob_p])
            # column order: negatives then positives
            allv = np.concatenate([v[neg_idx], v[pos_idx]])
            oob_votes[j] = np.where(mask, allv, 0)
            learners.append(learner)

        truth = np.concatenate([np.zeros(nn), np.ones(npos)])
        oob_errors = {}
        for L in grid:
            tally = oob_votes[:L].astype(np.int64).sum(axis=0)
            seen = np.any(oob_votes[:L] != 0, axis=0)
            err = np.where(tally > 0, truth == 0, np.where(tally < 0, truth == 1, 0.5)).astype(float)
            e_neg = err[:nn][seen[:nn]].mean() if np.any(seen[:nn]) else 0.5
            e_pos = err[nn:][seen[nn:]].mean() if np.any(seen[nn:]) else 0.5
            oob_errors[L] = 0.5 * (e_neg + e_pos)
        best_L = min(grid, key=lambda L: (oob_errors[L], L))
        self.learners_ = learners[:best_L]
        self.vote_threshold_ = math.ceil(best_L / 2)
        pred = self.predict(X)
        self.report_ = TrainReport(
            oob_error=float(oob_errors[best_L]), n_learners=best_L, d_sub=d_sub,
            train_accuracy={str(c): float(np.mean(pred[y == c] == c)) for c in self.classes_},
            oob_errors=oob_errors, resampled=resampled,
        )
        return self

    def stego_votes(self, X) -> np.ndarray:
        check_is_fitted(self, "learners_")
        X = check_array(X)
        Z = self._standardize(X)
        votes = np.zeros(X.shape[0], dtype=np.int64)
        for learner in self.learners_:
            votes += learner.vote(Z)
        return votes

    def decision_function(self, X) -> np.ndarray:
        """Fraction of learners voting for the second class."""
        return self.stego_votes(X) / len(self.learners_)

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.stego_votes(X) >= self.vote_threshold_).astype(int)]

    def to_kv(self) -> str:
        check_is_fitted(self, "learners_")
        fields = {
            "classes": [str(c) for c in self.classes_],
            "n_features": self.n_features_in_, "n_learners": len(self.learners_),
            "vote_threshold": self.vote_threshold_,
            "center": self.center_, "scale": self.scale_,
        }
        for j, lr in enumerate(self.learners_):
            fields[f"learner.{j}.subspace"] = lr.subspace.astype(np.int64)
            fields[f"learner.{j}.w"] = lr.w
            fields[f"learner.{j}.b"] = lr.b
        return kv.dumps("fld-ensemble", fields)

    @classmethod
    def from_kv(cls, text: str) -> "FldEnsemble":
        f = kv.loads(text, "fld-ensemble")
        model = cls()
        classes = f["classes"].split(",")
        model.classes_ = np.array([int(c) for c in classes]) if all(c.lstrip("-").isdigit() for c in classes) \
            else np.array(classes)
        model.n_features_in_ = int(f["n_features"])
        model.vote_threshold_ = int(f["vote_threshold"])
        model.center_ = kv.parse_vector(f["center"])
        model.scale_ = kv.parse_vector(f["scale"])
        model.learners_ = [
            FldLearner(kv.parse_ints(f[f"learner.{j}.subspace"]), kv.parse_vector(f[f"learner.{j}.w"]),
                       float(f[f"learner.{j}.b"]))
            for j in range(int(f["n_learners"]))
        ]
        return model


@dataclass(frozen=True)
class DetectionReport:
    accuracy: float
    p_fa: float
    p_md: float
    advantage: float
    n_queries: int
    n_cover: int
    n_stego: int


def evaluate(model, X_cover, X_stego) -> DetectionReport:
    """Accuracy, false-alarm/missed-detection rates and empirical advantage.

    ``model.predict`` must return 1 for stego. Advantage is
    ``|P(say stego | stego) - P(say stego | cover)|``.
    """
    X_cover, X_stego = np.atleast_2d(X_cover), np.atleast_2d(X_stego)
    if X_cover.shape[0] == 0 or X_stego.shape[0] == 0:
        raise ValueError("empty test set")
    pc = np.asarray(model.predict(X_cover)) == 1
    ps = np.asarray(model.predict(X_stego)) == 1
    n_c, n_s = pc.size, ps.size
    p_fa = float(pc.mean())
    p_md = float(1.0 - ps.mean())
    acc = float((np.sum(~pc) + np.sum(ps)) / (n_c + n_s))
    return DetectionReport(acc, p_fa, p_md, abs((1.0 - p_md) - p_fa), n_c + n_s, n_c, n_s)
