"""The noise-space steganalyzer as an sklearn pipeline:
deterministic condition-free inversion -> 10 noise statistics -> FLD ensemble.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_array

from .diffusion import GuidanceConfig
from .ensemble import FldEnsemble
from .features import NoiseStatistics
from .solvers import Direction, SolverConfig, integrate_array
from .stego import Backbone


class NoiseSpaceInverter(TransformerMixin, BaseEstimator):
    """Map generated samples ``x_0`` back to noise ``x_T`` with a PF-ODE solver.

    ``guidance_scale`` only matters when conditions are passed to
    :meth:`transform`; the default pipeline is condition-free.
    """

    def __init__(self, backbone: Optional[Backbone] = None, solver: str = "heun2", steps: int = 20,
                 guidance_scale: float = 0.0):
        self.backbone = backbone
        self.solver = solver
        self.steps = steps
        self.guidance_scale = guidance_scale

    def fit(self, X, y=None):
        if self.backbone is None:
            raise ValueError("a backbone is required")
        X = check_array(X)
        if X.shape[1] != self.backbone.dim:
            raise ValueError(f"expected {self.backbone.dim} features, got {X.shape[1]}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, conditions=None):
        X = check_array(X)
        bb = self.backbone
        config = SolverConfig(self.solver, self.steps, Direction.INVERT, GuidanceConfig())
        if conditions is None:
            return integrate_array(X, bb.prior, bb.schedule, config)
        return integrate_array(X, bb.prior, bb.schedule, config, scale=self.guidance_scale,
                               condition=np.asarray(conditions, dtype=np.int64))


def make_nsdser(backbone: Backbone, solver: str = "heun2", steps: int = 20, d_sub: int = 5,
                n_learners_grid=(11, 31, 51, 101), random_state: int = 0, domains: str = "both",
                min_class_size: int = 50) -> Pipeline:
    return Pipeline([
        ("invert", NoiseSpaceInverter(backbone, solver, steps)),
        ("features", NoiseStatistics(backbone.channels, domains)),
        ("fld", FldEnsemble(n_learners_grid, d_sub, random_state=random_state, min_class_size=min_class_size)),
    ])
