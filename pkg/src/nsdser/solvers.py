"""Deterministic probability-flow ODE integration in both directions.

All solvers advance the state in angle time ``phi`` (``alpha = cos phi``,
``sigma = sin phi``). Generation walks the time grid from ``T`` down to 0 and
inversion walks the reversed grid with the very same step function.

* ``euler1``: explicit Euler in ``phi`` (one evaluation per step).
* ``heun2``: trapezoidal predictor-corrector in ``phi`` (two evaluations).
* ``dpm2``: explicit midpoint rule in log-SNR ``lambda = log(alpha/sigma)``
  (two evaluations).

The segment touching ``t = 0`` is special for both second-order solvers:
``lambda`` is infinite there and the velocity vanishes identically, so that
segment is taken as a single Euler step, as in the Karras et al. Heun sampler.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffusion import GmmPrior, GuidanceConfig, NoiseSchedule, Provenance, StateSample, pf_velocity

CHUNK_ROWS = 512


class SolverKind(str, enum.Enum):
    EULER1 = "euler1"
    HEUN2 = "heun2"
    DPM2 = "dpm2"


class Direction(str, enum.Enum):
    GENERATE = "generate"
    INVERT = "invert"


class UnstableTrajectoryError(FloatingPointError):
    """A state became non-finite mid-trajectory."""


@dataclass(frozen=True)
class SolverConfig:
    kind: SolverKind = SolverKind.HEUN2
    steps: int = 20
    direction: Direction = Direction.GENERATE
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        object.__setattr__(self, "kind", SolverKind(self.kind))
        object.__setattr__(self, "direction", Direction(self.direction))
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be an integer >= 1")

    def with_(self, **changes) -> "SolverConfig":
        values = dict(kind=self.kind, steps=self.steps, direction=self.direction, guidance=self.guidance)
        values.update(changes)
        return SolverConfig(**values)


def time_grid(T: int, steps: int) -> np.ndarray:
    """Generation grid ``T = t_0 > t_1 > ... > t_N = 0`` with uniform stride."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, {T}]")
    grid = np.array([int(round(T * (1.0 - i / steps))) for i in range(steps + 1)], dtype=np.int64)
    grid[0], grid[-1] = T, 0
    if np.any(np.diff(grid) >= 0):
        raise ValueError("time grid is not strictly decreasing")
    return grid


Velocity = Callable[[np.ndarray, float, float], np.ndarray]


def _euler(x, p0, p1, vel):
    return x + (p1 - p0) * vel(x, np.cos(p0), np.sin(p0))


def _heun(x, p0, p1, vel):
    h = p1 - p0
    k1 = vel(x, np.cos(p0), np.sin(p0))
    k2 = vel(x + h * k1, np.cos(p1), np.sin(p1))
    return x + 0.5 * h * (k1 + k2)


def _dpm2(x, p0, p1, vel):
    lam0, lam1 = np.log(1.0 / np.tan(p0)), np.log(1.0 / np.tan(p1))
    h = lam1 - lam0
    # dphi/dlambda = -sin(phi) cos(phi)
    k1 = vel(x, np.cos(p0), np.sin(p0)) * (-np.sin(p0) * np.cos(p0))
    pm = np.arctan(np.exp(-0.5 * (lam0 + lam1)))
    k2 = vel(x + 0.5 * h * k1, np.cos(pm), np.sin(pm)) * (-np.sin(pm) * np.cos(pm))
    return x + h * k2


def step(x: np.ndarray, phi_from: float, phi_to: float, kind: SolverKind, vel: Velocity) -> np.ndarray:
    """Advance ``x`` from angle ``phi_from`` to ``phi_to`` (either direction)."""
    kind = SolverKind(kind)
    if kind is SolverKind.EULER1 or phi_from == 0.0 or phi_to == 0.0:
        return _euler(x, phi_from, phi_to, vel)
    if kind is SolverKind.HEUN2:
        return _heun(x, phi_from, phi_to, vel)
    return _dpm2(x, phi_from, phi_to, vel)


def evaluations_per_step(kind: SolverKind, phi_from: float, phi_to: float) -> int:
    if SolverKind(kind) is SolverKind.EULER1 or phi_from == 0.0 or phi_to == 0.0:
        return 1
    return 2


def _make_velocity(prior: GmmPrior, scale, condition) -> Velocity:
    def vel(x, alpha, sigma):
        return pf_velocity(x, alpha, sigma, prior, scale, condition)
    return vel


def integrate_array(x: np.ndarray, prior: GmmPrior, schedule: NoiseSchedule, config: SolverConfig,
                    scale=None, condition=None, trajectory: Optional[list] = None) -> np.ndarray:
    """Integrate a batch ``(n, d)``; per-row guidance via ``scale``/``condition`` arrays.

    When ``scale``/``condition`` are omitted the config's guidance applies to
    every row. Rows are processed in fixed-size chunks and every operation is
    row-local, so results do not depend on how a batch is split.
    """
    x = np.array(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != prior.dim:
        raise ValueError(f"expected dimension {prior.dim}, got {x.shape[1]}")
    if scale is None:
        scale = config.guidance.scale
    if condition is None:
        condition = -1 if config.guidance.condition is None else config.guidance.condition
    n = x.shape[0]
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n,))
    condition = np.broadcast_to(np.asarray(condition, dtype=np.int64), (n,))
    grid = time_grid(schedule.T, config.steps)
    if config.direction is Direction.INVERT:
        grid = grid[::-1]
    phis = schedule.phis[grid]
    if trajectory is not None:
        trajectory.append((0, int(grid[0]), x.copy()))
    for lo in range(0, n, CHUNK_ROWS):
        rows = slice(lo, min(lo + CHUNK_ROWS, n))
        vel = _make_velocity(prior, scale[rows], condition[rows])
        xc = x[rows]
        for i in range(len(grid) - 1):
            xc = step(xc, phis[i], phis[i + 1], config.kind, vel)
            if not np.all(np.isfinite(xc)):
                raise UnstableTrajectoryError(f"non-finite state after step {i + 1} (t={grid[i + 1]})")
            if trajectory is not None and lo == 0 and n <= CHUNK_ROWS:
                trajectory.append((i + 1, int(grid[i + 1]), xc.copy()))
        x[rows] = xc
    return x[0] if single else x


def integrate(start: StateSample, prior: GmmPrior, schedule: NoiseSchedule, config: SolverConfig) -> StateSample:
    if config.direction is Direction.GENERATE:
        if start.t != schedule.T:
            raise ValueError("generation starts at t = T")
        return StateSample(integrate_array(start.x, prior, schedule, config), 0, start.provenance)
    if start.t != 0:
        raise ValueError("inversion starts at t = 0")
    return StateSample(integrate_array(start.x, prior, schedule, config), schedule.T, Provenance.INVERTED)


def roundtrip_error(x_T, prior: GmmPrior, schedule: NoiseSchedule, config: SolverConfig) -> float:
    """Relative L2 error of ``invert(generate(x_T))`` with the same solver both ways."""
    x_T = np.asarray(x_T, dtype=float)
    x0 = integrate_array(x_T, prior, schedule, config.with_(direction=Direction.GENERATE))
    back = integrate_array(x0, prior, schedule, config.with_(direction=Direction.INVERT))
    return float(np.linalg.norm(back - x_T) / np.linalg.norm(x_T))


def write_trajectory_csv(path, trajectory: list, row: int = 0) -> None:
    """Debug dump: columns ``step, t, x0..x{d-1}`` for one batch row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = trajectory[0][2].shape[-1]
        w.writerow(["step", "t"] + [f"x{j}" for j in range(d)])
        for k, t, x in trajectory:
            w.writerow([k, t] + [format(v, ".17g") for v in np.atleast_2d(x)[row]])
