"""Variance-preserving diffusion over analytic Gaussian-mixture priors.

The learned noise predictor of a real diffusion model is replaced by the exact
time-marginal score of a diagonal Gaussian mixture, so every quantity the
solvers and detectors consume is available in closed form.

Conventions
-----------
* Discrete time ``t = 0..T`` on a uniform grid; ``alpha_t**2 + sigma_t**2 == 1``.
* ``phi_t = arctan2(sigma_t, alpha_t)`` is the angle time used by the ODE
  solvers; ``alpha = cos(phi)``, ``sigma = sin(phi)``.
* Batched arrays have shape ``(n, d)``; single vectors ``(d,)`` are accepted
  everywhere and returned with the same shape.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kvformat as kv

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class Provenance(str, enum.Enum):
    COVER = "cover-generated"
    STEGO = "stego-generated"
    NATURAL = "natural-analogue"
    INVERTED = "inverted"


def rng_for(*keys: int) -> np.random.Generator:
    """Generator derived from an integer key path, e.g. ``(master_seed, index, tag)``.

    Derivation depends only on the keys, never on call order, so parallel
    batch jobs see the same streams regardless of scheduling.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_finite(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alphas", _frozen(self.alphas))
        object.__setattr__(self, "sigmas", _frozen(self.sigmas))
        if self.alphas.shape != (self.T + 1,) or self.sigmas.shape != (self.T + 1,):
            raise ValueError("alphas/sigmas must have length T + 1")
        phis = np.arctan2(self.sigmas, self.alphas)
        phis.setflags(write=False)
        object.__setattr__(self, "phis", phis)

    phis: np.ndarray = field(init=False, repr=False, compare=False)

    @property
    def sigma_T(self) -> float:
        return float(self.sigmas[-1])

    def sde_increments(self, t: int, s: int) -> tuple[float, float]:
        """Integrated drift and squared diffusion between grid times ``s < t``.

        Returns ``(f dt, g^2 dt)`` with ``f dt = log(alpha_t / alpha_s)`` and
        ``g^2 dt = 1 - (alpha_t / alpha_s)^2``, the exact forward transition
        variance of a VP process from ``s`` to ``t``.
        """
        if not 0 <= s < t <= self.T:
            raise ValueError("need 0 <= s < t <= T")
        ratio = self.alphas[t] / self.alphas[s]
        return float(np.log(ratio)), float(1.0 - ratio * ratio)

    def to_kv(self) -> str:
        return kv.dumps("noise-schedule", {
            "schedule_kind": self.kind, "T": self.T,
            "alphas": self.alphas, "sigmas": self.sigmas,
        })

    @classmethod
    def from_kv(cls, text: str) -> "NoiseSchedule":
        f = kv.loads(text, "noise-schedule")
        return cls(f["schedule_kind"], int(f["T"]), kv.parse_vector(f["alphas"]), kv.parse_vector(f["sigmas"]))


def build_schedule(kind: str = "linear-beta", T: int = 1000) -> NoiseSchedule:
    """Build a VP schedule on the grid ``t = 0..T``.

    ``linear-beta`` scales the usual 1e-4..0.02 beta range by ``1000 / T`` so
    the total noise budget does not depend on ``T``; ``cosine`` is the
    squared-cosine cumulative schedule with offset 0.008. Betas are capped at
    0.999 in both cases.
    """
    if int(T) != T or T < 2:
        raise ValueError("T must be an integer >= 2")
    T = int(T)
    if kind == "linear-beta":
        scale = 1000.0 / T
        betas = np.linspace(LINEAR_BETA_START * scale, LINEAR_BETA_END * scale, T)
    elif kind == "cosine":
        s = COSINE_OFFSET
        steps = np.arange(T + 1) / T
        abar = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        abar = abar / abar[0]
        betas = 1.0 - abar[1:] / abar[:-1]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 0.0, MAX_BETA)
    log_alpha = np.concatenate([[0.0], np.cumsum(0.5 * np.log1p(-betas))])
    alphas = np.exp(log_alpha)
    sigmas = np.sqrt(-np.expm1(2.0 * log_alpha))
    return NoiseSchedule(kind, T, alphas, sigmas)


# --------------------------------------------------------------------------- prior


@dataclass(frozen=True)
class GmmPrior:
    """Weighted diagonal Gaussian mixture standing in for the image distribution."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _frozen(self.weights)
        mu = _frozen(np.atleast_2d(self.means))
        var = _frozen(np.atleast_2d(self.variances))
        if w.ndim != 1 or mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise ValueError("weights (K,), means (K, d) and variances (K, d) must agree")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(var <= 0) or not np.all(np.isfinite(var)) or not np.all(np.isfinite(mu)):
            raise ValueError("variances must be positive and all parameters finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64)
            if lab.shape != w.shape or np.any(lab < 0):
                raise ValueError("labels must be one non-negative int per component")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def classes(self) -> tuple[int, ...]:
        if self.labels is None:
            return ()
        return tuple(int(c) for c in np.unique(self.labels))

    @classmethod
    def standard_normal(cls, dim: int) -> "GmmPrior":
        return cls(np.ones(1), np.zeros((1, dim)), np.ones((1, dim)))

    @classmethod
    def random(cls, dim: int, n_components: int = 4, n_classes: int = 2, seed: int = 0,
               mean_scale: float = 0.5, var_range: tuple[float, float] = (0.4, 1.2)) -> "GmmPrior":
        rng = rng_for(seed, 0x6D6D)
        w = rng.dirichlet(np.full(n_components, 3.0))
        mu = rng.normal(0.0, mean_scale, (n_components, dim))
        var = rng.uniform(var_range[0], var_range[1], (n_components, dim))
        labels = np.arange(n_components) % n_classes if n_classes > 0 else None
        return cls(w / w.sum(), mu, var, labels)

    def conditional(self, label: int) -> "GmmPrior":
        if self.labels is None or label not in self.classes:
            raise KeyError(f"unknown class label {label!r}")
        keep = self.labels == label
        w = self.weights[keep]
        return GmmPrior(w / w.sum(), self.means[keep], self.variances[keep], self.labels[keep])

    def perturbed(self, seed: int, mean_jitter: float = 0.05, var_jitter: float = 0.05) -> "GmmPrior":
        """A nearby prior: same structure, jittered means and variances."""
        rng = rng_for(seed, 0x7065)
        mu = self.means + rng.normal(0.0, mean_jitter, self.means.shape)
        var = self.variances * np.exp(rng.normal(0.0, var_jitter, self.variances.shape))
        return GmmPrior(self.weights, mu, var, self.labels)

    def sample(self, n: int, rng: np.random.Generator, label: Optional[int] = None):
        """Draw ``n`` points; returns ``(x, component_index)``."""
        prior = self if label is None else self.conditional(label)
        comp = rng.choice(prior.n_components, size=n, p=prior.weights)
        z = rng.standard_normal((n, self.dim))
        x = prior.means[comp] + np.sqrt(prior.variances[comp]) * z
        if label is not None:
            comp = np.flatnonzero(self.labels == label)[comp]
        return x, comp

    def to_kv(self) -> str:
        fields = {"dim": self.dim, "n_components": self.n_components}
        for k in range(self.n_components):
            fields[f"weight.{k}"] = float(self.weights[k])
            fields[f"mean.{k}"] = self.means[k]
            fields[f"variance.{k}"] = self.variances[k]
            if self.labels is not None:
                fields[f"label.{k}"] = int(self.labels[k])
        return kv.dumps("gmm-prior", fields)

    @classmethod
    def from_kv(cls, text: str) -> "GmmPrior":
        f = kv.loads(text, "gmm-prior")
        K = int(f["n_components"])
        w = np.array([float(f[f"weight.{k}"]) for k in range(K)])
        mu = np.stack([kv.parse_vector(f[f"mean.{k}"]) for k in range(K)])
        var = np.stack([kv.parse_vector(f[f"variance.{k}"]) for k in range(K)])
        labels = None
        if "label.0" in f:
            labels = np.array([int(f[f"label.{k}"]) for k in range(K)])
        prior = cls(w, mu, var, labels)
        if prior.dim != int(f["dim"]):
            raise kv.KVFormatError("dim mismatch")
        return prior


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 0.0
    condition: Optional[int] = None

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError("guidance scale must be >= 0")


@dataclass(frozen=True)
class StateSample:
    x: np.ndarray
    t: int
    provenance: Provenance = Provenance.COVER

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x))
        object.__setattr__(self, "provenance", Provenance(self.provenance))


# --------------------------------------------------------------------------- scores


def _responsibility_logits(x, alpha, sigma, prior):
    # x: (n, d) -> (n, K) log w_k + log N(x; alpha mu_k, alpha^2 v_k + sigma^2)
    var = alpha * alpha * prior.variances + sigma * sigma
    diff = x[:, None, :] - alpha * prior.means[None]
    quad = np.sum(diff * diff / var + np.log(2 * np.pi * var), axis=-1)
    return np.log(prior.weights) - 0.5 * quad, diff, var


def _softmax(logits, mask=None):
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_marginal_density(x, alpha: float, sigma: float, prior: GmmPrior) -> np.ndarray:
    x2 = np.atleast_2d(_check_finite(x))
    logits, _, _ = _responsibility_logits(x2, alpha, sigma, prior)
    m = np.max(logits, axis=-1)
    out = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=-1))
    return out if np.ndim(x) == 2 else out[0]


def score_at(x, alpha: float, sigma: float, prior: GmmPrior) -> np.ndarray:
    """grad_x log P(x) for the mixture diffused to noise level (alpha, sigma)."""
    x = _check_finite(x)
    x2 = np.atleast_2d(x)
    logits, diff, var = _responsibility_logits(x2, alpha, sigma, prior)
    r = _softmax(logits)
    s = -np.sum(r[:, :, None] * diff / var, axis=1)
    return s.reshape(x.shape)


def _check_t(t, schedule: NoiseSchedule) -> int:
    if int(t) != t or not 0 <= t <= schedule.T:
        raise ValueError(f"t must be an integer in [0, {schedule.T}]")
    return int(t)


def _check_dim(x, prior: GmmPrior):
    if np.shape(x)[-1] != prior.dim:
        raise ValueError(f"expected dimension {prior.dim}, got {np.shape(x)[-1]}")


def marginal_score(x, t: int, prior: GmmPrior, schedule: NoiseSchedule) -> np.ndarray:
    t = _check_t(t, schedule)
    _check_dim(x, prior)
    return score_at(x, schedule.alphas[t], schedule.sigmas[t], prior)


def eps_prediction(x, t: int, prior: GmmPrior, schedule: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction ``-sigma_t * score``; zero at ``t = 0``."""
    t = _check_t(t, schedule)
    return -schedule.sigmas[t] * marginal_score(x, t, prior, schedule)


def guided_eps(x, t: int, prior: GmmPrior, schedule: NoiseSchedule, guidance: GuidanceConfig) -> np.ndarray:
    """Classifier-free guidance ``eps_u + scale * (eps_c - eps_u)``."""
    eps_u = eps_prediction(x, t, prior, schedule)
    if guidance.condition is None:
        return eps_u
    eps_c = eps_prediction(x, t, prior.conditional(guidance.condition), schedule)
    return eps_u + guidance.scale * (eps_c - eps_u)


def pf_velocity(x: np.ndarray, alpha: float, sigma: float, prior: GmmPrior,
                scale=0.0, condition=None) -> np.ndarray:
    """Probability-flow velocity ``dx/dphi`` in angle time for a batch ``(n, d)``.

    Algebraically ``-(sigma/alpha) * (x + score)``, rearranged so that no
    division by ``alpha`` occurs and the standard-normal prior yields an
    exactly zero field. ``scale``/``condition`` may be scalars or per-row
    arrays; a condition of ``-1`` or ``None`` means unconditional.
    """
    logits, _, var = _responsibility_logits(x, alpha, sigma, prior)
    terms = (alpha * (prior.variances[None] - 1.0) * x[:, None, :] + prior.means[None]) / var
    r = _softmax(logits)
    u = np.sum(r[:, :, None] * terms, axis=1)
    n = x.shape[0]
    cond = np.full(n, -1, dtype=np.int64) if condition is None else np.broadcast_to(
        np.asarray(condition, dtype=np.int64), (n,))
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n,))
    if np.any(cond >= 0):
        if prior.labels is None:
            raise KeyError("prior has no class labels for conditioning")
        known = set(prior.classes)
        for c in np.unique(cond[cond >= 0]):
            if int(c) not in known:
                raise KeyError(f"unknown class label {int(c)}")
            rows = np.flatnonzero(cond == c)
            rc = _softmax(logits[rows], mask=(prior.labels == c)[None, :])
            uc = np.sum(rc[:, :, None] * terms[rows], axis=1)
            u[rows] = u[rows] + scale[rows, None] * (uc - u[rows])
    return -sigma * u


# --------------------------------------------------------------------------- sampling


def sample_prior_noise(d: int, seed: int, schedule: NoiseSchedule) -> StateSample:
    if d < 1:
        raise ValueError("d must be >= 1")
    z = rng_for(seed, 0x6E6F).standard_normal(d)
    return StateSample(schedule.sigma_T * z, schedule.T, Provenance.COVER)


def forward_diffuse_exact(x0, t: int, schedule: NoiseSchedule, seed: int) -> StateSample:
    t = _check_t(t, schedule)
    x0 = _check_finite(x0, "x0")
    z = rng_for(seed, 0x6677).standard_normal(x0.shape)
    return StateSample(schedule.alphas[t] * x0 + schedule.sigmas[t] * z, t, Provenance.INVERTED)


def reverse_sde_step(x, t: int, prior: GmmPrior, schedule: NoiseSchedule, seed: Optional[int] = None,
                     t_next: Optional[int] = None, noise=None, guidance: GuidanceConfig = GuidanceConfig(),
                     provenance=Provenance.COVER) -> StateSample:
    """One Euler-Maruyama step of the reverse SDE from ``t`` to ``t_next`` (default ``t - 1``).

    The injected noise is ``sqrt(g^2 dt) * z`` with ``z`` either drawn from
    ``seed`` or passed explicitly via ``noise`` (shared-seed embedding).
    """
    t = _check_t(t, schedule)
    if t == 0:
        raise ValueError("cannot step below t = 0")
    s = t - 1 if t_next is None else _check_t(t_next, schedule)
    x = _check_finite(x)
    _check_dim(x, prior)
    f_dt, g2_dt = schedule.sde_increments(t, s)
    if noise is None:
        if seed is None:
            raise ValueError("need seed or noise")
        noise = rng_for(seed, t, 0x7364).standard_normal(x.shape)
    alpha, sigma = schedule.alphas[t], schedule.sigmas[t]
    score = score_at(x, alpha, sigma, prior)
    if guidance.condition is not None:
        sc = score_at(x, alpha, sigma, prior.conditional(guidance.condition))
        score = score + guidance.scale * (sc - score)
    out = x - f_dt * x + g2_dt * score + np.sqrt(g2_dt) * np.asarray(noise, dtype=float)
    return StateSample(out, s, provenance)


def sde_noise_scale(schedule: NoiseSchedule, t: int, s: int) -> float:
    return float(np.sqrt(schedule.sde_increments(t, s)[1]))
