"""Security arithmetic: exact KL on finite spaces, pushforwards through
deterministic maps, per-codec divergence from the standard normal, the
accuracy-vs-security sweep and the normalized overall detector score."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, stats
from scipy.special import ndtri

from .codecs import CodecParams, Key, Scheme, SymbolMessage, decode, decrypt, unchunk
from .diffusion import rng_for
from .solvers import Direction, SolverConfig, integrate_array

KL_INFINITE = math.inf
QUAD_LIMIT = 8.0
QUAD_TOL = 1e-9


# --------------------------------------------------------------------------- finite spaces


@dataclass(frozen=True)
class FiniteDist:
    p: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be non-negative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.p.size


@dataclass(frozen=True)
class FiniteMap:
    """Total map from ``{0..n-1}`` to ``{0..m-1}`` given as an index array."""

    image: np.ndarray
    codomain: int

    def __post_init__(self):
        img = np.array(self.image, dtype=np.int64)
        if img.ndim != 1 or np.any(img < 0) or np.any(img >= self.codomain):
            raise ValueError("map must send every index into the codomain")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)

    @property
    def bijective(self) -> bool:
        return self.image.size == self.codomain and np.unique(self.image).size == self.codomain


def kl(p: FiniteDist, q: FiniteDist) -> float:
    """``sum p log(p/q)`` with ``0 log 0 = 0``; ``inf`` when ``p`` is not dominated by ``q``."""
    if p.n != q.n:
        raise ValueError("support mismatch")
    if np.any((q.p == 0) & (p.p > 0)):
        return KL_INFINITE
    nz = p.p > 0
    return float(max(np.sum(p.p[nz] * (np.log(p.p[nz]) - np.log(q.p[nz]))), 0.0))


def pushforward(p: FiniteDist, F: FiniteMap) -> FiniteDist:
    if F.image.size != p.n:
        raise ValueError("map domain does not match the distribution")
    out = np.zeros(F.codomain)
    np.add.at(out, F.image, p.p)
    return FiniteDist(out / out.sum())


@dataclass(frozen=True)
class Theorem1Report:
    kl_source: float
    kl_image: float
    bijective: bool
    holds: bool


def verify_theorem1(p: FiniteDist, q: FiniteDist, F: FiniteMap, tol: float = 1e-12) -> Theorem1Report:
    """Equality of KL under a bijection; non-increase under a many-to-one map."""
    a = kl(p, q)
    b = kl(pushforward(p, F), pushforward(q, F))
    if F.bijective:
        holds = (a == b) or abs(a - b) < tol
    else:
        holds = b <= a + tol
    return Theorem1Report(a, b, F.bijective, bool(holds))


# --------------------------------------------------------------------------- codec laws


@dataclass(frozen=True)
class CodecDivergence:
    """Per-coordinate divergence of a codec's output law from N(0, 1).

    ``kl`` is ``D(law(g) || N(0,1))`` (``inf`` for laws with point masses);
    ``tv`` is the total-variation distance, equal to 1 for purely discrete laws.
    """

    kl: float
    tv: float


def _pieces(params: CodecParams):
    """Continuous law of ``g`` as (lo, hi, density) pieces, or None for point masses."""
    s = params.scheme
    M = params.n_symbols
    if s in (Scheme.MB, Scheme.MC):
        return None
    if s in (Scheme.MN, Scheme.GAUSSIAN_SHADING, Scheme.SDE_SHARED_SEED):
        return [(-QUAD_LIMIT, QUAD_LIMIT, stats.norm.pdf)]
    if s is Scheme.TRUNCATED:
        th = params.theta
        out = []
        for j in range(M):
            lo = ndtri((j + 0.5 * (1 - th)) / M)
            hi = ndtri((j + 0.5 * (1 + th)) / M)
            out.append((max(lo, -QUAD_LIMIT), min(hi, QUAD_LIMIT), lambda x, th=th: stats.norm.pdf(x) / th))
        return out
    if s is Scheme.HAMMING_BALL:
        r = params.radius
        dens = 1.0 / (M * 2 * r)
        return [(c - r, c + r, lambda x, dens=dens: np.full_like(np.asarray(x, dtype=float), dens))
                for c in params.centers]
    raise ValueError(f"unsupported scheme {s}")


def _quad(f, lo, hi):
    val, _ = integrate.quad(f, lo, hi, epsabs=QUAD_TOL, epsrel=1e-12, limit=200)
    return val


def codec_divergence(params: CodecParams) -> CodecDivergence:
    pieces = _pieces(params)
    if pieces is None:
        return CodecDivergence(KL_INFINITE, 1.0)
    phi = stats.norm.pdf
    kl_val = 0.0
    inside = 0.0
    covered = 0.0
    for lo, hi, q in pieces:
        if hi <= lo:
            continue
        kl_val += _quad(lambda x: q(x) * (np.log(q(x)) - stats.norm.logpdf(x)), lo, hi)
        inside += _quad(lambda x: abs(q(x) - phi(x)), lo, hi)
        covered += _quad(phi, lo, hi)
    outside = 1.0 - covered  # normal mass where the codec puts none
    return CodecDivergence(max(kl_val, 0.0), 0.5 * (inside + outside))


def codec_kl(params: CodecParams) -> float:
    return codec_divergence(params).kl


# --------------------------------------------------------------------------- overall score


def normalized_overall(accuracies: Sequence[float], dp_flags: Sequence[bool]) -> float:
    """Mean of ``1 - |D - 50| / 50`` (distribution-preserving) and
    ``1 - |D - 100| / 100`` (others), accuracies in percent."""
    acc = np.asarray(accuracies, dtype=float)
    dp = np.asarray(dp_flags, dtype=bool)
    if acc.shape != dp.shape or acc.size == 0:
        raise ValueError("need one flag per accuracy")
    if np.any(acc < 0) or np.any(acc > 100):
        raise ValueError("accuracies are percentages in [0, 100]")
    scores = np.where(dp, 1.0 - np.abs(acc - 50.0) / 50.0, 1.0 - np.abs(acc - 100.0) / 100.0)
    return float(scores.mean())


# --------------------------------------------------------------------------- trade-off sweep


@dataclass(frozen=True)
class SweepRow:
    theta: float
    extraction_acc: float
    kl: float
    tv: float
    detection_acc: float


def measure_extraction(params: CodecParams, backbone, solver: SolverConfig, channel, n_messages: int,
                       seed: int) -> float:
    """Bit accuracy over ``n_messages`` full-capacity messages sent through the channel."""
    from .stego import stego_noise

    dim, sched = backbone.dim, backbone.schedule
    n_bits = dim * params.l
    sent, X = [], []
    for i in range(n_messages):
        bits = rng_for(seed, i, 0x6D73).integers(0, 2, n_bits).astype(np.uint8)
        key = Key.from_seed(seed, i)
        noise, _ = stego_noise(bits, key, params, dim)
        sent.append(bits)
        X.append(sched.sigma_T * noise)
    gen = solver.with_(direction=Direction.GENERATE)
    x0 = channel.apply(integrate_array(np.array(X), backbone.prior, sched, gen))
    g = integrate_array(x0, backbone.prior, sched, solver.with_(direction=Direction.INVERT)) / sched.sigma_T
    correct = 0
    for i in range(n_messages):
        symbols = decode(g[i], params)
        got = decrypt(unchunk(SymbolMessage(params.l, symbols, 0)), Key.from_seed(seed, i))
        correct += int(np.sum(got == sent[i]))
    return correct / (n_messages * n_bits)


def tradeoff_sweep(scheme, thetas: Iterable[float], channel, backbone, solver: SolverConfig, n_messages: int = 50,
                   l: int = 4, detector_backbone=None, n_train: int = 200, n_test: int = 100,
                   seed: int = 0, detect: bool = True) -> list[SweepRow]:
    """Extraction accuracy, codec divergence and fresh detector accuracy per theta."""
    from .harness import detect_codec

    thetas = sorted(float(t) for t in thetas)
    if len(thetas) < 2 or len(set(thetas)) != len(thetas):
        raise ValueError("need at least two distinct theta values")
    scheme = Scheme(scheme)
    if scheme not in (Scheme.TRUNCATED, Scheme.HAMMING_BALL):
        raise ValueError("sweep supports truncated and hamming-ball")
    rows = []
    for j, th in enumerate(thetas):
        params = CodecParams(scheme, l, th)
        acc = measure_extraction(params, backbone, solver, channel, n_messages, seed)
        div = codec_divergence(params)
        det = math.nan
        if detect:
            det = detect_codec(params, backbone, solver, channel, detector_backbone or backbone,
                               n_train, n_test, seed=seed + 7919 * (j + 1))
        rows.append(SweepRow(th, acc, div.kl, div.tv, det))
    return rows


def spearman(a, b) -> float:
    return float(stats.spearmanr(a, b).statistic)


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "extraction_acc", "kl_or_sentinel", "tv", "detection_acc"])
        for r in rows:
            w.writerow([format(x, ".17g") for x in (r.theta, r.extraction_acc, r.kl, r.tv, r.detection_acc)])
