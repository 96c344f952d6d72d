"""End-to-end covert channel: message -> noise -> PF-ODE generation -> channel,
and the recipient's inverse path. Also cover generation, quantization and
the on-disk sample/manifest formats."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import kvformat as kv
from .codecs import CodecParams, Key, Scheme, SymbolMessage, chunk, decode, decrypt, encode, encrypt, unchunk
from .diffusion import (GmmPrior, NoiseSchedule, Provenance, StateSample, build_schedule, rng_for,
                        score_at)
from .solvers import Direction, SolverConfig, SolverKind, integrate_array, time_grid

SAMPLE_MAGIC = b"NSDSVEC1"


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class Backbone:
    name: str
    prior: GmmPrior
    schedule: NoiseSchedule
    channels: int = 1

    def __post_init__(self):
        if self.prior.dim % self.channels:
            raise ValueError("dim must be divisible by the channel count")

    @property
    def dim(self) -> int:
        return self.prior.dim


@dataclass(frozen=True)
class ChannelConfig:
    q: int = 256
    clip: float = 4.0

    def __post_init__(self):
        if self.q != 0 and self.q < 2:
            raise ValueError("q must be 0 (off) or >= 2")
        if not self.clip > 0:
            raise ValueError("clip must be positive")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return quantize(x, self.q, self.clip) if self.q else np.asarray(x, dtype=float)


def builtin_backbones(dim: int = 256, channels: int = 4, seed: int = 2024) -> dict[str, Backbone]:
    """Three related desk-scale backbones: a base prior and two nearby variants,
    on linear and cosine schedules."""
    base = GmmPrior.random(dim, n_components=4, n_classes=2, seed=seed)
    linear = build_schedule("linear-beta", 1000)
    cosine = build_schedule("cosine", 1000)
    return {
        "sd15": Backbone("sd15", base, linear, channels),
        "sd21": Backbone("sd21", base.perturbed(seed + 1), cosine, channels),
        "ds7": Backbone("ds7", base.perturbed(seed + 2), linear, channels),
    }


def quantize(x, q: int, clip: float = 4.0) -> np.ndarray:
    """Clip to ``[-clip, clip]`` and snap to the midpoints of ``q`` uniform cells."""
    if q < 2:
        raise ValueError("q must be >= 2")
    x = np.clip(np.asarray(x, dtype=float), -clip, clip)
    width = 2.0 * clip / q
    idx = np.clip(np.floor((x + clip) / width), 0, q - 1)
    return -clip + (idx + 0.5) * width


# --------------------------------------------------------------------------- SDE chain


def sde_generate_array(x_T: np.ndarray, backbone: Backbone, steps: int, noises, scale=0.0,
                       condition=None) -> np.ndarray:
    """Euler-Maruyama reverse chain on the ``steps``-point grid.

    ``noises(i, t, s)`` returns the standard-normal injection for step ``i``
    (``t -> s``) as an ``(n, d)`` array.
    """
    sched, prior = backbone.schedule, backbone.prior
    x = np.array(np.atleast_2d(x_T), dtype=float)
    n = x.shape[0]
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n,))
    condition = np.broadcast_to(np.asarray(-1 if condition is None else condition, dtype=np.int64), (n,))
    grid = time_grid(sched.T, steps)
    for i in range(len(grid) - 1):
        t, s = int(grid[i]), int(grid[i + 1])
        x = _sde_mean(x, t, s, sched, prior, scale, condition) + np.sqrt(sched.sde_increments(t, s)[1]) * noises(i, t, s)
    return x


def _sde_mean(x, t, s, sched, prior, scale, condition):
    f_dt, g2_dt = sched.sde_increments(t, s)
    alpha, sigma = sched.alphas[t], sched.sigmas[t]
    score = score_at(x, alpha, sigma, prior)
    for c in np.unique(condition[condition >= 0]):
        rows = np.flatnonzero(condition == c)
        sc = score_at(x[rows], alpha, sigma, prior.conditional(int(c)))
        score[rows] = score[rows] + scale[rows, None] * (sc - score[rows])
    return x - f_dt * x + g2_dt * score


def sde_key_noise(key: Key, i: int, dim: int) -> np.ndarray:
    return key.normals(dim, f"sde-step-{i}")


# --------------------------------------------------------------------------- cover / stego


def _guidance_args(solver: SolverConfig):
    g = solver.guidance
    return g.scale, (-1 if g.condition is None else g.condition)


def gen_cover(backbone: Backbone, solver: SolverConfig, seed: int, sde: bool = False) -> StateSample:
    rng = rng_for(seed, 0x636F)
    x_T = backbone.schedule.sigma_T * rng.standard_normal(backbone.dim)
    scale, cond = _guidance_args(solver)
    if sde:
        noise_rng = rng_for(seed, 0x7364)
        x0 = sde_generate_array(x_T, backbone, solver.steps,
                                lambda i, t, s: noise_rng.standard_normal((1, backbone.dim)), scale, cond)[0]
    else:
        x0 = integrate_array(x_T, backbone.prior, backbone.schedule,
                             solver.with_(direction=Direction.GENERATE))
    return StateSample(x0, 0, Provenance.COVER)


def stego_noise(bits, key: Key, codec: CodecParams, dim: int) -> tuple[np.ndarray, SymbolMessage]:
    """Encrypt, chunk and encode ``bits`` into a unit-variance noise vector of length ``dim``."""
    enc = encrypt(bits, key)
    msg = chunk(enc, codec.l)
    k = msg.symbols.size
    if k > dim:
        raise CapacityError(f"message needs {k} coordinates, backbone has {dim}")
    g = encode(msg, codec, key)
    filler = key.normals(dim - k, "filler")
    return np.concatenate([g, filler]), msg


def embed_and_generate(message, key: Key, codec: CodecParams, backbone: Backbone, solver: SolverConfig,
                       channel: ChannelConfig = ChannelConfig(0), seed: int = 0):
    """Returns ``(stego StateSample at t=0, manifest dict)``."""
    bits = np.asarray(message, dtype=np.uint8)
    noise, msg = stego_noise(bits, key, codec, backbone.dim)
    sched = backbone.schedule
    scale, cond = _guidance_args(solver)
    if codec.scheme is Scheme.SDE_SHARED_SEED:
        x_T = sched.sigma_T * key.normals(backbone.dim, "sde-init")
        n_steps = solver.steps

        def noises(i, t, s):
            return (noise if i == n_steps - 1 else sde_key_noise(key, i, backbone.dim))[None]

        x0 = sde_generate_array(x_T, backbone, n_steps, noises, scale, cond)[0]
    else:
        x_T = sched.sigma_T * noise
        x0 = integrate_array(x_T, backbone.prior, sched, solver.with_(direction=Direction.GENERATE))
    x0 = channel.apply(x0)
    manifest = {
        "label": "stego", "provenance": Provenance.STEGO.value,
        "codec": codec.scheme.value, "l": codec.l, "theta": codec.theta,
        "backbone": backbone.name, "solver": solver.kind.value, "steps": solver.steps,
        "guidance_scale": float(scale), "condition": int(cond),
        "q": channel.q, "clip": channel.clip, "seed": int(seed),
        "n_bits": int(bits.size), "pad": int(msg.pad), "n_symbols": int(msg.symbols.size),
    }
    return StateSample(x0, 0, Provenance.STEGO), manifest


def recover_noise(x0, key: Key, codec: CodecParams, backbone: Backbone, solver: SolverConfig) -> np.ndarray:
    """Recipient's estimate of the unit-variance embedding noise."""
    sched = backbone.schedule
    x0 = np.asarray(x0, dtype=float)
    if codec.scheme is Scheme.SDE_SHARED_SEED:
        scale, cond = _guidance_args(solver)
        x_T = sched.sigma_T * key.normals(backbone.dim, "sde-init")
        grid = time_grid(sched.T, solver.steps)
        x = x_T[None]
        sc = np.atleast_1d(float(scale))
        cd = np.atleast_1d(int(cond))
        for i in range(len(grid) - 2):
            t, s = int(grid[i]), int(grid[i + 1])
            x = _sde_mean(x, t, s, sched, backbone.prior, sc, cd) + np.sqrt(
                sched.sde_increments(t, s)[1]) * sde_key_noise(key, i, backbone.dim)[None]
        t, s = int(grid[-2]), int(grid[-1])
        mean = _sde_mean(x, t, s, sched, backbone.prior, sc, cd)[0]
        return (x0 - mean) / np.sqrt(sched.sde_increments(t, s)[1])
    x_T = integrate_array(x0, backbone.prior, sched, solver.with_(direction=Direction.INVERT))
    return x_T / sched.sigma_T


def extract(x0, key: Key, codec: CodecParams, backbone: Backbone, solver: SolverConfig, n_bits: int) -> np.ndarray:
    """Recover ``n_bits`` message bits; degrades gracefully on mismatch."""
    k = -(-n_bits // codec.l)
    g = recover_noise(x0, key, codec, backbone, solver)[:k]
    symbols = decode(g, codec)
    bits = unchunk(SymbolMessage(codec.l, symbols, k * codec.l - n_bits))
    return decrypt(bits, key)


# --------------------------------------------------------------------------- files


def write_samples(path, X: np.ndarray) -> None:
    """Raw little-endian float64 rows after a 16-byte header (magic, dim)."""
    X = np.atleast_2d(np.asarray(X, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC + struct.pack("<Q", X.shape[1]))
        fh.write(X.tobytes())


def read_samples(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != SAMPLE_MAGIC:
        raise ValueError("not a sample file")
    (dim,) = struct.unpack("<Q", raw[8:16])
    data = np.frombuffer(raw[16:], dtype="<f8")
    if dim == 0 or data.size % dim:
        raise ValueError("corrupt sample file")
    return data.reshape(-1, dim).astype(float)


def write_manifest(path, fields: dict) -> None:
    kv.dump(path, "sample-manifest", fields)


def read_manifest(path) -> dict[str, str]:
    return kv.load(path, "sample-manifest")
