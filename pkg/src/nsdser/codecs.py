"""Reversible bit-to-noise encoders and their decoders.

Every scheme maps one symbol to one noise coordinate. All in-bin randomness
comes from a keyed ChaCha20 keystream so the recipient can reproduce it.

Schemes (``theta`` is the scheme's placement/shrink parameter):

========================  =====================================================
``mn``                    ``|z| * (2b - 1)``, ``z ~ N(0, 1)`` from the keystream
``mb``                    ``2b - 1``
``mc``                    ``(2b - 1) * theta``
``gaussian-shading``      ``Phi^-1((m + u) / 2^l)``, ``u ~ U(0, 1)``
``truncated``             as above with ``u`` confined to the central
                          ``theta`` fraction of each bin's mass
``hamming-ball``          ``c_m + eta``, ``eta ~ U(-r, r)``, ``r = theta * half-gap``
``sde-shared-seed``       gaussian-shading map used as the final injected
                          noise of a shared-seed reverse SDE chain
========================  =====================================================
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from scipy.special import ndtr, ndtri

from . import kvformat as kv


class Scheme(str, enum.Enum):
    MN = "mn"
    MB = "mb"
    MC = "mc"
    GAUSSIAN_SHADING = "gaussian-shading"
    TRUNCATED = "truncated"
    HAMMING_BALL = "hamming-ball"
    SDE_SHARED_SEED = "sde-shared-seed"


BINARY_SCHEMES = (Scheme.MN, Scheme.MB, Scheme.MC)
DEFAULT_THETA = {
    Scheme.MN: 0.0,
    Scheme.MB: 0.0,
    Scheme.MC: 1.0,
    Scheme.GAUSSIAN_SHADING: 0.0,
    Scheme.TRUNCATED: 0.3,
    Scheme.HAMMING_BALL: 0.25,
    Scheme.SDE_SHARED_SEED: 0.0,
}


# --------------------------------------------------------------------------- keys


@dataclass(frozen=True)
class Key:
    """256-bit secret key plus a 16-byte nonce."""

    key: bytes
    nonce: bytes = bytes(16)

    def __post_init__(self):
        if len(self.key) != 32:
            raise ValueError("key must be 32 bytes")
        if len(self.nonce) != 16:
            raise ValueError("nonce must be 16 bytes")

    @classmethod
    def from_seed(cls, seed: int, nonce: int = 0) -> "Key":
        k = hashlib.sha256(b"nsdser-key" + int(seed).to_bytes(16, "little", signed=False)).digest()
        return cls(k, int(nonce).to_bytes(16, "little"))

    def with_nonce(self, nonce: int) -> "Key":
        return Key(self.key, int(nonce).to_bytes(16, "little"))

    def keystream(self, n_bytes: int, domain: str) -> bytes:
        # domain separation: independent streams for bits, in-bin uniforms, ...
        sub = hashlib.sha256(self.key + b"|" + domain.encode()).digest()
        enc = Cipher(algorithms.ChaCha20(sub, self.nonce), mode=None).encryptor()
        return enc.update(bytes(n_bytes))

    def keystream_bits(self, n: int, domain: str = "bits") -> np.ndarray:
        raw = np.frombuffer(self.keystream((n + 7) // 8, domain), dtype=np.uint8)
        return np.unpackbits(raw)[:n]

    def uniforms(self, n: int, domain: str) -> np.ndarray:
        """``n`` doubles in the open interval (0, 1) built from 53 keystream bits each."""
        words = np.frombuffer(self.keystream(8 * n, domain), dtype="<u8")
        return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def normals(self, n: int, domain: str) -> np.ndarray:
        return ndtri(self.uniforms(n, domain))


def _bits(bits) -> np.ndarray:
    b = np.asarray(bits)
    if b.ndim != 1 or b.size < 1:
        raise ValueError("bit message must be a non-empty 1-D sequence")
    if not np.all((b == 0) | (b == 1)):
        raise ValueError("bits must be 0 or 1")
    return b.astype(np.uint8)


def encrypt(bits, key: Key) -> np.ndarray:
    """XOR with the keyed stream. Applying it twice returns the input."""
    b = _bits(bits)
    return b ^ key.keystream_bits(b.size)


decrypt = encrypt


# --------------------------------------------------------------------------- chunking


@dataclass(frozen=True)
class SymbolMessage:
    l: int
    symbols: np.ndarray
    pad: int = 0

    def __post_init__(self):
        s = np.array(self.symbols, dtype=np.int64)
        if self.l < 1:
            raise ValueError("chunk length must be >= 1")
        if s.ndim != 1 or np.any(s < 0) or np.any(s >= 2 ** self.l):
            raise ValueError("symbols out of range")
        s.setflags(write=False)
        object.__setattr__(self, "symbols", s)


def chunk(bits, l: int) -> SymbolMessage:
    """Big-endian ``l``-bit grouping; the final group is zero-padded."""
    if l < 1:
        raise ValueError("chunk length must be >= 1")
    b = _bits(bits).astype(np.int64)
    k = -(-b.size // l)
    pad = k * l - b.size
    padded = np.concatenate([b, np.zeros(pad, dtype=np.int64)]).reshape(k, l)
    weights = 1 << np.arange(l - 1, -1, -1, dtype=np.int64)
    return SymbolMessage(l, padded @ weights, pad)


def unchunk(message: SymbolMessage) -> np.ndarray:
    shifts = np.arange(message.l - 1, -1, -1, dtype=np.int64)
    bits = (message.symbols[:, None] >> shifts) & 1
    bits = bits.ravel().astype(np.uint8)
    return bits[: bits.size - message.pad] if message.pad else bits


# --------------------------------------------------------------------------- codecs


@dataclass(frozen=True)
class CodecParams:
    scheme: Scheme
    l: int = 1
    theta: float = None
    centers: np.ndarray = field(init=False, repr=False, compare=False)
    radius: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        scheme = Scheme(self.scheme)
        object.__setattr__(self, "scheme", scheme)
        theta = DEFAULT_THETA[scheme] if self.theta is None else float(self.theta)
        object.__setattr__(self, "theta", theta)
        if self.l < 1 or self.l > 16:
            raise ValueError("chunk length must be in [1, 16]")
        if scheme in BINARY_SCHEMES and self.l != 1:
            raise ValueError(f"{scheme.value} carries one bit per coordinate (l = 1)")
        if scheme is Scheme.MC and not theta > 0:
            raise ValueError("mc needs theta > 0")
        if scheme is Scheme.TRUNCATED and not 0 < theta <= 1:
            raise ValueError("truncated needs theta in (0, 1]")
        if scheme is Scheme.HAMMING_BALL and not 0 < theta < 1:
            raise ValueError("hamming-ball needs theta in (0, 1)")
        M = 2 ** self.l
        if scheme in (Scheme.MB, Scheme.MN):
            centers = np.array([-1.0, 1.0])
        elif scheme is Scheme.MC:
            centers = np.array([-theta, theta])
        else:
            centers = ndtri((np.arange(M) + 0.5) / M)
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        radius = 0.0
        if scheme is Scheme.HAMMING_BALL:
            radius = theta * 0.5 * float(np.min(np.diff(centers))) if M > 1 else theta
        object.__setattr__(self, "radius", radius)

    @property
    def n_symbols(self) -> int:
        return 2 ** self.l

    @property
    def boundaries(self) -> np.ndarray:
        """Interior equiprobable bin edges ``Phi^-1(j / 2^l)``, ``j = 1..2^l-1``."""
        M = self.n_symbols
        return ndtri(np.arange(1, M) / M)

    @property
    def distribution_preserving(self) -> bool:
        return self.scheme in (Scheme.MN, Scheme.GAUSSIAN_SHADING, Scheme.SDE_SHARED_SEED) or (
            self.scheme is Scheme.TRUNCATED and self.theta == 1.0)

    def to_kv(self) -> str:
        return kv.dumps("codec-params", {"scheme": self.scheme.value, "l": self.l, "theta": self.theta})

    @classmethod
    def from_kv(cls, text: str) -> "CodecParams":
        f = kv.loads(text, "codec-params")
        return cls(Scheme(f["scheme"]), int(f["l"]), float(f["theta"]))


def _symbols(symbols, params: CodecParams) -> np.ndarray:
    s = symbols.symbols if isinstance(symbols, SymbolMessage) else np.asarray(symbols)
    if isinstance(symbols, SymbolMessage) and symbols.l != params.l:
        raise ValueError("symbol chunk length does not match codec")
    s = np.asarray(s, dtype=np.int64)
    if np.any(s < 0) or np.any(s >= params.n_symbols):
        raise ValueError("symbol out of range")
    return s


def encode(symbols, params: CodecParams, key: Key) -> np.ndarray:
    """Map symbols to one noise coordinate each."""
    m = _symbols(symbols, params)
    k = m.size
    scheme = params.scheme
    sign = 2.0 * m - 1.0
    if scheme is Scheme.MN:
        return np.abs(key.normals(k, "mn")) * sign
    if scheme is Scheme.MB:
        return sign
    if scheme is Scheme.MC:
        return sign * params.theta
    M = params.n_symbols
    u = key.uniforms(k, "bin")
    if scheme in (Scheme.GAUSSIAN_SHADING, Scheme.SDE_SHARED_SEED):
        return ndtri((m + u) / M)
    if scheme is Scheme.TRUNCATED:
        theta = params.theta
        return ndtri((m + 0.5 * (1.0 - theta) + theta * u) / M)
    return params.centers[m] + params.radius * (2.0 * u - 1.0)


def decode(g, params: CodecParams) -> np.ndarray:
    """Nearest-region inverse. Exact ties go to the lower symbol index."""
    g = np.asarray(g, dtype=float)
    if params.scheme in BINARY_SCHEMES:
        return (g > 0).astype(np.int64)
    if params.scheme is Scheme.HAMMING_BALL:
        c = params.centers
        mids = 0.5 * (c[1:] + c[:-1])
        return np.searchsorted(mids, g, side="left").astype(np.int64)
    return np.searchsorted(params.boundaries, g, side="left").astype(np.int64)


def extraction_accuracy(sent, received) -> float:
    a, b = np.asarray(sent), np.asarray(received)
    if a.shape != b.shape:
        raise ValueError("messages differ in length")
    if a.size == 0:
        raise ValueError("empty message")
    return float(np.mean(a == b))


def bin_probability(g, params: CodecParams) -> np.ndarray:
    """Standard-normal CDF of ``g``; handy for diagnostics of bin placement."""
    return ndtr(np.asarray(g, dtype=float))
