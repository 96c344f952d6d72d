import numpy as np
import pytest

from nsdser.codecs import CodecParams, Key
from nsdser.diffusion import GuidanceConfig
from nsdser.solvers import SolverConfig
from nsdser.stego import (Backbone, CapacityError, ChannelConfig, builtin_backbones, embed_and_generate, extract,
                          gen_cover, quantize, read_manifest, read_samples, write_manifest, write_samples)


@pytest.fixture(scope="module")
def backbones():
    return builtin_backbones(dim=64, channels=4)


def _bits(n, seed=0):
    return np.random.default_rng(seed).integers(0, 2, n).astype(np.uint8)


def test_builtin_backbones_are_distinct(backbones):
    assert set(backbones) == {"sd15", "sd21", "ds7"}
    assert not np.array_equal(backbones["sd15"].prior.means, backbones["sd21"].prior.means)
    assert backbones["sd21"].schedule.kind == "cosine"


@pytest.mark.parametrize("codec", ["mb", "mc", "gaussian-shading", "hamming-ball", "truncated"])
def test_matched_solver_extraction_is_exact(codec, backbones):
    bb = backbones["sd15"]
    p = CodecParams(codec)
    msg = _bits(60)
    key = Key.from_seed(5)
    solver = SolverConfig("heun2", 20)
    x0, manifest = embed_and_generate(msg, key, p, bb, solver)
    assert manifest["codec"] == codec and manifest["n_bits"] == 60
    assert extraction_accuracy(extract(x0.x, key, p, bb, solver, 60), msg) >= 0.98


def extraction_accuracy(a, b):
    return float(np.mean(np.asarray(a) == np.asarray(b)))


def test_guided_generation_roundtrip(backbones):
    bb = backbones["sd15"]
    p = CodecParams("gaussian-shading", 2)
    msg = _bits(128, 1)
    key = Key.from_seed(2)
    solver = SolverConfig("dpm2", 25, guidance=GuidanceConfig(4.0, 1))
    x0, _ = embed_and_generate(msg, key, p, bb, solver, ChannelConfig(256))
    assert extraction_accuracy(extract(x0.x, key, p, bb, solver, 128), msg) > 0.95


def test_sde_shared_seed_replay_recovers_message(backbones):
    bb = backbones["sd15"]
    p = CodecParams("sde-shared-seed", 1)
    msg = _bits(64, 3)
    key = Key.from_seed(11)
    solver = SolverConfig("euler1", 50)
    x0, _ = embed_and_generate(msg, key, p, bb, solver)
    assert extraction_accuracy(extract(x0.x, key, p, bb, solver, 64), msg) == 1.0
    wrong = extract(x0.x, Key.from_seed(12), p, bb, solver, 64)
    assert extraction_accuracy(wrong, msg) < 0.8


def test_capacity_error(backbones):
    with pytest.raises(CapacityError):
        embed_and_generate(_bits(65), Key.from_seed(0), CodecParams("mb"), backbones["sd15"], SolverConfig("heun2", 5))


def test_quantize_grid():
    x = np.array([-10.0, -4.0, 0.0, 0.01, 3.99, 10.0])
    q = quantize(x, 8, 4.0)
    assert q.tolist() == [-3.5, -3.5, 0.5, 0.5, 3.5, 3.5]
    assert np.max(np.abs(quantize(np.linspace(-3.9, 3.9, 101), 256) - np.linspace(-3.9, 3.9, 101))) <= 4 / 256
    with pytest.raises(ValueError):
        ChannelConfig(1)


def test_gen_cover_deterministic(backbones):
    a = gen_cover(backbones["ds7"], SolverConfig("heun2", 10), seed=4)
    b = gen_cover(backbones["ds7"], SolverConfig("heun2", 10), seed=4)
    assert np.array_equal(a.x, b.x)
    c = gen_cover(backbones["ds7"], SolverConfig("heun2", 10), seed=4, sde=True)
    assert c.x.shape == (64,) and np.all(np.isfinite(c.x))


def test_backbone_channel_divisibility(backbones):
    with pytest.raises(ValueError):
        Backbone("x", backbones["sd15"].prior, backbones["sd15"].schedule, channels=5)


def test_sample_and_manifest_files(tmp_path):
    X = np.random.default_rng(0).standard_normal((3, 8))
    write_samples(tmp_path / "s.bin", X)
    assert np.array_equal(read_samples(tmp_path / "s.bin"), X)
    (tmp_path / "bad.bin").write_bytes(b"garbage!" + bytes(8))
    with pytest.raises(ValueError):
        read_samples(tmp_path / "bad.bin")
    write_manifest(tmp_path / "m.kv", {"codec": "mb", "q": 256})
    assert read_manifest(tmp_path / "m.kv")["q"] == "256"
