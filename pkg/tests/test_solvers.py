import numpy as np
import pytest

from nsdser.diffusion import GmmPrior, GuidanceConfig, StateSample, Provenance, build_schedule, score_at
from nsdser.solvers import (Direction, SolverConfig, UnstableTrajectoryError, evaluations_per_step, integrate,
                            integrate_array, roundtrip_error, time_grid, write_trajectory_csv)


def test_time_grid_endpoints_and_errors():
    assert time_grid(1000, 4).tolist() == [1000, 750, 500, 250, 0]
    assert time_grid(10, 3).tolist() == [10, 7, 3, 0]
    with pytest.raises(ValueError):
        time_grid(10, 11)


@pytest.mark.parametrize("kind", ["euler1", "heun2", "dpm2"])
def test_standard_normal_prior_is_fixed_point(kind, rng):
    prior = GmmPrior.standard_normal(8)
    sched = build_schedule("cosine", 100)
    x = rng.standard_normal((4, 8))
    out = integrate_array(x, prior, sched, SolverConfig(kind, 10))
    assert np.array_equal(out, x)


def _ddim_oracle(x, prior, sched):
    y = x.copy()
    for t in range(sched.T, 0, -1):
        a, s = sched.alphas[t], sched.sigmas[t]
        eps = -s * score_at(y, a, s, prior)
        y = sched.alphas[t - 1] * (y - s * eps) / a + sched.sigmas[t - 1] * eps
    return y


def test_euler_converges_to_ddim_at_first_order(prior16, rng):
    # Euler in angle time and DDIM share the velocity field; with one step per
    # schedule index their gap is O(1/T).
    gaps = []
    for T in (100, 200):
        sched = build_schedule("linear-beta", T)
        x = sched.sigma_T * rng.standard_normal((4, 16))
        gaps.append(np.abs(integrate_array(x, prior16, sched, SolverConfig("euler1", T)) -
                           _ddim_oracle(x, prior16, sched)).max())
    assert gaps[1] < 0.03
    assert 1.8 < gaps[0] / gaps[1] < 2.2


@pytest.mark.parametrize("kind,lo,hi", [("euler1", 1.6, 2.6), ("heun2", 3.0, 5.5), ("dpm2", 3.0, 5.5)])
def test_roundtrip_error_halving_ratio(kind, lo, hi, linear1000):
    prior = GmmPrior.random(32, seed=3)
    x = linear1000.sigma_T * np.random.default_rng(0).standard_normal((4, 32))
    e = [roundtrip_error(x, prior, linear1000, SolverConfig(kind, n)) for n in (10, 20, 40)]
    assert lo <= e[0] / e[1] <= hi and lo <= e[1] / e[2] <= hi


def test_batch_split_invariance(prior16, linear1000, rng):
    x = rng.standard_normal((9, 16))
    cfg = SolverConfig("heun2", 12, guidance=GuidanceConfig(3.0, 0))
    whole = integrate_array(x, prior16, linear1000, cfg)
    parts = np.vstack([integrate_array(x[:4], prior16, linear1000, cfg), integrate_array(x[4:], prior16, linear1000, cfg)])
    assert np.array_equal(whole, parts)


def test_per_row_guidance_matches_single_rows(prior16, linear1000, rng):
    x = rng.standard_normal((3, 16))
    scale, cond = np.array([0.0, 2.0, 5.0]), np.array([-1, 0, 1])
    out = integrate_array(x, prior16, linear1000, SolverConfig("dpm2", 8), scale=scale, condition=cond)
    for i in range(3):
        g = GuidanceConfig(scale[i], None if cond[i] < 0 else int(cond[i]))
        ref = integrate_array(x[i], prior16, linear1000, SolverConfig("dpm2", 8, guidance=g))
        np.testing.assert_allclose(out[i], ref, rtol=0, atol=1e-13)


def test_state_sample_interface(prior16, linear1000, rng):
    start = StateSample(linear1000.sigma_T * rng.standard_normal(16), 1000, Provenance.COVER)
    x0 = integrate(start, prior16, linear1000, SolverConfig("heun2", 20))
    assert x0.t == 0 and x0.provenance is Provenance.COVER
    back = integrate(x0, prior16, linear1000, SolverConfig("heun2", 20, Direction.INVERT))
    assert back.t == 1000
    with pytest.raises(ValueError):
        integrate(start, prior16, linear1000, SolverConfig("heun2", 20, Direction.INVERT))


def test_boundary_segment_uses_single_evaluation():
    assert evaluations_per_step("heun2", 0.1, 0.0) == 1
    assert evaluations_per_step("dpm2", 0.2, 0.1) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported(linear1000):
    prior = GmmPrior(np.ones(1), np.zeros((1, 2)), np.full((1, 2), 1e-300))
    with pytest.raises((UnstableTrajectoryError, ValueError, FloatingPointError)):
        integrate_array(np.full((1, 2), 1e300), prior, linear1000, SolverConfig("euler1", 5))


def test_trajectory_csv(tmp_path, prior16, linear1000, rng):
    traj = []
    integrate_array(rng.standard_normal((2, 16)), prior16, linear1000, SolverConfig("euler1", 5), trajectory=traj)
    assert [t for _, t, _ in traj] == [1000, 800, 600, 400, 200, 0]
    write_trajectory_csv(tmp_path / "t.csv", traj)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 7


@pytest.mark.parametrize("kind,lo,hi", [("euler1", 0.7, 1.3), ("heun2", 1.7, 3.0), ("dpm2", 1.7, 3.0)])
def test_log_log_slope_of_roundtrip_error(kind, lo, hi, linear1000):
    prior = GmmPrior.random(24, seed=8)
    x = linear1000.sigma_T * np.random.default_rng(2).standard_normal((4, 24))
    e10, e40 = (roundtrip_error(x, prior, linear1000, SolverConfig(kind, n)) for n in (10, 40))
    assert lo <= np.log(e10 / e40) / np.log(4) <= hi
