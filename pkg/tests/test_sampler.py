from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import gaussian_target
from srnlna.sampler import (
    Chain,
    SamplerConfig,
    SamplerError,
    initial_state,
    mala_log_ratio,
    mala_step,
    mh_step,
    read_chain_csv,
    rmse,
    sample,
    truncate,
)
from srnlna.lna import Priors, Uniform
from srnlna.ssa import make_rng


class FixedNormal:
    """Generator stand-in that returns preset normals and uniforms."""

    def __init__(self, z, u=0.5):
        self.z = np.asarray(z, dtype=float)
        self.u = u

    def standard_normal(self, shape):
        return self.z.reshape(shape)

    def random(self):
        return self.u


class TestConfig:
    def test_iterations(self):
        c = SamplerConfig(burn_in=10_000, samples=100, thin=10)
        assert c.total_iterations == 10_991
        r = c.retained_iterations
        assert r[0] == 10_001 and r[-1] == 10_991 and len(r) == 100

    @pytest.mark.parametrize(
        "kw",
        [dict(step_size=0), dict(burn_in=-1), dict(samples=0), dict(thin=0),
         dict(algorithm="hmc"), dict(likelihood_variant="exact"), dict(drift_clip=0.0)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


class TestMala:
    def test_proposal_at_current_point_is_accepted(self):
        x = np.array([0.3, -1.2])
        dt = 0.05
        lp, g = gaussian_target(x)
        # choose the noise so that the proposal lands exactly on x
        z = -dt * g / math.sqrt(2 * dt)
        assert mala_log_ratio(x, lp, g, x, lp, g, dt) == 0.0
        res = mala_step(x, gaussian_target, dt, FixedNormal(z, u=0.999999))
        assert res.accepted
        np.testing.assert_allclose(res.x, x, atol=1e-15)

    def test_ratio_matches_explicit_densities(self):
        x, y, dt = np.array([0.5, 1.0]), np.array([0.2, 0.7]), 0.1

        def logq(to, frm):
            mean = frm + dt * gaussian_target(frm)[1]
            return -np.sum((to - mean) ** 2) / (4 * dt)

        expected = gaussian_target(y)[0] - gaussian_target(x)[0] + logq(x, y) - logq(y, x)
        got = mala_log_ratio(x, *gaussian_target(x), y, *gaussian_target(y), dt)
        assert got == pytest.approx(expected, rel=1e-14)

    def test_minus_infinity_rejected(self):
        def half_line(x, grad=True):
            if x[0] < 0:
                return -math.inf, None
            return -0.5 * x[0] ** 2, np.array([-x[0]])

        res = mala_step(np.array([0.01]), half_line, 0.1, FixedNormal([-5.0], u=0.0))
        assert not res.accepted and res.x[0] == 0.01

    def test_nonfinite_gradient_is_an_error(self):
        with pytest.raises(SamplerError):
            mala_step(np.zeros(1), lambda x, grad=True: (0.0, np.array([np.nan])), 0.1, make_rng(0))

    def test_small_step_acceptance(self):
        cfg = SamplerConfig(1e-6, 0, 10_000, 1, "mala", seed=1)
        ch = sample(gaussian_target, np.ones(4), cfg)
        assert ch.acceptance_rate > 0.999

    def test_truncation(self):
        g = np.array([3.0, 4.0])
        np.testing.assert_allclose(truncate(g, 1.0), [0.6, 0.8])
        assert truncate(g, 10.0) is g
        assert truncate(g, None) is g


def batch_se(values, batches=100):
    b = values.reshape(batches, -1, values.shape[1]).mean(axis=1)
    return b.std(axis=0, ddof=1) / math.sqrt(batches)


@pytest.mark.parametrize("algorithm,clip", [("mala", None), ("mh", None), ("mala", 1.0)])
def test_gaussian_calibration(algorithm, clip):
    cfg = SamplerConfig(0.1, 0, 100_000, 1, algorithm, seed=2024, drift_clip=clip)
    ch = sample(gaussian_target, np.zeros(4), cfg)
    s = ch.log_samples
    # tolerance from batch-means standard errors; the fixed +-0.03 band is
    # exercised by the acceptance suite
    assert np.all(np.abs(s.mean(axis=0)) < 4 * batch_se(s))
    assert np.all(np.abs(s.var(axis=0) - 1) < 4 * batch_se(s**2) + 4 * batch_se(s) ** 2)


class TestMh:
    def test_uphill_always_accepted(self):
        res = mh_step(np.array([2.0]), gaussian_target, 0.1, FixedNormal([-1.0], u=1.0))
        assert res.accepted

    def test_symmetric_ratio(self):
        # downhill move accepted iff u <= p(x')/p(x)
        x, dt, z = np.array([0.0]), 0.5, np.array([1.0])
        ratio = math.exp(-0.5 * (math.sqrt(2 * dt) * z[0]) ** 2)
        assert mh_step(x, gaussian_target, dt, FixedNormal(z, u=ratio * 0.999)).accepted
        assert not mh_step(x, gaussian_target, dt, FixedNormal(z, u=ratio * 1.001)).accepted


@pytest.mark.parametrize("algorithm", ["mala", "mh"])
def test_detailed_balance_between_bins(algorithm):
    """Transition counts between the four quadrants of a 2-D target are symmetric.

    A reversible kernel gives n_ij = n_ji in expectation; with four cells a
    non-reversible one could circulate (0 -> 1 -> 2 -> 0) and would fail.
    """

    def target(x, grad=True):
        # correlated Gaussian so that diagonal jumps between quadrants occur
        P = np.array([[1.0, 0.6], [0.6, 1.0]])
        lp = -0.5 * float(x @ P @ x)
        return lp, (-(P @ x) if grad else None)

    ch = sample(target, np.zeros(2), SamplerConfig(0.5, 0, 200_000, 1, algorithm, seed=5))
    q = (ch.log_trace[:, 0] > 0).astype(int) * 2 + (ch.log_trace[:, 1] > 0).astype(int)
    counts = np.zeros((4, 4))
    np.add.at(counts, (q[:-1], q[1:]), 1)
    for i in range(4):
        for j in range(i + 1, 4):
            n = counts[i, j] + counts[j, i]
            assert abs(counts[i, j] - counts[j, i]) <= 4 * math.sqrt(n) + 1
    assert counts[0, 3] + counts[1, 2] > 100


class TestChain:
    def test_single_sample_is_state_after_burn_in(self):
        cfg = SamplerConfig(0.1, 7, 1, 13, "mh", seed=3)
        ch = sample(gaussian_target, np.zeros(2), cfg)
        assert ch.log_trace.shape == (9, 2)
        np.testing.assert_array_equal(ch.log_samples, ch.log_trace[[8]])

    def test_retained_indices(self):
        cfg = SamplerConfig(0.1, 5, 4, 3, "mala", seed=3)
        ch = sample(gaussian_target, np.zeros(2), cfg)
        np.testing.assert_array_equal(ch.log_samples, ch.log_trace[[6, 9, 12, 15]])
        assert ch.total_proposals == cfg.total_iterations == 15

    def test_samples_positive_and_consistent(self):
        ch = sample(gaussian_target, np.zeros(3), SamplerConfig(0.2, 10, 50, 2, "mala", seed=4))
        assert np.all(ch.samples > 0)
        np.testing.assert_array_equal(ch.samples, np.exp(ch.log_samples))
        assert 0.0 <= ch.acceptance_rate <= 1.0

    def test_fixed_seed(self):
        cfg = SamplerConfig(0.2, 10, 20, 2, "mala", seed=9)
        a = sample(gaussian_target, np.zeros(3), cfg)
        b = sample(gaussian_target, np.zeros(3), cfg)
        np.testing.assert_array_equal(a.log_trace, b.log_trace)
        np.testing.assert_array_equal(a.accepted, b.accepted)

    def test_csv_round_trip(self, tmp_path):
        ch = sample(gaussian_target, np.zeros(2), SamplerConfig(0.2, 3, 4, 2, "mh", seed=1), param_names=("theta1", "sigma_3"))
        ch.to_csv(tmp_path / "c.csv", {"config_hash": "abc", "seed": 1})
        text = (tmp_path / "c.csv").read_text().splitlines()
        assert text[0] == "# config_hash=abc seed=1"
        assert text[1] == "iter,log_theta1,log_sigma_3,logpost,accepted"
        header, names, trace, lp, acc = read_chain_csv(tmp_path / "c.csv")
        assert header == {"config_hash": "abc", "seed": "1"}
        assert names == ("theta1", "sigma_3")
        np.testing.assert_array_equal(trace, ch.log_trace)
        np.testing.assert_array_equal(lp, ch.logpost_trace)
        np.testing.assert_array_equal(acc, ch.accepted)


class TestInit:
    def test_retries_until_finite(self):
        calls = []

        def target(x, grad=True):
            calls.append(1)
            if len(calls) < 4:
                return -math.inf, None
            return 0.0, np.zeros_like(x)

        x = initial_state(target, Priors((Uniform(0, 1),), ()), make_rng(0))
        assert len(calls) == 4 and x[0] < 0

    def test_cap(self):
        with pytest.raises(SamplerError):
            initial_state(lambda x, grad=True: (-math.inf, None), Priors((Uniform(0, 1),), ()), make_rng(0), 10)


class TestRmse:
    def test_zero(self):
        np.testing.assert_array_equal(rmse(np.tile([1.0, 2.0], (5, 1)), [1.0, 2.0]), 0.0)

    def test_symmetric(self):
        np.testing.assert_allclose(rmse([[1.5], [0.5]], [1.0]), [0.5])
