import math

import numpy as np
import pytest
from scipy.stats import norm

from bccr.inference import (cpo_estimate, hpd_interval, lpml, modal_partition,
                            summarize_chain)


class TestCpo:
    def test_single_draw_is_density(self):
        logdens = np.log(np.array([[0.3, 0.7]]))
        assert np.allclose(cpo_estimate(logdens), [0.3, 0.7], rtol=1e-12)

    def test_constant_density(self):
        logdens = np.full((50, 3), math.log(0.4))
        assert np.allclose(cpo_estimate(logdens), 0.4, rtol=1e-12)

    def test_two_draw_harmonic_mean(self):
        # CPO = 1 / mean(1/0.2, 1/0.4) = 1 / ((5 + 2.5)/2) = 0.266667
        logdens = np.log(np.array([[0.2], [0.4]]))
        assert cpo_estimate(logdens)[0] == pytest.approx(0.8 / 3.0, rel=1e-12)

    def test_harmonic_mean_below_arithmetic(self):
        rng = np.random.default_rng(0)
        logdens = np.log(rng.uniform(0.1, 1.0, size=(200, 4)))
        cpo = cpo_estimate(logdens)
        arith = np.exp(logdens).mean(axis=0)
        assert np.all(cpo <= arith + 1e-12)
        assert np.all(cpo >= np.exp(logdens).min(axis=0) - 1e-12)

    def test_zero_density_draw(self):
        logdens = np.array([[math.log(0.5)], [-np.inf]])
        with pytest.warns(RuntimeWarning):
            cpo = cpo_estimate(logdens)
        assert cpo[0] == 0.0


class TestLpml:
    def test_unit_cpos_give_zero(self):
        assert lpml(np.ones(4)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        assert lpml(np.array([0.5, 0.25])) == pytest.approx(
            math.log(0.5) + math.log(0.25), rel=1e-12)

    def test_additive_over_observations(self):
        rng = np.random.default_rng(1)
        logdens = rng.normal(size=(100, 5))
        cpo = cpo_estimate(logdens)
        parts = sum(lpml(cpo[[i]]) for i in range(5))
        assert lpml(cpo) == pytest.approx(parts, rel=1e-10)

    def test_zero_cpo_is_neg_inf(self):
        with pytest.warns(RuntimeWarning):
            assert lpml(np.array([1.0, 0.0])) == float("-inf")

    def test_conjugate_normal_normal_toy(self):
        # y_i ~ N(theta, 1), theta ~ N(0, 1): the exact leave-one-out
        # predictive is available in closed form, and the posterior-draw
        # harmonic-mean estimate must land within a few percent
        rng = np.random.default_rng(2)
        y = np.array([0.3, -0.5, 1.1, 0.2])
        n = len(y)
        post_var = 1.0 / (1.0 + n)
        post_mean = y.sum() * post_var
        t = 100_000
        theta = rng.normal(post_mean, math.sqrt(post_var), size=t)
        logdens = norm.logpdf(y[None, :], theta[:, None], 1.0)

        exact = np.empty(n)
        for i in range(n):
            rest = np.delete(y, i)
            v = 1.0 / (1.0 + len(rest))
            m = rest.sum() * v
            exact[i] = norm.logpdf(y[i], m, math.sqrt(v + 1.0))
        assert lpml(cpo_estimate(logdens)) == pytest.approx(float(exact.sum()), rel=0.03)


class TestModalPartition:
    def test_identical_draws(self):
        draws = np.tile([0, 1, 1, 2], (20, 1))
        assert np.array_equal(modal_partition(draws), [0, 1, 1, 2])

    def test_majority_wins(self):
        draws = np.array([[0, 0, 1]] * 6 + [[0, 1, 1]] * 4)
        assert np.array_equal(modal_partition(draws), [0, 0, 1])

    def test_smallest_label_tie_break(self):
        draws = np.array([[0, 0], [0, 1]])
        # site 1 ties between joining site 0 and being alone; the smaller
        # canonical label wins
        assert np.array_equal(modal_partition(draws), [0, 0])

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        draws = rng.integers(0, 3, size=(50, 6))
        permuted = draws.copy()
        for t in range(len(permuted)):
            perm = rng.permutation(3)
            permuted[t] = perm[permuted[t]]
        assert np.array_equal(modal_partition(draws), modal_partition(permuted))

    def test_output_is_canonical(self):
        rng = np.random.default_rng(4)
        draws = rng.integers(0, 4, size=(30, 8))
        modal = modal_partition(draws)
        seen = []
        for lab in modal:
            if lab not in seen:
                seen.append(lab)
        assert seen == sorted(seen)


class TestHpdInterval:
    def test_standard_normal_quantiles(self):
        rng = np.random.default_rng(5)
        draws = rng.normal(size=100_000)
        lo, hi = hpd_interval(draws, 0.95)
        assert lo == pytest.approx(-1.96, abs=0.04)
        assert hi == pytest.approx(1.96, abs=0.04)

    def test_constant_sample(self):
        lo, hi = hpd_interval(np.full(100, 2.5), 0.95)
        assert lo == hi == 2.5

    def test_full_level(self):
        rng = np.random.default_rng(6)
        draws = rng.normal(size=500)
        lo, hi = hpd_interval(draws, 1.0)
        assert lo == draws.min() and hi == draws.max()

    def test_narrower_than_equal_tailed(self):
        rng = np.random.default_rng(7)
        draws = rng.gamma(2.0, size=50_000)  # skewed target
        lo, hi = hpd_interval(draws, 0.9)
        qlo, qhi = np.quantile(draws, [0.05, 0.95])
        assert hi - lo <= qhi - qlo + 1e-12

    def test_rejects_tiny_samples(self):
        with pytest.raises(ValueError):
            hpd_interval(np.arange(5.0), 0.95)


class TestSummarizeChain:
    def test_report_round_trips_to_dict(self):
        from bccr.mcmc import ChainConfig, run_chain
        from bccr.model import Hyperparameters
        from tests.test_model import make_data

        data = make_data(n=8, p=2, seed=8)
        out = run_chain(data, Hyperparameters(),
                        ChainConfig(n_iter=200, thin=2, burn_in=20, seed=1))
        report = summarize_chain(out)
        d = report.to_dict()
        assert len(report.modal_labels) == 8
        assert sum(report.k_posterior.values()) == out.n_draws
        assert np.isfinite(report.lpml)
        assert np.asarray(d["site_beta_mean"]).shape == (8, 2)
        assert set(d["sigma2_summary"]) == {"mean", "sd", "hpd_lower", "hpd_upper"}
