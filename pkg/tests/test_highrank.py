import numpy as np
import pytest

from conftest import make_sample
from nfcausal.data import MeasurementPanel, make_row_split
from nfcausal.exceptions import HighRankDegeneracyError, SizeError
from nfcausal.highrank import partial_out_high_rank
from nfcausal.matching import DistanceMetric

EUCLID = DistanceMetric(kind="euclidean")


def highrank_design(n, t, theta, seed, e_sd=2.0, u_sd=0.5):
    """Measurements with a latent factor structure plus a high-rank term.

    The covariate has its own latent structure and strong idiosyncratic
    variation e, which identifies the slope.
    """
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(size=n)
    rho = rng.uniform(size=n)
    omega_x = rng.uniform(size=t)
    omega_w = rng.uniform(size=t)
    e = e_sd * rng.standard_normal((t, n))
    u = u_sd * rng.standard_normal((t, n))
    w = np.sin(np.pi * (rho[None, :] + omega_w[:, None])) + e
    eta = (alpha[None, :] - omega_x[:, None]) ** 2
    x = theta * w + eta + u
    return MeasurementPanel(x, w=[w]), alpha


class TestPartialOutHighRank:
    def test_recovers_slope_single_seed(self):
        panel, _ = highrank_design(400, 400, theta=1.5, seed=0)
        split = make_row_split(400, "thirds", seed=1)
        adj, downstream = partial_out_high_rank(panel, split, k=120,
                                                d_lambda_w=2, d_lambda_x=3,
                                                metric=EUCLID)
        assert adj.theta_hat[0] == pytest.approx(1.5, abs=0.1)
        assert np.array_equal(downstream.t_dagger, split.t_ddagger)
        assert np.array_equal(downstream.t_ddagger, split.t_3)
        assert adj.residual_panel.shape == panel.x.shape

    def test_zero_slope_design(self):
        panel, _ = highrank_design(250, 250, theta=0.0, seed=3)
        split = make_row_split(250, "thirds", seed=4)
        adj, _ = partial_out_high_rank(panel, split, k=40, d_lambda_w=2,
                                       d_lambda_x=3, metric=EUCLID)
        assert abs(adj.theta_hat[0]) < 0.05
        assert np.max(np.abs(adj.residual_panel - panel.x)) < \
            0.05 * np.max(np.abs(panel.w[0]))

    def test_residual_orthogonality(self):
        panel, _ = highrank_design(150, 150, theta=0.8, seed=5)
        split = make_row_split(150, "thirds", seed=6)
        adj, _ = partial_out_high_rank(panel, split, k=30, d_lambda_w=2,
                                       d_lambda_x=3, metric=EUCLID)
        stacked = np.column_stack([r.ravel() for r in adj.residuals_w])
        gap = adj.residual_x.ravel() - stacked @ adj.theta_hat
        n_obs = gap.size
        assert np.max(np.abs(stacked.T @ gap / n_obs)) < 1e-10

    def test_w_equal_x_degenerates(self):
        # exact rank-2 noiseless structure: both residual passes vanish
        rng = np.random.default_rng(7)
        alpha = rng.uniform(size=60)
        omega = rng.uniform(size=60)
        x = 1.0 + omega[:, None] * alpha[None, :]
        panel = MeasurementPanel(x, w=[x.copy()])
        split = make_row_split(60, "thirds", seed=8)
        with pytest.raises(HighRankDegeneracyError):
            partial_out_high_rank(panel, split, k=12, d_lambda_w=2,
                                  d_lambda_x=2, metric=EUCLID)

    def test_requires_w_and_thirds(self):
        rng = np.random.default_rng(9)
        panel = MeasurementPanel(rng.standard_normal((12, 10)))
        split = make_row_split(12, "thirds", seed=1)
        with pytest.raises(SizeError):
            partial_out_high_rank(panel, split, k=4, d_lambda_w=1,
                                  d_lambda_x=1, metric=EUCLID)
        panel_w = MeasurementPanel(rng.standard_normal((12, 10)),
                                   w=[rng.standard_normal((12, 10))])
        halves = make_row_split(12, "contiguous_halves")
        with pytest.raises(SizeError):
            partial_out_high_rank(panel_w, halves, k=4, d_lambda_w=1,
                                  d_lambda_x=1, metric=EUCLID)


class TestPipelineBypass:
    def test_absent_w_never_enters_highrank(self, monkeypatch, rng):
        import nfcausal.estimator as mod
        calls = []

        def spy(*args, **kwargs):
            calls.append(1)
            raise AssertionError("high-rank step must not run without w")

        monkeypatch.setattr(mod, "partial_out_high_rank", spy)
        x = rng.standard_normal((20, 30))
        y = rng.standard_normal(30)
        s = rng.integers(0, 2, 30)
        s[:2] = [0, 1]
        fitter = mod.LatentFactorDR(n_neighbors=8, d_lambda=1,
                                    split_scheme="contiguous_halves")
        fitter.fit(x.T, y, treatment=s)
        assert not calls
        assert fitter.highrank_ is None

    def test_refit_is_deterministic(self, rng):
        from nfcausal.estimator import LatentFactorDR
        x = rng.standard_normal((24, 40))
        y = rng.standard_normal(40)
        s = rng.integers(0, 2, 40)
        s[:2] = [0, 1]
        kwargs = dict(n_neighbors=10, d_lambda=2,
                      split_scheme="contiguous_halves")
        a = LatentFactorDR(**kwargs).fit(x.T, y, treatment=s)
        b = LatentFactorDR(**kwargs).fit(x.T, y, treatment=s)
        ta = a.counterfactual_mean(0, 1)
        tb = b.counterfactual_mean(0, 1)
        assert ta.theta == tb.theta and ta.sigma == tb.sigma
        assert np.array_equal(ta.influence, tb.influence)
