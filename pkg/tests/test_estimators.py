import numpy as np
import pytest

from conftest import make_sample
from nfcausal.data import CdfProcess, Neighborhood, NuisanceFits
from nfcausal.estimators import (attach_uniform_band, counterfactual_cdf,
                                 default_tau_grid, dr_counterfactual_mean,
                                 dr_variance, influence_values,
                                 multiplier_bootstrap, sd_test,
                                 treatment_effect)
from nfcausal.exceptions import ContractError, EstimationError


def nuisance_from(varsigma, p_hat, s):
    s = np.asarray(s)
    n_levels = int(s.max()) + 1
    p_marginal = np.array([np.mean(s == j) for j in range(n_levels)])
    return NuisanceFits(varsigma_hat=np.asarray(varsigma, float),
                        p_hat=np.asarray(p_hat, float),
                        p_marginal=p_marginal)


def oracle_theta(y, s, varsigma, p_hat, j, j_prime):
    n = len(y)
    p_bar = sum(1.0 for si in s if si == j_prime) / n
    total = 0.0
    for i in range(n):
        d_j = 1.0 if s[i] == j else 0.0
        d_jp = 1.0 if s[i] == j_prime else 0.0
        total += d_jp * varsigma[i][j] / p_bar
        total += (p_hat[i][j_prime] / p_bar) * d_j \
            * (y[i] - varsigma[i][j]) / p_hat[i][j]
    return total / n


def oracle_sigma2(y, s, varsigma, p_hat, theta, j, j_prime):
    n = len(y)
    p_bar = sum(1.0 for si in s if si == j_prime) / n
    t1 = t2 = 0.0
    for i in range(n):
        d_j = 1.0 if s[i] == j else 0.0
        d_jp = 1.0 if s[i] == j_prime else 0.0
        t1 += d_jp * (varsigma[i][j] - theta) ** 2 / p_bar ** 2
        t2 += p_hat[i][j_prime] ** 2 * d_j * (y[i] - varsigma[i][j]) ** 2 \
            / (p_bar ** 2 * p_hat[i][j] ** 2)
    return t1 / n + t2 / n


SIX_Y = [1.1, -0.4, 2.3, 0.7, 1.9, -1.2]
SIX_S = [0, 1, 0, 1, 1, 0]
SIX_VS = [[0.9, 1.4], [0.2, -0.1], [1.8, 2.0],
          [0.5, 0.9], [1.2, 2.1], [-0.8, -1.0]]
SIX_P = [[0.7, 0.3], [0.4, 0.6], [0.55, 0.45],
         [0.35, 0.65], [0.5, 0.5], [0.8, 0.2]]


class TestDrMean:
    def test_exact_fit_collapse(self):
        n = 8
        s = [0, 1, 0, 1, 1, 0, 1, 0]
        c = 2.5
        y = [c if si == 0 else 9.9 for si in s]
        varsigma = [[c, 0.0]] * n
        p_hat = [[0.5, 0.5]] * n
        sample = make_sample(y, s, n_levels=2)
        est = dr_counterfactual_mean(sample, nuisance_from(varsigma, p_hat, s),
                                     0, 1)
        assert est.theta == pytest.approx(c, abs=1e-14)

    def test_same_level_is_group_mean(self):
        s = [1, 0, 1, 1, 0]
        y = [2.0, 5.0, 4.0, 6.0, 1.0]
        varsigma = [[0.0, 0.0]] * 5
        p_hat = [[0.4, 0.6]] * 5
        sample = make_sample(y, s, n_levels=2)
        est = dr_counterfactual_mean(sample, nuisance_from(varsigma, p_hat, s),
                                     1, 1)
        treated = [yi for yi, si in zip(y, s) if si == 1]
        assert est.theta == pytest.approx(np.mean(treated), abs=1e-14)

    def test_six_unit_fixture_matches_oracle(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        est = dr_counterfactual_mean(sample, nuis, 0, 1)
        want = oracle_theta(SIX_Y, SIX_S, SIX_VS, SIX_P, 0, 1)
        assert est.theta == pytest.approx(want, abs=1e-14)
        assert est.sigma ** 2 == pytest.approx(
            oracle_sigma2(SIX_Y, SIX_S, SIX_VS, SIX_P, est.theta, 0, 1),
            abs=1e-14)

    def test_influence_mean_zero(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        for j, jp in [(0, 1), (1, 1), (0, 0), (1, 0)]:
            est = dr_counterfactual_mean(sample, nuis, j, jp)
            assert abs(np.mean(est.influence)) < 1e-10

    def test_ci_uses_pinned_critical_value(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        est = dr_counterfactual_mean(
            sample, nuisance_from(SIX_VS, SIX_P, SIX_S), 0, 1)
        half = 1.959964 * est.sigma / np.sqrt(6)
        assert est.ci_95 == pytest.approx((est.theta - half, est.theta + half))

    def test_missing_group_raises(self):
        s = [0, 0, 0]
        sample = make_sample([1.0, 2.0, 3.0], s, n_levels=2)
        nuis = nuisance_from([[1.0, 1.0]] * 3, [[0.5, 0.5]] * 3, [0, 0, 1])
        with pytest.raises(Exception):
            dr_counterfactual_mean(sample, nuis, 0, 1)

    def test_clip_warning_fires(self):
        n = 10
        s = [0] * 5 + [1] * 5
        y = list(np.arange(n, dtype=float))
        varsigma = [[0.0, 0.0]] * n
        p_clipped = [[0.01, 0.99]] * n
        p_raw = [[-0.2, 1.2]] * n
        p_marginal = np.array([0.5, 0.5])
        nuis = NuisanceFits(np.asarray(varsigma, float),
                            np.asarray(p_clipped, float), p_marginal,
                            p_hat_raw=np.asarray(p_raw, float))
        sample = make_sample(y, s, n_levels=2)
        with pytest.warns(UserWarning, match="clipped"):
            dr_counterfactual_mean(sample, nuis, 0, 1)


class TestDrVariance:
    def test_zero_residual_zero_variance(self):
        s = [1, 1, 0]
        y = [3.0, 3.0, 0.0]
        varsigma = [[0.0, 3.0]] * 3
        p_hat = [[0.5, 0.5]] * 3
        sample = make_sample(y, s, n_levels=2)
        theta = dr_counterfactual_mean(sample,
                                       nuisance_from(varsigma, p_hat, s),
                                       1, 1).theta
        assert dr_variance(sample, nuisance_from(varsigma, p_hat, s),
                           theta, 1, 1) == pytest.approx(0.0, abs=1e-14)

    def test_scaling_homogeneity(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        base = dr_counterfactual_mean(sample, nuis, 0, 1)
        a = -2.5
        scaled_sample = make_sample([a * v for v in SIX_Y], SIX_S, n_levels=2)
        scaled_nuis = nuisance_from([[a * u for u in row] for row in SIX_VS],
                                    SIX_P, SIX_S)
        scaled = dr_counterfactual_mean(scaled_sample, scaled_nuis, 0, 1)
        assert scaled.sigma == pytest.approx(abs(a) * base.sigma, rel=1e-12)
        assert scaled.theta == pytest.approx(a * base.theta, rel=1e-12)


class TestTreatmentEffect:
    def test_identical_inputs_zero(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        a = dr_counterfactual_mean(sample, nuis, 1, 1)
        eff = treatment_effect(a, a)
        assert eff.theta == 0.0 and eff.sigma == 0.0
        assert np.all(eff.influence == 0.0)

    def test_fixture_influence_variance(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        a = dr_counterfactual_mean(sample, nuis, 1, 1)
        b = dr_counterfactual_mean(sample, nuis, 0, 1)
        eff = treatment_effect(a, b)
        assert eff.theta == pytest.approx(a.theta - b.theta, abs=1e-14)
        diff = a.influence - b.influence
        assert eff.sigma ** 2 == pytest.approx(np.mean(diff ** 2), abs=1e-14)

    def test_antisymmetry(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        a = dr_counterfactual_mean(sample, nuis, 1, 1)
        b = dr_counterfactual_mean(sample, nuis, 0, 1)
        assert treatment_effect(a, b).theta == -treatment_effect(b, a).theta

    def test_group_mismatch_raises(self):
        sample = make_sample(SIX_Y, SIX_S, n_levels=2)
        nuis = nuisance_from(SIX_VS, SIX_P, SIX_S)
        a = dr_counterfactual_mean(sample, nuis, 1, 1)
        b = dr_counterfactual_mean(sample, nuis, 0, 0)
        with pytest.raises(ContractError):
            treatment_effect(a, b)


def full_neighborhoods(n):
    return [Neighborhood(center=i, members=np.arange(n), radius=1.0)
            for i in range(n)]


class TestCounterfactualCdf:
    def test_boundary_values_with_exact_fits(self, rng):
        n = 20
        y = rng.standard_normal(n)
        s = rng.integers(0, 2, n)
        s[:2] = [0, 1]
        sample = make_sample(y, s, n_levels=2)
        nuis = nuisance_from([[0.0, 0.0]] * n, [[0.5, 0.5]] * n, s)
        tau = np.array([y.min() - 1.0, y.max() + 1.0])
        proc = counterfactual_cdf(sample, full_neighborhoods(n), 0, 1, tau,
                                  nuisance=nuis, outcome_backend="local_average")
        assert proc.theta_raw[0] == pytest.approx(0.0, abs=1e-14)
        assert proc.theta_raw[1] == pytest.approx(1.0, abs=1e-14)

    def test_same_level_equals_empirical_cdf(self, rng):
        n = 30
        y = rng.standard_normal(n)
        s = rng.integers(0, 2, n)
        s[:2] = [0, 1]
        sample = make_sample(y, s, n_levels=2)
        nuis = nuisance_from(rng.uniform(0.1, 0.9, (n, 2)),
                             np.full((n, 2), 0.5), s)
        tau = np.sort(y)
        proc = counterfactual_cdf(sample, full_neighborhoods(n), 1, 1, tau,
                                  nuisance=nuis, outcome_backend="local_average")
        treated = y[s == 1]
        ecdf = np.array([np.mean(treated <= t) for t in tau])
        assert np.max(np.abs(proc.theta_raw - ecdf)) < 1e-12
        assert np.max(np.abs(proc.theta_of_tau - ecdf)) < 1e-12

    def test_monotonized_and_clipped(self, rng):
        n = 40
        y = rng.standard_normal(n)
        s = rng.integers(0, 2, n)
        s[:2] = [0, 1]
        sample = make_sample(y, s, n_levels=2)
        nuis = nuisance_from(rng.uniform(-0.2, 1.2, (n, 2)),
                             rng.uniform(0.05, 0.95, (n, 2)), s)
        proc = counterfactual_cdf(sample, full_neighborhoods(n), 0, 1,
                                  nuisance=nuis, outcome_backend="local_average")
        assert np.all(np.diff(proc.theta_of_tau) >= 0)
        assert proc.theta_of_tau.min() >= 0.0
        assert proc.theta_of_tau.max() <= 1.0

    def test_influence_columns_mean_zero(self, rng):
        n = 25
        y = rng.standard_normal(n)
        s = rng.integers(0, 2, n)
        s[:2] = [0, 1]
        sample = make_sample(y, s, n_levels=2)
        nuis = nuisance_from(rng.uniform(0, 1, (n, 2)),
                             rng.uniform(0.2, 0.8, (n, 2)), s)
        proc = counterfactual_cdf(sample, full_neighborhoods(n), 0, 1,
                                  nuisance=nuis, outcome_backend="local_average")
        assert np.max(np.abs(proc.influence_of_tau.mean(axis=0))) < 1e-10

    def test_empty_grid_rejected(self, rng):
        n = 10
        y = rng.standard_normal(n)
        s = np.array([0, 1] * 5)
        sample = make_sample(y, s, n_levels=2)
        nuis = nuisance_from(np.zeros((n, 2)), np.full((n, 2), 0.5), s)
        with pytest.raises(ContractError):
            counterfactual_cdf(sample, full_neighborhoods(n), 0, 1,
                               np.array([]), nuisance=nuis,
                               outcome_backend="local_average")

    def test_default_grid_range(self, rng):
        y = rng.standard_normal(200)
        grid = default_tau_grid(y)
        lo, hi = np.quantile(y, [0.1, 0.9])
        assert grid.min() >= lo and grid.max() <= hi
        thinned = default_tau_grid(y, max_points=11)
        assert thinned.size <= 11


class TestMultiplierBootstrap:
    def test_zero_influence_degenerates(self):
        draws, band = multiplier_bootstrap(np.zeros((5, 3)), 50, "rademacher",
                                           7, theta=np.array([0.1, 0.2, 0.3]),
                                           sigma=np.zeros(3))
        assert np.all(draws.sup_stats == 0.0)
        assert band[:, 0] == pytest.approx([0.1, 0.2, 0.3])
        assert band[:, 1] == pytest.approx([0.1, 0.2, 0.3])
        assert draws.excluded_taus == (0, 1, 2)

    def test_single_draw_hand_computation(self):
        phi = np.array([[1.0, -0.5], [0.5, 2.0], [-1.5, 0.25]])
        theta = np.array([0.4, 0.6])
        sigma = np.array([0.8, 1.2])
        seed = 31
        draws, band = multiplier_bootstrap(phi, 1, "rademacher", seed,
                                           theta=theta, sigma=sigma)
        omega = np.random.default_rng(seed).integers(
            0, 2, size=(1, 3)).astype(float) * 2.0 - 1.0
        want = max(abs(sum(omega[0, i] * phi[i, t] for i in range(3)))
                   / np.sqrt(3) / sigma[t] for t in range(2))
        assert draws.sup_stats[0] == pytest.approx(want, abs=1e-14)
        q = draws.sup_stats[0]
        assert band[:, 1] == pytest.approx(theta + q * sigma / np.sqrt(3))

    def test_rademacher_weights_center(self):
        n, n_draws = 64, 500
        phi = np.ones((n, 1))
        draws, _ = multiplier_bootstrap(phi, n_draws, "rademacher", 5,
                                        theta=np.zeros(1), sigma=np.ones(1))
        rng = np.random.default_rng(5)
        omega = rng.integers(0, 2, size=(n_draws, n)).astype(float) * 2 - 1
        sums = omega.sum(axis=1) / np.sqrt(n)
        assert abs(np.mean(sums)) < 3.0 / np.sqrt(n_draws)

    @pytest.mark.parametrize("dist", ["rademacher", "mammen", "gaussian"])
    def test_bitwise_determinism(self, dist, rng):
        phi = rng.standard_normal((12, 4))
        theta, sigma = rng.standard_normal(4), np.abs(rng.standard_normal(4)) + 0.1
        a, _ = multiplier_bootstrap(phi, 100, dist, 99, theta=theta, sigma=sigma)
        b, _ = multiplier_bootstrap(phi, 100, dist, 99, theta=theta, sigma=sigma)
        assert np.array_equal(a.sup_stats, b.sup_stats)

    def test_mammen_moments(self):
        rng = np.random.default_rng(0)
        from nfcausal.estimators import _multiplier_weights
        w = _multiplier_weights("mammen", (200000,), rng)
        assert abs(w.mean()) < 0.01
        assert abs(w.var() - 1.0) < 0.02

    def test_band_attaches_to_process(self, rng):
        n = 30
        y = rng.standard_normal(n)
        s = rng.integers(0, 2, n)
        s[:2] = [0, 1]
        sample = make_sample(y, s, n_levels=2)
        nuis = nuisance_from(rng.uniform(0, 1, (n, 2)),
                             rng.uniform(0.2, 0.8, (n, 2)), s)
        proc = counterfactual_cdf(sample, full_neighborhoods(n), 0, 1,
                                  nuisance=nuis, outcome_backend="local_average")
        banded, draws = attach_uniform_band(proc, n_draws=100, seed=11)
        assert banded.band_95.shape == (proc.tau_grid.size, 2)
        assert np.all(banded.band_95[:, 0] <= banded.theta_of_tau)
        assert np.all(banded.band_95[:, 1] >= banded.theta_of_tau)


def toy_process(theta_raw, influence, tau=None):
    theta_raw = np.asarray(theta_raw, float)
    tau = np.arange(theta_raw.size, dtype=float) if tau is None else tau
    return CdfProcess(tau_grid=tau,
                      theta_of_tau=np.clip(np.sort(theta_raw), 0, 1),
                      influence_of_tau=np.asarray(influence, float),
                      theta_raw=theta_raw)


class TestSdTest:
    def test_identical_processes_statistic_zero(self, rng):
        infl = rng.standard_normal((9, 3))
        infl -= infl.mean(axis=0)
        proc = toy_process([0.2, 0.4, 0.6], infl)
        res = sd_test(proc, proc, 200, 3)
        assert res.statistic == 0.0
        assert not res.reject

    def test_dominated_curve_statistic_zero(self, rng):
        infl_a = rng.standard_normal((9, 3))
        infl_b = rng.standard_normal((9, 3))
        a = toy_process([0.1, 0.2, 0.3], infl_a)
        b = toy_process([0.2, 0.35, 0.5], infl_b)
        res = sd_test(a, b, 200, 4)
        assert res.statistic == 0.0

    def test_shifted_curve_statistic(self, rng):
        n = 16
        infl = rng.standard_normal((n, 2))
        delta = 0.12
        b = toy_process([0.3, 0.5], infl)
        a = toy_process([0.3 + delta, 0.5 + delta], infl)
        res = sd_test(a, b, 100, 5)
        assert res.statistic == pytest.approx(np.sqrt(n) * delta, abs=1e-12)

    def test_grid_mismatch_raises(self, rng):
        infl = rng.standard_normal((4, 2))
        a = toy_process([0.1, 0.2], infl, tau=np.array([0.0, 1.0]))
        b = toy_process([0.1, 0.2], infl, tau=np.array([0.0, 2.0]))
        with pytest.raises(ContractError):
            sd_test(a, b, 50, 1)
