"""Doubly-robust counterfactual means, distributions, and uniform inference.

The counterfactual mean theta_{j,j'} = E[y(j) | s = j'] is estimated by the
augmented inverse-propensity score

    theta_hat = mean_i [ d_i(j') vs_ij / p_j'
                         + (p_ij' / p_j') d_i(j) (y_i - vs_ij) / p_ij ],

with the plug-in variance formed from the two nonnegative terms of the score
and per-unit influence values

    phi_i = d_i(j') (vs_ij - theta_hat) / p_j'
            + (p_ij' / p_j') d_i(j) (y_i - vs_ij) / p_ij,

whose sample mean is identically zero at the returned estimate.  Replacing
y by the indicator 1(y <= tau) and refitting the outcome regression per tau
yields the counterfactual distribution process; uniform bands and the
one-sided stochastic-dominance test are obtained from a multiplier bootstrap
of the estimated influence processes.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .data import (BootstrapDraws, CdfProcess, DrEstimate, NuisanceFits,
                   TreatmentSample, Z_975)
from .exceptions import ContractError, DataError, EstimationError
from .regression import fit_outcome_matrix

__all__ = ["dr_counterfactual_mean", "dr_variance", "influence_values",
           "treatment_effect", "default_tau_grid", "counterfactual_cdf",
           "multiplier_bootstrap", "attach_uniform_band", "sd_test",
           "SdTestResult"]

#: fraction of level-j units with clipped propensities that triggers a warning
CLIP_WARN_FRACTION = 0.2


def _require_fitted_levels(nuisance, j, j_prime):
    for level, cols in ((j, (nuisance.varsigma_hat, nuisance.p_hat)),
                        (j_prime, (nuisance.p_hat,))):
        for mat in cols:
            if not np.all(np.isfinite(mat[:, level])):
                raise EstimationError(
                    f"no fitted nuisance for treatment level {level}; "
                    "that level has no units"
                )


def _score_terms(sample, nuisance, j, j_prime, outcome=None, varsigma=None):
    """Imputation and weighting terms of the doubly-robust score, per unit."""
    d_j = sample.indicators(j)
    d_jp = sample.indicators(j_prime)
    p_jp_bar = nuisance.p_marginal[j_prime]
    if p_jp_bar <= 0:
        raise EstimationError(
            f"estimand undefined: no unit has treatment level {j_prime}"
        )
    _require_fitted_levels(nuisance, j, j_prime)
    vs = nuisance.varsigma_hat[:, j] if varsigma is None else varsigma
    y = sample.y if outcome is None else outcome
    imputation = d_jp * vs / p_jp_bar
    weighting = (nuisance.p_hat[:, j_prime] / p_jp_bar) \
        * d_j * (y - vs) / nuisance.p_hat[:, j]
    return imputation, weighting, d_j, d_jp, p_jp_bar


def dr_counterfactual_mean(sample: TreatmentSample, nuisance: NuisanceFits,
                           j: int, j_prime: int) -> DrEstimate:
    """Doubly-robust estimate of E[y(j) | s = j'] with plug-in inference.

    Emits a loud warning when 20% or more of the level-j units run on a
    clipped propensity; the fraction is recorded in the diagnostics either
    way.
    """
    sample.require_level(j_prime)
    imputation, weighting, d_j, _, _ = _score_terms(sample, nuisance, j, j_prime)
    theta = float(np.mean(imputation + weighting))
    sigma2 = dr_variance(sample, nuisance, theta, j, j_prime)
    sigma = float(np.sqrt(sigma2))
    phi = influence_values(sample, nuisance, theta, j, j_prime)
    n = sample.n_units
    half = Z_975 * sigma / np.sqrt(n)
    clipped = nuisance.clipped_fraction(j, mask=d_j.astype(bool))
    if clipped >= CLIP_WARN_FRACTION:
        warnings.warn(
            f"{clipped:.0%} of level-{j} units use a clipped propensity for "
            f"theta_({j},{j_prime}); overlap is weak in this sample",
            stacklevel=2,
        )
    return DrEstimate(
        theta=theta, sigma=sigma, influence=phi,
        ci_95=(theta - half, theta + half), j=j, j_prime=j_prime,
        diagnostics={"clipped_fraction": clipped},
    )


def dr_variance(sample: TreatmentSample, nuisance: NuisanceFits,
                theta_hat: float, j: int, j_prime: int) -> float:
    """Plug-in variance: imputation spread plus reweighted residual spread."""
    d_j = sample.indicators(j)
    d_jp = sample.indicators(j_prime)
    p_jp_bar = nuisance.p_marginal[j_prime]
    if p_jp_bar <= 0:
        raise EstimationError(
            f"estimand undefined: no unit has treatment level {j_prime}"
        )
    _require_fitted_levels(nuisance, j, j_prime)
    vs = nuisance.varsigma_hat[:, j]
    term1 = d_jp * (vs - theta_hat) ** 2 / p_jp_bar ** 2
    term2 = nuisance.p_hat[:, j_prime] ** 2 * d_j * (sample.y - vs) ** 2 \
        / (p_jp_bar ** 2 * nuisance.p_hat[:, j] ** 2)
    return float(np.mean(term1) + np.mean(term2))


def influence_values(sample: TreatmentSample, nuisance: NuisanceFits,
                     theta_hat: float, j: int, j_prime: int) -> np.ndarray:
    """Per-unit influence values; they average to zero at the DR estimate."""
    imputation, weighting, _, d_jp, p_jp_bar = _score_terms(
        sample, nuisance, j, j_prime)
    return imputation - d_jp * theta_hat / p_jp_bar + weighting


def treatment_effect(theta_a: DrEstimate, theta_b: DrEstimate) -> DrEstimate:
    """Contrast of two counterfactual means over the same treatment group.

    The variance comes from the differenced per-unit influence values, which
    carries the covariance between the two estimates.
    """
    if theta_a.n_units != theta_b.n_units:
        raise ContractError("contrasted estimates come from different samples")
    if theta_a.j_prime != theta_b.j_prime:
        raise ContractError(
            "contrasted estimates condition on different treatment groups"
        )
    effect = theta_a.theta - theta_b.theta
    diff = theta_a.influence - theta_b.influence
    sigma = float(np.sqrt(np.mean(diff ** 2)))
    n = diff.shape[0]
    half = Z_975 * sigma / np.sqrt(n)
    return DrEstimate(
        theta=effect, sigma=sigma, influence=diff,
        ci_95=(effect - half, effect + half),
        j=None, j_prime=theta_a.j_prime,
        diagnostics={"contrast": (theta_a.j, theta_b.j)},
    )


def default_tau_grid(y, max_points: int = None) -> np.ndarray:
    """Observed outcome values between the 0.1 and 0.9 sample quantiles.

    ``max_points`` thins the grid to evenly spaced quantiles when the sample
    is large; the endpoints of the restricted range are always kept.
    """
    y = np.asarray(y, dtype=np.float64)
    lo, hi = np.quantile(y, [0.1, 0.9])
    grid = np.unique(y[(y >= lo) & (y <= hi)])
    if grid.size == 0:
        raise ContractError("empty tau grid: outcome has no interior values")
    if max_points is not None and grid.size > max_points:
        take = np.unique(np.linspace(0, grid.size - 1, max_points).round().astype(int))
        grid = grid[take]
    return grid


def counterfactual_cdf(sample: TreatmentSample, neighborhoods, j: int,
                       j_prime: int, tau_grid=None, *, nuisance: NuisanceFits,
                       loadings_by_unit=None, outcome_backend: str = "local_ls",
                       add_intercept: bool = False) -> CdfProcess:
    """Counterfactual distribution P(y(j) <= tau | s = j') over a grid.

    For every tau the outcome regression is rerun with the transformed
    outcome 1(y <= tau) on the same neighborhoods and loadings (one shared
    factorization per unit across the whole grid); propensities are reused
    from ``nuisance``.  The reported curve is monotonized by sorting and
    clipped to [0, 1]; the raw curve, which the influence values refer to,
    rides along.
    """
    if tau_grid is None:
        tau = default_tau_grid(sample.y)
    else:
        tau = np.asarray(tau_grid, dtype=np.float64)
        if tau.ndim != 1 or tau.size == 0:
            raise ContractError("tau_grid must be a nonempty 1-d array")
        if np.any(np.diff(tau) < 0):
            raise ContractError("tau_grid must be sorted")
    indicators = (sample.y[:, None] <= tau[None, :]).astype(np.float64)
    if outcome_backend == "local_average" or loadings_by_unit is None:
        fitted, _ = fit_outcome_matrix(sample, neighborhoods, None, j,
                                       indicators)
    elif outcome_backend == "local_ls":
        fitted, _ = fit_outcome_matrix(sample, neighborhoods, loadings_by_unit,
                                       j, indicators, add_intercept=add_intercept)
    else:
        raise DataError(f"unknown outcome backend {outcome_backend!r}")

    d_j = sample.indicators(j)[:, None]
    d_jp = sample.indicators(j_prime)[:, None]
    p_jp_bar = nuisance.p_marginal[j_prime]
    if p_jp_bar <= 0:
        raise EstimationError(
            f"estimand undefined: no unit has treatment level {j_prime}"
        )
    _require_fitted_levels(nuisance, j, j_prime)
    ratio = (nuisance.p_hat[:, j_prime] / nuisance.p_hat[:, j])[:, None]
    weighting = ratio * d_j * (indicators - fitted) / p_jp_bar
    imputation = d_jp * fitted / p_jp_bar
    theta_raw = np.mean(imputation + weighting, axis=0)
    influence = imputation - d_jp * theta_raw[None, :] / p_jp_bar + weighting
    term1 = np.mean(d_jp * (fitted - theta_raw[None, :]) ** 2, axis=0) / p_jp_bar ** 2
    term2 = np.mean((ratio * d_j * (indicators - fitted)) ** 2, axis=0) / p_jp_bar ** 2
    sigma = np.sqrt(term1 + term2)
    theta_mono = np.clip(np.sort(theta_raw), 0.0, 1.0)
    return CdfProcess(
        tau_grid=tau, theta_of_tau=theta_mono, influence_of_tau=influence,
        theta_raw=theta_raw, sigma_of_tau=sigma, j=j, j_prime=j_prime,
    )


def _multiplier_weights(dist: str, shape, rng) -> np.ndarray:
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    if dist == "mammen":
        golden = np.sqrt(5.0)
        p_low = (golden + 1.0) / (2.0 * golden)
        low, high = (1.0 - golden) / 2.0, (1.0 + golden) / 2.0
        return np.where(rng.random(size=shape) < p_low, low, high)
    if dist == "gaussian":
        return rng.standard_normal(size=shape)
    raise DataError(f"unknown multiplier distribution {dist!r}")


def multiplier_bootstrap(influence, n_draws: int, weights_dist: str,
                         seed: int, theta, sigma):
    """Simulate the studentized sup process and build the uniform 95% band.

    Per draw, mean-zero unit-variance multipliers reweight the influence
    columns; the statistic is the sup over the grid of the absolute
    studentized process.  Grid points with a zero standard error are excluded
    from the studentization (recorded on the draws object) and their band
    collapses onto the point estimate.
    """
    phi = np.asarray(influence, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    if not np.all(np.isfinite(phi)):
        raise DataError("influence values must be finite")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    n, n_tau = phi.shape
    if theta.shape != (n_tau,) or sigma.shape != (n_tau,):
        raise ContractError("theta and sigma must have one entry per grid point")
    rng = np.random.default_rng(seed)
    weights = _multiplier_weights(weights_dist, (n_draws, n), rng)
    sims = weights @ phi / np.sqrt(n)
    valid = sigma > 0
    if np.any(valid):
        sup_stats = np.max(np.abs(sims[:, valid]) / sigma[valid][None, :], axis=1)
    else:
        sup_stats = np.zeros(n_draws)
    draws = BootstrapDraws(
        weights_dist=weights_dist, n_draws=n_draws, seed=seed,
        sup_stats=sup_stats,
        excluded_taus=tuple(np.flatnonzero(~valid).tolist()),
    )
    q95 = float(np.quantile(sup_stats, 0.95)) if n_draws else 0.0
    half = q95 * sigma / np.sqrt(n)
    band = np.column_stack([theta - half, theta + half])
    return draws, band


def attach_uniform_band(process: CdfProcess, n_draws: int = 500,
                        weights_dist: str = "rademacher", seed: int = 0):
    """Bootstrap a uniform band for a CDF process; returns (process, draws).

    The band is centered on the reported (monotonized) curve.
    """
    draws, band = multiplier_bootstrap(
        process.influence_of_tau, n_draws, weights_dist, seed,
        theta=process.theta_of_tau, sigma=process.sigma_of_tau,
    )
    return process.with_band(band), draws


@dataclass(frozen=True)
class SdTestResult:
    statistic: float
    critical_value: float
    reject: bool
    n_draws: int
    seed: int


def sd_test(process_a: CdfProcess, process_b: CdfProcess, n_draws: int,
            seed: int, weights_dist: str = "rademacher") -> SdTestResult:
    """One-sided sup test of H0: theta_a(tau) <= theta_b(tau) for all tau.

    The statistic is sqrt(n) times the largest positive gap between the raw
    estimated curves (floored at zero, so an everywhere-nonpositive gap
    yields exactly 0).  The critical value is the 0.95 quantile of the
    simulated supremum of the differenced influence process.
    """
    if not np.array_equal(process_a.tau_grid, process_b.tau_grid):
        raise ContractError("dominance test requires a shared tau grid")
    if process_a.n_units != process_b.n_units:
        raise ContractError("dominance test requires a shared sample")
    n = process_a.n_units
    gap = process_a.theta_raw - process_b.theta_raw
    statistic = max(0.0, float(np.sqrt(n) * np.max(gap)))
    diff = process_a.influence_of_tau - process_b.influence_of_tau
    rng = np.random.default_rng(seed)
    weights = _multiplier_weights(weights_dist, (n_draws, n), rng)
    sims = weights @ diff / np.sqrt(n)
    draw_sups = np.max(sims, axis=1)
    critical = float(np.quantile(draw_sups, 0.95))
    return SdTestResult(statistic=statistic, critical_value=critical,
                        reject=bool(statistic > critical),
                        n_draws=n_draws, seed=seed)
