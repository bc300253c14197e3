"""Scikit-learn style front end for the full estimation pipeline.

``LatentFactorDR`` wires the three stages together behind a ``fit`` call:
row-split and K-nearest-neighbor matching, per-neighborhood PCA, local
factor-augmented regression of outcomes and treatment indicators, and the
doubly-robust counterfactual estimators with their inference apparatus.
Post-fit queries (counterfactual means, treatment effects, counterfactual
CDFs, dominance tests, diagnostics) run off the stored neighborhoods and
nuisance fits.

The measurement matrix is passed samples-as-rows, (n_units, n_periods), in
keeping with estimator-API conventions; internally units live in columns.
"""

import math

import numpy as np
from sklearn.base import BaseEstimator

from . import estimators as est
from .data import MeasurementPanel, RowSplit, TreatmentSample, make_row_split
from .exceptions import DataError, EstimationError, SizeError
from .highrank import partial_out_high_rank
from .local_pca import (EigenDiagnostics, estimate_num_latent,
                        local_eigenvalues, run_lpsa)
from .matching import (DistanceMetric, knn, matching_diagnostics,
                       pairwise_distances)
from .regression import estimate_nuisances
from .tuning import cross_validate_k, default_k_candidates, dpi_k

__all__ = ["LatentFactorDR"]


class LatentFactorDR(BaseEstimator):
    """Doubly-robust treatment effects under noisily measured confounders.

    Confounders are never observed directly; a large panel of noisy
    measurements with a possibly nonlinear factor structure stands in for
    them.  Units are matched on one half of the measurement rows, local PCA
    on the other half supplies generated regressors, and counterfactual
    means E[y(j) | s = j'] are estimated with an augmented inverse-propensity
    score that is consistent when either nuisance fit is adequate.

    Parameters
    ----------
    n_neighbors : int, "cv", "dpi", or None
        Number of nearest neighbors K.  None selects the MSE-rate default
        (n^(2m/(2m+d_alpha)) for the local-linear backend, n^(2/3) for the
        local-constant one); "cv" cross-validates over ``cv_candidates``;
        "dpi" applies the direct plug-in rule from a pilot at ``k_initial``.
    backend : {"local_linear", "local_constant"}
        local_linear runs the split + local-PCA + least-squares pipeline;
        local_constant matches on all rows and uses neighborhood averages.
    d_lambda : int or None
        Number of local principal components; None uses the fixed-order count
        C(m_order - 1 + d_alpha, d_alpha).
    d_alpha : int or "auto"
        Number of latent confounders; "auto" counts the second-magnitude tier
        of the averaged local eigenvalue spectrum at a generous pilot K and
        raises when no tier stands out at ``eigen_ratio_threshold``.
    m_order : int
        Approximation order of the fixed-order rule (2 = local linear).
    metric : {"pseudo_max", "euclidean"}
        Matching distance.
    split_scheme : {"random", "contiguous_halves", "none"}
        Row split separating matching rows from PCA rows.  "none" reuses all
        rows for both (matching-only confidence), "random" requires
        ``random_state``.
    propensity_backend : {"local_ls", "local_average", "local_logit"} or None
        None picks local_ls for local_linear and local_average for
        local_constant.
    outcome_link : {"identity", "logit"}
        Link for the outcome regression (logit runs the quasi-likelihood fit).
    clip : float
        Propensity clipping bound, applied as [clip, 1 - clip].
    add_intercept : bool
        Add an explicit intercept column to the local regressions (the
        leading principal component normally plays that role).
    k_initial : int or None
        Pilot K for the DPI rule; None uses 1.5 times the rate default.
    cv_candidates : sequence of int, or None
        Candidate K grid for cross-validation; None uses {0.5, 1, 1.5, 2}
        times the rate default.
    cv_folds : int
        Number of cross-validation folds.
    tuning_level : int
        Treatment level whose outcome prediction error drives K selection.
    eigen_ratio_threshold : float
        Successive-eigenvalue ratio that closes the second tier when
        ``d_alpha="auto"``.
    random_state : int or None
        Seed for the random row split, fold assignment, and any tuning
        randomness.  Required by the random split scheme.

    Attributes
    ----------
    k_ : int
        Number of neighbors actually used.
    d_lambda_ : int or None
        Components extracted per neighborhood (None for local_constant).
    row_split_ : RowSplit or None
        Rows used for matching and PCA.
    neighborhoods_ : list of Neighborhood
    factor_fits_ : list of LocalFactorFit or None
    nuisance_ : NuisanceFits
    highrank_ : HighRankAdjustment or None
    tuning_ : TuningResult or None
    """

    def __init__(self, n_neighbors=None, backend="local_linear",
                 d_lambda=None, d_alpha=1, m_order=2, metric="pseudo_max",
                 split_scheme="random", propensity_backend=None,
                 outcome_link="identity", clip=0.01, add_intercept=False,
                 k_initial=None, cv_candidates=None, cv_folds=5,
                 tuning_level=0, eigen_ratio_threshold=5.0,
                 random_state=None):
        self.n_neighbors = n_neighbors
        self.backend = backend
        self.d_lambda = d_lambda
        self.d_alpha = d_alpha
        self.m_order = m_order
        self.metric = metric
        self.split_scheme = split_scheme
        self.propensity_backend = propensity_backend
        self.outcome_link = outcome_link
        self.clip = clip
        self.add_intercept = add_intercept
        self.k_initial = k_initial
        self.cv_candidates = cv_candidates
        self.cv_folds = cv_folds
        self.tuning_level = tuning_level
        self.eigen_ratio_threshold = eigen_ratio_threshold
        self.random_state = random_state

    # ------------------------------------------------------------------
    # fitting
    # ------------------------------------------------------------------

    def fit(self, X, y, treatment=None, controls=None, high_rank=None):
        """Fit the full pipeline.

        Parameters
        ----------
        X : ndarray, shape (n_units, n_periods)
            Noisy measurements, one row per unit.
        y : ndarray, shape (n_units,)
            Observed outcomes.
        treatment : ndarray, shape (n_units,)
            Treatment labels in {0, ..., J}.
        controls : ndarray, shape (n_units, d_z), optional
        high_rank : sequence of ndarray, each (n_units, n_periods), optional
            High-rank covariates to be partialled out of the measurements.
        """
        if treatment is None:
            raise DataError("fit requires the treatment labels")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("X must be 2-d, units in rows")
        w = None
        if high_rank is not None:
            w = [np.asarray(h, dtype=np.float64).T for h in high_rank]
        panel = MeasurementPanel(X.T, w=w)
        sample = TreatmentSample(y, treatment, z=controls)
        return self.fit_panel(panel, sample)

    def fit_panel(self, panel: MeasurementPanel, sample: TreatmentSample):
        """Fit from an already validated (panel, sample) pair."""
        if sample.n_units != panel.n_units:
            raise SizeError("panel and sample disagree on the number of units")
        if self.backend not in ("local_linear", "local_constant"):
            raise DataError(f"unknown backend {self.backend!r}")
        metric = (self.metric if isinstance(self.metric, DistanceMetric)
                  else DistanceMetric(kind=self.metric))
        self.metric_ = metric
        self.panel_ = panel
        self.sample_ = sample
        self.n_features_in_ = panel.n_rows

        self.d_alpha_ = None if self.d_alpha == "auto" else int(self.d_alpha)
        self.highrank_ = None
        split = self._resolve_split(panel)
        if panel.w is not None and self.backend == "local_linear":
            if self.d_alpha_ is None:
                raise DataError("the high-rank flow needs an explicit d_alpha")
            pilot_k = self._rate_default(sample.n_units)
            d_lx = self._resolve_d_lambda()
            self.highrank_, split = partial_out_high_rank(
                panel, split, pilot_k, d_lambda_w=d_lx, d_lambda_x=d_lx,
                metric=metric)
            x_source = self.highrank_.residual_panel
        else:
            x_source = panel.x
        self.row_split_ = split

        if split is None:
            x_dagger = x_ddagger = x_source
        else:
            x_dagger = x_source[split.t_dagger, :]
            x_ddagger = x_source[split.t_ddagger, :]
        self._x_dagger_, self._x_ddagger_ = x_dagger, x_ddagger

        if self.d_alpha_ is None:
            self.d_alpha_ = self._estimate_d_alpha(x_dagger, x_ddagger, metric)
        self.tuning_ = None
        effective_panel = (panel if self.highrank_ is None
                           else MeasurementPanel(x_source))
        self.k_ = self._resolve_k(sample, effective_panel, split, metric)

        if self.backend == "local_linear":
            # auto-derived component counts are capped to the rank bound;
            # an explicit d_lambda is taken literally and may raise below
            cap = (None if self.d_lambda is not None
                   else min(x_ddagger.shape[0], self.k_))
            self.d_lambda_ = self._resolve_d_lambda(cap=cap)
            self.neighborhoods_, self.factor_fits_ = run_lpsa(
                x_dagger, x_ddagger, self.k_, self.d_lambda_, metric)
            loadings = [f.loadings for f in self.factor_fits_]
            outcome_backend = "local_ls"
        else:
            self.d_lambda_ = None
            self.neighborhoods_ = knn(x_dagger, self.k_, metric)
            self.factor_fits_ = None
            loadings = None
            outcome_backend = "local_average"
        self._loadings_ = loadings

        propensity = self.propensity_backend
        if propensity is None:
            propensity = "local_ls" if loadings is not None else "local_average"
        self._outcome_backend_ = outcome_backend
        self.nuisance_ = estimate_nuisances(
            sample, self.neighborhoods_, loadings,
            outcome_backend=outcome_backend,
            propensity_backend=propensity,
            outcome_link=self.outcome_link, clip=self.clip,
            add_intercept=self.add_intercept)
        return self

    def _rate_default(self, n, scale=1.0):
        if self.backend == "local_linear":
            exponent = 2 * self.m_order / (2 * self.m_order + self.d_alpha_)
        else:
            exponent = 2.0 / 3.0
        return max(2, min(n, int(math.floor(scale * n ** exponent + 0.5))))

    def _resolve_d_lambda(self, cap=None):
        if self.d_lambda is not None:
            d_lam = int(self.d_lambda)
        else:
            d_lam = math.comb(self.m_order - 1 + self.d_alpha_, self.d_alpha_)
        if cap is not None:
            d_lam = min(d_lam, cap)
        return d_lam

    def _estimate_d_alpha(self, x_dagger, x_ddagger, metric):
        """Tier rule on the averaged local spectrum at a generous pilot K."""
        n = x_dagger.shape[1]
        pilot_k = min(n, max(20, int(math.floor(1.5 * n ** (2 / 3) + 0.5))))
        neighborhoods = knn(x_dagger, pilot_k, metric)
        q = min(8, pilot_k, x_ddagger.shape[0])
        gram = x_ddagger.T @ x_ddagger
        spectra = np.stack([
            local_eigenvalues(x_ddagger, nb, q, gram=gram)
            for nb in neighborhoods])
        diag = EigenDiagnostics(np.sort(spectra.mean(axis=0))[::-1])
        result = estimate_num_latent(diag, self.eigen_ratio_threshold)
        if result.undetermined:
            raise EstimationError(
                "no eigenvalue tier stands out at ratio threshold "
                f"{self.eigen_ratio_threshold}; set d_alpha explicitly "
                f"(averaged spectrum: {np.round(result.spectrum, 4)})"
            )
        return result.d_alpha

    def _resolve_split(self, panel):
        if self.backend == "local_constant":
            return None
        if panel.w is not None:
            return make_row_split(panel.n_rows, "thirds",
                                  seed=self._require_seed("thirds split"))
        if self.split_scheme == "none":
            return None
        if self.split_scheme == "contiguous_halves":
            return make_row_split(panel.n_rows, "contiguous_halves")
        if self.split_scheme == "random":
            return make_row_split(panel.n_rows, "random",
                                  seed=self._require_seed("random split"))
        raise DataError(f"unknown split scheme {self.split_scheme!r}")

    def _require_seed(self, what):
        if self.random_state is None:
            raise DataError(f"the {what} requires random_state")
        return int(self.random_state)

    def _resolve_k(self, sample, panel, split, metric):
        n = sample.n_units
        if self.n_neighbors is None:
            return self._rate_default(n)
        if isinstance(self.n_neighbors, (int, np.integer)):
            if not 1 <= self.n_neighbors <= n:
                raise SizeError(f"n_neighbors={self.n_neighbors} out of [1, {n}]")
            return int(self.n_neighbors)
        d_lam = self._resolve_d_lambda() if self.backend == "local_linear" else 2
        if self.n_neighbors == "dpi":
            k_ini = self.k_initial or self._rate_default(n, scale=1.5)
            self.tuning_ = dpi_k(
                sample, panel, self.tuning_level, k_ini, self.d_alpha_,
                self.m_order, metric=metric, row_split=split,
                add_intercept=self.add_intercept)
            return self.tuning_.k_selected
        if self.n_neighbors == "cv":
            cands = self.cv_candidates or default_k_candidates(
                n, self.d_alpha_, self.m_order)
            seed = self.random_state if self.random_state is not None else 0
            self.tuning_ = cross_validate_k(
                sample, panel, self.tuning_level, cands, self.cv_folds,
                seed, metric=metric,
                row_split=split if self.backend == "local_linear" else None,
                d_lambda=d_lam, add_intercept=self.add_intercept)
            return self.tuning_.k_selected
        raise DataError(f"cannot interpret n_neighbors={self.n_neighbors!r}")

    # ------------------------------------------------------------------
    # post-fit queries
    # ------------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "nuisance_"):
            raise DataError("this estimator is not fitted yet; call fit first")

    def counterfactual_mean(self, j, j_prime):
        """Doubly-robust estimate of E[y(j) | s = j']."""
        self._check_fitted()
        return est.dr_counterfactual_mean(self.sample_, self.nuisance_,
                                          j, j_prime)

    def treatment_effect(self, j_prime, baseline=0):
        """Average effect of level j' against ``baseline`` on group j'."""
        self._check_fitted()
        own = est.dr_counterfactual_mean(self.sample_, self.nuisance_,
                                         j_prime, j_prime)
        counter = est.dr_counterfactual_mean(self.sample_, self.nuisance_,
                                             baseline, j_prime)
        return est.treatment_effect(own, counter)

    def counterfactual_cdf(self, j, j_prime, tau_grid=None, *, band=True,
                           n_draws=500, weights_dist="rademacher", seed=0):
        """Counterfactual distribution process, with a uniform band by default."""
        self._check_fitted()
        process = est.counterfactual_cdf(
            self.sample_, self.neighborhoods_, j, j_prime, tau_grid,
            nuisance=self.nuisance_, loadings_by_unit=self._loadings_,
            outcome_backend=self._outcome_backend_,
            add_intercept=self.add_intercept)
        if band:
            process, _ = est.attach_uniform_band(
                process, n_draws=n_draws, weights_dist=weights_dist, seed=seed)
        return process

    def sd_test(self, j_a, j_b, j_prime, tau_grid=None, n_draws=500, seed=0,
                weights_dist="rademacher"):
        """One-sided test of theta_{j_a,j'}(tau) <= theta_{j_b,j'}(tau)."""
        self._check_fitted()
        if tau_grid is None:
            tau_grid = est.default_tau_grid(self.sample_.y)
        proc_a = self.counterfactual_cdf(j_a, j_prime, tau_grid, band=False)
        proc_b = self.counterfactual_cdf(j_b, j_prime, tau_grid, band=False)
        return est.sd_test(proc_a, proc_b, n_draws, seed,
                           weights_dist=weights_dist)

    def matching_diagnostics(self):
        """Normalized matching discrepancies and per-group summaries."""
        self._check_fitted()
        dist = pairwise_distances(self._x_dagger_, self.metric_)
        return matching_diagnostics(self.neighborhoods_, dist,
                                    treatment=self.sample_.s)

    def eigen_diagnostics(self, unit, q=10):
        """Leading local eigenvalues for one unit's neighborhood (scree)."""
        self._check_fitted()
        vals = local_eigenvalues(self._x_ddagger_, self.neighborhoods_[unit], q)
        return EigenDiagnostics(leading_eigenvalues=vals, center=unit)
