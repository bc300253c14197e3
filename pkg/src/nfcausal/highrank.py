"""Partialling high-rank covariates out of the measurements.

When the measurement equation carries linear high-rank covariate terms on top
of the latent factor structure, their common slope is estimated before latent
extraction: on the first two row folds, the factor structure of every
covariate and of the measurements themselves is removed by the local
principal subspace approximation (matching on fold 1, PCA on fold 2); the
slope is the regression of the measurement residuals on the stacked covariate
residuals, one observation per (unit, fold-2 row) pair.  The adjusted panel
x - W theta_hat then feeds the main pipeline, matching on fold 2 and running
PCA on fold 3.
"""

from dataclasses import dataclass

import numpy as np

from .data import MeasurementPanel, RowSplit
from .exceptions import HighRankDegeneracyError, SizeError
from .local_pca import predicted_columns, run_lpsa
from .matching import DistanceMetric

__all__ = ["HighRankAdjustment", "partial_out_high_rank"]

_SINGULAR_REL_TOL = 1e-8


@dataclass(frozen=True)
class HighRankAdjustment:
    """Estimated covariate slopes and the covariate-adjusted measurements."""

    theta_hat: np.ndarray            # d_w slopes
    residual_panel: np.ndarray       # T x n adjusted measurements
    residuals_w: tuple               # per covariate: T2 x n residuals
    residual_x: np.ndarray           # T2 x n measurement residuals


def partial_out_high_rank(panel: MeasurementPanel, split: RowSplit, k: int,
                          d_lambda_w: int, d_lambda_x: int,
                          metric: DistanceMetric = DistanceMetric()):
    """Estimate the high-rank slopes and adjust the panel.

    Returns ``(HighRankAdjustment, downstream_split)`` where the downstream
    split designates fold 2 for matching and fold 3 for PCA of the adjusted
    panel.  ``d_lambda_w`` applies to every covariate equation and
    ``d_lambda_x`` to the measurement equation.  A singular stacked residual
    Gram matrix (covariates without genuine high-rank variation) raises.
    """
    if panel.w is None or panel.d_w == 0:
        raise SizeError("partial_out_high_rank requires high-rank covariates")
    if split.t_3 is None:
        raise SizeError("the high-rank flow needs a three-fold row split")
    t1, t2 = split.t_dagger, split.t_ddagger

    resid_w = []
    for wmat in panel.w:
        nbh, fits = run_lpsa(wmat[t1, :], wmat[t2, :], k, d_lambda_w, metric)
        resid_w.append(wmat[t2, :] - predicted_columns(wmat[t2, :], nbh, fits))
    nbh, fits = run_lpsa(panel.x[t1, :], panel.x[t2, :], k, d_lambda_x, metric)
    resid_x = panel.x[t2, :] - predicted_columns(panel.x[t2, :], nbh, fits)

    # one observation per (unit, fold-2 row): regress u-residual on e-residuals
    d_w = len(resid_w)
    n_obs = resid_x.size
    stacked = np.column_stack([r.ravel() for r in resid_w])
    response = resid_x.ravel()
    gram = stacked.T @ stacked / n_obs
    moment = stacked.T @ response / n_obs
    eigvals = np.linalg.eigvalsh(gram)
    w_scale = max(float(np.mean(np.square(wmat))) for wmat in panel.w)
    if eigvals[0] <= _SINGULAR_REL_TOL * max(eigvals[-1], w_scale):
        raise HighRankDegeneracyError(
            "stacked covariate residuals are (numerically) singular: the "
            "high-rank covariates carry no variation beyond the factor "
            "structure"
        )
    theta_hat = np.linalg.solve(gram, moment)

    adjusted = panel.x.copy()
    for ell in range(d_w):
        adjusted -= theta_hat[ell] * panel.w[ell]
    downstream = RowSplit(t_dagger=t2, t_ddagger=split.t_3)
    adjustment = HighRankAdjustment(
        theta_hat=theta_hat, residual_panel=adjusted,
        residuals_w=tuple(resid_w), residual_x=resid_x,
    )
    return adjustment, downstream
