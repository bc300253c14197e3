"""Per-neighborhood principal component analysis and factor-count heuristics.

For a unit's neighborhood, the T-ddagger x K submatrix of measurement columns
is factored as F L' where (1/T-ddagger) F'F = I and (1/K) L'L is diagonal with
nonincreasing diagonal -- the PCA normalization of the least-squares factor
problem.  The eigendecomposition runs on the smaller Gram matrix (K x K when
K <= T-ddagger, else T-ddagger x T-ddagger) and the other side is recovered by
multiplication.

The leading local eigenvalue plays the role of the local constant; the count
of eigenvalues in the second magnitude tier estimates the number of latent
variables, and the factor count for regression follows either a fixed-order
rule (all monomials up to a given degree) or a bias-minimizing eigenvalue
threshold.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .data import LocalFactorFit, Neighborhood
from .exceptions import DataError, EstimationError, SizeError

__all__ = ["local_pca", "local_eigenvalues", "neighborhood_matrix",
           "common_component", "EigenDiagnostics", "LatentDimensionEstimate",
           "estimate_num_latent", "select_num_factors", "run_lpsa",
           "predicted_columns"]

# eigenvalues at or below this fraction of the leading one are treated as an
# exact rank deficiency and padded with zero loadings
_RANK_TOL = 1e-13


def neighborhood_matrix(x_ddagger: np.ndarray, nbhd: Neighborhood) -> np.ndarray:
    """T-ddagger x K submatrix of the PCA rows, canonical member order."""
    return x_ddagger[:, nbhd.members]


def _top_eigh(mat, n_top, center):
    dim = mat.shape[0]
    try:
        vals, vecs = scipy.linalg.eigh(
            mat, subset_by_index=[dim - n_top, dim - 1])
    except scipy.linalg.LinAlgError as exc:
        raise EstimationError(
            f"eigensolver failed to converge for neighborhood of unit {center}"
        ) from exc
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def _fix_signs(factors, loadings):
    # flip each factor column so its largest-magnitude entry is positive;
    # argmax resolves magnitude ties toward the earliest index
    for col in range(factors.shape[1]):
        lead = np.argmax(np.abs(factors[:, col]))
        if factors[lead, col] < 0:
            factors[:, col] = -factors[:, col]
            loadings[:, col] = -loadings[:, col]
    return factors, loadings


def _orthonormal_filler(factors, start_col):
    """Deterministically complete dead factor columns to an orthonormal set."""
    t_dd, d = factors.shape
    basis = 0
    for col in range(start_col, d):
        while basis < t_dd:
            cand = np.zeros(t_dd)
            cand[basis] = 1.0
            basis += 1
            live = factors[:, :col]
            if live.size:
                cand -= live @ (live.T @ cand) / t_dd
            norm = np.sqrt(cand @ cand)
            if norm > 1e-8:
                factors[:, col] = cand * (np.sqrt(t_dd) / norm)
                break
        else:
            raise EstimationError("cannot complete an orthonormal factor basis")
    return factors


def local_pca(x_ddagger: np.ndarray, nbhd: Neighborhood, d_lambda: int,
              gram: Optional[np.ndarray] = None) -> LocalFactorFit:
    """Fit the rank-``d_lambda`` local factor structure of one neighborhood.

    Parameters
    ----------
    x_ddagger : ndarray, shape (T_dd, n)
        PCA rows of the full measurement matrix.
    nbhd : Neighborhood
        Neighborhood whose member columns form the local matrix.
    d_lambda : int
        Number of leading principal components to extract; must not exceed
        ``min(T_dd, K)``.
    gram : ndarray, optional
        Precomputed ``x_ddagger.T @ x_ddagger`` for the full panel; the
        neighborhood Gram is then sliced out instead of recomputed.
    """
    t_dd = x_ddagger.shape[0]
    k = nbhd.k
    if d_lambda < 1 or d_lambda > min(t_dd, k):
        raise SizeError(
            f"d_lambda={d_lambda} must lie in [1, min(T_dd={t_dd}, K={k})]"
        )
    members = nbhd.members
    scale = 1.0 / (t_dd * k)
    if k <= t_dd:
        if gram is not None:
            local = gram[np.ix_(members, members)] * scale
        else:
            sub = x_ddagger[:, members]
            local = (sub.T @ sub) * scale
        vals, vecs = _top_eigh(local, d_lambda, nbhd.center)
        vals = np.maximum(vals, 0.0)
        dead = vals <= max(vals[0], 0.0) * _RANK_TOL
        loadings = np.sqrt(k) * vecs * np.sqrt(vals)[None, :]
        sub = x_ddagger[:, members]
        factors = np.empty((t_dd, d_lambda))
        live = ~dead
        if np.any(live):
            factors[:, live] = sub @ vecs[:, live] / np.sqrt(vals[live] * k)[None, :]
        loadings[:, dead] = 0.0
    else:
        sub = x_ddagger[:, members]
        small = (sub @ sub.T) * scale
        vals, vecs = _top_eigh(small, d_lambda, nbhd.center)
        vals = np.maximum(vals, 0.0)
        dead = vals <= max(vals[0], 0.0) * _RANK_TOL
        factors = np.sqrt(t_dd) * vecs
        loadings = sub.T @ factors / t_dd
        loadings[:, dead] = 0.0
    degenerate = bool(np.any(dead))
    if degenerate:
        first_dead = int(np.argmax(dead))
        factors = _orthonormal_filler(factors, first_dead)
        vals = np.where(dead, 0.0, vals)
    factors, loadings = _fix_signs(factors, loadings)
    return LocalFactorFit(factors=factors, loadings=loadings,
                          eigenvalues=vals, degenerate=degenerate)


def common_component(fit: LocalFactorFit) -> np.ndarray:
    """Estimated factor component F L' of the local submatrix."""
    return fit.factors @ fit.loadings.T


def local_eigenvalues(x_ddagger: np.ndarray, nbhd: Neighborhood, q: int,
                      gram: Optional[np.ndarray] = None) -> np.ndarray:
    """Leading ``q`` eigenvalues of the scaled neighborhood Gram matrix."""
    t_dd = x_ddagger.shape[0]
    k = nbhd.k
    q = min(q, t_dd, k)
    members = nbhd.members
    scale = 1.0 / (t_dd * k)
    if k <= t_dd:
        if gram is not None:
            local = gram[np.ix_(members, members)] * scale
        else:
            sub = x_ddagger[:, members]
            local = (sub.T @ sub) * scale
    else:
        sub = x_ddagger[:, members]
        local = (sub @ sub.T) * scale
    vals, _ = _top_eigh(local, q, nbhd.center)
    return np.maximum(vals, 0.0)


def run_lpsa(x_dagger: np.ndarray, x_ddagger: np.ndarray, k: int,
             d_lambda: int, metric):
    """Matching rows -> neighborhoods, PCA rows -> one factor fit per unit.

    The PCA-side Gram matrix of the full panel is computed once and sliced
    per neighborhood.
    """
    from .matching import knn
    neighborhoods = knn(x_dagger, k, metric)
    gram = x_ddagger.T @ x_ddagger
    fits = [local_pca(x_ddagger, nb, d_lambda, gram=gram)
            for nb in neighborhoods]
    return neighborhoods, fits


def predicted_columns(x_ddagger: np.ndarray, neighborhoods, fits) -> np.ndarray:
    """Factor-structure prediction of every PCA-side column.

    Column i is F L_i with L_i the loading row of unit i inside its own
    neighborhood, so the residual x_ddagger - predicted estimates the noise.
    """
    out = np.empty_like(x_ddagger)
    for i, (nbhd, fit) in enumerate(zip(neighborhoods, fits)):
        out[:, i] = fit.factors @ fit.loadings[nbhd.center_position]
    return out


@dataclass(frozen=True)
class EigenDiagnostics:
    """Leading local eigenvalues and their successive ratios."""

    leading_eigenvalues: np.ndarray
    center: Optional[int] = None

    def __post_init__(self):
        vals = np.asarray(self.leading_eigenvalues, dtype=np.float64)
        if np.any(vals < 0) or np.any(np.diff(vals) > 1e-12 * max(vals[0], 1.0)):
            raise DataError("eigenvalues must be nonnegative and nonincreasing")
        object.__setattr__(self, "leading_eigenvalues", vals)

    @property
    def gap_ratios(self) -> np.ndarray:
        vals = self.leading_eigenvalues
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = vals[:-1] / vals[1:]
        ratios[np.isnan(ratios)] = 1.0     # 0/0: no information, no gap
        return ratios


@dataclass(frozen=True)
class LatentDimensionEstimate:
    d_alpha: Optional[int]
    undetermined: bool
    spectrum: np.ndarray


def estimate_num_latent(diagnostics: EigenDiagnostics,
                        ratio_threshold: float = 5.0) -> LatentDimensionEstimate:
    """Count the eigenvalues in the second magnitude tier.

    The leading eigenvalue is the local constant and is skipped.  Consecutive
    eigenvalues starting from the second are counted until the ratio to the
    next one exceeds ``ratio_threshold``; the count is the estimate of the
    number of latent variables.  Without any ratio above the threshold the
    estimate is flagged undetermined and the full spectrum is returned for
    inspection.
    """
    vals = diagnostics.leading_eigenvalues
    if vals.size < 3:
        raise SizeError("need at least three eigenvalues to locate the tier")
    if ratio_threshold <= 1.0:
        raise DataError("ratio_threshold must exceed 1")
    ratios = diagnostics.gap_ratios
    for j in range(1, vals.size - 1):
        if ratios[j] > ratio_threshold:
            return LatentDimensionEstimate(d_alpha=j, undetermined=False,
                                           spectrum=vals)
    return LatentDimensionEstimate(d_alpha=None, undetermined=True,
                                   spectrum=vals)


def select_num_factors(mode: str, *, d_alpha: int = None, m: int = 2,
                       threshold: float = None,
                       diagnostics: EigenDiagnostics = None,
                       cap: int = None) -> int:
    """Choose the number of local principal components to extract.

    ``fixed_order`` counts the multivariate monomials of degree <= m-1 in
    ``d_alpha`` variables (local linear approximation when m = 2).
    ``bias_minimizing`` keeps every eigenvalue exceeding ``threshold`` times
    the median of the lower half of the computed spectrum, i.e. all components
    strong enough to stand out from the noise floor.
    """
    if mode == "fixed_order":
        if d_alpha is None or d_alpha < 1 or m < 1:
            raise SizeError("fixed_order requires d_alpha >= 1 and m >= 1")
        d_lambda = math.comb(m - 1 + d_alpha, d_alpha)
    elif mode == "bias_minimizing":
        if diagnostics is None or threshold is None:
            raise DataError("bias_minimizing requires diagnostics and a threshold")
        vals = diagnostics.leading_eigenvalues
        tail = vals[vals.size // 2:]
        noise_floor = float(np.median(tail))
        d_lambda = int(np.sum(vals > threshold * noise_floor))
        d_lambda = max(d_lambda, 1)
    else:
        raise DataError(f"unknown factor-selection mode {mode!r}")
    if cap is not None and d_lambda > cap:
        warnings.warn(
            f"selected d_lambda={d_lambda} exceeds the rank bound {cap}; capped",
            stacklevel=2,
        )
        d_lambda = cap
    return d_lambda
