"""Selection of the number of nearest neighbors K.

Two selectors are provided.  Cross-validation splits the units observed at
the target treatment level into folds, refits matching, local PCA and the
local regression without the held-out fold, and picks the candidate K with
the smallest held-out squared prediction error.  The direct plug-in (DPI)
rule runs a pilot fit at an initial K, estimates the integrated variance from
the least-squares variance of the fitted values and the integrated squared
bias from extra approximation terms, and rescales the initial K by the
variance/bias ratio at the MSE-optimal exponent.
"""

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .data import TreatmentSample
from .exceptions import DataError, SizeError, TuningError
from .local_pca import local_pca
from .matching import DistanceMetric, pairwise_distances
from .regression import design_for_unit, solve_normal_equations
from .data import Neighborhood

__all__ = ["TuningResult", "cross_validate_k", "dpi_k", "dpi_update",
           "default_k_candidates"]


@dataclass(frozen=True)
class TuningResult:
    k_selected: int
    criterion_curve: tuple          # (K, value) pairs
    method: str                     # "cv" or "dpi"
    k_initial: Optional[int] = None
    details: dict = field(default_factory=dict)


def default_k_candidates(n: int, d_alpha: int = 1, m: int = 2):
    """Candidate grid {0.5, 1, 1.5, 2} times the MSE-rate n^(2m/(2m+d_alpha))."""
    rate = n ** (2 * m / (2 * m + d_alpha))
    cands = sorted({max(2, int(math.floor(c * rate + 0.5)))
                    for c in (0.5, 1.0, 1.5, 2.0)})
    return [k for k in cands if k <= n]


def _holdout_fit(x_dagger, x_ddagger, dist_row, train_idx, sample, unit,
                 level, k, d_lambda, add_intercept):
    """Predicted outcome for one held-out unit, trained without its fold."""
    order = np.argsort(dist_row[train_idx], kind="stable")
    members = np.sort(train_idx[order[:k]])
    if x_ddagger is None:
        # local-constant flow: average eligible training neighbors
        eligible = sample.s[members] == level
        if not np.any(eligible):
            return None
        return float(np.mean(sample.y[members][eligible]))
    sub = x_ddagger[:, members]
    t_dd = x_ddagger.shape[0]
    nbhd = Neighborhood(center=members[0], members=members,
                        radius=float(dist_row[members].max()))
    fit = local_pca(x_ddagger, nbhd, d_lambda)
    own_loading = fit.factors.T @ x_ddagger[:, unit] / t_dd
    eligible = sample.s[members] == level
    if int(eligible.sum()) < sample.d_z + d_lambda + (1 if add_intercept else 0):
        if not np.any(eligible):
            return None
        return float(np.mean(sample.y[members][eligible]))
    blocks = []
    eval_blocks = []
    if add_intercept:
        blocks.append(np.ones((members.size, 1)))
        eval_blocks.append([1.0])
    if sample.d_z:
        blocks.append(sample.z[members, :])
        eval_blocks.append(sample.z[unit, :])
    blocks.append(fit.loadings)
    eval_blocks.append(own_loading)
    design = np.hstack(blocks)
    eval_row = np.concatenate([np.atleast_1d(b) for b in eval_blocks])
    coef, _ = solve_normal_equations(design[eligible],
                                     sample.y[members][eligible])
    if coef is None:
        return float(np.mean(sample.y[members][eligible]))
    return float(eval_row @ coef)


def cross_validate_k(sample: TreatmentSample, panel, level: int, k_candidates,
                     n_folds: int, seed: int, *,
                     metric: DistanceMetric = DistanceMetric(),
                     row_split=None, d_lambda: int = 2,
                     add_intercept: bool = False) -> TuningResult:
    """Pick K by V-fold cross-validated prediction error at one level.

    Folds partition the units observed at ``level``; every held-out unit is
    matched, factored, and predicted using training units only, so its own
    outcome never enters its fold fit.  Candidates larger than the training
    set are skipped with a warning; ties select the smallest K.

    ``row_split`` carries the matching/PCA row sets; pass None for the
    local-constant flow (matching on all rows, no PCA).
    """
    level_units = np.flatnonzero(sample.s == level)
    if level_units.size < n_folds:
        raise TuningError(
            f"cannot build {n_folds} folds from {level_units.size} units at "
            f"level {level}"
        )
    if row_split is None:
        x_dagger, x_ddagger = panel.x, None
    else:
        x_dagger = panel.rows(row_split.t_dagger)
        x_ddagger = panel.rows(row_split.t_ddagger)
    dist = pairwise_distances(x_dagger, metric)
    rng = np.random.default_rng(seed)
    assignment = rng.permutation(level_units.size) % n_folds

    candidates = sorted(int(k) for k in k_candidates)
    curve = []
    n = sample.n_units
    for k in candidates:
        min_train = n - max(np.bincount(assignment, minlength=n_folds))
        if k > min_train:
            warnings.warn(f"candidate K={k} exceeds the training size; skipped",
                          stacklevel=2)
            curve.append((k, np.nan))
            continue
        sq_errors = []
        for fold in range(n_folds):
            test = level_units[assignment == fold]
            train_mask = np.ones(n, dtype=bool)
            train_mask[test] = False
            train_idx = np.flatnonzero(train_mask)
            for unit in test:
                pred = _holdout_fit(x_dagger, x_ddagger, dist[unit], train_idx,
                                    sample, unit, level, k, d_lambda,
                                    add_intercept)
                if pred is None:
                    continue
                sq_errors.append((sample.y[unit] - pred) ** 2)
        curve.append((k, float(np.mean(sq_errors)) if sq_errors else np.nan))
    usable = [(k, v) for k, v in curve if np.isfinite(v)]
    if not usable:
        raise TuningError("every candidate K was skipped or failed")
    k_selected = min(usable, key=lambda kv: (kv[1], kv[0]))[0]
    return TuningResult(k_selected=k_selected, criterion_curve=tuple(curve),
                        method="cv", details={"n_folds": n_folds, "seed": seed})


def dpi_update(sum_v: float, sum_b: float, d_alpha: int, m: int,
               k_initial: int) -> float:
    """Unrounded DPI update: (d_alpha V / (2m B))^(d_alpha/(2m+d_alpha)) K_ini."""
    ratio = d_alpha * sum_v / (2.0 * m * sum_b)
    return ratio ** (d_alpha / (2.0 * m + d_alpha)) * k_initial


def _bias_regressors(fit, d_alpha, m, proxy):
    """Extra approximation terms used to estimate the squared bias."""
    if proxy == "polynomial" and m >= 2:
        linear = fit.loadings[:, 1:1 + d_alpha]
        cols = [np.prod(linear[:, list(combo)], axis=1)
                for combo in combinations_with_replacement(range(d_alpha), m)]
        return np.column_stack(cols)
    # extra-component proxy: the next loadings by eigenvalue order
    d_main = math.comb(m - 1 + d_alpha, d_alpha)
    return fit.loadings[:, d_main:]


def dpi_k(sample: TreatmentSample, panel, level: int, k_initial: int,
          d_alpha: int, m: int = 2, *,
          metric: DistanceMetric = DistanceMetric(),
          row_split=None, add_intercept: bool = False,
          proxy: str = "polynomial") -> TuningResult:
    """Direct plug-in choice of K from a pilot fit at ``k_initial``.

    The pilot extracts d_lambda = C(m-1+d_alpha, d_alpha) components; the
    per-unit variance comes from the usual least-squares variance of the
    fitted value, and the per-unit bias proxy from the coefficients on
    C(m+d_alpha-1, d_alpha-1) extra terms: polynomial transforms of the
    leading loadings by default (``proxy="polynomial"``), or extra extracted
    components (``proxy="extra_components"``), which can be noise-dominated.
    The result is capped into [d_z + d_lambda + 1, n].
    """
    if proxy not in ("polynomial", "extra_components"):
        raise DataError(f"unknown bias proxy {proxy!r}")
    if d_alpha < 1 or m < 1:
        raise SizeError("dpi_k requires d_alpha >= 1 and m >= 1")
    if m < 2:
        proxy = "extra_components"
    n = sample.n_units
    if not 1 <= k_initial <= n:
        raise SizeError(f"k_initial={k_initial} out of range for n={n}")
    d_lambda = math.comb(m - 1 + d_alpha, d_alpha)
    n_bias = math.comb(m + d_alpha - 1, d_alpha - 1)
    n_extract = d_lambda + (n_bias if proxy == "extra_components" else 0)

    if row_split is None:
        x_dagger = x_ddagger = panel.x
    else:
        x_dagger = panel.rows(row_split.t_dagger)
        x_ddagger = panel.rows(row_split.t_ddagger)
    n_extract = min(n_extract, x_ddagger.shape[0], k_initial)
    if n_extract < d_lambda:
        raise SizeError("pilot cannot extract the requested components")

    from .matching import knn   # local import keeps module load light
    neighborhoods = knn(x_dagger, k_initial, metric)
    gram = x_ddagger.T @ x_ddagger
    level_units = np.flatnonzero(sample.s == level)
    if level_units.size == 0:
        raise TuningError(f"no unit at level {level} for the pilot fit")

    sum_v = 0.0
    sum_b = 0.0
    d = (sample.s == level)
    for i in level_units:
        nbhd = neighborhoods[i]
        fit = local_pca(x_ddagger, nbhd, n_extract, gram=gram)
        main = fit.loadings[:, :d_lambda]
        extra = _bias_regressors(fit, d_alpha, m, proxy)
        design, eval_row = design_for_unit(sample, nbhd, main, add_intercept)
        eligible = d[nbhd.members]
        n_used = int(eligible.sum())
        p_main = design.shape[1]
        if n_used <= p_main:
            continue
        a = design[eligible]
        y_el = sample.y[nbhd.members][eligible]
        coef, _ = solve_normal_equations(a, y_el)
        if coef is None:
            continue
        resid = y_el - a @ coef
        sigma2 = float(resid @ resid) / (n_used - p_main)
        gram_main = a.T @ a
        try:
            v_i = sigma2 * float(eval_row @ np.linalg.solve(gram_main, eval_row))
        except np.linalg.LinAlgError:
            continue
        aug = np.hstack([design, extra])
        if n_used >= aug.shape[1] and extra.shape[1]:
            coef_aug, _ = solve_normal_equations(aug[eligible], y_el)
            if coef_aug is None:
                continue
            b_coef = coef_aug[p_main:]
            b_i = float(np.mean((extra @ b_coef) ** 2))
        else:
            b_i = 0.0
        sum_v += v_i
        sum_b += b_i

    cap_lo = sample.d_z + d_lambda + 1
    cap_hi = n
    if sum_b <= 0.0:
        warnings.warn("degenerate bias estimate in DPI pilot; returning the "
                      "upper cap n", stacklevel=2)
        return TuningResult(k_selected=cap_hi, criterion_curve=(),
                            method="dpi", k_initial=k_initial,
                            details={"sum_v": sum_v, "sum_b": sum_b})
    k_raw = dpi_update(sum_v, sum_b, d_alpha, m, k_initial)
    k_selected = int(math.floor(k_raw + 0.5))
    k_selected = min(max(k_selected, cap_lo), cap_hi)
    return TuningResult(k_selected=k_selected, criterion_curve=(),
                        method="dpi", k_initial=k_initial,
                        details={"sum_v": sum_v, "sum_b": sum_b,
                                 "k_unrounded": k_raw})
