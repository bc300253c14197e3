"""Factor-augmented local regression for outcome means and propensities.

Within each unit's neighborhood, the outcome (or a treatment indicator) is
regressed on the low-dimensional controls z and the estimated local loadings,
which act as generated regressors.  The outcome regression at level j uses
only neighbors observed at that level; the propensity regression uses the
whole neighborhood.  The leading local principal component plays the local
constant role, so no intercept is added unless explicitly requested.

Backends: plain least squares (identity link), a local average, and a
logit-link quasi-likelihood Newton fit.  Singular normal equations receive a
ridge guard of 1e-10 * trace/dim and are flagged; designs too small for the
parameter count fall back to the local average of the eligible responses.
"""

import numpy as np

from .data import LocalFitRecord, Neighborhood, TreatmentSample
from .exceptions import DataError, EstimationError
from .validation import check_finite

__all__ = ["solve_normal_equations", "design_for_unit",
           "fit_outcome_local_ls", "fit_outcome_local_average",
           "fit_outcome_matrix", "fit_propensity", "local_qmle",
           "estimate_nuisances"]

_COND_LIMIT = 1e12
_RIDGE_SCALE = 1e-10


def solve_normal_equations(design, response):
    """Solve the least-squares normal equations with a flagged ridge guard.

    Returns ``(coef, ridge_used)``.  ``response`` may be a vector or a
    matrix of stacked responses sharing the design.  ``coef`` is None when
    even the guarded system cannot be solved.
    """
    gram = design.T @ design
    moment = design.T @ response
    p = gram.shape[0]
    singular = not np.all(np.isfinite(gram))
    if not singular:
        cond = np.linalg.cond(gram)
        singular = not np.isfinite(cond) or cond > _COND_LIMIT
    ridge_used = False
    if singular:
        guard = _RIDGE_SCALE * np.trace(gram) / p
        gram = gram + guard * np.eye(p)
        ridge_used = True
    try:
        coef = np.linalg.solve(gram, moment)
    except np.linalg.LinAlgError:
        return None, ridge_used
    if not np.all(np.isfinite(coef)):
        return None, ridge_used
    return coef, ridge_used


def design_for_unit(sample: TreatmentSample, nbhd: Neighborhood,
                    loadings, add_intercept: bool = False):
    """Regressor rows for a neighborhood and the evaluation row of its center.

    Columns: optional intercept, the controls z, then the local loadings
    (rows aligned with the canonical member order).
    """
    members = nbhd.members
    blocks = []
    if add_intercept:
        blocks.append(np.ones((members.size, 1)))
    if sample.d_z:
        blocks.append(sample.z[members, :])
    if loadings is not None:
        blocks.append(np.asarray(loadings))
    if not blocks:
        raise DataError("regression needs at least one regressor "
                        "(controls, loadings, or an intercept)")
    design = np.hstack(blocks)
    eval_row = design[nbhd.center_position, :]
    return design, eval_row


def _split_coef(sample, coef, add_intercept, d_lambda):
    offset = 1 if add_intercept else 0
    beta = coef[offset:offset + sample.d_z]
    b = coef[offset + sample.d_z:offset + sample.d_z + d_lambda]
    return beta, b


def _empty_coef(sample, d_lambda):
    return np.zeros(sample.d_z), np.zeros(d_lambda)


def fit_outcome_local_ls(sample: TreatmentSample, neighborhoods,
                         loadings_by_unit, level: int,
                         add_intercept: bool = False):
    """Local least squares of y on (z, loadings) among level-``level`` neighbors.

    One record per unit; the fitted value is the prediction at the unit's own
    regressors.  Neighborhood designs smaller than the parameter count fall
    back to the eligible local average (flagged); an empty eligible set raises.
    """
    d = sample.indicators(level).astype(bool)
    records = []
    for i, nbhd in enumerate(neighborhoods):
        loadings = None if loadings_by_unit is None else loadings_by_unit[i]
        design, eval_row = design_for_unit(sample, nbhd, loadings, add_intercept)
        eligible = d[nbhd.members]
        n_used = int(eligible.sum())
        if n_used == 0:
            raise EstimationError(
                f"no neighbor of unit {i} has treatment level {level}"
            )
        y_el = sample.y[nbhd.members][eligible]
        d_lambda = 0 if loadings is None else loadings.shape[1]
        if n_used < design.shape[1]:
            beta, b = _empty_coef(sample, d_lambda)
            records.append(LocalFitRecord(
                unit=i, level=level, beta=beta, b=b,
                fitted=float(np.mean(y_el)), n_used=n_used, fallback_flag=True))
            continue
        coef, ridge = solve_normal_equations(design[eligible], y_el)
        if coef is None:
            beta, b = _empty_coef(sample, d_lambda)
            records.append(LocalFitRecord(
                unit=i, level=level, beta=beta, b=b,
                fitted=float(np.mean(y_el)), n_used=n_used, fallback_flag=True))
            continue
        beta, b = _split_coef(sample, coef, add_intercept, d_lambda)
        records.append(LocalFitRecord(
            unit=i, level=level, beta=beta, b=b,
            fitted=float(eval_row @ coef), n_used=n_used,
            fallback_flag=ridge, ridge_flag=ridge))
    return records


def fit_outcome_local_average(sample: TreatmentSample, neighborhoods,
                              level: int):
    """Local average of y over the level-``level`` neighbors of each unit."""
    d = sample.indicators(level).astype(bool)
    records = []
    for i, nbhd in enumerate(neighborhoods):
        eligible = d[nbhd.members]
        n_used = int(eligible.sum())
        if n_used == 0:
            raise EstimationError(
                f"no neighbor of unit {i} has treatment level {level}"
            )
        fitted = float(np.mean(sample.y[nbhd.members][eligible]))
        records.append(LocalFitRecord(
            unit=i, level=level, beta=np.zeros(sample.d_z), b=np.zeros(0),
            fitted=fitted, n_used=n_used))
    return records


def fit_outcome_matrix(sample: TreatmentSample, neighborhoods,
                       loadings_by_unit, level: int, responses,
                       add_intercept: bool = False):
    """Vector-valued variant of the outcome regression.

    ``responses`` is an n x G matrix of per-unit responses sharing the
    designs (one column per transformed outcome, e.g. one per grid point of
    an indicator process).  Returns the n x G fitted matrix plus per-unit
    ``(n_used, fallback_flag)`` metadata.  Each unit's design is factored
    once and reused across all G columns.
    """
    responses = np.asarray(responses, dtype=np.float64)
    d = sample.indicators(level).astype(bool)
    n = sample.n_units
    fitted = np.empty((n, responses.shape[1]))
    meta = []
    for i, nbhd in enumerate(neighborhoods):
        loadings = None if loadings_by_unit is None else loadings_by_unit[i]
        if loadings_by_unit is None:
            eligible = d[nbhd.members]
            n_used = int(eligible.sum())
            if n_used == 0:
                raise EstimationError(
                    f"no neighbor of unit {i} has treatment level {level}"
                )
            fitted[i, :] = responses[nbhd.members][eligible].mean(axis=0)
            meta.append((n_used, False))
            continue
        design, eval_row = design_for_unit(sample, nbhd, loadings, add_intercept)
        eligible = d[nbhd.members]
        n_used = int(eligible.sum())
        if n_used == 0:
            raise EstimationError(
                f"no neighbor of unit {i} has treatment level {level}"
            )
        resp_el = responses[nbhd.members][eligible]
        if n_used < design.shape[1]:
            fitted[i, :] = resp_el.mean(axis=0)
            meta.append((n_used, True))
            continue
        coef, ridge = solve_normal_equations(design[eligible], resp_el)
        if coef is None:
            fitted[i, :] = resp_el.mean(axis=0)
            meta.append((n_used, True))
            continue
        fitted[i, :] = eval_row @ coef
        meta.append((n_used, ridge))
    return fitted, meta


def fit_propensity(sample: TreatmentSample, neighborhoods, loadings_by_unit,
                   level: int, backend: str = "local_ls", clip: float = 0.01,
                   add_intercept: bool = False, max_iter: int = 100):
    """Estimate p_{i,level} for every unit from its whole neighborhood.

    Backends: ``local_ls`` regresses the treatment indicator on
    (z, loadings); ``local_average`` takes the neighborhood share at the
    level; ``local_logit`` runs the logit-link quasi-likelihood Newton fit
    and falls back to the local average on separation or non-convergence.
    Fitted values are clipped into [clip, 1 - clip]; the pre-clip values are
    returned alongside the records.
    """
    if backend not in ("local_ls", "local_average", "local_logit"):
        raise DataError(f"unknown propensity backend {backend!r}")
    if not 0 < clip < 0.5:
        raise DataError("clip must lie in (0, 0.5)")
    d = sample.indicators(level)
    records = []
    raw = np.empty(sample.n_units)
    for i, nbhd in enumerate(neighborhoods):
        response = d[nbhd.members]
        n_used = nbhd.k
        loadings = None if loadings_by_unit is None else loadings_by_unit[i]
        d_lambda = 0 if loadings is None else loadings.shape[1]
        beta, b = _empty_coef(sample, d_lambda)
        fallback = False
        ridge = False
        if backend == "local_average" or loadings_by_unit is None and not sample.d_z and not add_intercept:
            value = float(np.mean(response))
        elif backend == "local_ls":
            design, eval_row = design_for_unit(sample, nbhd, loadings, add_intercept)
            if n_used < design.shape[1]:
                value, fallback = float(np.mean(response)), True
            else:
                coef, ridge = solve_normal_equations(design, response)
                if coef is None:
                    value, fallback = float(np.mean(response)), True
                else:
                    beta, b = _split_coef(sample, coef, add_intercept, d_lambda)
                    value = float(eval_row @ coef)
        else:
            design, eval_row = design_for_unit(sample, nbhd, loadings, add_intercept)
            coef = _logit_newton(design, response, max_iter=max_iter)
            if coef is None:
                value, fallback = float(np.mean(response)), True
            else:
                beta, b = _split_coef(sample, coef, add_intercept, d_lambda)
                value = float(_expit(eval_row @ coef))
        raw[i] = value
        clipped = min(max(value, clip), 1.0 - clip)
        records.append(LocalFitRecord(
            unit=i, level=level, beta=beta, b=b, fitted=clipped,
            n_used=n_used, fallback_flag=fallback, ridge_flag=ridge))
    return records, raw


def estimate_nuisances(sample: TreatmentSample, neighborhoods,
                       loadings_by_unit, *, outcome_backend: str = "local_ls",
                       propensity_backend: str = "local_ls",
                       outcome_link: str = "identity", clip: float = 0.01,
                       add_intercept: bool = False, max_iter: int = 100,
                       keep_records: bool = False):
    """Fit outcome means and propensities for every populated treatment level.

    Returns a :class:`NuisanceFits` with n x (J+1) fitted matrices, the
    sample level shares, and the pre-clip propensities.  ``outcome_backend``
    is ``local_ls`` (optionally with a logit ``outcome_link`` through the
    quasi-likelihood fit) or ``local_average``.  Declared levels with no
    units are left as NaN columns; estimands touching them fail loudly
    downstream.
    """
    from .data import NuisanceFits

    n, n_levels = sample.n_units, sample.n_levels
    varsigma = np.full((n, n_levels), np.nan)
    p_hat = np.full((n, n_levels), np.nan)
    p_raw = np.full((n, n_levels), np.nan)
    out_records = []
    prop_records = []
    populated = [j for j in range(n_levels) if np.any(sample.s == j)]
    for level in populated:
        if outcome_backend == "local_average":
            recs = fit_outcome_local_average(sample, neighborhoods, level)
        elif outcome_backend == "local_ls":
            recs = local_qmle(sample, neighborhoods, loadings_by_unit, level,
                              link=outcome_link, add_intercept=add_intercept,
                              max_iter=max_iter)
        else:
            raise DataError(f"unknown outcome backend {outcome_backend!r}")
        varsigma[:, level] = [r.fitted for r in recs]
        precs, raw = fit_propensity(sample, neighborhoods, loadings_by_unit,
                                    level, backend=propensity_backend,
                                    clip=clip, add_intercept=add_intercept,
                                    max_iter=max_iter)
        p_hat[:, level] = [r.fitted for r in precs]
        p_raw[:, level] = raw
        if keep_records:
            out_records.append(tuple(recs))
            prop_records.append(tuple(precs))
    p_marginal = np.array([np.mean(sample.indicators(j))
                           for j in range(n_levels)])
    return NuisanceFits(
        varsigma_hat=varsigma, p_hat=p_hat, p_marginal=p_marginal,
        p_hat_raw=p_raw,
        outcome_records=tuple(out_records) if keep_records else None,
        propensity_records=tuple(prop_records) if keep_records else None,
    )


def _expit(v):
    return 1.0 / (1.0 + np.exp(-v))


def _logit_newton(design, response, tol: float = 1e-8, max_iter: int = 100):
    """Newton-Raphson for the logit quasi-score; None signals fallback.

    Separation (all responses identical) and divergence both return None.
    """
    if np.all(response == response[0]):
        return None
    p = design.shape[1]
    if design.shape[0] < p:
        return None
    coef = np.zeros(p)
    for _ in range(max_iter):
        eta = design @ coef
        mu = _expit(eta)
        weight = mu * (1.0 - mu)
        hess = design.T @ (design * weight[:, None])
        score = design.T @ (response - mu)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            guard = _RIDGE_SCALE * np.trace(hess) / p
            try:
                step = np.linalg.solve(hess + guard * np.eye(p), score)
            except np.linalg.LinAlgError:
                return None
        coef = coef + step
        if not np.all(np.isfinite(coef)) or np.max(np.abs(coef)) > 1e8:
            return None
        if np.max(np.abs(step)) < tol:
            return coef
    return None


def local_qmle(sample: TreatmentSample, neighborhoods, loadings_by_unit,
               level: int, link: str = "identity",
               add_intercept: bool = False, tol: float = 1e-8,
               max_iter: int = 100):
    """Local quasi-maximum-likelihood outcome fit.

    The identity link has unit variance function and reduces exactly to
    :func:`fit_outcome_local_ls`.  The logit link uses V(s) = s(1-s) and
    Newton-Raphson to ``tol`` on the coefficient change, falling back to the
    eligible local average on separation or divergence (flagged).
    """
    if link == "identity":
        return fit_outcome_local_ls(sample, neighborhoods, loadings_by_unit,
                                    level, add_intercept=add_intercept)
    if link != "logit":
        raise DataError(f"unknown link {link!r}; identity and logit are supported")
    d = sample.indicators(level).astype(bool)
    check_finite(sample.y, "y")
    records = []
    for i, nbhd in enumerate(neighborhoods):
        loadings = None if loadings_by_unit is None else loadings_by_unit[i]
        design, eval_row = design_for_unit(sample, nbhd, loadings, add_intercept)
        eligible = d[nbhd.members]
        n_used = int(eligible.sum())
        if n_used == 0:
            raise EstimationError(
                f"no neighbor of unit {i} has treatment level {level}"
            )
        y_el = sample.y[nbhd.members][eligible]
        d_lambda = 0 if loadings is None else loadings.shape[1]
        coef = None
        if n_used >= design.shape[1]:
            coef = _logit_newton(design[eligible], y_el,
                                 tol=tol, max_iter=max_iter)
        if coef is None:
            beta, b = _empty_coef(sample, d_lambda)
            records.append(LocalFitRecord(
                unit=i, level=level, beta=beta, b=b,
                fitted=float(np.mean(y_el)), n_used=n_used, fallback_flag=True))
            continue
        beta, b = _split_coef(sample, coef, add_intercept, d_lambda)
        records.append(LocalFitRecord(
            unit=i, level=level, beta=beta, b=b,
            fitted=float(_expit(eval_row @ coef)), n_used=n_used))
    return records
