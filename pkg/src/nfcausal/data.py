"""Shared dataset, configuration, and result types, plus CSV ingestion.

Conventions used throughout the package:

* the measurement matrix ``x`` is T x n with one *column* per unit, so every
  per-unit operation indexes columns;
* all containers are immutable after construction (arrays are made read-only)
  and therefore safe to share across worker processes or threads;
* missing or non-finite values are rejected at ingestion, never imputed.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import (ContractError, DataError, DomainError,
                         IngestionError, SchemaError, SizeError)
from .validation import (as_float_matrix, as_float_vector,
                         check_treatment_labels)

__all__ = [
    "MeasurementPanel", "TreatmentSample", "RowSplit", "Neighborhood",
    "LocalFactorFit", "LocalFitRecord", "NuisanceFits", "DrEstimate",
    "CdfProcess", "BootstrapDraws", "DatasetSchema", "load_dataset",
    "write_dataset", "make_row_split",
]

#: two-sided 95% normal critical value pinned for confidence intervals
Z_975 = 1.959964


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MeasurementPanel:
    """T x n matrix of noisy measurements, optionally with high-rank covariates.

    Parameters
    ----------
    x : ndarray, shape (T, n)
        Noisy measurements; row t is one measurement period/item, column i is
        one unit.
    w : list of ndarray, optional
        High-rank covariates, each of shape (T, n).
    unit_ids : sequence, optional
        n unit labels (defaults to 0..n-1).
    row_ids : sequence, optional
        T row labels (defaults to 0..T-1).
    """

    x: np.ndarray
    w: Optional[tuple] = None
    unit_ids: tuple = None
    row_ids: tuple = None

    def __post_init__(self):
        x = as_float_matrix(self.x, "x", min_rows=2, min_cols=2)
        object.__setattr__(self, "x", _freeze(x))
        if self.w is not None:
            mats = []
            for ell, wmat in enumerate(self.w):
                wmat = as_float_matrix(wmat, f"w[{ell}]")
                if wmat.shape != x.shape:
                    raise SizeError(
                        f"w[{ell}] has shape {wmat.shape}, expected {x.shape}"
                    )
                mats.append(_freeze(wmat))
            object.__setattr__(self, "w", tuple(mats))
        ids = self.unit_ids if self.unit_ids is not None else range(x.shape[1])
        rows = self.row_ids if self.row_ids is not None else range(x.shape[0])
        object.__setattr__(self, "unit_ids", tuple(ids))
        object.__setattr__(self, "row_ids", tuple(rows))
        if len(self.unit_ids) != x.shape[1]:
            raise SizeError("unit_ids length does not match number of columns")
        if len(self.row_ids) != x.shape[0]:
            raise SizeError("row_ids length does not match number of rows")

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_units(self) -> int:
        return self.x.shape[1]

    @property
    def d_w(self) -> int:
        return 0 if self.w is None else len(self.w)

    def rows(self, index_set) -> np.ndarray:
        """Submatrix of ``x`` with the given row indices (a view is avoided)."""
        return self.x[np.asarray(index_set, dtype=np.intp), :]


@dataclass(frozen=True)
class TreatmentSample:
    """Per-unit outcome, treatment label in {0, ..., J}, and controls."""

    y: np.ndarray
    s: np.ndarray
    z: np.ndarray = None
    n_levels: int = None

    def __post_init__(self):
        y = as_float_vector(self.y, "y")
        n = y.shape[0]
        s, n_levels = check_treatment_labels(self.s, "s", self.n_levels)
        if s.shape[0] != n:
            raise SizeError("y and s must have the same length")
        if self.z is None:
            z = np.empty((n, 0), dtype=np.float64)
        else:
            z = np.asarray(self.z, dtype=np.float64)
            if z.ndim == 1:
                z = z[:, None]
            z = as_float_matrix(z, "z", min_rows=1, min_cols=0) if z.size else z
            if z.shape[0] != n:
                raise SizeError("z must have one row per unit")
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "s", _freeze(s))
        object.__setattr__(self, "z", _freeze(z))
        object.__setattr__(self, "n_levels", n_levels)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    def indicators(self, level: int) -> np.ndarray:
        """d_i(j) = 1{s_i = j} as a float vector."""
        if not 0 <= level < self.n_levels:
            raise DomainError(
                f"level {level} outside declared {{0, ..., {self.n_levels - 1}}}"
            )
        return (self.s == level).astype(np.float64)

    def require_level(self, level: int):
        """Raise unless at least one unit sits at ``level``."""
        if not np.any(self.s == level):
            raise DomainError(f"no unit has treatment level {level}")


@dataclass(frozen=True)
class RowSplit:
    """Disjoint row index sets: T-dagger for matching, T-ddagger for PCA.

    ``t_3`` is populated only by the three-fold scheme used when high-rank
    covariates are partialled out.
    """

    t_dagger: np.ndarray
    t_ddagger: np.ndarray
    t_3: Optional[np.ndarray] = None

    def __post_init__(self):
        parts = [np.asarray(self.t_dagger, dtype=np.intp),
                 np.asarray(self.t_ddagger, dtype=np.intp)]
        if self.t_3 is not None:
            parts.append(np.asarray(self.t_3, dtype=np.intp))
        for p in parts:
            if p.size == 0:
                raise SizeError("every split part must be nonempty")
        combined = np.concatenate(parts)
        if np.unique(combined).size != combined.size:
            raise DataError("split parts must be disjoint")
        if combined.min() < 0:
            raise DataError("split indices must be nonnegative")
        object.__setattr__(self, "t_dagger", _freeze(np.sort(parts[0])))
        object.__setattr__(self, "t_ddagger", _freeze(np.sort(parts[1])))
        if self.t_3 is not None:
            object.__setattr__(self, "t_3", _freeze(np.sort(parts[2])))


def make_row_split(t_total: int, scheme: str, seed: Optional[int] = None) -> RowSplit:
    """Partition {0, ..., T-1} into matching/PCA row sets.

    Schemes: ``"contiguous_halves"`` (first rows match, last rows PCA),
    ``"random"`` (uniform without replacement, seeded), and ``"thirds"``
    (random three-way split for the high-rank flow).  Part sizes differ by at
    most one; for thirds, the spare rows go to the later portions.
    """
    if scheme in ("contiguous_halves", "random"):
        if t_total < 4:
            raise SizeError(f"two-fold split needs T >= 4, got {t_total}")
        n_dagger = t_total // 2
        if scheme == "contiguous_halves":
            order = np.arange(t_total)
        else:
            if seed is None:
                raise DataError("random split requires a seed")
            order = np.random.default_rng(seed).permutation(t_total)
        return RowSplit(order[:n_dagger], order[n_dagger:])
    if scheme == "thirds":
        if t_total < 6:
            raise SizeError(f"three-fold split needs T >= 6, got {t_total}")
        if seed is None:
            raise DataError("thirds split requires a seed")
        order = np.random.default_rng(seed).permutation(t_total)
        base, rem = divmod(t_total, 3)
        # remainder rows fall to the later portions (t_3 first, then t_2)
        sizes = [base, base + (1 if rem == 2 else 0), base + (1 if rem >= 1 else 0)]
        c1, c2 = sizes[0], sizes[0] + sizes[1]
        return RowSplit(order[:c1], order[c1:c2], order[c2:])
    raise DataError(f"unknown split scheme {scheme!r}")


@dataclass(frozen=True)
class Neighborhood:
    """K nearest neighbors of one unit (the unit itself included).

    ``members`` is sorted ascending by unit index -- the canonical order every
    per-neighborhood matrix follows.  ``normalized_discrepancy`` is the radius
    divided by the standard deviation of all pairwise distances (infinite when
    that standard deviation degenerates to zero and the radius does not).
    """

    center: int
    members: np.ndarray
    radius: float
    normalized_discrepancy: float = np.nan

    def __post_init__(self):
        members = np.sort(np.asarray(self.members, dtype=np.intp))
        if np.unique(members).size != members.size:
            raise DataError("neighborhood members must be distinct")
        if self.center not in members:
            raise DataError("neighborhood must include its own center")
        if self.radius < 0:
            raise DataError("radius must be nonnegative")
        object.__setattr__(self, "members", _freeze(members))
        object.__setattr__(self, "center", int(self.center))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def k(self) -> int:
        return self.members.shape[0]

    @property
    def center_position(self) -> int:
        """Position of the center unit inside ``members``."""
        return int(np.searchsorted(self.members, self.center))


@dataclass(frozen=True)
class LocalFactorFit:
    """Local PCA output for one neighborhood.

    ``factors`` (T-ddagger x d_lambda) satisfies F'F / T-ddagger = I and
    ``loadings`` (K x d_lambda, rows in the neighborhood's canonical member
    order) satisfies L'L / K = diag(eigenvalues), with the eigenvalues of the
    scaled neighborhood Gram matrix in nonincreasing order.
    """

    factors: np.ndarray
    loadings: np.ndarray
    eigenvalues: np.ndarray
    degenerate: bool = False

    _ORTHO_TOL = 1e-8

    def __post_init__(self):
        f = np.asarray(self.factors, dtype=np.float64)
        lam = np.asarray(self.loadings, dtype=np.float64)
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        if f.ndim != 2 or lam.ndim != 2 or f.shape[1] != lam.shape[1]:
            raise DataError("factors and loadings must share d_lambda columns")
        if ev.shape != (f.shape[1],):
            raise DataError("one eigenvalue per extracted component required")
        if np.any(ev < -self._ORTHO_TOL) or np.any(np.diff(ev) > self._ORTHO_TOL):
            raise DataError("eigenvalues must be nonnegative and nonincreasing")
        t_dd = f.shape[0]
        gram_f = f.T @ f / t_dd
        if np.max(np.abs(gram_f - np.eye(f.shape[1]))) > self._ORTHO_TOL:
            raise DataError("factors are not orthonormal: F'F/T != I")
        gram_l = lam.T @ lam / lam.shape[0]
        scale = max(ev[0] if ev.size else 0.0, 1.0)
        off = gram_l - np.diag(np.diag(gram_l))
        if np.max(np.abs(off), initial=0.0) > self._ORTHO_TOL * scale:
            raise DataError("loadings Gram is not diagonal")
        object.__setattr__(self, "factors", _freeze(f))
        object.__setattr__(self, "loadings", _freeze(lam))
        object.__setattr__(self, "eigenvalues", _freeze(ev))

    @property
    def d_lambda(self) -> int:
        return self.factors.shape[1]


@dataclass(frozen=True)
class LocalFitRecord:
    """One local regression: unit, level, coefficients, fitted value."""

    unit: int
    level: int
    beta: np.ndarray          # d_z control coefficients
    b: np.ndarray             # d_lambda loading coefficients
    fitted: float
    n_used: int
    fallback_flag: bool = False
    ridge_flag: bool = False

    def __post_init__(self):
        if not math.isfinite(self.fitted):
            raise DataError(
                f"non-finite fitted value for unit {self.unit}, level {self.level}"
            )
        object.__setattr__(self, "beta", _freeze(np.asarray(self.beta, dtype=np.float64)))
        object.__setattr__(self, "b", _freeze(np.asarray(self.b, dtype=np.float64)))


@dataclass(frozen=True)
class NuisanceFits:
    """Fitted outcome means and propensities for every unit and level.

    ``p_hat`` holds the clipped propensities actually used downstream;
    ``p_hat_raw`` keeps the pre-clip values for diagnostics.  Rows of
    ``p_hat`` need not sum to one: each level is fit separately.
    """

    varsigma_hat: np.ndarray       # n x (J+1)
    p_hat: np.ndarray              # n x (J+1), clipped
    p_marginal: np.ndarray         # J+1 sample shares of each level
    p_hat_raw: np.ndarray = None   # n x (J+1), pre-clip
    outcome_records: tuple = None
    propensity_records: tuple = None

    def __post_init__(self):
        vs = np.asarray(self.varsigma_hat, dtype=np.float64)
        ph = np.asarray(self.p_hat, dtype=np.float64)
        pm = np.asarray(self.p_marginal, dtype=np.float64)
        if vs.shape != ph.shape or pm.shape != (ph.shape[1],):
            raise DataError("nuisance arrays must agree on n and J+1")
        if np.any(ph <= 0.0) or np.any(ph >= 1.0):
            raise DataError("clipped propensities must lie strictly inside (0, 1)")
        raw = ph if self.p_hat_raw is None else np.asarray(self.p_hat_raw, dtype=np.float64)
        object.__setattr__(self, "varsigma_hat", _freeze(vs))
        object.__setattr__(self, "p_hat", _freeze(ph))
        object.__setattr__(self, "p_marginal", _freeze(pm))
        object.__setattr__(self, "p_hat_raw", _freeze(raw))

    @property
    def n_units(self) -> int:
        return self.varsigma_hat.shape[0]

    @property
    def n_levels(self) -> int:
        return self.varsigma_hat.shape[1]

    def clipped_fraction(self, level: int, mask=None) -> float:
        """Share of units (optionally restricted by ``mask``) whose propensity
        at ``level`` was moved by clipping."""
        moved = self.p_hat_raw[:, level] != self.p_hat[:, level]
        if mask is not None:
            moved = moved[np.asarray(mask, dtype=bool)]
        return float(np.mean(moved)) if moved.size else 0.0


@dataclass(frozen=True)
class DrEstimate:
    """Doubly-robust estimate of one counterfactual mean or contrast."""

    theta: float
    sigma: float
    influence: np.ndarray
    ci_95: tuple
    j: Optional[int] = None
    j_prime: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sigma < 0:
            raise DataError("sigma must be nonnegative")
        object.__setattr__(self, "influence",
                           _freeze(np.asarray(self.influence, dtype=np.float64)))
        object.__setattr__(self, "ci_95",
                           (float(self.ci_95[0]), float(self.ci_95[1])))

    @property
    def n_units(self) -> int:
        return self.influence.shape[0]


@dataclass(frozen=True)
class CdfProcess:
    """Counterfactual distribution estimates over an outcome grid.

    ``theta_of_tau`` is the monotonized (sorted) curve clipped to [0, 1];
    ``theta_raw`` keeps the untouched estimates that the influence values and
    the dominance test are built from.  ``band_95`` is a (grid, 2) array of
    lower/upper band edges once a bootstrap has been attached.
    """

    tau_grid: np.ndarray
    theta_of_tau: np.ndarray
    influence_of_tau: np.ndarray       # n x |grid|
    theta_raw: np.ndarray = None
    sigma_of_tau: np.ndarray = None
    band_95: Optional[np.ndarray] = None
    j: Optional[int] = None
    j_prime: Optional[int] = None

    def __post_init__(self):
        tau = np.asarray(self.tau_grid, dtype=np.float64)
        if tau.ndim != 1 or tau.size == 0:
            raise ContractError("tau_grid must be a nonempty 1-d array")
        if np.any(np.diff(tau) < 0):
            raise ContractError("tau_grid must be sorted")
        theta = np.asarray(self.theta_of_tau, dtype=np.float64)
        if np.any(np.diff(theta) < 0) or theta.min() < 0 or theta.max() > 1:
            raise DataError("theta_of_tau must be nondecreasing within [0, 1]")
        infl = np.asarray(self.influence_of_tau, dtype=np.float64)
        if infl.shape[1] != tau.size:
            raise ContractError("influence_of_tau must have one column per tau")
        object.__setattr__(self, "tau_grid", _freeze(tau))
        object.__setattr__(self, "theta_of_tau", _freeze(theta))
        object.__setattr__(self, "influence_of_tau", _freeze(infl))
        raw = theta if self.theta_raw is None else np.asarray(self.theta_raw, np.float64)
        object.__setattr__(self, "theta_raw", _freeze(raw))
        if self.sigma_of_tau is not None:
            object.__setattr__(self, "sigma_of_tau",
                               _freeze(np.asarray(self.sigma_of_tau, np.float64)))
        if self.band_95 is not None:
            band = np.asarray(self.band_95, dtype=np.float64)
            if band.shape != (tau.size, 2):
                raise ContractError("band_95 must be (|grid|, 2)")
            if np.any(band[:, 0] > theta) or np.any(band[:, 1] < theta):
                raise DataError("band must contain the point estimate at every tau")
            object.__setattr__(self, "band_95", _freeze(band))

    def with_band(self, band) -> "CdfProcess":
        return replace(self, band_95=np.asarray(band, dtype=np.float64))

    @property
    def n_units(self) -> int:
        return self.influence_of_tau.shape[0]


@dataclass(frozen=True)
class BootstrapDraws:
    """Simulated sup statistics from the multiplier bootstrap."""

    weights_dist: str
    n_draws: int
    seed: int
    sup_stats: np.ndarray
    excluded_taus: tuple = ()

    def __post_init__(self):
        if self.weights_dist not in ("rademacher", "mammen", "gaussian"):
            raise DataError(f"unknown multiplier distribution {self.weights_dist!r}")
        stats = np.asarray(self.sup_stats, dtype=np.float64)
        if stats.shape != (self.n_draws,):
            raise ContractError("one sup statistic per draw required")
        object.__setattr__(self, "sup_stats", _freeze(stats))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSchema:
    """Column mapping for a units-as-rows CSV file.

    ``measurements`` lists the T columns of the noisy panel in row order
    (column t of the CSV becomes row t of the T x n matrix).  ``high_rank``
    is a list of column groups, one group of T columns per covariate.
    """

    outcome: str
    treatment: str
    measurements: Sequence[str]
    controls: Sequence[str] = ()
    high_rank: Sequence[Sequence[str]] = ()
    unit_id: Optional[str] = None
    n_levels: Optional[int] = None

    def __post_init__(self):
        if len(self.measurements) < 2:
            raise SchemaError("schema must name at least two measurement columns")
        for group in self.high_rank:
            if len(group) != len(self.measurements):
                raise SchemaError(
                    "each high-rank column group must match the measurement count"
                )

    def all_columns(self):
        cols = [self.outcome, self.treatment, *self.controls, *self.measurements]
        for group in self.high_rank:
            cols.extend(group)
        if self.unit_id is not None:
            cols.append(self.unit_id)
        return cols


def _parse_cell(text, row_number, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise IngestionError(
            f"cannot parse value {text!r} at (row {row_number}, col {column})"
        ) from None
    if not math.isfinite(value):
        raise IngestionError(
            f"non-finite value {text!r} at (row {row_number}, col {column})"
        )
    return value


def load_dataset(csv_path, schema: DatasetSchema):
    """Read a units-as-rows CSV into a validated (panel, sample) pair.

    Unit order is preserved from the file.  Row numbers in error messages are
    1-based over data rows (the header is row 0).
    """
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{csv_path} is empty") from None
        header = [h.strip() for h in header]
        position = {name: k for k, name in enumerate(header)}
        missing = [c for c in schema.all_columns() if c not in position]
        if missing:
            raise SchemaError(f"columns missing from {csv_path}: {missing}")
        rows = [row for row in reader if row]

    n = len(rows)
    if n < 2:
        raise SizeError(f"need at least two units, got {n}")

    def column(name):
        k = position[name]
        return [rows[i][k] for i in range(n)]

    y = np.array([_parse_cell(v, i + 1, schema.outcome)
                  for i, v in enumerate(column(schema.outcome))])
    s_raw = np.array([_parse_cell(v, i + 1, schema.treatment)
                      for i, v in enumerate(column(schema.treatment))])
    z = None
    if schema.controls:
        z = np.column_stack([
            [_parse_cell(v, i + 1, c) for i, v in enumerate(column(c))]
            for c in schema.controls
        ])
    x = np.empty((len(schema.measurements), n))
    for t, c in enumerate(schema.measurements):
        x[t, :] = [_parse_cell(v, i + 1, c) for i, v in enumerate(column(c))]
    w = None
    if schema.high_rank:
        w = []
        for group in schema.high_rank:
            mat = np.empty((len(group), n))
            for t, c in enumerate(group):
                mat[t, :] = [_parse_cell(v, i + 1, c) for i, v in enumerate(column(c))]
            w.append(mat)

    unit_ids = tuple(column(schema.unit_id)) if schema.unit_id else None
    panel = MeasurementPanel(x, w=w, unit_ids=unit_ids)
    sample = TreatmentSample(y, s_raw, z=z, n_levels=schema.n_levels)
    return panel, sample


def write_dataset(panel: MeasurementPanel, sample: TreatmentSample,
                  csv_path, schema: DatasetSchema):
    """Write a (panel, sample) pair back to CSV, bit-exact for finite doubles."""
    header = []
    columns = []
    if schema.unit_id is not None:
        header.append(schema.unit_id)
        columns.append([str(u) for u in panel.unit_ids])
    header.append(schema.outcome)
    columns.append([repr(float(v)) for v in sample.y])
    header.append(schema.treatment)
    columns.append([str(int(v)) for v in sample.s])
    for k, c in enumerate(schema.controls):
        header.append(c)
        columns.append([repr(float(v)) for v in sample.z[:, k]])
    for t, c in enumerate(schema.measurements):
        header.append(c)
        columns.append([repr(float(v)) for v in panel.x[t, :]])
    for ell, group in enumerate(schema.high_rank):
        for t, c in enumerate(group):
            header.append(c)
            columns.append([repr(float(v)) for v in panel.w[ell][t, :]])
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(sample.n_units):
            writer.writerow([col[i] for col in columns])
