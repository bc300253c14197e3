"""Distance metrics and exact K-nearest-neighbor search over unit columns.

Distances are computed between columns of the matching submatrix (rows in
T-dagger).  Two metrics are built in:

* Euclidean: ``(1/sqrt(T)) * ||x_i - x_j||_2``;
* pseudo-max: ``max_{l != i,j} |(1/T) (x_i - x_j)' x_l|``, which averages the
  measurement noise away across rows and tolerates heteroskedastic noise.

A user-supplied per-unit feature transform turns either metric into the
generic "match on new features" variant; no transform ships by default.
Both metrics define the self-distance as zero so that every unit is its own
nearest neighbor.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist

from .data import Neighborhood
from .exceptions import MetricUndefinedError, SizeError
from .validation import check_unit_index

__all__ = ["DistanceMetric", "euclidean_distance", "pseudo_max_distance",
           "pairwise_distances", "knn", "matching_diagnostics",
           "MatchingDiagnostics", "SUMMARY_ROWS"]


@dataclass(frozen=True)
class DistanceMetric:
    """Distance specification: metric kind plus optional feature transform.

    When ``feature_transform`` is given it maps ``(unit_index, column)`` to a
    feature vector and units are compared by the Euclidean norm of the feature
    difference, regardless of ``kind``.
    """

    kind: str = "pseudo_max"
    feature_transform: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "pseudo_max"):
            raise SizeError(f"unknown metric kind {self.kind!r}")


def euclidean_distance(x_sub: np.ndarray, i: int, j: int) -> float:
    """(1/sqrt(T)) L2 distance between columns i and j."""
    t_rows, n = x_sub.shape
    i = check_unit_index(i, n)
    j = check_unit_index(j, n)
    if i == j:
        return 0.0
    diff = x_sub[:, i] - x_sub[:, j]
    return float(np.sqrt(diff @ diff) / np.sqrt(t_rows))


def pseudo_max_distance(x_sub: np.ndarray, i: int, j: int) -> float:
    """max over third columns l of |(1/T)(x_i - x_j)' x_l|."""
    t_rows, n = x_sub.shape
    i = check_unit_index(i, n)
    j = check_unit_index(j, n)
    if i == j:
        return 0.0
    if n < 3:
        raise MetricUndefinedError(
            "pseudo-max distance needs at least three units; "
            "fall back to the euclidean metric for n < 3"
        )
    cross = (x_sub[:, i] - x_sub[:, j]) @ x_sub / t_rows
    mask = np.ones(n, dtype=bool)
    mask[[i, j]] = False
    return float(np.max(np.abs(cross[mask])))


def _transformed_features(x_sub, transform):
    feats = [np.asarray(transform(i, x_sub[:, i]), dtype=np.float64).ravel()
             for i in range(x_sub.shape[1])]
    return np.vstack(feats)


def pairwise_distances(x_sub: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    """Full n x n distance matrix (exactly symmetric, zero diagonal)."""
    t_rows, n = x_sub.shape
    if metric.feature_transform is not None:
        feats = _transformed_features(x_sub, metric.feature_transform)
        dist = cdist(feats, feats)
        np.fill_diagonal(dist, 0.0)
        return dist
    if metric.kind == "euclidean":
        dist = cdist(x_sub.T, x_sub.T) / np.sqrt(t_rows)
        np.fill_diagonal(dist, 0.0)
        return dist
    if n < 3:
        raise MetricUndefinedError(
            "pseudo-max distance needs at least three units; "
            "fall back to the euclidean metric for n < 3"
        )
    # (x_i - x_j)' x_l = G_il - G_jl with the Gram computed once
    gram = x_sub.T @ x_sub / t_rows
    dist = np.empty((n, n))
    idx = np.arange(n)
    for i in range(n):
        cross = np.abs(gram[i][None, :] - gram)   # row j, column l
        cross[:, i] = -np.inf                     # exclude l = i
        cross[idx, idx] = -np.inf                 # exclude l = j
        dist[i, :] = cross.max(axis=1)
    dist[idx, idx] = 0.0
    return dist


def knn(x_sub: np.ndarray, k: int, metric: DistanceMetric,
        dist: Optional[np.ndarray] = None):
    """K nearest neighbors (including the unit itself) for every unit.

    Ties are broken toward the smaller unit index; the unit itself always
    enters its own neighborhood.  Radius is the K-th smallest distance.
    Pass a precomputed ``dist`` matrix to skip the distance pass.
    """
    n = x_sub.shape[1]
    if not 1 <= k <= n:
        raise SizeError(f"K must satisfy 1 <= K <= n, got K={k}, n={n}")
    if dist is None:
        dist = pairwise_distances(x_sub, metric)
    pair_std = _offdiagonal_std(dist)
    idx = np.arange(n)
    out = []
    for i in range(n):
        not_center = (idx != i).astype(np.int8)
        order = np.lexsort((idx, not_center, dist[i]))
        members = order[:k]
        radius = float(dist[i, members].max())
        out.append(Neighborhood(
            center=i, members=members, radius=radius,
            normalized_discrepancy=_normalize_radius(radius, pair_std),
        ))
    return out


def _offdiagonal_std(dist):
    n = dist.shape[0]
    vals = dist[np.triu_indices(n, k=1)]
    return float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0


def _normalize_radius(radius, pair_std):
    if pair_std == 0.0:
        return 0.0 if radius == 0.0 else np.inf
    return radius / pair_std


#: row labels of the diagnostics table, in output order
SUMMARY_ROWS = ("Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max.")


@dataclass(frozen=True)
class MatchingDiagnostics:
    per_unit: np.ndarray
    degenerate_std: bool
    groups: dict

    def table(self):
        """Rows of the Table-1-style summary: (statistic, {group: value})."""
        return [(row, {g: stats[row] for g, stats in self.groups.items()})
                for row in SUMMARY_ROWS]


def matching_diagnostics(neighborhoods, dist, treatment=None) -> MatchingDiagnostics:
    """Normalized matching discrepancy per unit plus per-group summaries.

    The per-unit value is the neighborhood radius divided by the sample
    standard deviation of all n(n-1)/2 off-diagonal pairwise distances.  A
    degenerate standard deviation (all distances equal) sets a flag instead of
    crashing; affected units report 0 for a zero radius and inf otherwise.
    """
    pair_std = _offdiagonal_std(dist)
    per_unit = np.array([_normalize_radius(nb.radius, pair_std)
                         for nb in neighborhoods])
    if treatment is None:
        labels = {"all": np.ones(per_unit.shape[0], dtype=bool)}
    else:
        treatment = np.asarray(treatment)
        labels = {f"group_{lvl}": treatment == lvl
                  for lvl in np.unique(treatment)}
    groups = {}
    for name, mask in labels.items():
        vals = per_unit[mask]
        finite = vals[np.isfinite(vals)]
        if finite.size == 0:
            finite = vals
        groups[name] = {
            "Min.": float(np.min(vals)),
            "1st Qu.": float(np.percentile(finite, 25)),
            "Median": float(np.percentile(finite, 50)),
            "Mean": float(np.mean(vals)),
            "3rd Qu.": float(np.percentile(finite, 75)),
            "Max.": float(np.max(vals)),
        }
    return MatchingDiagnostics(per_unit=per_unit,
                               degenerate_std=(pair_std == 0.0),
                               groups=groups)
