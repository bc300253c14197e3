"""Data-generating processes and the Monte Carlo harness.

Two binary-treatment designs share the outcome and assignment equations

    y(0) = a + a^2 + e0,   y(1) = 2a + a^2 + 1 + e1,
    s    = 1(v <= p(a)),   p(a) = logistic((a - 0.5) + (a - 0.5)^2),

with a, v and the row effects uniform on (0, 1) and all noise standard
normal; they differ in the measurement map: model 1 uses (a - w_t)^2 and
model 2 uses sin(pi (a + w_t)).  The target of the harness is the
counterfactual mean E[y(0) | s = 1], whose true value reduces to a ratio of
one-dimensional integrals over a and is evaluated once by a seeded
high-precision Monte Carlo oracle.

Replications draw independent seed streams from a master seed; aggregates
use exactly rounded summation (math.fsum), so permuting the replication
order cannot change the report.
"""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from .data import MeasurementPanel, TreatmentSample
from .exceptions import DataError, SizeError

__all__ = ["DgpSpec", "SimulationTruth", "generate", "true_theta_01",
           "KRule", "EstimatorConfig", "McReport", "run_monte_carlo",
           "paper_grid", "MC_REPORT_COLUMNS"]

#: environment variable consulted for the default worker count
THREADS_ENV = "NFCAUSAL_THREADS"


@dataclass(frozen=True)
class DgpSpec:
    """One simulated dataset: design id, sizes, seed."""

    model_id: str
    n: int
    t: int
    seed: int

    def __post_init__(self):
        if self.model_id not in ("model1", "model2"):
            raise DataError(f"unknown model_id {self.model_id!r}")
        if self.n < 2 or self.t < 2:
            raise SizeError("DGP needs n >= 2 and T >= 2")


@dataclass(frozen=True)
class SimulationTruth:
    """Latent quantities of one draw, for oracle checks."""

    alpha: np.ndarray
    propensity: np.ndarray          # P(s = 1 | alpha)
    varsigma0: np.ndarray           # E[y(0) | alpha]
    varsigma1: np.ndarray           # E[y(1) | alpha]


def _eta(model_id, alpha, varpi):
    if model_id == "model1":
        return (alpha[None, :] - varpi[:, None]) ** 2
    return np.sin(np.pi * (alpha[None, :] + varpi[:, None]))


def _true_propensity(alpha):
    centered = alpha - 0.5
    return expit(centered + centered ** 2)


def generate(spec: DgpSpec, u_scale: float = 1.0, eps_scale: float = 1.0):
    """Draw one dataset; scales of the noise terms can be zeroed for debugging.

    Returns ``(panel, sample, truth)``; everything is deterministic in the
    seed.
    """
    rng = np.random.default_rng(spec.seed)
    alpha = rng.uniform(size=spec.n)
    varpi = rng.uniform(size=spec.t)
    v = rng.uniform(size=spec.n)
    eps0 = rng.standard_normal(spec.n) * eps_scale
    eps1 = rng.standard_normal(spec.n) * eps_scale
    u = rng.standard_normal((spec.t, spec.n)) * u_scale

    propensity = _true_propensity(alpha)
    s = (v <= propensity).astype(np.int64)
    varsigma0 = alpha + alpha ** 2
    varsigma1 = 2.0 * alpha + alpha ** 2 + 1.0
    y = np.where(s == 1, varsigma1 + eps1, varsigma0 + eps0)
    x = _eta(spec.model_id, alpha, varpi) + u
    panel = MeasurementPanel(x)
    sample = TreatmentSample(y, s, n_levels=2)
    truth = SimulationTruth(alpha=alpha, propensity=propensity,
                            varsigma0=varsigma0, varsigma1=varsigma1)
    return panel, sample, truth


@lru_cache(maxsize=8)
def true_theta_01(n_draws: int = 10_000_000, seed: int = 176_541):
    """Monte Carlo oracle for E[y(0) | s = 1] = E[(a + a^2) p(a)] / E[p(a)].

    Returns ``(value, standard_error)``; cached per (n_draws, seed).
    """
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(size=n_draws)
    p = _true_propensity(alpha)
    g = (alpha + alpha ** 2) * p
    den = float(np.mean(p))
    num = float(np.mean(g))
    value = num / den
    resid = g - value * p
    se = float(np.sqrt(np.mean(resid ** 2) / n_draws) / den)
    return value, se


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KRule:
    """How K is chosen per replication: a fixed multiple of a rate, or DPI
    started from that multiple."""

    kind: str = "fixed"             # "fixed" | "dpi"
    c: float = 1.0
    exponent: float = 0.8

    def __post_init__(self):
        if self.kind not in ("fixed", "dpi"):
            raise DataError(f"unknown K rule kind {self.kind!r}")

    def initial(self, n: int) -> int:
        return max(2, min(n, int(math.floor(self.c * n ** self.exponent + 0.5))))

    def describe(self) -> str:
        base = f"{self.c:g}*n^{self.exponent:g}"
        return base if self.kind == "fixed" else f"dpi({base})"


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator settings of one Monte Carlo configuration row."""

    backend: str = "local_linear"
    k_rule: KRule = field(default_factory=KRule)
    d_lambda: Optional[int] = 2
    split_scheme: str = "contiguous_halves"
    metric: str = "pseudo_max"
    propensity_backend: Optional[str] = None
    d_alpha: int = 1
    m_order: int = 2
    clip: float = 0.01
    j: int = 0
    j_prime: int = 1

    def estimator_params(self, n: int) -> dict:
        if self.k_rule.kind == "fixed":
            n_neighbors: Union[int, str] = self.k_rule.initial(n)
            k_initial = None
        else:
            n_neighbors = "dpi"
            k_initial = self.k_rule.initial(n)
        return dict(
            n_neighbors=n_neighbors, backend=self.backend,
            d_lambda=self.d_lambda, d_alpha=self.d_alpha,
            m_order=self.m_order, metric=self.metric,
            split_scheme=self.split_scheme,
            propensity_backend=self.propensity_backend,
            clip=self.clip, k_initial=k_initial, tuning_level=self.j,
        )

    def describe(self) -> str:
        return f"{self.backend}, K={self.k_rule.describe()}"


@dataclass(frozen=True)
class McReport:
    """Aggregated Monte Carlo metrics for one configuration."""

    bias: float
    sd: float
    rmse: float
    cr: float
    al: float
    n_reps: int
    estimator_config: EstimatorConfig
    n_failures: int = 0
    model_id: str = ""
    truth: float = np.nan


MC_REPORT_COLUMNS = ("model", "backend", "k_rule", "bias", "sd", "rmse",
                     "cr", "al", "n_reps", "n_failures")


def _report_seed(child: np.random.SeedSequence) -> int:
    return int(child.generate_state(1, np.uint64)[0])


def _mc_worker(args):
    model_id, n, t, rep_seed, config, truth_value = args
    from .estimator import LatentFactorDR   # deferred: keep spawn imports lean

    try:
        panel, sample, _ = generate(DgpSpec(model_id, n, t, rep_seed))
        fitter = LatentFactorDR(**config.estimator_params(n))
        fitter.fit_panel(panel, sample)
        dr = fitter.counterfactual_mean(config.j, config.j_prime)
    except Exception as exc:   # noqa: BLE001 - recorded as a failure
        return ("fail", f"{type(exc).__name__}: {exc}")
    lo, hi = dr.ci_95
    covered = bool(lo <= truth_value <= hi)
    return ("ok", dr.theta, dr.sigma, covered, hi - lo)


def _resolve_jobs(n_jobs):
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_monte_carlo(spec: DgpSpec, config: EstimatorConfig, n_reps: int,
                    master_seed: int, n_jobs: Optional[int] = None,
                    truth: Optional[float] = None,
                    oracle_draws: int = 10_000_000) -> McReport:
    """Replicate the full pipeline and aggregate bias/SD/RMSE/CR/AL.

    ``spec.seed`` is ignored; replication r draws its own stream spawned from
    ``master_seed``.  Failed replications are excluded from the aggregates
    and counted in ``n_failures``.
    """
    if truth is None:
        truth = true_theta_01(oracle_draws)[0]
    children = np.random.SeedSequence(master_seed).spawn(n_reps)
    jobs = [(spec.model_id, spec.n, spec.t, _report_seed(c), config, truth)
            for c in children]
    n_jobs = _resolve_jobs(n_jobs)
    if n_jobs == 1 or n_reps == 1:
        results = [_mc_worker(j) for j in jobs]
    else:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx) as pool:
            results = list(pool.map(_mc_worker, jobs,
                                    chunksize=max(1, n_reps // (8 * n_jobs))))
    thetas = [r[1] for r in results if r[0] == "ok"]
    covers = [r[3] for r in results if r[0] == "ok"]
    lengths = [r[4] for r in results if r[0] == "ok"]
    n_ok = len(thetas)
    n_failures = n_reps - n_ok
    if n_ok == 0:
        raise DataError("every replication failed; first error: "
                        + results[0][1])
    mean_theta = math.fsum(thetas) / n_ok
    bias = mean_theta - truth
    sd = math.sqrt(math.fsum((th - mean_theta) ** 2 for th in thetas) / n_ok)
    rmse = math.sqrt(math.fsum((th - truth) ** 2 for th in thetas) / n_ok)
    cr = math.fsum(1.0 for c in covers if c) / n_ok
    al = math.fsum(lengths) / n_ok
    return McReport(bias=bias, sd=sd, rmse=rmse, cr=cr, al=al, n_reps=n_reps,
                    estimator_config=config, n_failures=n_failures,
                    model_id=spec.model_id, truth=truth)


def report_row(report: McReport) -> list:
    """One CSV row in the MC_REPORT_COLUMNS layout."""
    cfg = report.estimator_config
    return [report.model_id, cfg.backend, cfg.k_rule.describe(),
            repr(report.bias), repr(report.sd), repr(report.rmse),
            repr(report.cr), repr(report.al), report.n_reps,
            report.n_failures]


def paper_grid():
    """The published simulation grid: both models, both backends, the three
    fixed multiples per rate and the DPI start at 1.5x, sized n = T = 1000
    with 5000 replications."""
    rows = []
    for model_id in ("model1", "model2"):
        for c in (0.5, 1.0, 1.5):
            rows.append((model_id, EstimatorConfig(
                backend="local_linear",
                k_rule=KRule("fixed", c, 0.8), d_lambda=2)))
        rows.append((model_id, EstimatorConfig(
            backend="local_linear", k_rule=KRule("dpi", 1.5, 0.8),
            d_lambda=2)))
        for c in (0.5, 1.0, 1.5):
            rows.append((model_id, EstimatorConfig(
                backend="local_constant",
                k_rule=KRule("fixed", c, 2.0 / 3.0), d_lambda=None,
                split_scheme="none")))
        rows.append((model_id, EstimatorConfig(
            backend="local_constant", k_rule=KRule("dpi", 1.5, 2.0 / 3.0),
            d_lambda=None, split_scheme="none")))
    return rows
