"""Treatment effects with latent confounders measured through a noisy panel.

The pipeline: K-nearest-neighbor matching on one half of the measurement
rows, local PCA on the other half, factor-augmented local regression of
outcomes and treatment indicators, and doubly-robust counterfactual
estimators with pointwise and uniform inference.  ``LatentFactorDR`` is the
estimator-style entry point; the stage modules are importable on their own.
"""

from .data import (BootstrapDraws, CdfProcess, DatasetSchema, DrEstimate,
                   LocalFactorFit, LocalFitRecord, MeasurementPanel,
                   Neighborhood, NuisanceFits, RowSplit, TreatmentSample,
                   load_dataset, make_row_split, write_dataset)
from .estimator import LatentFactorDR
from .estimators import (attach_uniform_band, counterfactual_cdf,
                         default_tau_grid, dr_counterfactual_mean,
                         dr_variance, influence_values, multiplier_bootstrap,
                         sd_test, treatment_effect)
from .highrank import HighRankAdjustment, partial_out_high_rank
from .local_pca import (EigenDiagnostics, common_component,
                        estimate_num_latent, local_eigenvalues, local_pca,
                        select_num_factors)
from .matching import (DistanceMetric, euclidean_distance, knn,
                       matching_diagnostics, pairwise_distances,
                       pseudo_max_distance)
from .regression import (estimate_nuisances, fit_outcome_local_average,
                         fit_outcome_local_ls, fit_propensity, local_qmle)
from .simulation import (DgpSpec, EstimatorConfig, KRule, McReport,
                         generate, paper_grid, run_monte_carlo,
                         true_theta_01)
from .tuning import TuningResult, cross_validate_k, dpi_k, dpi_update

__version__ = "0.1.0"

__all__ = [
    "BootstrapDraws", "CdfProcess", "DatasetSchema", "DrEstimate",
    "LocalFactorFit", "LocalFitRecord", "MeasurementPanel", "Neighborhood",
    "NuisanceFits", "RowSplit", "TreatmentSample", "load_dataset",
    "make_row_split", "write_dataset", "LatentFactorDR",
    "attach_uniform_band", "counterfactual_cdf", "default_tau_grid",
    "dr_counterfactual_mean", "dr_variance", "influence_values",
    "multiplier_bootstrap", "sd_test", "treatment_effect",
    "HighRankAdjustment", "partial_out_high_rank", "EigenDiagnostics",
    "common_component", "estimate_num_latent", "local_eigenvalues",
    "local_pca", "select_num_factors", "DistanceMetric",
    "euclidean_distance", "knn", "matching_diagnostics",
    "pairwise_distances", "pseudo_max_distance", "estimate_nuisances",
    "fit_outcome_local_average", "fit_outcome_local_ls", "fit_propensity",
    "local_qmle", "DgpSpec", "EstimatorConfig", "KRule", "McReport",
    "generate", "paper_grid", "run_monte_carlo", "true_theta_01",
    "TuningResult", "cross_validate_k", "dpi_k", "dpi_update",
]
