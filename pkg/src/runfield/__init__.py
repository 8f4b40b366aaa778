"""runfield: two-field latent Gaussian interpolation of annual runoff.

Fuses point observations (precipitation minus evaporation) and areal
observations (catchment runoff) of the same underlying field, with a
climatic spatial effect shared across years and year-specific replicates.
Areal supports are grid-node averages on a shared lattice, so nested
catchments obey the water balance exactly.
"""

__version__ = "0.1.0"

from .geometry import (Catchment, Domain, FemMatrices, GeometryError,
                       MeshSettings, Point2D, ProjectionRow, TriangleMesh,
                       areal_projector, build_mesh, catchment_from_polygon,
                       fem_matrices, grid_nodes_for_polygon, point_projector)
from .inference import (LatentFit, fit_at_fixed_theta, fit_map,
                        latent_functional, log_marginal_posterior)
from .model import (ArealObservation, Hyperparameters, ModelError,
                    ModelStructure, ObservationSet, PointObservation,
                    areal_scale, assemble_system, build_structure,
                    compute_point_scale, default_theta0)
from .prediction import (FUTURE, Prediction, interval, predict_area,
                         predict_future_area, predict_grid, predict_point)
from .priors import (GaussianPriorSpec, PcMaternSpec, PcPrecisionSpec,
                     PriorConfig, hyperprior_logpdf, pc_matern_logpdf,
                     pc_precision_logpdf)
from .scoring import ScoreReport, coverage, crps_gaussian, rmse
from .spde import (MaternParams, SpdeParams, assemble_precision,
                   kappa_from_range, matern_covariance, sigma_from_tau,
                   tau_from_sigma)

__all__ = [name for name in dir() if not name.startswith("_")]
