"""Posterior predictions for catchments, points, observed and future years.

Every prediction is a linear functional of the latent vector. For an
observed year the replicate block contributes its posterior; for a future
year the year effects are fresh replicates, so their prior variance at
the fitted hyperparameters is added instead. Measurement noise enters
sd_predictive only when a noise scale is supplied; sd_process never
includes it. Negative means are flagged, never clamped.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .geometry import GeometryError
from .inference import LatentFit, latent_functional
from .model import ModelError

FUTURE = "FUTURE"


def interval(mean: float, sd: float, level: float = 0.95) -> tuple[float, float]:
    """Central Gaussian interval mean +- z * sd."""
    if sd < 0:
        raise ValueError(f"sd must be nonnegative, got {sd}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    z = float(norm.ppf(0.5 + level / 2.0))
    return mean - z * sd, mean + z * sd


@dataclass(frozen=True)
class Prediction:
    target_id: str
    year: int | str  # observed year label or FUTURE
    mean: float
    sd_process: float
    sd_predictive: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.sd_predictive < self.sd_process - 1e-12:
            raise ValueError("sd_predictive cannot be below sd_process")

    @property
    def negative(self) -> bool:
        return self.mean < 0.0


def _finish(target_id: str, year, mean: float, sd_process: float,
            noise_var: float, level: float) -> Prediction:
    sd_pred = math.sqrt(sd_process ** 2 + noise_var)
    lo, hi = interval(mean, sd_pred, level)
    pred = Prediction(target_id=target_id, year=year, mean=mean,
                      sd_process=sd_process, sd_predictive=sd_pred, lo=lo, hi=hi)
    if pred.negative:
        warnings.warn(f"negative predicted runoff for {target_id}, year {year}: "
                      f"{mean:.3f} m/year (kept, not clamped)")
    return pred


def _noise_var(fit: LatentFit, noise_scale: float | None, areal: bool) -> float:
    if noise_scale is None:
        return 0.0
    if noise_scale <= 0:
        raise ModelError(f"noise scale must be positive, got {noise_scale}")
    tau = fit.theta_map.tau_z if areal else fit.theta_map.tau_y
    return noise_scale / tau


def predict_area(fit: LatentFit, catchment_id: str, year: int,
                 noise_scale: float | None = None, level: float = 0.95) -> Prediction:
    """Posterior areal runoff for an observed year."""
    row = fit.structure.domain.row_for_catchment(catchment_id)
    j = fit.structure.obs_set.year_index(year)
    a = fit.structure.layout.expand(row, j)
    mean, sd = latent_functional(fit, a)
    return _finish(catchment_id, year, mean, sd,
                   _noise_var(fit, noise_scale, areal=True), level)


def predict_future_area(fit: LatentFit, catchment_id: str,
                        noise_scale: float | None = None,
                        level: float = 0.95) -> Prediction:
    """Posterior predictive areal runoff for an unobserved future year.

    The mean is the climatic functional; the variance adds the fresh
    replicate's intercept and field contributions at the MAP.
    """
    row = fit.structure.domain.row_for_catchment(catchment_id)
    return _predict_future(fit, catchment_id, row, noise_scale, areal=True, level=level)


def _predict_future(fit: LatentFit, target_id: str, row, noise_scale,
                    areal: bool, level: float) -> Prediction:
    a = fit.structure.layout.expand(row, None)
    mean, sd_clim = latent_functional(fit, a)
    var_beta = 1.0 / fit.theta_map.tau_beta
    dense = row.dense(fit.structure.layout.m)
    var_x = float(dense @ fit.qx_factor.solve(dense))
    sd_process = math.sqrt(sd_clim ** 2 + var_beta + max(var_x, 0.0))
    return _finish(target_id, FUTURE, mean, sd_process,
                   _noise_var(fit, noise_scale, areal=areal), level)


def predict_point(fit: LatentFit, location, year: int | str,
                  noise_scale: float | None = None, level: float = 0.95,
                  target_id: str = "point") -> Prediction:
    """Point-support prediction at an arbitrary in-mesh location."""
    row = fit.structure.domain.row_for_location(location)
    if year == FUTURE:
        return _predict_future(fit, target_id, row, noise_scale, areal=False, level=level)
    j = fit.structure.obs_set.year_index(year)
    a = fit.structure.layout.expand(row, j)
    mean, sd = latent_functional(fit, a)
    return _finish(target_id, year, mean, sd,
                   _noise_var(fit, noise_scale, areal=False), level)


@dataclass(frozen=True)
class GridPrediction:
    x_km: float
    y_km: float
    prediction: Prediction


def predict_grid(fit: LatentFit, spacing_km: float, year: int | str = FUTURE,
                 bounds: tuple[float, float, float, float] | None = None,
                 level: float = 0.95) -> list[GridPrediction]:
    """Predictions on a regular lattice (row-major in y then x, deterministic).

    bounds = (xmin, ymin, xmax, ymax); defaults to the bounding box of the
    data supports (the mesh interior). Nodes outside the mesh raise.
    """
    if spacing_km <= 0:
        raise GeometryError("grid spacing must be positive")
    mesh = fit.structure.domain.mesh
    if bounds is None:
        data_pts = mesh.vertices[:mesh.n_input]
        xmin, ymin = data_pts.min(axis=0)
        xmax, ymax = data_pts.max(axis=0)
    else:
        xmin, ymin, xmax, ymax = bounds
    xs = np.arange(xmin, xmax + 1e-9, spacing_km)
    ys = np.arange(ymin, ymax + 1e-9, spacing_km)
    out: list[GridPrediction] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # negative-mean warnings handled in bulk
        for yv in ys:
            for xv in xs:
                pred = predict_point(fit, (xv, yv), year, level=level,
                                     target_id=f"grid_{xv:.3f}_{yv:.3f}")
                out.append(GridPrediction(x_km=float(xv), y_km=float(yv), prediction=pred))
    negatives = sum(1 for g in out if g.prediction.negative)
    if negatives:
        warnings.warn(f"{negatives} grid nodes have negative predicted runoff")
    return out
