"""Ordinary-Kriging baseline over areal supports with grid-node-averaged covariances.

Each year is interpolated independently. Covariances between catchments
are averages of a point covariance over all grid-node pairs, so a
subcatchment correlates more strongly with its parent than a disjoint
neighbor at the same centroid distance. The point model is a plain
exponential with the practical-range convention (correlation e^-3 at the
stated range); the baseline is meant for qualitative comparison, not for
reproducing any particular variogram library.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist

from .geometry import Catchment

SILL_FLOOR = 1e-9
NODE_TOL = 1e-9  # km; node identity tolerance for the nugget


class KrigingError(ValueError):
    pass


@dataclass(frozen=True)
class VariogramModel:
    """Exponential variogram: gamma(d) = nugget + sill (1 - exp(-3 d / range))."""

    nugget: float
    sill: float
    range_km: float

    def __post_init__(self):
        if self.nugget < 0:
            raise KrigingError(f"nugget must be nonnegative, got {self.nugget}")
        if self.sill <= 0:
            raise KrigingError(f"sill must be positive, got {self.sill}")
        if self.range_km <= 0:
            raise KrigingError(f"range must be positive, got {self.range_km}")

    def point_covariance(self, d):
        return self.sill * np.exp(-3.0 * np.asarray(d, dtype=float) / self.range_km)

    def semivariance(self, d):
        return self.nugget + self.sill - self.point_covariance(d)


def catchment_covariance(a: Catchment, b: Catchment, v: VariogramModel) -> float:
    """Mean point covariance over all grid-node pairs; nugget only for shared nodes."""
    if a.n_nodes == 0 or b.n_nodes == 0:
        raise KrigingError("empty catchment discretization")
    d = cdist(a.nodes, b.nodes)
    cov = v.point_covariance(d)
    cov[d < NODE_TOL] += v.nugget
    return float(cov.mean())


def _centroid_distances(catchments: list[Catchment]) -> np.ndarray:
    cents = np.array([c.nodes.mean(axis=0) for c in catchments])
    return cdist(cents, cents)


def default_variogram(catchments: list[Catchment], values) -> VariogramModel:
    """Fallback model when the empirical fit is not identifiable."""
    values = np.asarray(values, dtype=float)
    sill = max(float(np.var(values)), SILL_FLOOR)
    d = _centroid_distances(list(catchments))
    rng = float(d.max()) / 2.0 if d.max() > 0 else 10.0
    return VariogramModel(nugget=0.0, sill=sill, range_km=max(rng, 1.0))


def fit_variogram(values, catchments, n_lags: int = 8) -> VariogramModel:
    """Weighted-least-squares exponential fit to empirical semivariances.

    values: one year of areal observations, aligned with catchments.
    Pair semivariances are binned over centroid-distance lags and weighted
    by pair count / lag^2. Falls back to a default model (with a warning)
    when there are not enough informative lags.
    """
    catchments = list(catchments)
    values = np.asarray(values, dtype=float)
    if len(catchments) < 3:
        raise KrigingError("variogram fit needs at least 3 observed catchments")
    if len(catchments) != values.size:
        raise KrigingError("values/catchments length mismatch")

    order = np.argsort([c.id for c in catchments])  # ordering-invariant fit
    catchments = [catchments[i] for i in order]
    values = values[order]

    d = _centroid_distances(catchments)
    iu = np.triu_indices(len(catchments), k=1)
    h = d[iu]
    gamma = 0.5 * (values[iu[0]] - values[iu[1]]) ** 2

    if float(np.var(values)) <= SILL_FLOOR:
        warnings.warn("constant areal observations; variogram sill at lower bound")
        return VariogramModel(nugget=0.0, sill=SILL_FLOOR,
                              range_km=max(float(h.max()) / 2.0, 1.0))

    edges = np.linspace(0.0, float(h.max()) * (1 + 1e-9), n_lags + 1)
    lag_h, lag_gamma, lag_w = [], [], []
    for k in range(n_lags):
        sel = (h >= edges[k]) & (h < edges[k + 1])
        if not np.any(sel):
            continue
        hb = float(h[sel].mean())
        if hb <= 0:
            continue
        lag_h.append(hb)
        lag_gamma.append(float(gamma[sel].mean()))
        lag_w.append(sel.sum() / hb ** 2)
    if len(lag_h) < 3:
        warnings.warn("too few variogram lags; falling back to the default model")
        return default_variogram(catchments, values)

    lag_h = np.asarray(lag_h)
    lag_gamma = np.asarray(lag_gamma)
    wts = np.sqrt(np.asarray(lag_w))

    def residuals(params):
        nugget, sill, rng = params
        model = VariogramModel(nugget=max(nugget, 0.0), sill=max(sill, SILL_FLOOR),
                               range_km=max(rng, 1e-3))
        return wts * (model.semivariance(lag_h) - lag_gamma)

    sill0 = max(float(np.var(values)), SILL_FLOOR)
    x0 = np.array([0.0, sill0, max(float(lag_h.max()) / 2.0, 1.0)])
    sol = least_squares(residuals, x0,
                        bounds=([0.0, SILL_FLOOR, 1e-3],
                                [np.inf, np.inf, 10.0 * float(lag_h.max())]))
    nugget, sill, rng = sol.x
    return VariogramModel(nugget=float(nugget), sill=float(sill), range_km=float(rng))


@dataclass(frozen=True)
class KrigingResult:
    mean: float
    sd: float
    weights: np.ndarray
    variance_floored: bool = False
    ridged: bool = False


def krige(target: Catchment, observed: list[tuple[Catchment, float]],
          v: VariogramModel) -> KrigingResult:
    """Ordinary-Kriging prediction of the target's areal value.

    Weights come from the Lagrange-augmented system, so they sum to one;
    negative weights are allowed (reported in the result). Singular
    systems get a tiny ridge; negative numerical variances are floored.
    """
    if not observed:
        raise KrigingError("kriging needs at least one observed catchment")
    cats = [c for c, _ in observed]
    z = np.array([val for _, val in observed], dtype=float)
    k = len(cats)

    K = np.empty((k + 1, k + 1))
    for i in range(k):
        for j in range(i, k):
            K[i, j] = K[j, i] = catchment_covariance(cats[i], cats[j], v)
    K[:k, k] = 1.0
    K[k, :k] = 1.0
    K[k, k] = 0.0
    rhs = np.empty(k + 1)
    for i in range(k):
        rhs[i] = catchment_covariance(target, cats[i], v)
    rhs[k] = 1.0

    ridged = False
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite kriging solution")
    except np.linalg.LinAlgError:
        warnings.warn("singular kriging system; applying ridge 1e-8")
        ridged = True
        K2 = K.copy()
        K2[:k, :k] += 1e-8 * np.eye(k)
        sol = np.linalg.solve(K2, rhs)
    w, lagrange = sol[:k], sol[k]

    mean = float(w @ z)
    c00 = catchment_covariance(target, target, v)
    var = float(c00 - w @ rhs[:k] - lagrange)
    floored = var < 0.0
    if floored:
        warnings.warn(f"kriging variance {var:.3e} floored at 0")
        var = 0.0
    return KrigingResult(mean=mean, sd=math.sqrt(var), weights=w,
                         variance_floored=floored, ridged=ridged)
