"""Latent Gaussian system assembly.

Latent vector layout: [beta_c | c (m) | beta_1..beta_r | x_1 (m) | ... | x_r (m)],
so the dimension is 1 + m + r(1 + m). The climatic intercept beta_c keeps
its Gaussian prior inside the latent vector, which leaves seven free
hyperparameters. Observation rows are convex projector rows over the mesh
extended with intercept and replicate indicators; the per-observation
noise variance is scale/tau with a fixed, data-driven scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import Domain, ProjectionRow
from .priors import PriorConfig
from .spde import MaternParams, PrecisionOperator

DESIGNS = ("P", "A", "P+A")
SCALE_FLOOR = 1e-8  # m^2/year^2; keeps degenerate inputs from zero noise variance
DEFAULT_AREAL_SD_FRACTION = 0.03

PARAM_NAMES = ("rho_c", "sigma_c", "rho_x", "sigma_x", "tau_beta", "tau_y", "tau_z")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    """The seven free hyperparameters, stored in log space."""

    log_rho_c: float
    log_sigma_c: float
    log_rho_x: float
    log_sigma_x: float
    log_tau_beta: float
    log_tau_y: float
    log_tau_z: float

    def __post_init__(self):
        if not all(np.isfinite(self.to_array())):
            raise ModelError(f"non-finite hyperparameters: {self}")

    @classmethod
    def from_natural(cls, rho_c, sigma_c, rho_x, sigma_x, tau_beta, tau_y, tau_z):
        vals = [rho_c, sigma_c, rho_x, sigma_x, tau_beta, tau_y, tau_z]
        if any(v <= 0 for v in vals):
            raise ModelError("natural-scale hyperparameters must be positive")
        return cls(*(math.log(v) for v in vals))

    @classmethod
    def from_array(cls, arr) -> "Hyperparameters":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (7,):
            raise ModelError(f"expected 7 log-parameters, got shape {arr.shape}")
        return cls(*arr.tolist())

    def to_array(self) -> np.ndarray:
        return np.array([self.log_rho_c, self.log_sigma_c, self.log_rho_x,
                         self.log_sigma_x, self.log_tau_beta, self.log_tau_y,
                         self.log_tau_z])

    @property
    def rho_c(self) -> float:
        return math.exp(self.log_rho_c)

    @property
    def sigma_c(self) -> float:
        return math.exp(self.log_sigma_c)

    @property
    def rho_x(self) -> float:
        return math.exp(self.log_rho_x)

    @property
    def sigma_x(self) -> float:
        return math.exp(self.log_sigma_x)

    @property
    def tau_beta(self) -> float:
        return math.exp(self.log_tau_beta)

    @property
    def tau_y(self) -> float:
        return math.exp(self.log_tau_y)

    @property
    def tau_z(self) -> float:
        return math.exp(self.log_tau_z)

    def climatic_params(self) -> MaternParams:
        return MaternParams(rho=self.rho_c, sigma=self.sigma_c)

    def annual_params(self) -> MaternParams:
        return MaternParams(rho=self.rho_x, sigma=self.sigma_x)

    def natural_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def default_theta0() -> Hyperparameters:
    """A mild generic starting point for the hyperparameter search."""
    return Hyperparameters.from_natural(
        rho_c=30.0, sigma_c=0.5, rho_x=30.0, sigma_x=0.5,
        tau_beta=4.0, tau_y=10.0, tau_z=10.0)


@dataclass(frozen=True)
class PointObservation:
    site_id: str
    year: int
    value: float  # precip minus evap, m/year
    scale: float  # fixed variance scale s_y

    def __post_init__(self):
        _check_obs(self.value, self.scale, f"point obs at {self.site_id}, year {self.year}")


@dataclass(frozen=True)
class ArealObservation:
    catchment_id: str
    year: int
    value: float  # areal runoff, m/year
    scale: float  # fixed variance scale s_z

    def __post_init__(self):
        _check_obs(self.value, self.scale, f"areal obs at {self.catchment_id}, year {self.year}")


def _check_obs(value: float, scale: float, what: str) -> None:
    if not np.isfinite(value):
        raise ModelError(f"non-finite value in {what}")
    if not (np.isfinite(scale) and scale > 0):
        raise ModelError(f"noise scale must be positive in {what}, got {scale}")


class ObservationSet:
    """Point and areal observations with per-observation variance scales.

    Reads go through point_records()/areal_records(), which count
    accesses; experiment drivers use the counters to audit that a design
    never touches the data type it claims to exclude.
    """

    def __init__(self, point_obs=(), areal_obs=()):
        self._point = tuple(point_obs)
        self._areal = tuple(areal_obs)
        if not self._point and not self._areal:
            raise ModelError("observation set is empty")
        negatives = [o for o in self._point if o.value < 0]
        if negatives:
            warnings.warn(
                f"{len(negatives)} point observation(s) are negative (evaporation "
                "exceeding precipitation); the Gaussian model accepts them")
        self.years: tuple[int, ...] = tuple(sorted(
            {o.year for o in self._point} | {o.year for o in self._areal}))
        self.n_point_reads = 0
        self.n_areal_reads = 0

    @property
    def r(self) -> int:
        return len(self.years)

    def year_index(self, year: int) -> int:
        try:
            return self.years.index(year)
        except ValueError:
            raise ModelError(f"year {year} not among observed years {self.years}") from None

    def point_records(self) -> tuple[PointObservation, ...]:
        self.n_point_reads += 1
        return self._point

    def areal_records(self) -> tuple[ArealObservation, ...]:
        self.n_areal_reads += 1
        return self._areal

    def without_catchment(self, catchment_id: str) -> "ObservationSet":
        kept = [o for o in self._areal if o.catchment_id != catchment_id]
        return ObservationSet(self._point, kept)

    def restricted_to_catchment_years(self, catchment_id: str, years) -> "ObservationSet":
        """Keep only the given years of one catchment's record, everything else intact."""
        years = set(years)
        kept = [o for o in self._areal
                if o.catchment_id != catchment_id or o.year in years]
        return ObservationSet(self._point, kept)

    def areal_years_of(self, catchment_id: str) -> tuple[int, ...]:
        return tuple(sorted(o.year for o in self._areal if o.catchment_id == catchment_id))

    def areal_value(self, catchment_id: str, year: int) -> ArealObservation:
        for o in self._areal:
            if o.catchment_id == catchment_id and o.year == year:
                return o
        raise ModelError(f"no areal observation for {catchment_id}, year {year}")


def compute_point_scale(p_series, e_series, j: int) -> float:
    """Variance scale for the point observation of year index j at one gauge.

    s = (0.1 p)^2 + (0.2 e)^2 - 2 (0.1 p)(0.2 e) Cor(p-series, e-series),
    with the correlation estimated from all pairwise-complete years at the
    gauge. Precipitation carries a 10% and evaporation a 20% relative
    measurement uncertainty.
    """
    p_series = np.asarray(p_series, dtype=float)
    e_series = np.asarray(e_series, dtype=float)
    if p_series.shape != e_series.shape or p_series.size < 2:
        raise ModelError("need precipitation and evaporation series of equal length >= 2")
    if np.nanmin(p_series) < 0 or np.nanmin(e_series) < 0:
        raise ModelError("precipitation and evaporation must be nonnegative")
    cor = _pairwise_correlation(p_series, e_series)
    p, e = p_series[j], e_series[j]
    if not (np.isfinite(p) and np.isfinite(e)):
        raise ModelError(f"missing observation at year index {j}")
    s = (0.1 * p) ** 2 + (0.2 * e) ** 2 - 2.0 * (0.1 * p) * (0.2 * e) * cor
    return max(float(s), SCALE_FLOOR)


def _pairwise_correlation(p_series: np.ndarray, e_series: np.ndarray) -> float:
    ok = np.isfinite(p_series) & np.isfinite(e_series)
    if ok.sum() < 3:
        warnings.warn("fewer than 3 complete precip/evap pairs; using correlation 0")
        return 0.0
    p, e = p_series[ok], e_series[ok]
    if np.ptp(p) == 0.0 or np.ptp(e) == 0.0:
        warnings.warn("constant precipitation or evaporation series; using correlation 0")
        return 0.0
    return float(np.corrcoef(p, e)[0, 1])


def areal_scale(reported_variance: float | None, observed_value: float | None = None,
                default_sd_fraction: float = DEFAULT_AREAL_SD_FRACTION) -> float:
    """Variance scale of an areal observation: the provider's reported variance.

    Missing variances fall back to (default_sd_fraction * observed)^2,
    the level typical of well-rated annual streamflow records.
    """
    if reported_variance is not None:
        if reported_variance <= 0:
            raise ModelError(f"reported variance must be positive, got {reported_variance}")
        return max(float(reported_variance), SCALE_FLOOR)
    if observed_value is None:
        raise ModelError("need the observed value to apply the default variance rule")
    warnings.warn("areal observation without reported variance; "
                  f"defaulting to ({default_sd_fraction:.0%} of value)^2")
    return max(float((default_sd_fraction * abs(observed_value)) ** 2), SCALE_FLOOR)


@dataclass(frozen=True)
class LatentLayout:
    """Index bookkeeping for [beta_c | c | beta_1..beta_r | x_1..x_r]."""

    m: int
    r: int

    @property
    def dim(self) -> int:
        return 1 + self.m + self.r * (1 + self.m)

    @property
    def idx_beta_c(self) -> int:
        return 0

    @property
    def slice_c(self) -> slice:
        return slice(1, 1 + self.m)

    def idx_beta(self, j: int) -> int:
        self._check_year(j)
        return 1 + self.m + j

    def slice_x(self, j: int) -> slice:
        self._check_year(j)
        off = 1 + self.m + self.r + j * self.m
        return slice(off, off + self.m)

    def _check_year(self, j: int) -> None:
        if not 0 <= j < self.r:
            raise ModelError(f"year index {j} outside 0..{self.r - 1}")

    def expand(self, row: ProjectionRow, j: int | None) -> sp.csr_matrix:
        """Full-dimension observation/functional row.

        Climate part always present; j selects the annual replicate block,
        None builds a climatic-only functional (future-year mean).
        """
        cols = [np.array([self.idx_beta_c]), 1 + row.indices]
        vals = [np.array([1.0]), row.weights]
        if j is not None:
            cols.extend([np.array([self.idx_beta(j)]), self.slice_x(j).start + row.indices])
            vals.extend([np.array([1.0]), row.weights])
        cols_arr = np.concatenate(cols)
        vals_arr = np.concatenate(vals)
        return sp.csr_matrix((vals_arr, (np.zeros_like(cols_arr), cols_arr)),
                             shape=(1, self.dim))


@dataclass
class StackedObservations:
    """Observation arrays in assembly order (points first, then areal)."""

    values: np.ndarray        # (n,)
    scales: np.ndarray        # (n,)
    is_areal: np.ndarray      # (n,) bool
    year_idx: np.ndarray      # (n,) int
    target_ids: list[str]
    rows: list[ProjectionRow]

    @property
    def n(self) -> int:
        return self.values.size


class ModelStructure:
    """Everything theta-independent about one fitting problem.

    Holds the domain geometry, the stacked observations for the chosen
    design, the full design matrix, and the precomputed FEM products for
    fast precision assembly.
    """

    def __init__(self, domain: Domain, obs: ObservationSet,
                 prior_config: PriorConfig | None = None, design: str = "P+A"):
        if design not in DESIGNS:
            raise ModelError(f"design must be one of {DESIGNS}, got {design!r}")
        self.domain = domain
        self.obs_set = obs
        self.prior_config = prior_config or PriorConfig()
        self.design = design

        values, scales, is_areal, year_idx, targets, rows = [], [], [], [], [], []
        if design in ("P", "P+A"):
            for o in obs.point_records():
                values.append(o.value)
                scales.append(o.scale)
                is_areal.append(False)
                year_idx.append(obs.year_index(o.year))
                targets.append(o.site_id)
                rows.append(domain.row_for_site(o.site_id))
        if design in ("A", "P+A"):
            for o in obs.areal_records():
                values.append(o.value)
                scales.append(o.scale)
                is_areal.append(True)
                year_idx.append(obs.year_index(o.year))
                targets.append(o.catchment_id)
                rows.append(domain.row_for_catchment(o.catchment_id))
        if not values:
            raise ModelError(f"design {design} leaves an empty likelihood")

        self.stacked = StackedObservations(
            values=np.asarray(values, dtype=float),
            scales=np.asarray(scales, dtype=float),
            is_areal=np.asarray(is_areal, dtype=bool),
            year_idx=np.asarray(year_idx, dtype=np.int64),
            target_ids=targets,
            rows=rows,
        )
        self.layout = LatentLayout(m=domain.n_vertices, r=obs.r)
        self.precision_op = PrecisionOperator(domain.fem)
        self.year_groups = [np.flatnonzero(self.stacked.year_idx == j)
                            for j in range(self.layout.r)]

        m = self.layout.m
        self.F = sp.vstack(
            [sp.hstack([sp.csr_matrix(np.array([[1.0]])), row.as_sparse(m)])
             for row in self.stacked.rows], format="csr")
        self.M = sp.vstack(
            [self.layout.expand(row, j)
             for row, j in zip(self.stacked.rows, self.stacked.year_idx)],
            format="csr")

    @property
    def n_obs(self) -> int:
        return self.stacked.n

    def prior_mean(self) -> np.ndarray:
        mu = np.zeros(self.layout.dim)
        mu[self.layout.idx_beta_c] = self.prior_config.beta_c.mean
        return mu

    def Q_c(self, theta: Hyperparameters) -> sp.csc_matrix:
        return self.precision_op.precision(theta.climatic_params())

    def Q_x(self, theta: Hyperparameters) -> sp.csc_matrix:
        return self.precision_op.precision(theta.annual_params())

    def Q_prior(self, theta: Hyperparameters) -> sp.csc_matrix:
        lay = self.layout
        beta_c_prec = sp.csc_matrix(np.array([[1.0 / self.prior_config.beta_c.sd ** 2]]))
        Qc = self.Q_c(theta)
        Qx = self.Q_x(theta)
        blocks = [beta_c_prec, Qc, theta.tau_beta * sp.eye(lay.r, format="csc")]
        blocks.extend([Qx] * lay.r)
        return sp.block_diag(blocks, format="csc")

    def noise_precision(self, theta: Hyperparameters) -> np.ndarray:
        """Diagonal of D: tau_y/s_y for point rows, tau_z/s_z for areal rows."""
        tau = np.where(self.stacked.is_areal, theta.tau_z, theta.tau_y)
        return tau / self.stacked.scales

    def system(self, theta: Hyperparameters) -> "GaussianSystem":
        return GaussianSystem(
            Q_prior=self.Q_prior(theta),
            prior_mean=self.prior_mean(),
            M=self.M,
            noise_precision=self.noise_precision(theta),
            values=self.stacked.values.copy(),
        )


@dataclass(frozen=True)
class GaussianSystem:
    """Concrete linear-Gaussian system at one hyperparameter value."""

    Q_prior: sp.csc_matrix
    prior_mean: np.ndarray
    M: sp.csr_matrix
    noise_precision: np.ndarray
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.Q_prior.shape[0]

    @property
    def n_obs(self) -> int:
        return self.values.size

    def posterior_precision(self) -> sp.csc_matrix:
        D = sp.diags(self.noise_precision)
        return (self.Q_prior + self.M.T @ D @ self.M).tocsc()


def build_structure(domain: Domain, obs: ObservationSet,
                    prior_config: PriorConfig | None = None,
                    design: str = "P+A") -> ModelStructure:
    return ModelStructure(domain, obs, prior_config, design)


def assemble_system(domain: Domain, obs: ObservationSet, theta: Hyperparameters,
                    prior_config: PriorConfig | None = None,
                    design: str = "P+A") -> GaussianSystem:
    """One-call assembly of the full system at a given theta."""
    return build_structure(domain, obs, prior_config, design).system(theta)
