"""Matérn field parameters and their sparse GMRF precision representation.

The field is parametrized by its range rho (km, correlation ~0.1 scale)
and marginal standard deviation sigma. Internally these map to the scale
kappa = sqrt(8 nu)/rho and the variance-control parameter tau; smoothness
is fixed at nu = 1 (alpha = 2 in two dimensions), the usual identifiable
choice for spatial interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .geometry import FemMatrices
from .linalg import SparseFactor

ALPHA = 2
NU = 1.0
DIM = 2


class ParameterError(ValueError):
    """Invalid field parameter (non-positive range, sigma, ...)."""


@dataclass(frozen=True)
class MaternParams:
    """Interpretable field parameters: range rho [km], sd sigma [m/year]."""

    rho: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ParameterError(f"range must be positive and finite, got {self.rho}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ParameterError(f"sigma must be positive and finite, got {self.sigma}")


@dataclass(frozen=True)
class SpdeParams:
    kappa: float
    tau: float

    def __post_init__(self):
        if self.kappa <= 0 or self.tau <= 0:
            raise ParameterError("kappa and tau must be positive")


def kappa_from_range(rho: float) -> float:
    """kappa = sqrt(8 nu) / rho with nu = 1."""
    if rho <= 0:
        raise ParameterError(f"range must be positive, got {rho}")
    return float(np.sqrt(8.0 * NU) / rho)


def range_from_kappa(kappa: float) -> float:
    if kappa <= 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    return float(np.sqrt(8.0 * NU) / kappa)


def tau_from_sigma(sigma: float, kappa: float) -> float:
    """Variance link for nu = 1, d = 2: sigma^2 = 1 / (4 pi kappa^2 tau^2)."""
    if sigma <= 0 or kappa <= 0:
        raise ParameterError("sigma and kappa must be positive")
    return float(1.0 / (sigma * kappa * np.sqrt(4.0 * np.pi)))


def sigma_from_tau(tau: float, kappa: float) -> float:
    if tau <= 0 or kappa <= 0:
        raise ParameterError("tau and kappa must be positive")
    return float(1.0 / (tau * kappa * np.sqrt(4.0 * np.pi)))


def spde_params(p: MaternParams) -> SpdeParams:
    kappa = kappa_from_range(p.rho)
    return SpdeParams(kappa=kappa, tau=tau_from_sigma(p.sigma, kappa))


@dataclass(frozen=True)
class FieldPrecision:
    """Sparse SPD precision of the discretized field."""

    Q: sp.csc_matrix
    params: MaternParams

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def factor(self) -> SparseFactor:
        return SparseFactor(self.Q)


class PrecisionOperator:
    """Precomputed FEM products for fast precision assembly over many parameters.

    Q(rho, sigma) = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G); only the
    scalar weights change between hyperparameter values, so the three
    sparse terms are built once.
    """

    def __init__(self, fem: FemMatrices):
        C = fem.C.tocsc()
        G = fem.G.tocsc()
        Cinv = sp.diags(1.0 / fem.mass_diagonal())
        K = (G @ Cinv @ G).tocsc()
        K = 0.5 * (K + K.T)
        self._C = C
        self._G = G
        self._K = K
        self.n = C.shape[0]

    def precision(self, p: MaternParams) -> sp.csc_matrix:
        s = spde_params(p)
        tau2 = s.tau ** 2
        k2 = s.kappa ** 2
        Q = tau2 * (k2 ** 2 * self._C + 2.0 * k2 * self._G + self._K)
        return Q.tocsc()


def assemble_precision(fem: FemMatrices, p: MaternParams) -> FieldPrecision:
    """Sparse precision of the GMRF approximating the Matérn field on the mesh."""
    Q = PrecisionOperator(fem).precision(p)
    return FieldPrecision(Q=Q, params=p)


def matern_covariance(dist, p: MaternParams):
    """Matérn covariance with nu = 1: sigma^2 (kappa d) K_1(kappa d).

    Accepts scalars or arrays; d = 0 returns sigma^2 exactly.
    """
    kappa = kappa_from_range(p.rho)
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0):
        raise ParameterError("distances must be nonnegative")
    x = kappa * d
    with np.errstate(invalid="ignore"):
        vals = p.sigma ** 2 * x * kv(1, x)
    vals = np.where(x == 0.0, p.sigma ** 2, vals)
    if np.ndim(dist) == 0:
        return float(vals)
    return vals
