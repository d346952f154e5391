"""Core domain types, correlation kernels and matrix helpers.

Conventions
-----------
Locations are stored as an ``(n, d)`` float array. A realization of the
``p``-variate field is an ``(n, p)`` matrix whose row ``i`` is ``y(x_i)``.
Stacking rows gives the long vector ``y = [y(x_1)^T, ..., y(x_n)^T]^T`` so
that ``cov(y) = R kron Gamma`` with ``Gamma`` as the trailing factor.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_THETA_BOUNDS = (1e-4, 1e2)


class Family(str, enum.Enum):
    """Registered correlation families.

    Both members are exponential in squared (scaled) displacement,
    ``rho = exp(-sum_k theta_k * D_k)``, and differ only in how the
    displacement components ``D_k`` are formed.
    """

    ANISOTROPIC_EXPONENTIAL = "anisotropic_exponential"
    ISOTROPIC_EXPONENTIAL = "isotropic_exponential"

    def num_params(self, d: int) -> int:
        if self is Family.ANISOTROPIC_EXPONENTIAL:
            return d
        return 1

    def components(self, xa: np.ndarray, xb: np.ndarray | None = None) -> np.ndarray:
        """Squared displacement components, shape ``(q, na, nb)``."""
        xa = np.atleast_2d(np.asarray(xa, dtype=float))
        xb = xa if xb is None else np.atleast_2d(np.asarray(xb, dtype=float))
        diff = xa[:, None, :] - xb[None, :, :]
        sq = np.moveaxis(diff * diff, -1, 0)
        if self is Family.ISOTROPIC_EXPONENTIAL:
            return sq.sum(axis=0, keepdims=True)
        return sq


def _as_family(family: Family | str) -> Family:
    try:
        return Family(family)
    except ValueError:
        raise ValidationError(f"unknown correlation family {family!r}") from None


@dataclass(frozen=True)
class CorrelationModel:
    """Parametric spatial correlation ``rho(x, x'; theta)`` on a box ``Theta``."""

    family: Family
    theta: np.ndarray
    theta_bounds: np.ndarray

    def __post_init__(self):
        family = _as_family(self.family)
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float)).copy()
        bounds = np.asarray(self.theta_bounds, dtype=float)
        if bounds.ndim == 1:
            bounds = np.tile(bounds, (theta.size, 1))
        bounds = bounds.copy()
        if bounds.shape != (theta.size, 2):
            raise ValidationError(
                f"theta_bounds shape {bounds.shape} does not match {theta.size} parameters")
        if np.any(bounds[:, 0] <= 0) or np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValidationError("Theta must be a nonempty box inside the positive orthant")
        check_theta(theta, bounds)
        theta.flags.writeable = False
        bounds.flags.writeable = False
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_bounds", bounds)

    @property
    def q(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "CorrelationModel":
        return CorrelationModel(self.family, theta, self.theta_bounds)

    def check_dimension(self, d: int) -> None:
        if self.family.num_params(d) != self.q:
            raise ValidationError(
                f"{self.family.value} needs {self.family.num_params(d)} parameters "
                f"for d={d}, got {self.q}")


def check_theta(theta: np.ndarray, bounds: np.ndarray, slack: float = 0.0) -> None:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValidationError("theta must be finite")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(theta < lo * (1 - slack)) or np.any(theta > hi * (1 + slack)):
        raise ValidationError(f"theta {theta.tolist()} lies outside Theta {bounds.tolist()}")


@dataclass(frozen=True)
class SeparableModel:
    """Fitted separable covariance ``c(x, x') = rho(x, x'; theta) * Gamma``."""

    correlation: CorrelationModel
    gamma: np.ndarray
    allow_singular: bool = False    # PSD gamma, for simulation only

    def __post_init__(self):
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float)).copy()
        if self.allow_singular:
            check_symmetric(gamma, "gamma")
        else:
            check_spd(gamma, "gamma")
        gamma.flags.writeable = False
        object.__setattr__(self, "gamma", gamma)

    @property
    def p(self) -> int:
        return self.gamma.shape[0]


def check_symmetric(a: np.ndarray, name: str, rtol: float = 1e-12) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise ValidationError(f"{name} is not symmetric")


def check_spd(a: np.ndarray, name: str) -> None:
    check_symmetric(a, name)
    if np.linalg.eigvalsh(a).min() <= 0:
        raise ValidationError(f"{name} is not positive definite")


@dataclass(frozen=True)
class Dataset:
    """``N`` realizations of a ``p``-variate field at ``n`` distinct locations.

    ``realizations`` has shape ``(N, n, p)``.
    """

    locations: np.ndarray
    realizations: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.locations, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.realizations, dtype=float)
        if y.ndim == 2:
            y = y[None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValidationError("locations must be an (n, d) array with d >= 1")
        if x.shape[0] < 2:
            raise ValidationError("a dataset needs at least 2 locations")
        if y.ndim != 3 or y.shape[0] < 1 or y.shape[1] != x.shape[0] or y.shape[2] < 1:
            raise ValidationError(
                f"realizations must have shape (N, {x.shape[0]}, p), got {y.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains non-finite values")
        _check_distinct(x)
        x = x.copy()
        y = y.copy()
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "locations", x)
        object.__setattr__(self, "realizations", y)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    @property
    def p(self) -> int:
        return self.realizations.shape[2]

    @property
    def num_realizations(self) -> int:
        return self.realizations.shape[0]

    def stacked(self) -> np.ndarray:
        """Long vectors ``y^(r)`` as rows, shape ``(N, n*p)``."""
        return self.realizations.reshape(self.num_realizations, -1)

    def mean_response(self) -> np.ndarray:
        return self.realizations.mean(axis=0)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.locations[index], self.realizations[:, index, :])

    def column(self, j: int) -> "Dataset":
        return Dataset(self.locations, self.realizations[:, :, j:j + 1])


def _check_distinct(x: np.ndarray) -> None:
    _, counts = np.unique(x, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise ValidationError("locations must be pairwise distinct")


def distance_matrix(locations) -> np.ndarray:
    """Penalty weights: pairwise distances with nearest-neighbor diagonal."""
    x = np.asarray(locations, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValidationError("distance_matrix needs at least 2 locations")
    diff = x[:, None, :] - x[None, :, :]
    g = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    off = g + np.diag(np.full(len(x), np.inf))
    nearest = off.min(axis=1)
    if np.any(nearest <= 0):
        raise ValidationError("duplicate locations give zero distance weights")
    np.fill_diagonal(g, nearest)
    return g


def _check_locations(model: CorrelationModel, locations) -> np.ndarray:
    x = np.asarray(locations, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    model.check_dimension(x.shape[1])
    return x


def correlation_from_components(theta: np.ndarray, comps: np.ndarray) -> np.ndarray:
    return np.exp(-np.tensordot(theta, comps, axes=1))


def correlation_matrix(model: CorrelationModel, locations) -> np.ndarray:
    x = _check_locations(model, locations)
    return correlation_from_components(model.theta, model.family.components(x))


def cross_correlation(model: CorrelationModel, xa, xb) -> np.ndarray:
    """Correlations between two location sets, shape ``(len(xa), len(xb))``."""
    xa = _check_locations(model, xa)
    xb = _check_locations(model, xb)
    return correlation_from_components(model.theta, model.family.components(xa, xb))


def _check_index(k: int, q: int) -> None:
    if not 0 <= k < q:
        raise ValidationError(f"parameter index {k} out of range for q={q}")


def correlation_grad(model: CorrelationModel, locations, k: int) -> np.ndarray:
    """Entrywise derivative of R with respect to ``theta[k]`` (0-based)."""
    _check_index(k, model.q)
    x = _check_locations(model, locations)
    comps = model.family.components(x)
    return -comps[k] * correlation_from_components(model.theta, comps)


def correlation_hess(model: CorrelationModel, locations, k: int, l: int) -> np.ndarray:
    _check_index(k, model.q)
    _check_index(l, model.q)
    x = _check_locations(model, locations)
    comps = model.family.components(x)
    return comps[k] * comps[l] * correlation_from_components(model.theta, comps)


def kronecker_cov(r: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Dense ``R kron Gamma``; block ``(i, j)`` is ``R[i, j] * Gamma``."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if r.shape[0] != r.shape[1] or gamma.shape[0] != gamma.shape[1]:
        raise ValidationError("kronecker_cov needs square factors")
    return np.kron(r, gamma)


def blocks(c: np.ndarray, n: int, p: int) -> np.ndarray:
    """View an ``(np, np)`` matrix as ``(n, n, p, p)`` location blocks."""
    c = np.asarray(c)
    if c.shape != (n * p, n * p):
        raise ValidationError(f"expected a {(n * p, n * p)} matrix, got {c.shape}")
    return c.reshape(n, p, n, p).transpose(0, 2, 1, 3)


def default_bounds(q: int, low: float = DEFAULT_THETA_BOUNDS[0],
                   high: float = DEFAULT_THETA_BOUNDS[1]) -> np.ndarray:
    return np.tile([low, high], (q, 1)).astype(float)
