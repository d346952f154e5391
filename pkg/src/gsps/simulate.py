"""Sampling zero-mean separable multivariate Gaussian random fields."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import Dataset, SeparableModel, correlation_matrix

# Eigenvalues in (-EIG_CLAMP, 0) are treated as round-off and set to zero.
EIG_CLAMP = 1e-10


@dataclass(frozen=True)
class SimulationSpec:
    locations: np.ndarray
    model: SeparableModel
    num_realizations: int
    seed: int

    def __post_init__(self):
        if int(self.num_realizations) < 1:
            raise ValidationError("num_realizations must be >= 1")


def psd_sqrt_factor(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return ``L`` with ``L @ L.T == a`` from a symmetric eigendecomposition.

    Unlike a Cholesky factor this accepts rank-deficient input; tiny negative
    eigenvalues from round-off are clamped to zero.
    """
    a = np.asarray(a, dtype=float)
    lam, q = np.linalg.eigh((a + a.T) / 2)
    if lam.min() < -EIG_CLAMP * max(1.0, abs(lam).max()):
        raise ValidationError(f"{name} is not positive semidefinite (min eigenvalue {lam.min():.3g})")
    return q * np.sqrt(np.clip(lam, 0.0, None))


def sample_matrix_normal(r: np.ndarray, gamma: np.ndarray, num: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw ``num`` matrices ``L_R Z L_Gamma^T``, shape ``(num, n, p)``."""
    lr = psd_sqrt_factor(r, "R")
    lg = psd_sqrt_factor(gamma, "Gamma")
    z = rng.standard_normal((num, lr.shape[1], lg.shape[1]))
    return lr @ z @ lg.T


def sample_grf(spec: SimulationSpec) -> Dataset:
    locations = np.asarray(spec.locations, dtype=float)
    r = correlation_matrix(spec.model.correlation, locations)
    rng = np.random.default_rng(spec.seed)
    y = sample_matrix_normal(r, spec.model.gamma, int(spec.num_realizations), rng)
    return Dataset(locations, y)


def random_true_params(d: int, p: int, w: int | None = None, seed=None,
                       radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``theta*`` uniformly on the positive-orthant sphere and ``Gamma* = A^T A``.

    ``A`` is ``w x p`` with i.i.d. standard normal entries; ``w`` defaults to
    ``p + 3``.
    """
    if d < 1 or p < 1:
        raise ValidationError("d and p must be >= 1")
    w = p + 3 if w is None else int(w)
    if w <= p:
        raise ValidationError(f"w must exceed p (got w={w}, p={p})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = np.abs(rng.standard_normal(d))
    while not np.all(z > 0):
        z = np.abs(rng.standard_normal(d))
    theta = radius * z / np.linalg.norm(z)
    a = rng.standard_normal((w, p))
    return theta, a.T @ a


def uniform_locations(n: int, d: int, rng: np.random.Generator,
                      low: float = 0.0, high: float = 10.0) -> np.ndarray:
    return rng.uniform(low, high, size=(n, d))
