"""Co-kriging prediction for the separable model.

With ``C = R kron Gamma`` the weights ``(r^T kron Gamma)(R kron Gamma)^{-1}``
reduce to ``(r^T R^{-1}) kron I_p``, so only the ``n x n`` correlation
matrix is ever factorized.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import NumericalError, ValidationError
from .model import SeparableModel, correlation_matrix, cross_correlation

JITTER = 1e-10


def _factor(r: np.ndarray):
    try:
        return linalg.cho_factor(r, lower=True)
    except linalg.LinAlgError:
        pass
    warnings.warn("correlation matrix is numerically singular; adding 1e-10 jitter",
                  RuntimeWarning, stacklevel=3)
    try:
        return linalg.cho_factor(r + JITTER * np.eye(len(r)), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("correlation matrix is singular at the training locations") from exc


@dataclass
class _Local:
    locations: np.ndarray
    ybar: np.ndarray
    factor: tuple
    coef: np.ndarray          # R^{-1} ybar


class Predictor:
    """Prediction at new locations from a fitted model and training means.

    If ``partition`` is given each block is treated as a separate kriging
    system. ``blend="nearest"`` answers a query from the block holding the
    nearest training location; ``blend="idw"`` mixes block predictions with
    inverse-distance weights.
    """

    def __init__(self, model: SeparableModel, locations, ybar, partition=None,
                 blend: str = "nearest"):
        x = np.asarray(locations, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        ybar = np.asarray(ybar, dtype=float)
        if ybar.ndim == 1:
            ybar = ybar[:, None]
        if ybar.shape != (x.shape[0], model.p):
            raise ValidationError(f"ybar must have shape {(x.shape[0], model.p)}, got {ybar.shape}")
        if blend not in ("nearest", "idw"):
            raise ValidationError(f"unknown blend rule {blend!r}")
        model.correlation.check_dimension(x.shape[1])
        self.model = model
        self.locations = x
        self.ybar = ybar
        self.blend = blend
        index_blocks = [np.arange(len(x))] if partition is None else partition.blocks()
        self._owner = np.empty(len(x), dtype=int)
        self._locals = []
        for b, idx in enumerate(index_blocks):
            self._owner[idx] = b
            xb = x[idx]
            factor = _factor(correlation_matrix(model.correlation, xb))
            self._locals.append(_Local(xb, ybar[idx], factor, linalg.cho_solve(factor, ybar[idx])))

    @classmethod
    def from_dataset(cls, model: SeparableModel, dataset, partition=None, blend="nearest"):
        return cls(model, dataset.locations, dataset.mean_response(), partition, blend)

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    def _queries(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 0:
            x0 = x0.reshape(1, 1)
        elif x0.ndim == 1:
            x0 = x0.reshape(1, -1) if x0.size == self.d else x0[:, None]
        if x0.shape[1] != self.d:
            raise ValidationError(f"query points must have dimension {self.d}")
        return x0

    def _block_weights(self, x0: np.ndarray) -> np.ndarray:
        if len(self._locals) == 1:
            return np.ones((len(x0), 1))
        d2 = ((x0[:, None, :] - self.locations[None, :, :]) ** 2).sum(-1)
        if self.blend == "nearest":
            w = np.zeros((len(x0), len(self._locals)))
            w[np.arange(len(x0)), self._owner[np.argmin(d2, axis=1)]] = 1.0
            return w
        nearest = np.stack([d2[:, self._owner == b].min(axis=1)
                            for b in range(len(self._locals))], axis=1)
        dist = np.sqrt(nearest)
        exact = dist == 0
        w = np.where(exact.any(axis=1, keepdims=True), exact.astype(float),
                     1.0 / np.where(exact, 1.0, dist))
        return w / w.sum(axis=1, keepdims=True)

    def weights(self, x0) -> np.ndarray:
        """Kriging weights ``R^{-1} r(x0)`` for an unblocked predictor, shape ``(m, n)``."""
        if len(self._locals) != 1:
            raise ValidationError("weights() is only defined for an unblocked predictor")
        x0 = self._queries(x0)
        loc = self._locals[0]
        r = cross_correlation(self.model.correlation, loc.locations, x0)
        return linalg.cho_solve(loc.factor, r).T

    def predict_mean(self, x0) -> np.ndarray:
        """Predicted responses, shape ``(m, p)`` (or ``(p,)`` for a single point)."""
        single = np.asarray(x0).ndim <= 1 and np.asarray(x0).size == self.d
        x0 = self._queries(x0)
        bw = self._block_weights(x0)
        out = np.zeros((len(x0), self.model.p))
        for b, loc in enumerate(self._locals):
            rows = bw[:, b] > 0
            if not rows.any():
                continue
            r = cross_correlation(self.model.correlation, x0[rows], loc.locations)
            out[rows] += bw[rows, b, None] * (r @ loc.coef)
        return out[0] if single else out

    def variance_factor(self, x0) -> np.ndarray:
        """``max(0, 1 - r^T R^{-1} r)`` per query point."""
        x0 = self._queries(x0)
        bw = self._block_weights(x0)
        out = np.zeros(len(x0))
        for b, loc in enumerate(self._locals):
            rows = bw[:, b] > 0
            if not rows.any():
                continue
            r = cross_correlation(self.model.correlation, loc.locations, x0[rows])
            quad = np.einsum("ij,ij->j", r, linalg.cho_solve(loc.factor, r))
            out[rows] += bw[rows, b] * np.clip(1.0 - quad, 0.0, None)
        return out

    def predict_cov(self, x0) -> np.ndarray:
        """Predictive covariance ``(1 - r^T R^{-1} r) Gamma`` per query point."""
        single = np.asarray(x0).ndim <= 1 and np.asarray(x0).size == self.d
        factor = self.variance_factor(x0)
        cov = factor[:, None, None] * self.model.gamma
        return cov[0] if single else cov


def mspe(predictor, test_dataset) -> float:
    """Mean squared error against the realization-averaged test responses."""
    if test_dataset.n == 0:
        raise ValidationError("empty test set")
    pred = predictor.predict_mean(test_dataset.locations)
    truth = test_dataset.mean_response()
    if pred.shape != truth.shape:
        raise ValidationError(f"prediction shape {pred.shape} does not match test data {truth.shape}")
    return float(np.mean((pred - truth) ** 2))
