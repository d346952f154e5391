"""Maximum-likelihood baseline for the separable model.

``Gamma`` is profiled out in closed form,
``Gamma_hat(theta) = (1/(nN)) sum_r Y_r^T R(theta)^{-1} Y_r``,
leaving a ``q``-dimensional search over ``theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import GspsError, NumericalError, ValidationError
from .model import (CorrelationModel, Dataset, Family, SeparableModel,
                    correlation_from_components, default_bounds)

LOG_2PI = math.log(2 * math.pi)


def _as_arrays(locations, realizations):
    x = np.asarray(locations, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(realizations, dtype=float)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3 or y.shape[1] != x.shape[0]:
        raise ValidationError(f"realizations must be (N, {x.shape[0]}, p), got {y.shape}")
    return x, y


def _chol(a: np.ndarray, name: str):
    try:
        return linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"{name} is not positive definite") from exc


def _logdet(factor) -> float:
    return 2.0 * float(np.log(np.diag(factor[0])).sum())


def neg_loglik(theta, gamma, locations, realizations,
               family=Family.ANISOTROPIC_EXPONENTIAL) -> float:
    """Exact Gaussian negative log-likelihood of i.i.d. realizations.

    Uses only the ``n x n`` and ``p x p`` factorizations.
    """
    x, y = _as_arrays(locations, realizations)
    num, n, p = y.shape
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if gamma.shape != (p, p):
        raise ValidationError(f"gamma must be {p}x{p}")
    r = correlation_from_components(np.atleast_1d(np.asarray(theta, float)),
                                    Family(family).components(x))
    fr = _chol(r, "R(theta)")
    fg = _chol(gamma, "Gamma")
    a = linalg.cho_solve(fr, y.transpose(1, 0, 2).reshape(n, -1))
    t = np.einsum("nrp,nrq->pq", y.transpose(1, 0, 2), a.reshape(n, num, p))
    quad = float(np.trace(linalg.cho_solve(fg, t)))
    return 0.5 * num * (n * p * LOG_2PI + p * _logdet(fr) + n * _logdet(fg)) + 0.5 * quad


class ProfileLikelihood:
    """Negative log-likelihood with ``Gamma`` replaced by its maximizer."""

    def __init__(self, dataset: Dataset, family=Family.ANISOTROPIC_EXPONENTIAL):
        self.family = Family(family)
        self.comps = self.family.components(dataset.locations)
        self.y = dataset.realizations
        self.num, self.n, self.p = self.y.shape
        self.ycols = self.y.transpose(1, 0, 2).reshape(self.n, -1)

    def _parts(self, theta):
        r = correlation_from_components(theta, self.comps)
        fr = _chol(r, "R(theta)")
        a = linalg.cho_solve(fr, self.ycols)
        t = np.einsum("irp,irq->pq", self.ycols.reshape(self.n, self.num, self.p),
                      a.reshape(self.n, self.num, self.p))
        gamma = t / (self.n * self.num)
        return r, fr, a, (gamma + gamma.T) / 2

    def gamma_hat(self, theta) -> np.ndarray:
        return self._parts(np.atleast_1d(np.asarray(theta, float)))[3]

    def value(self, theta) -> float:
        _, fr, _, gamma = self._parts(np.atleast_1d(np.asarray(theta, float)))
        fg = _chol(gamma, "profiled Gamma")
        n, p, num = self.n, self.p, self.num
        return 0.5 * num * (n * p * LOG_2PI + p * _logdet(fr) + n * _logdet(fg) + n * p)

    def value_and_grad(self, theta):
        theta = np.atleast_1d(np.asarray(theta, float))
        r, fr, a, gamma = self._parts(theta)
        fg = _chol(gamma, "profiled Gamma")
        n, p, num = self.n, self.p, self.num
        value = 0.5 * num * (n * p * LOG_2PI + p * _logdet(fr) + n * _logdet(fg) + n * p)
        ablk = a.reshape(n, num, p)
        m = np.einsum("irp,pq,jrq->ij", ablk, linalg.cho_solve(fg, np.eye(p)), ablk)
        rinv = linalg.cho_solve(fr, np.eye(n))
        dr = -self.comps * r
        grad = 0.5 * np.einsum("kij,ij->k", dr, num * p * rinv - m)
        return value, grad


@dataclass
class MleFit:
    theta_hat: np.ndarray
    gamma_hat: np.ndarray
    neg_loglik: float
    family: Family
    theta_bounds: np.ndarray
    starts: list = field(default_factory=list)
    converged: bool = True

    def model(self) -> SeparableModel:
        return SeparableModel(CorrelationModel(self.family, self.theta_hat, self.theta_bounds),
                              self.gamma_hat)

    def to_json(self) -> dict:
        return {
            "method": "mle",
            "family": self.family.value,
            "theta": self.theta_hat.tolist(),
            "theta_bounds": self.theta_bounds.tolist(),
            "gamma": self.gamma_hat.tolist(),
            "neg_loglik": self.neg_loglik,
            "diagnostics": {"starts": self.starts, "converged": self.converged},
        }


def mle_fit(dataset: Dataset, family=Family.ANISOTROPIC_EXPONENTIAL, starts: int = 10,
            seed: int = 0, theta_bounds=None, max_iter: int = 500) -> MleFit:
    family = Family(family)
    q = family.num_params(dataset.d)
    bounds = default_bounds(q) if theta_bounds is None else np.asarray(theta_bounds, float)
    if bounds.ndim == 1:
        bounds = np.tile(bounds, (q, 1))
    if starts < 1:
        raise ValidationError("mle_fit needs at least one start")
    prof = ProfileLikelihood(dataset, family)
    lo, hi = np.log(bounds[:, 0]), np.log(bounds[:, 1])

    def fun(u):
        theta = np.clip(np.exp(u), bounds[:, 0], bounds[:, 1])
        try:
            value, grad = prof.value_and_grad(theta)
        except NumericalError:
            return np.inf, np.zeros_like(u)
        return value, grad * theta

    rng = np.random.default_rng(seed)
    records = []
    for k in range(starts):
        u0 = rng.uniform(lo, hi)
        res = optimize.minimize(fun, u0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                                options={"maxiter": max_iter, "gtol": 1e-8})
        theta = np.clip(np.exp(res.x), bounds[:, 0], bounds[:, 1])
        value = float(res.fun)
        records.append({"start": np.exp(u0).tolist(), "theta": theta.tolist(),
                        "objective": value, "ok": bool(res.success) and np.isfinite(value)})
    finite = [(rec["objective"], i) for i, rec in enumerate(records) if np.isfinite(rec["objective"])]
    if not finite:
        raise GspsError("every MLE start failed")
    _, best = min(finite)
    theta = np.asarray(records[best]["theta"])
    return MleFit(theta, prof.gamma_hat(theta), records[best]["objective"], family, bounds,
                  records, any(rec["ok"] for rec in records))
