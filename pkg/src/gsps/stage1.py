"""Weighted l1-penalized log-determinant program with a spectral box.

Solves

    minimize   <S, P> - log det P + alpha * <W, |P|>
    subject to a* I <= P <= b* I

by ADMM on the split ``P = Z``: the smooth term plus the box constraint is
handled through an eigenvalue prox on ``P`` and the weighted l1 term through
soft-thresholding of ``Z``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .model import Dataset, check_symmetric, distance_matrix


@dataclass(frozen=True)
class SolverConfig:
    """ADMM settings.

    Stopping uses ``abs_tol + rel_tol * scale`` thresholds on the primal
    residual ``||P - Z||_F`` and the dual residual ``rho ||Z - Z_prev||_F``.

    ``rho=None`` picks ``rho_scale * (tr(S) / dim)**2``. The log-det prox is
    invariant under ``S -> cS, P -> P/c, rho -> c**2 rho``, so this keeps the
    penalty matched to the data scale. ``accelerate`` turns on Nesterov-type
    extrapolation with restart; ``adaptive_penalty`` turns on residual
    balancing, checked every ``balance_every`` iterations and applied only
    when one residual exceeds the other by ``balance_ratio`` (each rescaling
    restarts the extrapolation). Setting ``rho=1, accelerate=False,
    penalty_factor=2, balance_ratio=10, balance_every=1`` gives textbook
    ADMM with residual balancing.
    """

    rho: float | None = None
    rho_scale: float = 1e-4
    abs_tol: float = 1e-6
    rel_tol: float = 1e-6
    max_iter: int = 5000
    accelerate: bool = True
    restart_eta: float = 0.999
    adaptive_penalty: bool = True
    penalty_factor: float = 4.0
    balance_ratio: float = 1000.0
    balance_every: int = 200

    def __post_init__(self):
        if self.rho is not None and self.rho <= 0:
            raise ValidationError("ADMM penalty rho must be positive")
        if self.rho_scale <= 0:
            raise ValidationError("rho_scale must be positive")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_iter < 1 or self.balance_every < 1:
            raise ValidationError("max_iter and balance_every must be >= 1")
        if not 0 < self.restart_eta <= 1:
            raise ValidationError("restart_eta must lie in (0, 1]")
        if self.penalty_factor <= 1 or self.balance_ratio <= 1:
            raise ValidationError("penalty_factor and balance_ratio must exceed 1")

    def initial_rho(self, s: np.ndarray) -> float:
        if self.rho is not None:
            return float(self.rho)
        scale = float(np.trace(s)) / len(s)
        return self.rho_scale * scale * scale if scale > 0 else 1.0


@dataclass(frozen=True)
class Stage1Problem:
    s: np.ndarray
    w: np.ndarray
    alpha: float
    a_star: float
    b_star: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        w = np.asarray(self.w, dtype=float)
        check_symmetric(s, "S", rtol=1e-10)
        check_symmetric(w, "W", rtol=1e-10)
        if w.shape != s.shape:
            raise ValidationError("S and W must have the same shape")
        if np.any(w < 0):
            raise ValidationError("penalty weights must be nonnegative")
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if not (0 < self.a_star <= self.b_star < math.inf):
            raise ValidationError("need 0 < a* <= b* < inf")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return self.s.shape[0]

    def objective(self, p: np.ndarray) -> float:
        sign, logdet = np.linalg.slogdet(p)
        if sign <= 0:
            return math.inf
        return float(np.sum(self.s * p) - logdet + self.alpha * np.sum(self.w * np.abs(p)))


@dataclass
class PrecisionEstimate:
    p_hat: np.ndarray
    c_hat: np.ndarray
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    objective: float
    rho: float
    primal_trace: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)
    seconds: float = 0.0

    def monotone_violations(self, slack: float = 1e-10) -> int:
        obj = np.asarray(self.objective_trace)
        return int(np.sum(np.diff(obj) > slack * np.maximum(1.0, np.abs(obj[1:]))))

    def summary(self) -> dict:
        p = self.p_hat
        off = ~np.eye(p.shape[0], dtype=bool)
        return {
            "dim": int(p.shape[0]),
            "iterations": self.iterations,
            "converged": self.converged,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "objective": self.objective,
            "rho": self.rho,
            "nonzeros": int(np.count_nonzero(p)),
            "offdiag_nonzero_fraction": float(np.count_nonzero(p[off]) / max(off.sum(), 1)),
            "seconds": self.seconds,
        }


def sample_covariance(dataset: Dataset) -> np.ndarray:
    y = dataset.stacked()
    return y.T @ y / y.shape[0]


def penalty_weights(g: np.ndarray, p: int) -> np.ndarray:
    """``G kron 1 1^T``: every entry of a location block shares its weight."""
    return np.kron(g, np.ones((p, p)))


def prox_logdet_box(a: np.ndarray, s: np.ndarray, rho: float,
                    a_star: float, b_star: float) -> np.ndarray:
    """argmin over ``a* I <= P <= b* I`` of ``<S,P> - logdet P + rho/2 ||P - A||_F^2``."""
    if rho <= 0:
        raise ValidationError("rho must be positive")
    return _prox_eig(np.asarray(a, dtype=float), np.asarray(s, dtype=float),
                     rho, a_star, b_star)[0]


def _prox_eig(a, s, rho, a_star, b_star):
    m = rho * a - s
    lam, q = np.linalg.eigh((m + m.T) / 2)
    x = np.clip((lam + np.sqrt(lam * lam + 4 * rho)) / (2 * rho), a_star, b_star)
    out = (q * x) @ q.T
    return (out + out.T) / 2, x


def soft_threshold_weighted(z: np.ndarray, w: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(z) * np.maximum(np.abs(z) - tau * w, 0.0)


def project_box(p: np.ndarray, a_star: float, b_star: float) -> np.ndarray:
    p = (p + p.T) / 2
    lam, q = np.linalg.eigh(p)
    if lam.min() >= a_star and lam.max() <= b_star:
        return p
    out = (q * np.clip(lam, a_star, b_star)) @ q.T
    return (out + out.T) / 2


def default_box(s: np.ndarray) -> tuple[float, float]:
    """Wide spectral bounds that stay inactive unless the user knows better."""
    lam = np.linalg.eigvalsh(s)
    top = lam.max()
    tol = max(top, 0.0) * s.shape[0] * np.finfo(float).eps
    pos = lam[lam > tol]
    a_star = 1e-6 / top if top > tol else 1e-6
    b_star = 1e6 * max(1.0, 1.0 / pos.min()) if pos.size else 1e6
    return a_star, b_star


def default_alpha(n: int, p: int, num_realizations: int, c: float = 1e-2) -> float:
    """``c * sqrt(log(np) / N)``; zero when ``np == 1``."""
    if min(n, p, num_realizations) < 1:
        raise ValidationError("n, p and N must be >= 1")
    return c * math.sqrt(math.log(n * p) / num_realizations)


def min_realizations(n: int, p: int, m: float) -> int:
    """Sample-size threshold ``ceil(2[(M+2) ln(np) + ln 4])`` for the error bounds."""
    return math.ceil(2 * ((m + 2) * math.log(n * p) + math.log(4)))


def theoretical_alpha_window(gamma, n: int, num_realizations: int, m: float) -> tuple[float, float]:
    """Range of ``alpha`` for which the high-probability error bounds apply."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    p = gamma.shape[0]
    top = 40.0 * float(np.max(np.diag(gamma)))
    n0 = min_realizations(n, p, m)
    return top * math.sqrt(n0 / num_realizations), top


def admm_solve(problem: Stage1Problem, config: SolverConfig | None = None) -> PrecisionEstimate:
    """Scaled-form ADMM, optionally accelerated with restart.

    The accelerated variant extrapolates ``(Z, U)`` while the combined
    residual ``||U - U_hat||^2 + ||Z - Z_hat||^2`` keeps shrinking by a factor
    ``restart_eta``, and restarts from the last accepted iterate otherwise.
    """
    config = config or SolverConfig()
    s, w, alpha = problem.s, problem.w, problem.alpha
    a_star, b_star = problem.a_star, problem.b_star
    rho = config.initial_rho(s)
    t0 = time.perf_counter()

    z = np.diag(np.clip(1.0 / np.maximum(np.diag(s), 1e-300), a_star, b_star))
    u = np.zeros_like(s)
    z_hat, u_hat = z, u
    momentum, c_prev = 1.0, math.inf
    primal_trace, dual_trace, obj_trace = [], [], []
    converged = False
    r_norm = s_norm = math.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        p, eig = _prox_eig(z_hat - u_hat, s, rho, a_star, b_star)
        z_new = soft_threshold_weighted(p + u_hat, w, alpha / rho)
        u_new = u_hat + p - z_new
        if not (np.all(np.isfinite(z_new)) and np.all(np.isfinite(u_new))):
            raise NumericalError(f"ADMM produced non-finite iterates at iteration {it}")

        r_norm = float(np.linalg.norm(p - z_new))
        s_norm = float(rho * np.linalg.norm(z_new - z_hat))
        primal_trace.append(r_norm)
        dual_trace.append(s_norm)
        obj_trace.append(float(np.sum(s * p) - np.log(eig).sum()
                               + alpha * np.sum(w * np.abs(p))))
        eps_pri = config.abs_tol + config.rel_tol * max(np.linalg.norm(p), np.linalg.norm(z_new))
        eps_dual = config.abs_tol + config.rel_tol * rho * float(np.linalg.norm(u_new))
        if r_norm <= eps_pri and s_norm <= eps_dual:
            z, u = z_new, u_new
            converged = True
            break

        if (config.adaptive_penalty and it % config.balance_every == 0
                and (r_norm > config.balance_ratio * s_norm
                     or s_norm > config.balance_ratio * r_norm)):
            f = config.penalty_factor if r_norm > s_norm else 1.0 / config.penalty_factor
            rho *= f
            z, u = z_new, u_new / f
            z_hat, u_hat = z, u
            momentum, c_prev = 1.0, math.inf
            continue
        if not config.accelerate:
            z = z_hat = z_new
            u = u_hat = u_new
            continue
        c = float(np.linalg.norm(u_new - u_hat) ** 2 + np.linalg.norm(z_new - z_hat) ** 2)
        if c < config.restart_eta * c_prev:
            nxt = (1.0 + math.sqrt(1.0 + 4.0 * momentum ** 2)) / 2.0
            beta = (momentum - 1.0) / nxt
            z_hat = z_new + beta * (z_new - z)
            u_hat = u_new + beta * (u_new - u)
            z, u = z_new, u_new
            momentum, c_prev = nxt, c
        else:
            # restart from the last accepted iterate
            z_hat, u_hat = z, u
            momentum, c_prev = 1.0, c_prev / config.restart_eta
    else:
        z = z_new

    p_hat = project_box(z, a_star, b_star)
    try:
        c_hat = np.linalg.inv(p_hat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("estimated precision matrix is singular") from exc
    c_hat = (c_hat + c_hat.T) / 2
    if not np.all(np.isfinite(c_hat)):
        raise NumericalError("non-finite covariance estimate")
    return PrecisionEstimate(
        p_hat=p_hat, c_hat=c_hat, iterations=it, converged=converged,
        primal_residual=r_norm, dual_residual=s_norm,
        objective=problem.objective(p_hat), rho=rho,
        primal_trace=primal_trace, dual_trace=dual_trace, objective_trace=obj_trace,
        seconds=time.perf_counter() - t0)


def build_problem(dataset: Dataset, alpha: float | None = None, c: float = 1e-2,
                  a_star: float | None = None, b_star: float | None = None) -> Stage1Problem:
    """Assemble the stage-1 program for a dataset with default choices filled in."""
    s = sample_covariance(dataset)
    w = penalty_weights(distance_matrix(dataset.locations), dataset.p)
    if alpha is None:
        alpha = default_alpha(dataset.n, dataset.p, dataset.num_realizations, c)
    lo, hi = default_box(s)
    a_star = lo if a_star is None else a_star
    b_star = max(hi, a_star) if b_star is None else b_star
    return Stage1Problem(s, w, alpha, a_star, b_star)
