"""Two-stage GSPS fitting: Gamma extraction, correlation fit, random blocking."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import GspsError, ValidationError
from .model import (CorrelationModel, Dataset, Family, SeparableModel, blocks,
                    correlation_from_components, default_bounds)
from .stage1 import PrecisionEstimate, SolverConfig, admm_solve, build_problem

GOLDEN_TOL = 1e-8
GRAD_TOL = 1e-8
MAX_QN_ITER = 500
BRACKET_POINTS = 41


def estimate_gamma(c_hat: np.ndarray, n: int, p: int) -> np.ndarray:
    """Average of the ``p x p`` diagonal blocks of ``c_hat``."""
    diag = np.einsum("iiab->ab", blocks(c_hat, n, p)) / n
    return (diag + diag.T) / 2


@dataclass
class _Block:
    comps: np.ndarray        # (q, n, n) squared displacement components
    c_blocks: np.ndarray     # (n, n, p, p)


class Stage2Problem:
    """Least-squares fit of ``R(theta) kron Gamma_hat`` to ``C_hat`` blocks.

    Several ``(locations, c_hat)`` pairs may be given; their objectives are
    summed, which is how the blocked fit treats conditionally independent
    blocks.
    """

    def __init__(self, gamma_hat, c_hat_blocks, family=Family.ANISOTROPIC_EXPONENTIAL,
                 theta_bounds=None, multistart: int = 10, seed: int = 0):
        self.gamma = np.atleast_2d(np.asarray(gamma_hat, dtype=float))
        self.p = self.gamma.shape[0]
        self.family = Family(family)
        self.gnorm2 = float(np.sum(self.gamma ** 2))
        if isinstance(c_hat_blocks, tuple):
            c_hat_blocks = [c_hat_blocks]
        if not c_hat_blocks:
            raise ValidationError("Stage2Problem needs at least one block")
        self.blocks = []
        d = None
        for locations, c_hat in c_hat_blocks:
            x = np.asarray(locations, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if d is not None and x.shape[1] != d:
                raise ValidationError("blocks disagree on the input dimension")
            d = x.shape[1]
            cb = blocks(np.asarray(c_hat, dtype=float), x.shape[0], self.p)
            self.blocks.append(_Block(self.family.components(x), cb))
        self.d = d
        self.q = self.family.num_params(d)
        bounds = default_bounds(self.q) if theta_bounds is None else np.asarray(theta_bounds, float)
        if bounds.ndim == 1:
            bounds = np.tile(bounds, (self.q, 1))
        if bounds.shape != (self.q, 2) or np.any(bounds[:, 0] <= 0) or np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValidationError(f"invalid Theta box {bounds.tolist()} for q={self.q}")
        self.bounds = bounds
        self.multistart = int(multistart)
        self.seed = seed

    def _theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.q,):
            raise ValidationError(f"theta must have {self.q} entries")
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        if not np.all(np.isfinite(theta)) or np.any(theta < lo) or np.any(theta > hi):
            raise ValidationError(f"theta {theta.tolist()} lies outside Theta")
        return theta

    def _residual(self, r, b) -> np.ndarray:
        # <r_ij Gamma - C^ij, Gamma>, formed entrywise so it vanishes exactly at an exact fit
        return np.einsum("ijab,ab->ij", r[:, :, None, None] * self.gamma - b.c_blocks, self.gamma)

    def objective(self, theta) -> float:
        theta = self._theta(theta)
        total = 0.0
        for b in self.blocks:
            r = correlation_from_components(theta, b.comps)
            resid = r[:, :, None, None] * self.gamma - b.c_blocks
            total += 0.5 * float(np.sum(resid * resid))
        return total

    def gradient(self, theta) -> np.ndarray:
        theta = self._theta(theta)
        g = np.zeros(self.q)
        for b in self.blocks:
            r = correlation_from_components(theta, b.comps)
            g -= np.einsum("kij,ij->k", b.comps, r * self._residual(r, b))
        return g

    def hessian(self, theta) -> np.ndarray:
        theta = self._theta(theta)
        h = np.zeros((self.q, self.q))
        for b in self.blocks:
            r = correlation_from_components(theta, b.comps)
            dr = b.comps * r                       # -R'_k
            gram = np.einsum("kij,lij->kl", dr, dr)
            weighted = b.comps * (r * self._residual(r, b))
            h += self.gnorm2 * gram + np.einsum("kij,lij->kl", weighted, b.comps)
        return (h + h.T) / 2


def stage2_objective(theta, gamma_hat, c_hat, locations, family=Family.ANISOTROPIC_EXPONENTIAL):
    return Stage2Problem(gamma_hat, [(locations, c_hat)], family,
                         theta_bounds=_loose_bounds(theta)).objective(theta)


def stage2_gradient(theta, gamma_hat, c_hat, locations, family=Family.ANISOTROPIC_EXPONENTIAL):
    return Stage2Problem(gamma_hat, [(locations, c_hat)], family,
                         theta_bounds=_loose_bounds(theta)).gradient(theta)


def stage2_hessian(theta, gamma_hat, c_hat, locations, family=Family.ANISOTROPIC_EXPONENTIAL):
    return Stage2Problem(gamma_hat, [(locations, c_hat)], family,
                         theta_bounds=_loose_bounds(theta)).hessian(theta)


def _loose_bounds(theta):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(theta <= 0):
        raise ValidationError("theta must be positive")
    return np.column_stack([theta, theta])


@dataclass
class Stage2Result:
    theta: np.ndarray
    objective: float
    converged: bool
    starts: list = field(default_factory=list)


def golden_section(f, lo: float, hi: float, tol: float = GOLDEN_TOL) -> tuple[float, float]:
    """Minimize a unimodal ``f`` on ``[lo, hi]`` until the bracket is narrower than ``tol``."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = (a + b) / 2
    fx = f(x)
    best = min([(fx, x), (fc, c), (fd, d)])
    return best[1], best[0]


def _fit_scalar(obj, lo: float, hi: float) -> tuple[float, float]:
    # Coarse log-spaced scan picks the bracket for the golden-section search.
    grid = np.geomspace(lo, hi, BRACKET_POINTS)
    vals = np.array([obj(t) for t in grid])
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    t, ft = golden_section(obj, a, b)
    if vals[i] < ft:
        return float(grid[i]), float(vals[i])
    return t, ft


def _quasi_newton(problem: Stage2Problem, start: np.ndarray):
    """Bound-constrained quasi-Newton in log-parameters from one start."""
    lo, hi = np.log(problem.bounds[:, 0]), np.log(problem.bounds[:, 1])

    def fun(u):
        theta = np.clip(np.exp(u), problem.bounds[:, 0], problem.bounds[:, 1])
        return problem.objective(theta), problem.gradient(theta) * theta

    res = optimize.minimize(fun, np.log(start), jac=True, method="L-BFGS-B",
                            bounds=list(zip(lo, hi)),
                            options={"maxiter": MAX_QN_ITER, "gtol": GRAD_TOL, "ftol": 0.0})
    theta = np.clip(np.exp(res.x), problem.bounds[:, 0], problem.bounds[:, 1])
    theta, value = _newton_polish(problem, theta, problem.objective(theta))
    return theta, value, bool(res.success)


def _newton_polish(problem: Stage2Problem, theta: np.ndarray, value: float, steps: int = 20):
    """Projected Newton steps on the free coordinates with backtracking."""
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    for _ in range(steps):
        g = problem.gradient(theta)
        free = ~(((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0)))
        if not free.any() or np.linalg.norm(g[free]) <= GRAD_TOL:
            break
        h = problem.hessian(theta)[np.ix_(free, free)]
        try:
            if np.linalg.eigvalsh(h).min() <= 0:
                break
            step = np.zeros_like(theta)
            step[free] = -np.linalg.solve(h, g[free])
        except np.linalg.LinAlgError:
            break
        t = 1.0
        improved = False
        while t > 1e-10:
            cand = np.clip(theta + t * step, lo, hi)
            fc = problem.objective(cand)
            if fc <= value:
                improved = fc < value or np.array_equal(cand, theta)
                theta, value = cand, fc
                break
            t /= 2
        if not improved:
            break
    return theta, value


def fit_theta(problem: Stage2Problem) -> Stage2Result:
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    if problem.q == 1:
        t, ft = _fit_scalar(lambda v: problem.objective([v]), lo[0], hi[0])
        return Stage2Result(np.array([t]), ft, True, [{"start": None, "theta": [t], "objective": ft}])

    rng = np.random.default_rng(problem.seed)
    starts = [np.sqrt(lo * hi)]
    # Shared-scale start: best isotropic restriction found by 1-d search.
    iso_lo, iso_hi = lo.max(), hi.min()
    if iso_lo <= iso_hi:
        t, _ = _fit_scalar(lambda v: problem.objective(np.full(problem.q, v)), iso_lo, iso_hi)
        starts.append(np.full(problem.q, t))
    for _ in range(problem.multistart):
        starts.append(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    records = []
    for k, s in enumerate(starts):
        try:
            theta, value, ok = _quasi_newton(problem, s)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            records.append({"start": s.tolist(), "theta": None, "objective": math.inf, "ok": False})
            continue
        records.append({"start": s.tolist(), "theta": theta.tolist(), "objective": value, "ok": ok})
    finite = [r for r in records if r["theta"] is not None]
    if not finite:
        raise GspsError("every stage-2 start failed")
    best = min(finite, key=lambda r: (r["objective"], float(np.linalg.norm(r["theta"]))))
    return Stage2Result(np.asarray(best["theta"]), best["objective"],
                        any(r["ok"] for r in finite), records)


@dataclass(frozen=True)
class BlockPartition:
    num_blocks: int
    assignment: np.ndarray
    seed: int | None = None

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == b) for b in range(self.num_blocks)]

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.num_blocks).tolist()

    def block_of(self, index: int) -> int:
        return int(self.assignment[index])


def partition_random(n: int, num_blocks: int, seed=None) -> BlockPartition:
    """Uniform random split of ``range(n)`` into near-equal blocks."""
    if not 1 <= num_blocks <= n:
        raise ValidationError(f"need 1 <= K <= n, got K={num_blocks}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    for b, part in enumerate(np.array_split(perm, num_blocks)):
        assignment[part] = b
    return BlockPartition(num_blocks, assignment, seed)


@dataclass(frozen=True)
class GspsConfig:
    alpha: float | None = None
    alpha_c: float = 1e-2
    a_star: float | None = None
    b_star: float | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    theta_bounds: tuple = (1e-4, 1e2)
    multistart: int = 10
    seed: int = 0
    pooling: str = "mean"
    n_jobs: int = 1

    def __post_init__(self):
        if self.pooling not in ("mean", "size_weighted"):
            raise ValidationError(f"unknown pooling rule {self.pooling!r}")
        if self.multistart < 0:
            raise ValidationError("multistart must be >= 0")


@dataclass
class GspsFit:
    theta_hat: np.ndarray
    gamma_hat: np.ndarray
    family: Family
    theta_bounds: np.ndarray
    diagnostics: dict
    stage1: list = field(default_factory=list)
    partition: BlockPartition | None = None

    def model(self) -> SeparableModel:
        return SeparableModel(CorrelationModel(self.family, self.theta_hat, self.theta_bounds),
                              self.gamma_hat)

    def num_parameters(self) -> int:
        """Free parameters: correlation vector plus the symmetric ``Gamma``."""
        p = self.gamma_hat.shape[0]
        return self.theta_hat.size + p * (p + 1) // 2

    def to_json(self) -> dict:
        return {
            "method": "gsps",
            "family": self.family.value,
            "theta": self.theta_hat.tolist(),
            "theta_bounds": self.theta_bounds.tolist(),
            "gamma": self.gamma_hat.tolist(),
            "diagnostics": self.diagnostics,
            "partition": None if self.partition is None else self.partition.assignment.tolist(),
        }


def solve_stage1_blocks(dataset: Dataset, index_blocks, config: GspsConfig) -> list[PrecisionEstimate]:
    """Stage-1 solve on each location block; results keep block order."""
    for b, idx in enumerate(index_blocks):
        if len(idx) < 2:
            raise ValidationError(f"block {b} has {len(idx)} location(s); need >= 2")

    def solve(item):
        b, idx = item
        sub = dataset.subset(idx)
        problem = build_problem(sub, alpha=config.alpha, c=config.alpha_c,
                                a_star=config.a_star, b_star=config.b_star)
        try:
            return admm_solve(problem, config.solver)
        except GspsError as exc:
            raise type(exc)(f"block {b}: {exc}") from exc

    items = list(enumerate(index_blocks))
    if config.n_jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            return list(pool.map(solve, items))
    return [solve(it) for it in items]


def gsps_fit(dataset: Dataset, family=Family.ANISOTROPIC_EXPONENTIAL,
             config: GspsConfig | None = None, partition: BlockPartition | None = None) -> GspsFit:
    config = config or GspsConfig()
    family = Family(family)
    n, p = dataset.n, dataset.p
    index_blocks = [np.arange(n)] if partition is None else partition.blocks()
    if partition is not None and len(partition.assignment) != n:
        raise ValidationError("partition size does not match the dataset")

    t0 = time.perf_counter()
    estimates = solve_stage1_blocks(dataset, index_blocks, config)
    t1 = time.perf_counter()

    gammas = [estimate_gamma(est.c_hat, len(idx), p) for est, idx in zip(estimates, index_blocks)]
    if config.pooling == "size_weighted":
        weights = np.array([len(idx) for idx in index_blocks], dtype=float)
    else:
        weights = np.ones(len(gammas))
    gamma_hat = sum(w * g for w, g in zip(weights, gammas)) / weights.sum()
    gamma_hat = (gamma_hat + gamma_hat.T) / 2

    problem = Stage2Problem(
        gamma_hat, [(dataset.locations[idx], est.c_hat) for idx, est in zip(index_blocks, estimates)],
        family, theta_bounds=config.theta_bounds, multistart=config.multistart, seed=config.seed)
    result = fit_theta(problem)
    t2 = time.perf_counter()
    hess_min = float(np.linalg.eigvalsh(problem.hessian(result.theta)).min())

    diagnostics = {
        "stage1": [est.summary() for est in estimates],
        "stage2_objective": result.objective,
        "stage2_converged": result.converged,
        "stage2_hessian_min_eig": hess_min,
        "multistart": result.starts,
        "num_blocks": len(index_blocks),
        "block_sizes": [len(idx) for idx in index_blocks],
        "stage1_seconds": t1 - t0,
        "stage2_seconds": t2 - t1,
    }
    return GspsFit(result.theta, gamma_hat, family, problem.bounds, diagnostics, estimates, partition)
