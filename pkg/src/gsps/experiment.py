"""Simulation experiments, cross-validation and the independent-fit baseline."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import GspsError, ValidationError
from .estimator import GspsConfig, GspsFit, gsps_fit, partition_random
from .mle import mle_fit
from .model import CorrelationModel, Dataset, Family, SeparableModel
from .predict import Predictor, mspe
from .simulate import SimulationSpec, random_true_params, sample_grf, uniform_locations

METHODS = ("gsps", "msps", "mle")
THREADS_ENV = "GSPS_NUM_THREADS"


def default_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


@dataclass
class IndependentFit:
    """One univariate GSPS fit per response column ("mSPS")."""

    fits: list

    @property
    def p(self) -> int:
        return len(self.fits)

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([f.theta_hat for f in self.fits])

    @property
    def gamma_hat(self) -> np.ndarray:
        return np.diag([float(f.gamma_hat[0, 0]) for f in self.fits])

    def num_parameters(self) -> int:
        return sum(f.theta_hat.size + 1 for f in self.fits)

    def predictor(self, dataset: Dataset, partition=None, blend="nearest") -> "IndependentPredictor":
        preds = [Predictor.from_dataset(f.model(), dataset.column(j), partition, blend)
                 for j, f in enumerate(self.fits)]
        return IndependentPredictor(preds)

    def to_json(self) -> dict:
        return {"method": "msps", "fits": [f.to_json() for f in self.fits]}


class IndependentPredictor:
    def __init__(self, predictors):
        self.predictors = predictors

    def predict_mean(self, x0) -> np.ndarray:
        cols = [np.atleast_1d(pr.predict_mean(x0)) for pr in self.predictors]
        if cols[0].ndim == 1 and cols[0].size == 1 and np.asarray(x0).ndim <= 1:
            return np.concatenate(cols)
        return np.column_stack([c.reshape(len(c), -1)[:, 0] for c in cols])


def fit_independent(dataset: Dataset, family=Family.ANISOTROPIC_EXPONENTIAL,
                    config: GspsConfig | None = None, partition=None) -> IndependentFit:
    return IndependentFit([gsps_fit(dataset.column(j), family, config, partition)
                           for j in range(dataset.p)])


def fit_method(method: str, dataset: Dataset, family, config: GspsConfig, partition=None):
    if method == "gsps":
        return gsps_fit(dataset, family, config, partition)
    if method == "msps":
        return fit_independent(dataset, family, config, partition)
    if method == "mle":
        return mle_fit(dataset, family, starts=max(config.multistart, 1), seed=config.seed,
                       theta_bounds=config.theta_bounds)
    raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")


def make_predictor(fit, dataset: Dataset, partition=None):
    if isinstance(fit, IndependentFit):
        return fit.predictor(dataset, partition)
    # the MLE baseline is always fit unblocked
    part = partition if isinstance(fit, GspsFit) else None
    return Predictor.from_dataset(fit.model(), dataset, part)


def _fit_errors(fit, theta_star, gamma_star) -> tuple[float, float]:
    if isinstance(fit, IndependentFit):
        theta_err = float(np.mean([np.linalg.norm(t - theta_star) for t in fit.thetas]))
    else:
        theta_err = float(np.linalg.norm(fit.theta_hat - theta_star))
    return theta_err, float(np.linalg.norm(fit.gamma_hat - gamma_star))


def num_blocks_for(n: int, block_size: int | None) -> int:
    if not block_size or n <= block_size:
        return 1
    return math.ceil(n / block_size)


@dataclass
class ExperimentSpec:
    cells: list                       # (d, n, p, N) tuples
    replications: int = 10
    methods: tuple = ("gsps",)
    block_size: int | None = None
    seed: int = 0
    n_test: int = 200
    family: str = Family.ANISOTROPIC_EXPONENTIAL.value
    config: GspsConfig = field(default_factory=GspsConfig)
    n_jobs: int = 1

    def __post_init__(self):
        self.cells = [tuple(int(v) for v in c) for c in self.cells]
        if not self.cells:
            raise ValidationError("experiment needs at least one cell")
        for c in self.cells:
            if len(c) != 4 or min(c) < 1:
                raise ValidationError(f"cell {c} must be (d, n, p, N) with entries >= 1")
            if c[1] < 2:
                raise ValidationError(f"cell {c} needs n >= 2")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}")


def simulate_replicate(d: int, n: int, p: int, num: int, n_test: int, seed: int, rep: int,
                       family=Family.ANISOTROPIC_EXPONENTIAL):
    """Ground truth, training and test data for one replicate.

    The stream depends on ``(seed, d, n, p, rep)`` but not on ``N``: cells that
    differ only in ``N`` share truth and locations, and the first realizations
    coincide, which pairs the comparison across sample sizes.
    """
    ss = np.random.SeedSequence([seed, d, n, p, rep])
    truth_ss, loc_ss, data_ss = ss.spawn(3)
    family = Family(family)
    q = family.num_params(d)
    theta_star, gamma_star = random_true_params(q, p, seed=np.random.default_rng(truth_ss))
    x = uniform_locations(n + n_test, d, np.random.default_rng(loc_ss))
    model = SeparableModel(CorrelationModel(family, theta_star, [1e-4, 1e2]), gamma_star)
    data_seed = int(data_ss.generate_state(1, np.uint64)[0])
    full = sample_grf(SimulationSpec(x, model, num, data_seed))
    train = full.subset(np.arange(n))
    test = full.subset(np.arange(n, n + n_test)) if n_test >= 2 else None
    return theta_star, gamma_star, train, test


def _run_one(spec: ExperimentSpec, ci: int, rep: int) -> list[dict]:
    d, n, p, num = spec.cells[ci]
    theta_star, gamma_star, train, test = simulate_replicate(d, n, p, num, spec.n_test,
                                                             spec.seed, rep, spec.family)
    k = num_blocks_for(n, spec.block_size)
    partition = None
    if k > 1:
        partition = partition_random(n, k, seed=[spec.seed, d, n, p, rep])
    config = replace(spec.config, seed=int(np.random.SeedSequence([spec.seed, ci, rep])
                                            .generate_state(1)[0]))
    out = []
    for method in spec.methods:
        rec = {"cell": ci, "d": d, "n": n, "p": p, "N": num, "replicate": rep,
               "method": method, "blocks": k}
        t0 = time.perf_counter()
        try:
            fit = fit_method(method, train, spec.family, config, partition)
            rec["seconds"] = time.perf_counter() - t0
            rec["theta_error"], rec["gamma_error"] = _fit_errors(fit, theta_star, gamma_star)
            rec["mspe"] = mspe(make_predictor(fit, train, partition), test) if test else math.nan
        except (GspsError, np.linalg.LinAlgError, ValueError) as exc:
            rec.update(seconds=time.perf_counter() - t0, theta_error=math.nan,
                       gamma_error=math.nan, mspe=math.nan, error=str(exc))
        out.append(rec)
    return out


METRICS = ("theta_error", "gamma_error", "mspe", "seconds")


@dataclass
class ExperimentReport:
    records: list
    rows: list

    def to_json(self) -> dict:
        return {"rows": self.rows, "records": self.records}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["d", "n", "p", "N", "method", "replicates", "failures"] + list(METRICS)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()

    def table(self) -> str:
        lines = self.to_csv().strip().split("\n")
        cells = [line.split(",") for line in lines]
        widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)

    def row(self, method: str, **cell) -> dict:
        for r in self.rows:
            if r["method"] == method and all(r[k] == v for k, v in cell.items()):
                return r
        raise KeyError((method, cell))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _summarize(spec: ExperimentSpec, records: list) -> list:
    rows = []
    for ci, (d, n, p, num) in enumerate(spec.cells):
        for method in spec.methods:
            recs = [r for r in records if r["cell"] == ci and r["method"] == method]
            ok = [r for r in recs if "error" not in r]
            row = {"d": d, "n": n, "p": p, "N": num, "method": method,
                   "replicates": len(ok), "failures": len(recs) - len(ok)}
            for m in METRICS:
                vals = [r[m] for r in ok if np.isfinite(r[m])]
                row[m] = float(np.mean(vals)) if vals else math.nan
            rows.append(row)
    return rows


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    tasks = [(ci, rep) for ci in range(len(spec.cells)) for rep in range(spec.replications)]
    if spec.n_jobs > 1:
        with ThreadPoolExecutor(spec.n_jobs) as pool:
            results = list(pool.map(lambda t: _run_one(spec, *t), tasks))
    else:
        results = [_run_one(spec, *t) for t in tasks]
    records = [rec for chunk in results for rec in chunk]
    return ExperimentReport(records, _summarize(spec, records))


def location_folds(n: int, folds: int, seed) -> list[np.ndarray]:
    if folds < 2 or folds > n:
        raise ValidationError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def run_crossval(dataset: Dataset, folds: int = 10, methods=("gsps", "msps"),
                 block_size: int | None = None, seed: int = 0,
                 family=Family.ANISOTROPIC_EXPONENTIAL, config: GspsConfig | None = None) -> dict:
    """Location-level K-fold cross-validation of prediction error.

    Returns ``{method: {"mean", "stderr", "scores"}}``.
    """
    config = config or GspsConfig(seed=seed)
    parts = location_folds(dataset.n, folds, seed)
    results = {}
    for method in methods:
        scores = []
        for f, test_idx in enumerate(parts):
            train_idx = np.setdiff1d(np.arange(dataset.n), test_idx)
            k = num_blocks_for(len(train_idx), block_size)
            if len(train_idx) < 2 * k:
                raise ValidationError(f"fold {f}: too few training locations for {k} block(s)")
            train = dataset.subset(train_idx)
            partition = partition_random(len(train_idx), k, seed=[seed, f]) if k > 1 else None
            fit = fit_method(method, train, family, config, partition)
            test_x = dataset.locations[test_idx]
            pred = np.atleast_2d(make_predictor(fit, train, partition).predict_mean(test_x))
            truth = dataset.realizations[:, test_idx, :].mean(axis=0)
            scores.append(float(np.mean((pred.reshape(truth.shape) - truth) ** 2)))
        arr = np.array(scores)
        results[method] = {"mean": float(arr.mean()),
                           "stderr": float(arr.std(ddof=1) / math.sqrt(len(arr))),
                           "scores": scores}
    return results


def spec_to_json(spec: ExperimentSpec) -> dict:
    out = asdict(spec)
    out["config"] = {k: v for k, v in out["config"].items()}
    return out
