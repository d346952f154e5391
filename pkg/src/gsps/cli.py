"""Command-line front end: simulate, fit, predict, experiment, crossval.

Every subcommand accepts ``--config FILE``, an INI file with one section per
subcommand whose keys are the long option names. Precedence is command line,
then file, then built-in defaults.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import GspsError, NumericalError, ValidationError
from .estimator import BlockPartition, GspsConfig, partition_random
from .experiment import (METHODS, ExperimentSpec, IndependentPredictor, default_threads,
                         fit_method, run_crossval, run_experiment, spec_to_json)
from .model import CorrelationModel, Family, SeparableModel
from .predict import Predictor
from .simulate import SimulationSpec, random_true_params, sample_grf, uniform_locations
from .stage1 import SolverConfig, admm_solve, build_problem

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
FAMILIES = {"anisotropic": Family.ANISOTROPIC_EXPONENTIAL,
            "isotropic": Family.ISOTROPIC_EXPONENTIAL}


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1), keeping 2 for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _cells(text: str) -> list[tuple]:
    cells = []
    for chunk in text.split(";"):
        if chunk.strip():
            vals = [int(v) for v in chunk.replace(",", " ").split()]
            if len(vals) != 4:
                raise argparse.ArgumentTypeError(f"cell {chunk!r} must be d,n,p,N")
            cells.append(tuple(vals))
    return cells


def _methods(text: str) -> list[str]:
    out = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"methods must be drawn from {','.join(METHODS)}")
    return out


def _add_common(sp, seed=True):
    sp.add_argument("--config", help="INI file with a section for this subcommand")
    if seed:
        sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--family", choices=sorted(FAMILIES), default="anisotropic")


def _add_fit_options(sp):
    sp.add_argument("--blocks", type=int, default=1, help="number of random-selection blocks")
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--alpha-c", type=float, default=1e-2,
                    help="constant in the default penalty c*sqrt(log(np)/N)")
    sp.add_argument("--a-star", type=float, default=None)
    sp.add_argument("--b-star", type=float, default=None)
    sp.add_argument("--multistart", type=int, default=10)
    sp.add_argument("--theta-bounds", type=_floats, default=[1e-4, 1e2])
    sp.add_argument("--rho", type=float, default=None, help="initial ADMM penalty")
    sp.add_argument("--tol", type=float, default=1e-6, help="absolute and relative ADMM tolerance")
    sp.add_argument("--max-iter", type=int, default=5000)
    sp.add_argument("--pooling", choices=["mean", "size_weighted"], default="mean")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsps", description="Separable multivariate Gaussian random fields.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", help="simulate a dataset CSV with a JSON sidecar")
    _add_common(sp)
    sp.add_argument("--n", type=int, default=60)
    sp.add_argument("--d", type=int, default=2)
    sp.add_argument("--p", type=int, default=2)
    sp.add_argument("--num-realizations", "-N", type=int, default=10)
    sp.add_argument("--theta", type=_floats, default=None, help="true theta (random if omitted)")
    sp.add_argument("--gamma", type=_floats, default=None, help="true Gamma, row-major")
    sp.add_argument("--domain", type=_floats, default=[0.0, 10.0], help="low high of the cube")
    sp.add_argument("--out", required=True, help="output dataset CSV")

    sp = sub.add_parser("fit", help="fit a model to a dataset CSV")
    _add_common(sp)
    sp.add_argument("data", nargs="?", help="dataset CSV")
    sp.add_argument("--method", choices=METHODS, default="gsps")
    _add_fit_options(sp)
    sp.add_argument("--stage1-only", action="store_true",
                    help="run only the precision-matrix stage and report solver statistics")
    sp.add_argument("--dump-matrix", default=None,
                    help="prefix for dense text dumps of the precision and covariance estimates")
    sp.add_argument("--out", default=None, help="JSON output (stdout if omitted)")

    sp = sub.add_parser("predict", help="predict at query locations from a fitted model")
    sp.add_argument("--config")
    sp.add_argument("--model", required=True, help="JSON written by `fit`")
    sp.add_argument("--data", required=True, help="training dataset CSV")
    sp.add_argument("--query", required=True, help="CSV with columns x1..xd")
    sp.add_argument("--out", required=True)
    sp.add_argument("--cov", action="store_true", help="append predictive covariance entries")
    sp.add_argument("--blend", choices=["nearest", "idw"], default="nearest")

    sp = sub.add_parser("experiment", help="seeded simulation study")
    _add_common(sp)
    sp.add_argument("--cells", type=_cells, default=[(2, 60, 2, 1), (2, 60, 2, 10), (2, 60, 2, 40)],
                    help="semicolon-separated d,n,p,N tuples")
    sp.add_argument("--replications", "-L", type=int, default=10)
    sp.add_argument("--methods", type=_methods, default=["gsps", "msps", "mle"])
    sp.add_argument("--block-size", type=int, default=None)
    sp.add_argument("--n-test", type=int, default=200)
    sp.add_argument("--multistart", type=int, default=10)
    sp.add_argument("--alpha-c", type=float, default=1e-2)
    sp.add_argument("--jobs", type=int, default=None, help="worker threads (default: env or cores)")
    sp.add_argument("--out", default=None, help="JSON report path")
    sp.add_argument("--csv", default=None, help="CSV summary path")

    sp = sub.add_parser("crossval", help="location-level K-fold cross-validation")
    _add_common(sp)
    sp.add_argument("data", nargs="?", help="dataset CSV")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--methods", type=_methods, default=["gsps", "msps"])
    sp.add_argument("--block-size", type=int, default=None)
    sp.add_argument("--multistart", type=int, default=10)
    sp.add_argument("--out", default=None)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, argv) -> None:
    """Load ``--config`` values for the chosen subcommand as parser defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in ("simulate", "fit", "predict", "experiment",
                                                  "crossval"):
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise ValidationError(f"cannot read config file {known.config}")
    if not cp.has_section(known.command):
        return
    sp = _subparser(parser, known.command)
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in cp.items(known.command):
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise ValidationError(f"{known.config}: unknown key {key!r} in [{known.command}]")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = cp.getboolean(known.command, key)
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ValidationError(f"{known.config}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ValidationError(f"{known.config}: {key!r} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    for dest in defaults:
        actions[dest].required = False
    sp.set_defaults(**defaults)


def _gsps_config(args, n_jobs=1) -> GspsConfig:
    solver = SolverConfig(rho=args.rho, abs_tol=args.tol, rel_tol=args.tol, max_iter=args.max_iter)
    bounds = tuple(args.theta_bounds)
    if len(bounds) != 2:
        raise ValidationError("--theta-bounds takes two values: low high")
    return GspsConfig(alpha=args.alpha, alpha_c=args.alpha_c, a_star=args.a_star,
                      b_star=args.b_star, solver=solver, theta_bounds=bounds,
                      multistart=args.multistart, seed=args.seed, pooling=args.pooling,
                      n_jobs=n_jobs)


def _emit(obj, path) -> None:
    if path:
        io.write_json(obj, path)
    else:
        print(json.dumps(obj, indent=2, default=io._jsonable))


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)


def _cell(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_simulate(args) -> int:
    family = FAMILIES[args.family]
    q = family.num_params(args.d)
    rng = np.random.default_rng(args.seed)
    theta, gamma = random_true_params(q, args.p, seed=rng)
    if args.theta is not None:
        theta = np.asarray(args.theta)
    if args.gamma is not None:
        if len(args.gamma) != args.p * args.p:
            raise ValidationError(f"--gamma needs {args.p * args.p} values")
        gamma = np.asarray(args.gamma).reshape(args.p, args.p)
    if len(args.domain) != 2:
        raise ValidationError("--domain takes two values: low high")
    x = uniform_locations(args.n, args.d, rng, *args.domain)
    model = SeparableModel(CorrelationModel(family, theta, (1e-4, 1e2)), gamma)
    data_seed = int(rng.integers(2 ** 63))
    dataset = sample_grf(SimulationSpec(x, model, args.num_realizations, data_seed))
    io.write_dataset_csv(dataset, args.out)
    sidecar = Path(args.out).with_suffix(".json")
    io.write_json({"family": family.value, "theta": theta, "gamma": gamma, "seed": args.seed,
                   "n": args.n, "d": args.d, "p": args.p,
                   "num_realizations": args.num_realizations}, sidecar)
    print(f"wrote {args.out} ({args.num_realizations} x {args.n} x {args.p}) and {sidecar}")
    return EXIT_OK


def _partition(args, n) -> BlockPartition | None:
    if args.blocks < 1:
        raise ValidationError("--blocks must be >= 1")
    return partition_random(n, args.blocks, seed=args.seed) if args.blocks > 1 else None


def _stage1_only(args, dataset, config) -> dict:
    partition = _partition(args, dataset.n)
    index_blocks = [np.arange(dataset.n)] if partition is None else partition.blocks()
    out = []
    for b, idx in enumerate(index_blocks):
        problem = build_problem(dataset.subset(idx), alpha=config.alpha, c=config.alpha_c,
                                a_star=config.a_star, b_star=config.b_star)
        est = admm_solve(problem, config.solver)
        if args.dump_matrix:
            io.write_matrix(f"{args.dump_matrix}.block{b}.precision.txt", est.p_hat)
            io.write_matrix(f"{args.dump_matrix}.block{b}.covariance.txt", est.c_hat)
        pattern = est.p_hat != 0
        out.append({**est.summary(), "alpha": problem.alpha, "a_star": problem.a_star,
                    "b_star": problem.b_star,
                    "row_nonzeros": pattern.sum(axis=1).tolist(),
                    "primal_trace": est.primal_trace, "dual_trace": est.dual_trace,
                    "objective_trace": est.objective_trace})
    return {"method": "stage1", "blocks": out}


def _require_data(args) -> None:
    if not args.data:
        raise ValidationError("a dataset CSV is required")


def cmd_fit(args) -> int:
    _require_data(args)
    dataset = io.read_dataset_csv(args.data)
    config = _gsps_config(args, n_jobs=default_threads())
    family = FAMILIES[args.family]
    if args.stage1_only:
        report = _stage1_only(args, dataset, config)
        _emit(report, args.out)
        if args.out:
            rows = [(b, r["dim"], r["iterations"], r["converged"], r["objective"], r["nonzeros"])
                    for b, r in enumerate(report["blocks"])]
            print(_table(["block", "dim", "iterations", "converged", "objective", "nonzeros"], rows))
        return EXIT_OK
    partition = None
    if args.method != "mle":
        partition = _partition(args, dataset.n)
    elif args.blocks != 1:
        raise ValidationError("--blocks is not supported with --method mle")
    fit = fit_method(args.method, dataset, family, config, partition)
    if args.dump_matrix and args.method == "gsps":
        for b, est in enumerate(fit.stage1):
            io.write_matrix(f"{args.dump_matrix}.block{b}.precision.txt", est.p_hat)
            io.write_matrix(f"{args.dump_matrix}.block{b}.covariance.txt", est.c_hat)
    out = fit.to_json()
    _emit(out, args.out)
    if args.out:
        if args.method == "msps":
            rows = [(j, " ".join(f"{t:.6g}" for t in f["theta"]), f["gamma"][0][0])
                    for j, f in enumerate(out["fits"])]
            print(_table(["response", "theta", "gamma"], rows))
        else:
            print(_table(["param", "value"],
                         [("theta", " ".join(f"{t:.6g}" for t in out["theta"])),
                          ("gamma", " ".join(f"{g:.6g}" for g in np.ravel(out["gamma"])))]))
    return EXIT_OK


def _load_predictor(obj, dataset, blend):
    if obj.get("method") == "msps":
        preds = []
        for j, f in enumerate(obj["fits"]):
            preds.append(_load_predictor(f, dataset.column(j), blend))
        return IndependentPredictor(preds)
    model = io.model_from_json(obj)
    partition = None
    if obj.get("partition") is not None:
        assignment = np.asarray(obj["partition"], dtype=int)
        if len(assignment) != dataset.n:
            raise ValidationError("model partition does not match the training data")
        partition = BlockPartition(int(assignment.max()) + 1, assignment)
    return Predictor.from_dataset(model, dataset, partition, blend)


def cmd_predict(args) -> int:
    obj = json.loads(Path(args.model).read_text())
    dataset = io.read_dataset_csv(args.data)
    x0 = io.read_locations_csv(args.query)
    pred = _load_predictor(obj, dataset, args.blend)
    yhat = np.atleast_2d(pred.predict_mean(x0)).reshape(len(x0), -1)
    cov = None
    if args.cov:
        if isinstance(pred, IndependentPredictor):
            var = np.column_stack([pr.predict_cov(x0).reshape(len(x0)) for pr in pred.predictors])
            cov = np.stack([np.diag(v) for v in var])
        else:
            cov = pred.predict_cov(x0).reshape(len(x0), dataset.p, dataset.p)
    io.write_predictions_csv(args.out, x0, yhat, cov)
    print(f"wrote {len(x0)} predictions to {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = GspsConfig(alpha_c=args.alpha_c, multistart=args.multistart)
    spec = ExperimentSpec(cells=args.cells, replications=args.replications,
                          methods=tuple(args.methods), block_size=args.block_size,
                          seed=args.seed, n_test=args.n_test,
                          family=FAMILIES[args.family].value, config=config,
                          n_jobs=args.jobs or default_threads())
    report = run_experiment(spec)
    if args.out:
        io.write_json({"spec": spec_to_json(spec), **report.to_json()}, args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(report.table())
    failed = [r for r in report.records if "error" in r]
    for r in failed:
        print(f"failure: cell {r['cell']} replicate {r['replicate']} {r['method']}: {r['error']}",
              file=sys.stderr)
    return EXIT_OK


def cmd_crossval(args) -> int:
    _require_data(args)
    dataset = io.read_dataset_csv(args.data)
    config = GspsConfig(multistart=args.multistart, seed=args.seed)
    res = run_crossval(dataset, args.folds, args.methods, args.block_size, args.seed,
                       FAMILIES[args.family], config)
    if args.out:
        io.write_json(res, args.out)
    print(_table(["method", "mspe", "stderr"],
                 [(m, r["mean"], r["stderr"]) for m, r in res.items()]))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "experiment": cmd_experiment, "crossval": cmd_crossval}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"gsps: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"gsps: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except GspsError as exc:
        print(f"gsps: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
