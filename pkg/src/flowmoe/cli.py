"""Command-line entry point: ``flowmoe <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
Every file is written atomically, and runs that produce files also write a
JSON manifest that ``flowmoe replay`` can re-execute.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .cv import CvError, CvGrid, FeatureSpec, cross_validate, data_driven_grid, make_folds, nested_cv
from .data import (CovariateMatrix, DataError, bin_dataset, default_grid_bounds, ingest_dataset,
                   read_covariates, write_binned, write_covariates, write_cytograms)
from .em import FitConfig, SolverError, fit
from .experiments import StudySettings, replicate_figure3
from .interpret import PrcRequest, Target, partial_response, sweep_grid
from .io import FittedModel, atomic_path, write_csv, write_json
from .model import NotPositiveDefinite, log_pseudolikelihood
from .simulate import SimScenario, generate, synthetic_scores

log = logging.getLogger("flowmoe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_name(text: str) -> str:
    return {"both-linear": "both_linear", "nonlinear-prob": "nonlinear_probability",
            "nonlinear-probability": "nonlinear_probability",
            "nonlinear-mean": "nonlinear_mean"}.get(text, text)


# --------------------------------------------------------------------------
# argument groups


def _common(p):
    g = p.add_argument_group("run control")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--verbose", "-v", action="count", default=0)
    g.add_argument("--manifest", help="manifest path (default: derived from the output path)")


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--cytograms", required=True, help="CSV time,y1..yd,biomass")
    g.add_argument("--covariates", required=True, help="CSV time,x1..xp")
    g.add_argument("--scores", action="store_true",
                   help="covariates are principal-component scores already (skip PCA)")
    g.add_argument("--pca-threshold", type=float, default=0.95)
    g.add_argument("--bins", type=int, default=40, help="bins per dimension; 0 disables binning")
    g.add_argument("--lo", type=_floats, help="lower grid bound per dimension")
    g.add_argument("--hi", type=_floats, help="upper grid bound per dimension")
    g.add_argument("--emit-binned", help="write the binned data to this CSV")


def _model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--r", type=float, default=math.inf)
    g.add_argument("--nh", type=int, default=70)
    g.add_argument("--a", type=float, default=0.5)
    g.add_argument("--activation", choices=("logistic", "identity"), default="logistic")
    g.add_argument("--restarts", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--max-iter", type=int, default=300)


def _cv_args(p):
    g = p.add_argument_group("cross-validation")
    g.add_argument("--grid-alpha", type=_floats)
    g.add_argument("--grid-beta", type=_floats)
    g.add_argument("--grid-points", type=int, default=5, help="size of the data-driven grids")
    g.add_argument("--folds", type=int, default=5)
    g.add_argument("--block-size", type=int, default=20)
    g.add_argument("--pca-scope", choices=("per-split", "global"), default="per-split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowmoe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic cytogram series")
    _common(p)
    p.add_argument("--config", type=_config_name, default="both_linear",
                   choices=("both_linear", "nonlinear_probability", "nonlinear_mean"))
    p.add_argument("--mean-kind")
    p.add_argument("--prob-kind")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--delta-sign", type=int, choices=(1, -1), default=1)
    p.add_argument("--n-per-time", type=int, default=1000)
    p.add_argument("--noise-sd", type=float, default=0.2)
    p.add_argument("--psi", help="CSV time,x1..xq of principal-component scores")
    p.add_argument("--T", type=int, default=296, help="length of the synthetic score series")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", help="fit a mixture of experts")
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--lambda-alpha", type=float, default=0.0)
    p.add_argument("--lambda-beta", type=float, default=0.0)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--trace", help="objective trace CSV")

    p = sub.add_parser("cv", help="blocked cross-validation over a penalty grid")
    _common(p)
    _data_args(p)
    _model_args(p)
    _cv_args(p)
    p.add_argument("--out", default="cv_table.csv")

    p = sub.add_parser("nested-cv", help="nested cross-validation estimate of test NLPL")
    _common(p)
    _data_args(p)
    _model_args(p)
    _cv_args(p)
    p.add_argument("--out", help="per-fold CSV")

    p = sub.add_parser("evaluate", help="held-out NLPL of a saved model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cytograms", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--out", help="JSON with the result")

    p = sub.add_parser("prc", help="partial response curves of a saved model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True, help="mean:k=1,dim=0 or probability:k=2 (k is 1-based)")
    p.add_argument("--sweep-pc", type=int, default=1, help="1-based component to sweep")
    p.add_argument("--condition", action="append", default=[],
                   help="pcJ=value (1-based J); repeat a component for one curve per value")
    p.add_argument("--grid-points", type=int, default=201)
    p.add_argument("--extrapolate", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("folds", help="print the blocked fold assignment")
    _common(p)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--block-size", type=int, default=20)
    p.add_argument("--n-folds", type=int, default=5)

    p = sub.add_parser("replicate-figure3", help="simulation study of both model variants")
    _common(p)
    p.add_argument("--configs", default="both_linear,nonlinear_probability,nonlinear_mean")
    p.add_argument("--n-deltas", type=int, default=5)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--n-per-time", type=int, default=200)
    p.add_argument("--T", type=int, default=296)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--grid-points", type=int, default=3)
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--mean-kind", default="interaction")
    p.add_argument("--prob-kind", default="interaction")
    p.add_argument("--out", default="figure3.csv")
    p.add_argument("--runs-out", help="per-seed rows")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--threads", type=int)
    p.add_argument("--verbose", "-v", action="count", default=0)
    return parser


# --------------------------------------------------------------------------
# helpers


def _write_manifest(args, argv, default_path):
    path = args.manifest or default_path
    if path is None:
        return
    effective = {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v)
                 for k, v in vars(args).items() if k not in ("manifest", "verbose")}
    write_json(path, {"flowmoe_version": __version__, "command": args.command,
                      "argv": list(argv), "effective": effective})


def _load_binned(args, grid=None):
    cytos, cov = ingest_dataset(args.cytograms, args.covariates)
    if not cytos:
        raise DataError("no cytograms in input")
    if grid is not None:
        lo, hi, D = np.array(grid["lo"]), np.array(grid["hi"]), int(grid["D"])
    elif getattr(args, "bins", 0):
        lo, hi = default_grid_bounds(cytos)
        if args.lo is not None:
            lo = np.array(args.lo, dtype=float)
        if args.hi is not None:
            hi = np.array(args.hi, dtype=float)
        D = args.bins
    else:
        return cytos, cytos, cov, None
    binned = bin_dataset(cytos, lo, hi, D)
    dropped = sum(b.dropped for b in binned)
    if dropped:
        log.warning("dropped %d particles outside the binning grid", dropped)
    return cytos, binned, cov, {"lo": lo.tolist(), "hi": hi.tolist(), "D": int(D)}


def _spec(args) -> FeatureSpec:
    return FeatureSpec(n_h=args.nh, a=args.a, activation=args.activation, threshold=args.pca_threshold,
                       use_pca=not args.scores, seed=args.seed, pca_scope=args.pca_scope
                       if hasattr(args, "pca_scope") else "per-split")


def _cfg(args, **kw) -> FitConfig:
    return FitConfig(K=args.k, r=args.r, restarts=args.restarts, seed=args.seed, tol=args.tol,
                     max_iter=args.max_iter, **kw)


def _grid(args, binned, X, spec, cfg):
    if args.grid_alpha is not None or args.grid_beta is not None:
        la = args.grid_alpha or [0.0]
        lb = args.grid_beta or [0.0]
        return CvGrid(tuple(la), tuple(lb))
    return None


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, argv):
    out = Path(args.out_dir)
    if args.psi:
        psi_cov = read_covariates(args.psi)
        psi = psi_cov.X
    else:
        psi = synthetic_scores(args.T)
        psi_cov = CovariateMatrix(np.arange(1, len(psi) + 1), psi)
    sc = SimScenario(args.config, args.delta, args.mean_kind, args.prob_kind, args.n_per_time,
                     args.noise_sd, args.seed, args.delta_sign)
    ds = generate(sc, psi)
    with atomic_path(out / "cytograms.csv") as tmp:
        write_cytograms(tmp, ds.cytograms)
    with atomic_path(out / "covariates.csv") as tmp:
        write_covariates(tmp, CovariateMatrix(psi_cov.times, psi))
    write_csv(out / "truth.csv", ["time", "mu1", "mu2", "pi1"], ds.truth_rows())
    _write_manifest(args, argv, out / "manifest.json")
    print(f"wrote {len(ds.cytograms)} cytograms to {out}")
    return EXIT_OK


def cmd_fit(args, argv):
    _, binned, cov, grid = _load_binned(args)
    if args.emit_binned:
        with atomic_path(args.emit_binned) as tmp:
            write_binned(tmp, binned)
    spec = _spec(args)
    pipe = spec.build(cov.X)
    psi = pipe.scores(cov.X)
    F = pipe.from_scores(psi)
    cfg = _cfg(args, lambda_alpha=args.lambda_alpha, lambda_beta=args.lambda_beta)
    res = fit(binned, F, cfg, threads=args.threads)
    model = FittedModel(res.params, pipe, cfg, grid, psi.mean(axis=0), psi.min(axis=0), psi.max(axis=0))
    model.save(args.out)
    if args.trace:
        write_csv(args.trace, ["iter", "objective"], enumerate(res.objective_trace.tolist()))
    _write_manifest(args, argv, f"{args.out}.manifest.json")
    print(f"objective {res.objective!r} after {res.n_iter} iterations "
          f"(restart {res.restart_index}, converged={res.converged})")
    return EXIT_OK


def cmd_cv(args, argv):
    _, binned, cov, _ = _load_binned(args)
    spec, cfg = _spec(args), _cfg(args)
    X = cov.X
    grid = _grid(args, binned, X, spec, cfg)
    if grid is None:
        grid = data_driven_grid(binned, X, spec, cfg, n=args.grid_points, threads=args.threads)
    folds = make_folds(len(binned), args.block_size, args.folds)
    res = cross_validate(binned, X, spec, cfg, grid, folds, threads=args.threads)
    write_csv(args.out, ["lambda_alpha", "lambda_beta", "fold", "nlpl"], res.table)
    _write_manifest(args, argv, f"{args.out}.manifest.json")
    print(f"best lambda_alpha={res.best_lambda_alpha!r} lambda_beta={res.best_lambda_beta!r} "
          f"mean NLPL={res.mean_nlpl[(res.best_lambda_alpha, res.best_lambda_beta)]!r}")
    return EXIT_OK


def cmd_nested_cv(args, argv):
    _, binned, cov, _ = _load_binned(args)
    spec, cfg = _spec(args), _cfg(args)
    grid = _grid(args, binned, cov.X, spec, cfg)
    res = nested_cv(binned, cov.X, spec, cfg, grid, args.block_size, args.folds, threads=args.threads)
    if args.out:
        write_csv(args.out, ["fold", "lambda_alpha", "lambda_beta", "nlpl"],
                  [(j, *res.chosen[j], res.fold_nlpl[j]) for j in sorted(res.fold_nlpl)])
        _write_manifest(args, argv, f"{args.out}.manifest.json")
    print(f"nested-CV NLPL {res.nlpl!r}")
    return EXIT_OK


def cmd_evaluate(args, argv):
    model = FittedModel.load(args.model)
    args.bins = 0
    _, binned, cov, _ = _load_binned(args, grid=model.bin_grid)
    F = model.pipeline.transform(cov.X)
    value = -log_pseudolikelihood(model.params, binned, F)
    if args.out:
        write_json(args.out, {"nlpl": value, "model": str(args.model)})
    print(f"NLPL {value!r}")
    return EXIT_OK


def _parse_conditions(items, q):
    fixed, multi = {}, {}
    for item in items:
        key, _, val = item.partition("=")
        key = key.strip().lower()
        if not key.startswith("pc") or not val:
            raise UsageError(f"bad --condition {item!r}; expected pcJ=value")
        j = int(key[2:]) - 1
        if not 0 <= j < q:
            raise UsageError(f"--condition {item!r}: component out of range 1..{q}")
        multi.setdefault(j, []).append(float(val))
    many = [j for j, v in multi.items() if len(v) > 1]
    if len(many) > 1:
        raise UsageError("only one component may take several conditioning values")
    for j, v in multi.items():
        if len(v) == 1:
            fixed[j] = v[0]
    return fixed, (many[0], multi[many[0]]) if many else None


def cmd_prc(args, argv):
    model = FittedModel.load(args.model)
    if model.psi_mean is None:
        raise DataError("model file lacks the training score summary needed for PRCs")
    try:
        target = Target.parse(args.target)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    q = len(model.psi_mean)
    j = args.sweep_pc - 1
    if not 0 <= j < q:
        raise UsageError(f"--sweep-pc must lie in 1..{q}")
    fixed, multi = _parse_conditions(args.condition, q)
    lo, hi = float(model.psi_min[j]), float(model.psi_max[j])
    grid = np.linspace(lo, hi, args.grid_points)
    curves = []
    for value in (multi[1] if multi else [None]):
        cond = dict(fixed)
        label = ";".join(f"pc{c + 1}={v:g}" for c, v in sorted(fixed.items()))
        if value is not None:
            cond[multi[0]] = value
            label = ";".join(filter(None, [label, f"pc{multi[0] + 1}={value:g}"]))
        req = PrcRequest(target, j, grid, model.psi_mean, cond, (lo, hi), args.extrapolate)
        curves.append((label, partial_response(model.params, model.pipeline, req)))
    with_cond = bool(args.condition)
    header = ["x", "value"] + (["condition"] if with_cond else [])
    rows = [(x, v, *([label] if with_cond else [])) for label, tab in curves for x, v in tab]
    write_csv(args.out, header, rows)
    _write_manifest(args, argv, f"{args.out}.manifest.json")
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_folds(args, argv):
    try:
        spec = make_folds(args.t, args.block_size, args.n_folds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lines = ["time,fold"] + [f"{t},{f}" for t, f in enumerate(spec.assignment.tolist(), start=1)]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_replicate_figure3(args, argv):
    configs = [_config_name(c.strip()) for c in args.configs.split(",") if c.strip()]
    settings = StudySettings(T=args.T, n_per_time=args.n_per_time, restarts=args.restarts,
                             grid_points=args.grid_points, r=args.r, mean_kind=args.mean_kind,
                             prob_kind=args.prob_kind)
    runs, summary = replicate_figure3(configs, args.n_deltas, args.seeds, settings, threads=args.threads)
    write_csv(args.out, ["config", "delta", "model", "excess_nlpl"], summary)
    if args.runs_out:
        cols = ["config", "delta", "seed", "model", "excess_nlpl", "nlpl", "oracle_nlpl",
                "lambda_alpha", "lambda_beta"]
        write_csv(args.runs_out, cols, ([r[c] for c in cols] for r in runs))
    _write_manifest(args, argv, f"{args.out}.manifest.json")
    for row in summary:
        print(",".join(str(v) for v in row))
    return EXIT_OK


def cmd_replay(args, argv):
    doc = json.loads(Path(args.manifest).read_text())
    replay_argv = list(doc["argv"])
    if args.threads is not None:
        replay_argv += ["--threads", str(args.threads)]
    log.info("replaying: %s", " ".join(replay_argv))
    return run(replay_argv)


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "cv": cmd_cv, "nested-cv": cmd_nested_cv,
    "evaluate": cmd_evaluate, "prc": cmd_prc, "folds": cmd_folds,
    "replicate-figure3": cmd_replicate_figure3, "replay": cmd_replay,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        sys.stderr.write(f"flowmoe {args.command}: {exc}\n")
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        sys.stderr.write(f"flowmoe {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except (SolverError, NotPositiveDefinite, np.linalg.LinAlgError, CvError) as exc:
        sys.stderr.write(f"flowmoe {args.command}: solver failure: {exc}\n")
        return EXIT_SOLVER
    except ValueError as exc:
        sys.stderr.write(f"flowmoe {args.command}: {exc}\n")
        return EXIT_USAGE


def main():
    sys.exit(run())
