"""Command-line interface: fit, cv, predict, diagnose and simulate.

Exit codes: 0 success, 1 usage error, 2 malformed or unreadable file,
3 shape mismatch, 4 fit failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics, simlab
from .estimator import (DEFAULT_LAMBDAS, DEFAULT_RANKS, METHODS, FitFailure, RototConfig,
                        cross_validate, fit_rotot, predict)
from .io import MalformedFile, load_model, read_tensor_stack, save_model, write_tens
from .rompca import RompcaError, rompca_fit
from .tensor import DimensionError
from .tot import TotModel, tot_predict

EXIT_USAGE, EXIT_FILE, EXIT_SHAPE, EXIT_FIT = 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _ints(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_xy(x_path, y_path):
    X = read_tensor_stack(x_path)
    Y = read_tensor_stack(y_path)
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"{X.shape[0]} predictor cases but {Y.shape[0]} responses")
    return X, Y


def _config(args) -> RototConfig:
    return RototConfig(max_iter=args.max_iter, tol=args.tol, seed=args.seed)


def _add_fit_options(p, cv_only=False):
    p.add_argument("x", help="predictor stack (.tens, or .ten with cases on mode 1)")
    p.add_argument("y", help="response stack")
    p.add_argument("--x-ranks", type=_ints, required=True,
                   help="ROMPCA ranks K_1,...,K_L of the predictors")
    p.add_argument("--method", choices=METHODS, default="ROTOT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--folds", type=int, default=None, help="cross-validation folds (default 5)")
    p.add_argument("--lambdas", type=_floats, default=None,
                   help="lambda grid for cross-validation (default 1e-3,...,1e3)")
    p.add_argument("--ranks", type=_ints, default=None, help="rank grid for cross-validation (default 1..5)")


def _run_cv(args, X, Y, rm, cfg, out=sys.stdout):
    ranks = args.ranks or ((args.rank,) if getattr(args, "rank", None) else DEFAULT_RANKS)
    lams = args.lambdas or DEFAULT_LAMBDAS
    res = cross_validate(X, Y, lams, ranks, K=args.folds or 5, rompca_model=rm, method=args.method,
                         cfg=cfg)
    for R, lam, score, _ in res.table:
        print(f"cv rank={R} lambda={lam!r} scale={score!r}", file=out)
    print(f"selected rank={res.best_rank} lambda={res.best_lambda!r}", file=out)
    return res


def cmd_fit(args):
    if args.cv and args.lam is not None:
        raise UsageError("--lambda and --cv are mutually exclusive")
    if not args.cv:
        if args.lam is None or args.rank is None:
            raise UsageError("--rank and --lambda are required unless --cv is given")
        if args.folds is not None or args.lambdas is not None or args.ranks is not None:
            raise UsageError("--folds/--lambdas/--ranks need --cv")
    X, Y = _load_xy(args.x, args.y)
    cfg = _config(args)
    rm = rompca_fit(X, args.x_ranks, cfg.rompca)
    if args.cv:
        res = _run_cv(args, X, Y, rm, cfg)
        rank, lam = res.best_rank, res.best_lambda
    else:
        rank, lam = args.rank, args.lam
    model = fit_rotot(X, Y, rank, lam, rompca_model=rm, method=args.method, cfg=cfg)
    save_model(model, args.out)
    print(f"method={model.method} rank={model.rank} lambda={model.lam!r}")
    print(f"objective={model.objective_value!r} iterations={model.n_iter} converged={model.converged}")
    print(f"flagged_predictor_cases={int(np.sum(model.w_x == 0))}")
    return 0


def cmd_cv(args):
    X, Y = _load_xy(args.x, args.y)
    cfg = _config(args)
    rm = rompca_fit(X, args.x_ranks, cfg.rompca)
    res = _run_cv(args, X, Y, rm, cfg)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("rank,lambda,mean_scale\n")
            for R, lam, score, _ in res.table:
                fh.write(f"{R},{lam!r},{score!r}\n")
    return 0


def cmd_predict(args):
    model = load_model(args.model)
    X = read_tensor_stack(args.x)
    if isinstance(model, TotModel):
        if X.shape[1:] != model.slope.p_shape:
            raise DimensionError(f"predictor shape {X.shape[1:]} != {model.slope.p_shape}")
        out = tot_predict(model, X)
    else:
        out = predict(model, X)
    write_tens(args.out, out)
    print(f"wrote {out.shape[0]} predictions of shape {out.shape[1:]} to {args.out}")
    return 0


def cmd_diagnose(args):
    model = load_model(args.model)
    if isinstance(model, TotModel):
        raise UsageError("diagnostics need a robust model")
    X, Y = _load_xy(args.x, args.y)
    rep = diagnostics.build_report(model, X, Y, B=args.replications, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    diagnostics.write_report_csv(rep, out / "report.csv")
    diagnostics.render_cellmap(rep, out / "cellmap.svg", cases=args.cases and [c - 1 for c in args.cases])
    diagnostics.render_outlier_map(rep, out / "outliermap.svg")
    counts = {lab: rep.labels.count(lab) for lab in diagnostics.LABELS}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"c_cell={rep.c_cell!r} c_case={rep.c_case!r} c_sd={rep.c_sd!r} c_res={rep.c_res!r}")
    return 0


def cmd_simulate(args):
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedFile(str(exc)) from exc
    try:
        conf = simlab.parse_config(text)
    except ValueError as exc:
        raise MalformedFile(f"bad config: {exc}") from exc
    base = conf["base"]
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    rows = simlab.run_scenario(conf["scenarios"], conf["methods"], conf["gammas"], conf["replications"],
                               base, conf["lambdas"], conf["missing"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(simlab.results_csv(rows), encoding="utf-8")
    (out / "summary.csv").write_text(simlab.summary_csv(rows), encoding="utf-8")
    for m, sc, snr, g, med, failed in simlab.summary_rows(rows):
        print(f"{sc} gamma={g:g} {m}: median RPE {med:.4f}" + (f" ({failed} failed)" if failed else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rotot", description="Robust tensor-on-tensor regression.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model (fixed lambda/rank or by cross-validation)")
    _add_fit_options(f)
    f.add_argument("--rank", type=int, default=None, help="CP rank R")
    f.add_argument("--lambda", dest="lam", type=float, default=None)
    f.add_argument("--cv", action="store_true", help="choose lambda (and rank) by cross-validation")
    f.add_argument("--out", required=True, help="model file to write (JSON)")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cv", help="cross-validation table only")
    _add_fit_options(c)
    c.add_argument("--out", default=None, help="optional CSV of the grid scores")
    c.set_defaults(func=cmd_cv, rank=None)

    pr = sub.add_parser("predict", help="predict responses for a predictor stack")
    pr.add_argument("model")
    pr.add_argument("x")
    pr.add_argument("--out", required=True, help="output .tens stack")
    pr.set_defaults(func=cmd_predict)

    d = sub.add_parser("diagnose", help="residual cellmap, outlier map and report table")
    d.add_argument("model")
    d.add_argument("x")
    d.add_argument("y")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--replications", type=int, default=500, help="simulation size for c_res and c_case")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--cases", type=_ints, default=None, help="1-based cases shown in the cellmap")
    d.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("simulate", help="run simulation scenarios from a key = value config")
    s.add_argument("config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rotot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MalformedFile, OSError) as exc:
        print(f"rotot: file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except DimensionError as exc:
        print(f"rotot: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (FitFailure, RompcaError) as exc:
        print(f"rotot: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
