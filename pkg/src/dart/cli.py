"""Command-line entry point: ``dart build-tree | test | bh | simulate | bootstrap``.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a
numerical routine fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import secrets
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .core import (
    UNBOUNDED,
    AggregationTree,
    ConfigError,
    DartError,
    NumericError,
    ValidationError,
    euclidean_distances,
    validate_distance_matrix,
)
from .engine import EMPTY_CHARGES, run_bh, run_dart
from .harness import DEFAULT_ALPHAS, ExperimentSpec, bootstrap_stability, run_experiment
from .io import (
    MANIFEST_NAME,
    read_coords,
    read_distance_matrix,
    read_numeric_table,
    read_pvalues,
    write_index_list,
    write_manifest,
    write_matrix,
)
from .kernels import SeededRng
from .models import SETTINGS, RegressionDataset
from .tree import build_tree, write_merge_log
from .tuning import default_L, select_g

log = logging.getLogger("dart")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _cap(text: str) -> float | int:
    if text.strip().lower() in ("inf", "infinity"):
        return UNBOUNDED
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"M must be an integer or 'inf', got {text!r}") from None
    if value < 2:
        raise argparse.ArgumentTypeError("M must be >= 2")
    return value


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _alpha(text: str) -> float:
    try:
        a = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha must be a number, got {text!r}") from None
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {a}")
    return a


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _json_cap(M):
    return "inf" if M == UNBOUNDED else M


def _seed(args) -> int:
    return args.seed if args.seed is not None else secrets.randbits(32)


# ---------------------------------------------------------------------------
# build-tree
# ---------------------------------------------------------------------------


def cmd_build_tree(args) -> int:
    inputs = {}
    if args.distances:
        d = read_distance_matrix(args.distances, normalize=args.normalize)
        inputs["distances"] = args.distances
    else:
        coords = read_coords(args.coords)
        d = euclidean_distances(coords)
        if args.normalize:
            d = validate_distance_matrix(d.d, normalize=True)
        inputs["coords"] = args.coords

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out]
    trace = None
    if args.g == "auto":
        if args.n is None:
            raise ConfigError("--g auto needs the sample size --n")
        L = args.L if args.L is not None else default_L(d.m, args.M, args.c_m)
        if L > 1:
            g, trace = select_g(d, args.n, args.M, L)
        else:
            g = ()
    else:
        g = _floats(args.g)
        L = args.L if args.L is not None else len(g) + 1
    events = [] if args.merge_log else None
    tree = build_tree(d, args.M, L, g, log=events)
    out.write_text(tree.to_json() + "\n")
    log.info("built a %d-layer tree on %d features (g = %s)", tree.L, tree.m, list(tree.g))

    if events is not None:
        with open(args.merge_log, "w", newline="") as fh:
            write_merge_log(events, fh)
        outputs.append(Path(args.merge_log))
    if trace is not None:
        trace_path = Path(args.trace) if args.trace else out.with_name(out.stem + ".gsearch.csv")
        with open(trace_path, "w", newline="") as fh:
            trace.write_csv(fh)
        outputs.append(trace_path)
    if args.save_distances:
        write_matrix(args.save_distances, d.d)
        outputs.append(Path(args.save_distances))

    config = {"M": _json_cap(args.M), "L": tree.L, "g": list(tree.g), "g_mode": "auto" if trace else "fixed",
              "n": args.n, "c_m": args.c_m, "normalize": args.normalize}
    write_manifest(out.with_name(out.name + ".manifest.json"), "build-tree", config, inputs, None, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# test / bh
# ---------------------------------------------------------------------------


def _read_tree(path) -> AggregationTree:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    try:
        return AggregationTree.from_json(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_layer_summary(outcome, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["layer", "n_nodes", "m_layer", "threshold", "rejected_nodes", "cumulative_rejected_features"])
    for lr in outcome.layers:
        thr = "none" if lr.threshold is None else repr(lr.threshold)
        w.writerow([lr.layer, len(lr.working), lr.m_layer, thr, len(lr.rejected_nodes), len(lr.cumulative)])


def cmd_test(args) -> int:
    tree = _read_tree(args.tree)
    T = read_pvalues(args.pvalues)
    if len(T) != tree.m:
        raise ValidationError(f"{args.pvalues}: {len(T)} p-values but the tree has {tree.m} features")
    outcome = run_dart(tree, T, args.alpha, args.empty_charge)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "outcome.json").write_text(json.dumps(outcome.to_dict(), indent=1) + "\n")
    with open(out / "layers.csv", "w", newline="") as fh:
        write_layer_summary(outcome, fh)
    write_index_list(out / "rejected.txt", outcome.rejected)
    config = {"alpha": args.alpha, "empty_charge": args.empty_charge, "m": tree.m, "L": tree.L}
    write_manifest(out / MANIFEST_NAME, "test", config, {"tree": args.tree, "pvalues": args.pvalues},
                   None, [out / "outcome.json", out / "layers.csv", out / "rejected.txt"])
    log.info("rejected %d of %d features", len(outcome.rejected), tree.m)
    return EXIT_OK


def cmd_bh(args) -> int:
    T = read_pvalues(args.pvalues)
    rejected = run_bh(T, args.alpha)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_index_list(out / "rejected.txt", rejected)
        write_manifest(out / MANIFEST_NAME, "bh", {"alpha": args.alpha, "m": len(T)},
                       {"pvalues": args.pvalues}, None, [out / "rejected.txt"])
    else:
        for f in sorted(rejected):
            print(f + 1)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / bootstrap
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    seed = _seed(args)
    g = None if args.g in (None, "auto") else _floats(args.g)
    spec = ExperimentSpec(
        setting=args.setting, n=args.n, m=args.m, alphas=args.alphas, reps=args.reps, seed=seed,
        fixed_layout=args.fixed_layout, M=args.M, L=args.L, g=g, c_m=args.c_m,
        signal_scale=args.signal_scale, empty_charge=args.empty_charge,
    )
    report = run_experiment(spec, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        report.write_csv(fh)
    with open(out / "report.json", "w") as fh:
        report.write_json(fh)
    config = asdict(spec)
    config["M"] = _json_cap(spec.M)
    config["jobs"] = args.jobs
    write_manifest(out / MANIFEST_NAME, "simulate", config, {}, seed,
                   [out / "report.csv", out / "report.json"])
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    seed = _seed(args)
    y_path, w_path = args.data
    Y = read_numeric_table(y_path)
    W = read_numeric_table(w_path)
    ds = RegressionDataset(Y, W)
    q = args.contrast
    if len(q) != W.shape[1]:
        raise ConfigError(f"--contrast has {len(q)} entries but W has {W.shape[1]} columns")
    inputs = {"Y": y_path, "W": w_path}
    tree = None
    if args.method == "dart":
        if not args.tree:
            raise ConfigError("--method dart needs --tree")
        tree = _read_tree(args.tree)
        if tree.m != Y.shape[1]:
            raise ValidationError(f"{y_path}: {Y.shape[1]} features but the tree has {tree.m}")
        inputs["tree"] = args.tree
    report = bootstrap_stability(ds, args.alpha, SeededRng(seed), tree=tree, q=q, method=args.method,
                                 B=args.B, empty_charge=args.empty_charge, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stability.csv", "w", newline="") as fh:
        report.write_csv(fh)
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=1, sort_keys=True) + "\n")
    config = {"alpha": args.alpha, "method": args.method, "B": args.B, "contrast": list(q),
              "empty_charge": args.empty_charge, "jobs": args.jobs}
    write_manifest(out / MANIFEST_NAME, "bootstrap", config, inputs, seed,
                   [out / "stability.csv", out / "summary.json"])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dart", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-tree", help="build an aggregation tree from distances or coordinates")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--distances", help="square distance matrix CSV")
    src.add_argument("--coords", help="two-column coordinate CSV (Euclidean distances)")
    b.add_argument("--M", type=_cap, default=3, help="children cap, integer >= 2 or 'inf' (default 3)")
    b.add_argument("--L", type=_positive_int, help="number of layers (default: from --c-m, or len(g)+1)")
    b.add_argument("--g", default="auto", help="comma-separated thresholds for layers 2..L, or 'auto'")
    b.add_argument("--n", type=_positive_int, help="sample size (needed by --g auto)")
    b.add_argument("--c-m", dest="c_m", type=_positive_int, default=30)
    b.add_argument("--normalize", action="store_true", help="rescale distances so the largest is 1")
    b.add_argument("--out", required=True, help="tree JSON path")
    b.add_argument("--merge-log", help="CSV log of every merge decision")
    b.add_argument("--trace", help="threshold search trace CSV (default: next to --out)")
    b.add_argument("--save-distances", help="write the distance matrix actually used")
    b.set_defaults(func=cmd_build_tree)

    t = sub.add_parser("test", help="run the layerwise test on a tree")
    t.add_argument("--tree", required=True)
    t.add_argument("--pvalues", required=True)
    t.add_argument("--alpha", type=_alpha, required=True)
    t.add_argument("--empty-charge", choices=EMPTY_CHARGES, default="floor")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_test)

    h = sub.add_parser("bh", help="Benjamini-Hochberg baseline")
    h.add_argument("--pvalues", required=True)
    h.add_argument("--alpha", type=_alpha, required=True)
    h.add_argument("--out", help="output directory (default: print to stdout)")
    h.set_defaults(func=cmd_bh)

    s = sub.add_parser("simulate", help="Monte Carlo FDR / sensitivity study")
    s.add_argument("--setting", choices=SETTINGS, required=True)
    s.add_argument("--n", type=_positive_int, default=90)
    s.add_argument("--m", type=_positive_int, default=100)
    s.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS)
    s.add_argument("--reps", type=_positive_int, default=200)
    s.add_argument("--seed", type=int)
    s.add_argument("--fixed-layout", action="store_true", help="one layout and tree for all replications")
    s.add_argument("--M", type=_cap, default=3)
    s.add_argument("--L", type=_positive_int)
    s.add_argument("--g", help="comma-separated thresholds (needs --L); default: grid search")
    s.add_argument("--c-m", dest="c_m", type=_positive_int, default=30)
    s.add_argument("--signal-scale", type=float, default=1.0)
    s.add_argument("--empty-charge", choices=EMPTY_CHARGES, default="floor")
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("bootstrap", help="bootstrap rejection stability for a linear model")
    r.add_argument("--data", nargs=2, metavar=("Y.csv", "W.csv"), required=True,
                   help="n x m responses and n x p0 covariates")
    r.add_argument("--contrast", type=_floats, required=True, help="comma-separated contrast q")
    r.add_argument("--tree", help="tree JSON (required for --method dart)")
    r.add_argument("--alpha", type=_alpha, default=0.1)
    r.add_argument("--method", choices=("dart", "bh"), default="dart")
    r.add_argument("--B", type=_positive_int, default=200)
    r.add_argument("--seed", type=int)
    r.add_argument("--empty-charge", choices=EMPTY_CHARGES, default="floor")
    r.add_argument("--jobs", type=_positive_int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_bootstrap)
    return p


def _configure_logging() -> None:
    name = os.environ.get("DART_LOG", "warning").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if name not in LOG_LEVELS:
        log.warning("DART_LOG=%r not recognised; using 'warning'", name)


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"dart: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DartError, ValueError) as exc:
        if isinstance(exc.__cause__, NumericError):
            print(f"dart: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"dart: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dart: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
