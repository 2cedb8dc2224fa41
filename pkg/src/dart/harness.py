"""Monte Carlo experiments (empirical FDR / sensitivity) and bootstrap stability."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .core import (
    AggregationTree,
    ConfigError,
    DartError,
    NumericError,
    PValueVector,
    TruthAssignment,
    feature_fdp,
)
from .engine import EMPTY_CHARGES, run_bh, run_dart
from .kernels import SeededRng
from .models import (
    SETTINGS,
    RegressionDataset,
    gen_dataset_se4,
    gen_layout,
    gen_pvalues_direct,
    gen_theta,
    wald_linear_pvalues,
)
from .survival import cox_wald_pvalues, gen_dataset_se5
from .tree import build_tree
from .tuning import auto_tree

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.05, 0.1, 0.15, 0.2)


class ReplicationError(DartError):
    def __init__(self, rep: int, cause: Exception):
        super().__init__(f"replication {rep} failed: {cause}")
        self.rep = rep


@dataclass(frozen=True)
class ExperimentSpec:
    setting: str = "SE1"
    n: int = 90
    m: int = 100
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    reps: int = 200
    seed: int = 0
    fixed_layout: bool = False
    M: float | int = 3
    L: int | None = None  # None: chosen from c_m
    g: tuple[float, ...] | None = None  # None: grid search
    c_m: int = 30
    signal_scale: float = 1.0
    include_bh: bool = True
    empty_charge: str = "floor"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError(f"alphas must lie in (0, 1), got {self.alphas}")
        if self.empty_charge not in EMPTY_CHARGES:
            raise ConfigError(f"empty_charge must be one of {EMPTY_CHARGES}")
        if self.g is not None and self.L is None:
            raise ConfigError("explicit thresholds need an explicit L")


@dataclass(frozen=True, eq=False)
class _Design:
    """Layout-dependent pieces: distances, effect sizes and the tree."""

    theta: np.ndarray
    truth: TruthAssignment
    tree: AggregationTree


def _design(spec: ExperimentSpec, rng: SeededRng) -> _Design:
    layout = gen_layout(spec.m, rng)
    signal = gen_theta(spec.setting, spec.n, spec.m, layout.distances, spec.signal_scale)
    if spec.g is not None:
        tree = build_tree(layout.distances, spec.M, spec.L, spec.g)
    else:
        tree, _ = auto_tree(layout.distances, spec.n, spec.M, spec.L, spec.c_m)
    return _Design(signal.theta, signal.truth, tree)


def simulate_pvalues(setting: str, theta: np.ndarray, n: int, rng) -> PValueVector:
    if setting in ("SE1", "SE2", "SE3"):
        return gen_pvalues_direct(setting, theta, n, rng)
    if setting == "SE4":
        return gen_dataset_se4(theta, n, rng)[1]
    p, failed = cox_wald_pvalues(gen_dataset_se5(theta, n, rng))
    if failed.any():
        log.debug("%d Cox fits failed; their p-values were set to 1", int(failed.sum()))
    return p


def method_names(L: int, include_bh: bool = True) -> list[str]:
    return [f"DART-L{ell}" for ell in range(1, L + 1)] + (["BH"] if include_bh else [])


def _replicate(spec: ExperimentSpec, rep: int, shared: _Design | None) -> dict:
    try:
        rng = SeededRng(spec.seed).child(1, rep)
        design = shared if shared is not None else _design(spec, rng.child(0))
        p = simulate_pvalues(spec.setting, design.theta, spec.n, rng.child(1))
        truth = design.truth
        has_alt = bool(truth.alt)
        out = {}
        for a in spec.alphas:
            outcome = run_dart(design.tree, p, a, spec.empty_charge)
            sets = {f"DART-L{ell}": outcome.rejected_through(ell) for ell in range(1, design.tree.L + 1)}
            if spec.include_bh:
                sets["BH"] = run_bh(p, a)
            for name, R in sets.items():
                sens = len(R & truth.alt) / len(truth.alt) if has_alt else float("nan")
                out[(name, a)] = (feature_fdp(R, truth), sens, len(R))
        return {"values": out, "m1": len(truth.alt), "L": design.tree.L}
    except DartError as exc:
        raise ReplicationError(rep, exc) from exc
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise ReplicationError(rep, exc) from exc


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    methods: list[str]
    rows: list[dict]
    per_rep: dict[tuple[str, float], np.ndarray] = field(repr=False)
    m1: list[int] = field(default_factory=list)

    def row(self, method: str, alpha: float) -> dict:
        for r in self.rows:
            if r["method"] == method and r["alpha"] == alpha:
                return r
        raise KeyError((method, alpha))

    def to_dict(self) -> dict:
        spec = asdict(self.spec)
        if spec["M"] == float("inf"):
            spec["M"] = "inf"
        return {"spec": spec, "methods": self.methods, "m1": self.m1, "rows": self.rows}

    def write_json(self, fh: IO[str]) -> None:
        json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")

    def write_csv(self, fh: IO[str]) -> None:
        """Tidy layout: one row per method x alpha x metric."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "alpha", "metric", "mean", "se", "reps"])
        for r in self.rows:
            for metric in ("fdr", "sensitivity", "rejections"):
                w.writerow([r["method"], repr(r["alpha"]), metric, repr(r[metric]),
                            repr(r[f"{metric}_se"]), r["reps"]])


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = x[~np.isnan(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentReport:
    shared = _design(spec, SeededRng(spec.seed).child(0)) if spec.fixed_layout else None
    reps = range(spec.reps)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate, [spec] * spec.reps, reps, [shared] * spec.reps))
    else:
        results = [_replicate(spec, r, shared) for r in reps]

    Ls = {res["L"] for res in results}
    L = min(Ls)
    if len(Ls) > 1:
        log.warning("layer count varied across replications (%s); reporting layers 1..%d", sorted(Ls), L)
    methods = method_names(L, spec.include_bh)
    rows, per_rep = [], {}
    for name in methods:
        for a in spec.alphas:
            vals = np.array([res["values"][(name, a)] for res in results], dtype=float)
            per_rep[(name, a)] = vals
            fdr, fdr_se = _mean_se(vals[:, 0])
            sens, sens_se = _mean_se(vals[:, 1])
            rej, rej_se = _mean_se(vals[:, 2])
            rows.append({"method": name, "alpha": a, "fdr": fdr, "fdr_se": fdr_se,
                         "sensitivity": sens, "sensitivity_se": sens_se,
                         "rejections": rej, "rejections_se": rej_se, "reps": spec.reps})
    return ExperimentReport(spec, methods, rows, per_rep, [res["m1"] for res in results])


# ---------------------------------------------------------------------------
# Bootstrap stability
# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    rates: np.ndarray
    B: int
    B_effective: int
    skipped: list[int]
    method: str

    @property
    def low(self) -> float:
        """Share of features with rejection rate <= 0.1."""
        return float(np.mean(self.rates <= 0.1))

    @property
    def high(self) -> float:
        """Share of features with rejection rate > 0.8."""
        return float(np.mean(self.rates > 0.8))

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "rejection_rate"])
        for i, r in enumerate(self.rates, start=1):
            w.writerow([i, repr(float(r))])

    def summary(self) -> dict:
        return {"method": self.method, "B": self.B, "B_effective": self.B_effective,
                "skipped": self.skipped, "rr_le_0.1": self.low, "rr_gt_0.8": self.high}


def _decider(method, tree, alpha, empty_charge):
    if callable(method):
        return method, getattr(method, "__name__", "custom")
    if method == "dart":
        if tree is None:
            raise ConfigError("DART needs a tree")
        return (lambda p: run_dart(tree, p, alpha, empty_charge).rejected), "DART"
    if method == "bh":
        return (lambda p: run_bh(p, alpha)), "BH"
    raise ConfigError(f"unknown method {method!r}")


def _stability_counts(pvalues_for, decide, rng: SeededRng, n: int, resamples: Sequence[int]):
    counts = None
    skipped = []
    for b in resamples:
        rows = rng.child(b).gen.integers(0, n, n)
        try:
            p = pvalues_for(rows)
        except NumericError as exc:
            log.info("bootstrap resample %d skipped: %s", b, exc)
            skipped.append(b)
            continue
        if counts is None:
            counts = np.zeros(len(p))
        for f in decide(p):
            counts[f] += 1
    return counts, skipped


def _regression_chunk(ds, q, tree, alpha, method, empty_charge, rng, resamples):
    decide, _ = _decider(method, tree, alpha, empty_charge)
    return _stability_counts(lambda rows: wald_linear_pvalues(ds.resample(rows), q),
                             decide, rng, ds.n, resamples)


def bootstrap_stability(
    data: RegressionDataset | Callable[[np.ndarray], PValueVector],
    alpha: float,
    rng: SeededRng,
    *,
    tree: AggregationTree | None = None,
    q: Sequence[float] | None = None,
    n: int | None = None,
    method: str | Callable[[PValueVector], frozenset] = "dart",
    B: int = 200,
    empty_charge: str = "floor",
    jobs: int = 1,
) -> StabilityReport:
    """Resample subjects with replacement ``B`` times and rerun the pipeline.

    ``data`` is either a regression dataset (p-values from the Wald test of
    contrast ``q``) or a callable mapping resampled row indices to p-values,
    in which case ``n`` gives the number of subjects. The tree stays fixed.
    Resample b always draws from ``rng.child(b)``, so results do not depend
    on ``jobs``; only regression datasets with a named method run in parallel.
    """
    if B < 1:
        raise ConfigError("B must be >= 1")
    decide, label = _decider(method, tree, alpha, empty_charge)
    if isinstance(data, RegressionDataset):
        if q is None:
            raise ConfigError("a regression dataset needs the contrast q")
        n = data.n
        if jobs > 1 and isinstance(method, str):
            chunks = [list(range(B))[i::jobs] for i in range(jobs)]
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(_regression_chunk, *zip(*[
                    (data, q, tree, alpha, method, empty_charge, rng, c) for c in chunks])))
            counts, skipped = None, []
            for c, sk in parts:
                skipped.extend(sk)
                if c is not None:
                    counts = c if counts is None else counts + c
            return _stability_report(counts, B, sorted(skipped), label)
        pvalues_for = lambda rows: wald_linear_pvalues(data.resample(rows), q)  # noqa: E731
    else:
        if n is None:
            raise ConfigError("a p-value pipeline needs the subject count n")
        pvalues_for = data
    counts, skipped = _stability_counts(pvalues_for, decide, rng, n, range(B))
    return _stability_report(counts, B, skipped, label)


def _stability_report(counts, B, skipped, label) -> StabilityReport:
    used = B - len(skipped)
    if counts is None or used == 0:
        raise NumericError("every bootstrap resample was degenerate")
    return StabilityReport(counts / used, B, used, skipped, label)
