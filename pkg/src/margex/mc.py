"""Monte Carlo studies: simulate, fit, and summarize bias, spread and coverage.

Replicate ``r`` simulates from a seed derived from ``(master_seed, r)``
alone and the summary is reduced in replicate order, so results do not
depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ArgumentError, BoundaryError, MargexError, NumericalError, StudyError
from .estimation import FitMode, SolverConfig, fit
from .frailty import PRESETS, TRUE_BETA, preset_scenario, simulate_dataset
from .mle import fit_mle
from .model import CorrelationKind
from .variance import joint_sandwich, wald_ci

MAX_FAILURE_RATE = 0.05
DEFAULT_STRUCTURE = {"table1a": "exch", "table1b": "ar1", "table2": "nested-exch", "table3": "exch"}


class Method(str, Enum):
    PROPOSED = "proposed"
    MLE = "mle"


@dataclass(frozen=True)
class StudySpec:
    scenario: str
    rho: tuple[float, ...] = ()
    n_reps: int = 1000
    methods: tuple[Method, ...] = (Method.PROPOSED,)
    master_seed: int = 0
    ci_level: float = 0.95
    structure: str | None = None
    mode: FitMode = FitMode.FOUR_STEP
    cluster_count: int = 200

    def __post_init__(self):
        if self.scenario not in PRESETS:
            raise ArgumentError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(PRESETS)}")
        if self.n_reps < 1:
            raise ArgumentError("n_reps must be at least 1")
        if not 0 < self.ci_level < 1:
            raise ArgumentError("ci_level must lie in (0, 1)")
        object.__setattr__(self, "rho", tuple(float(r) for r in np.atleast_1d(self.rho)) if self.rho is not None else ())
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "mode", FitMode(self.mode))
        kind = CorrelationKind.parse(self.structure or DEFAULT_STRUCTURE[self.scenario])
        object.__setattr__(self, "structure", kind.value)
        preset_scenario(self.scenario, self.rho or None)  # validates rho

    @property
    def kind(self) -> CorrelationKind:
        return CorrelationKind(self.structure)

    def truth(self) -> np.ndarray:
        rho = self.rho if self.scenario != "table3" else ()
        if self.kind.n_params != len(rho):
            rho = (math.nan,) * self.kind.n_params
        return np.array(TRUE_BETA + tuple(rho))

    def param_names(self) -> tuple[str, ...]:
        return ("beta0", "beta1") + self.kind.param_names


def replicate_seed(master_seed: int, r: int) -> int:
    return int(np.random.SeedSequence(int(master_seed), spawn_key=(int(r),)).generate_state(1, np.uint64)[0])


@dataclass
class ReplicateResult:
    """One method on one replicate; ``error`` set means a failed fit."""

    estimate: np.ndarray | None = None
    se_model: np.ndarray | None = None
    se_robust: np.ndarray | None = None
    seconds: float = 0.0
    error: str | None = None


def run_replicate(spec: StudySpec, r: int) -> dict[str, ReplicateResult]:
    config = preset_scenario(spec.scenario, spec.rho or None, seed=replicate_seed(spec.master_seed, r),
                             cluster_count=spec.cluster_count)
    data = simulate_dataset(config)
    kind = spec.kind
    q = kind.n_params
    out: dict[str, ReplicateResult] = {}
    proposed = None
    for method in spec.methods:
        start = time.perf_counter()
        try:
            if method is Method.PROPOSED or proposed is None:
                proposed = fit(data, kind, SolverConfig(mode=spec.mode))
            if method is Method.PROPOSED:
                est = np.concatenate([proposed.beta, proposed.rho])
                rho_se = np.full(q, np.nan)
                if q and not proposed.rho_boundary:
                    try:
                        rho_se = np.sqrt(np.clip(np.diag(joint_sandwich(data, proposed.theta_hat))[2:], 0, None))
                    except (BoundaryError, NumericalError):
                        pass
                se_m = np.concatenate([proposed.se_model, np.full(q, np.nan)])
                se_r = np.concatenate([proposed.se_robust, rho_se])
            else:
                start = time.perf_counter()
                res = fit_mle(data, kind, init=proposed.theta_hat)
                est = np.concatenate([res.beta, res.rho])
                se_m = res.se
                se_r = np.full(len(est), np.nan)
            out[method.value] = ReplicateResult(est, se_m, se_r, time.perf_counter() - start)
        except MargexError as exc:
            out[method.value] = ReplicateResult(seconds=time.perf_counter() - start,
                                                error=f"{type(exc).__name__}: {exc}")
    return out


def _replicate_task(args):
    spec, r = args
    return run_replicate(spec, r)


@dataclass
class SummaryRow:
    method: str
    parameter: str
    truth: float
    n: int
    bias: float
    sse: float
    see_model: float
    see_robust: float
    mse: float
    coverage_model: float
    coverage_robust: float


@dataclass
class MCSummary:
    rows: list[SummaryRow]
    n_failed: dict[str, int]
    failures: list[tuple[int, str, str]] = field(default_factory=list)
    mean_seconds: dict[str, float] = field(default_factory=dict)
    replicates: list[dict[str, ReplicateResult]] | None = None

    def row(self, method, parameter) -> SummaryRow:
        method = Method(method).value
        for r in self.rows:
            if r.method == method and r.parameter == parameter:
                return r
        raise KeyError((method, parameter))

    def estimates(self, method) -> np.ndarray:
        method = Method(method).value
        return np.array([rep[method].estimate for rep in self.replicates or [] if rep[method].error is None])


def _coverage(est, se, truth, level):
    ok = np.isfinite(se)
    if not ok.any() or not math.isfinite(truth):
        return math.nan
    lo, hi = wald_ci(est[ok], se[ok], level)
    return float(np.mean((lo <= truth) & (truth <= hi)))


def _nanmean(a):
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return float(a.mean()) if a.size else math.nan


def summarize(estimates, ses_model, ses_robust, truth, ci_level: float = 0.95,
              method: str = "proposed", names: Sequence[str] | None = None) -> list[SummaryRow]:
    """Per-parameter bias, SSE (sd, ddof 1), SEE, MSE and Wald coverage."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.shape[0] == 1 and np.ndim(estimates) == 1:
        est = est.T
    k = est.shape[1]
    sm = np.asarray(ses_model, dtype=float).reshape(est.shape)
    sr = np.asarray(ses_robust, dtype=float).reshape(est.shape)
    truth = np.broadcast_to(np.asarray(truth, dtype=float), (k,))
    names = names or tuple(f"theta{j}" for j in range(k))
    n = est.shape[0]
    rows = []
    for j in range(k):
        e = est[:, j]
        t = float(truth[j])
        err = e - t
        rows.append(SummaryRow(
            method=method,
            parameter=names[j],
            truth=t,
            n=n,
            bias=float(err.mean()) if n else math.nan,
            sse=float(e.std(ddof=1)) if n > 1 else math.nan,
            see_model=_nanmean(sm[:, j]),
            see_robust=_nanmean(sr[:, j]),
            mse=float(np.mean(err**2)) if n else math.nan,
            coverage_model=_coverage(e, sm[:, j], t, ci_level),
            coverage_robust=_coverage(e, sr[:, j], t, ci_level),
        ))
    return rows


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        raw = os.environ.get("MARGEX_THREADS", "0").strip() or "0"
        try:
            workers = int(raw)
        except ValueError:
            raise ArgumentError(f"MARGEX_THREADS must be an integer, got {raw!r}") from None
    if workers < 0:
        raise ArgumentError("worker count must be non-negative")
    return workers if workers > 0 else (os.cpu_count() or 1)


def run_study(spec: StudySpec, workers: int | None = None, keep_replicates: bool = False) -> MCSummary:
    workers = worker_count(workers)
    tasks = [(spec, r) for r in range(spec.n_reps)]
    if workers == 1 or spec.n_reps == 1:
        results = [_replicate_task(t) for t in tasks]
    else:
        chunk = max(1, spec.n_reps // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=chunk))

    truth = spec.truth()
    names = spec.param_names()
    rows: list[SummaryRow] = []
    failures = []
    n_failed = {}
    seconds = {}
    for method in spec.methods:
        key = method.value
        ok = [res[key] for res in results if res[key].error is None]
        bad = [(r, key, res[key].error) for r, res in enumerate(results) if res[key].error is not None]
        failures.extend(bad)
        n_failed[key] = len(bad)
        seconds[key] = float(np.mean([res[key].seconds for res in results]))
        if len(bad) > MAX_FAILURE_RATE * spec.n_reps:
            raise StudyError(
                f"{len(bad)} of {spec.n_reps} replicates failed for {key} (first: replicate {bad[0][0]}, {bad[0][2]})"
            )
        if not ok:
            continue
        rows.extend(summarize(
            np.array([o.estimate for o in ok]),
            np.array([o.se_model for o in ok]),
            np.array([o.se_robust for o in ok]),
            truth, spec.ci_level, key, names,
        ))
    return MCSummary(rows, n_failed, failures, seconds, results if keep_replicates else None)


SUMMARY_FIELDS = ("method", "parameter", "truth", "n", "n_failed", "bias", "sse", "see_model", "see_robust",
                  "mse", "coverage_model", "coverage_robust")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def summary_csv(summary: MCSummary) -> str:
    """CSV text of a summary; timings are left out so the bytes depend only on the seed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in summary.rows:
        w.writerow([_fmt(getattr(r, f)) if f != "n_failed" else summary.n_failed[r.method] for f in SUMMARY_FIELDS])
    return buf.getvalue()


def write_summary_csv(summary: MCSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(summary_csv(summary))
