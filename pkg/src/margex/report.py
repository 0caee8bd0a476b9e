"""Fit reports: odds ratios with Wald intervals, written as JSON or CSV."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .variance import wald_ci

VERSION = "0.1.0"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _floats(a) -> list:
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float).ravel()]


@dataclass
class Report:
    """``ci_model`` / ``ci_robust`` are intervals for the odds ratios exp(beta)."""

    covariates: list
    beta: list
    se_model: list
    se_robust: list
    rho: list
    converged: bool
    seed: int | None = None
    input_sha256: str | None = None
    structure: str = "exch"
    method: str = "proposed"
    mode: str = "four-step"
    ci_level: float = 0.95
    rho_names: list = field(default_factory=list)
    rho_boundary: bool = False
    version: str = VERSION
    odds_ratio: list = field(init=False)
    ci_model: list = field(init=False)
    ci_robust: list = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        self.odds_ratio = _floats(np.exp(beta))
        self.ci_model = self._ci(self.se_model)
        self.ci_robust = self._ci(self.se_robust)

    def _ci(self, se):
        out = []
        for b, s in zip(self.beta, se):
            if s is None or not math.isfinite(s):
                out.append([None, None])
            else:
                out.append(list(wald_ci(b, s, self.ci_level, exponentiate=True)))
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["or"] = d.pop("odds_ratio")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Report":
        keys = {f for f in cls.__dataclass_fields__ if cls.__dataclass_fields__[f].init}
        return cls(**{k: v for k, v in d.items() if k in keys})


def report_from_fit(result, dataset, structure, method="proposed", mode="four-step", ci_level=0.95,
                    seed=None, input_sha256=None) -> Report:
    from .mle import MLEResult

    if isinstance(result, MLEResult):
        p = len(result.beta)
        se_model = result.se[:p]
        se_robust = np.full(p, np.nan)
        boundary = result.rho_boundary
    else:
        se_model, se_robust = result.se_model, result.se_robust
        boundary = result.rho_boundary
    return Report(
        covariates=list(dataset.covariate_names),
        beta=_floats(result.beta),
        se_model=_floats(se_model),
        se_robust=_floats(se_robust),
        rho=_floats(result.rho),
        converged=bool(result.converged),
        seed=seed,
        input_sha256=input_sha256,
        structure=structure,
        method=method,
        mode=mode,
        ci_level=ci_level,
        rho_names=list(result.theta_hat.rho.kind.param_names),
        rho_boundary=bool(boundary),
    )


def write_report(report: Report, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "json":
        path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    # robust intervals when available, model-based otherwise
    use_robust = any(s is not None for s in report.se_robust)
    ci = report.ci_robust if use_robust else report.ci_model
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "coefficient", "or", "ci_low", "ci_high"])
        for name, b, o, (lo, hi) in zip(report.covariates, report.beta, report.odds_ratio, ci):
            w.writerow([name, repr(b), repr(o), "" if lo is None else repr(lo), "" if hi is None else repr(hi)])


def read_report(path) -> Report:
    return Report.from_json(json.loads(Path(path).read_text()))
