"""Coupled estimating equations for the marginal coefficients and the frailty correlation.

``beta`` solves the weighted score ``sum D' V^-1 (y - mu) = 0`` with ``V``
the model covariance of each cluster; ``rho`` maximizes the pairwise
composite log-likelihood.  :func:`fit` runs either the four-step sequence
(beta at rho_init, rho, beta, rho) or full alternation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import null_space

from . import kernels
from .dataset import Dataset
from .errors import ArgumentError, ConvergenceError, DomainError, SeparationError
from .model import CorrelationKind, CorrelationStructure, Theta

RHO_CAP = 1.0 - 1e-6
SEPARATION_NORM = 1e3
# |x'beta| beyond this means fitted probabilities within ~1e-13 of 0 or 1,
# where a vanishing score says nothing about a finite maximizer
SATURATION_ETA = 30.0


class FitMode(str, Enum):
    FOUR_STEP = "four-step"
    ALTERNATE = "alternate"


@dataclass(frozen=True)
class SolverConfig:
    beta_tol: float = 1e-8
    rho_tol: float = 1e-8
    max_iter: int = 50
    max_outer: int = 25
    outer_tol: float = 1e-8
    rho_init: tuple[float, ...] | None = None
    mode: FitMode = FitMode.FOUR_STEP
    max_halvings: int = 10
    rho_stall_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mode", FitMode(self.mode))
        if min(self.beta_tol, self.rho_tol, self.outer_tol) <= 0:
            raise ArgumentError("tolerances must be positive")
        if min(self.max_iter, self.max_outer) < 1:
            raise ArgumentError("iteration limits must be at least 1")
        if self.rho_init is not None:
            object.__setattr__(self, "rho_init", tuple(float(r) for r in np.atleast_1d(self.rho_init)))


@dataclass
class RhoSolution:
    params: tuple[float, ...]
    iterations: int
    score: np.ndarray
    at_lower: tuple[bool, ...] = ()
    at_upper: bool = False

    @property
    def boundary(self) -> bool:
        return any(self.at_lower) or self.at_upper


@dataclass
class BetaSolution:
    beta: np.ndarray
    iterations: int
    score: np.ndarray
    trace: list = field(default_factory=list)


@dataclass
class FitResult:
    theta_hat: Theta
    beta_cov_model: np.ndarray
    beta_cov_robust: np.ndarray
    composite_loglik: float
    iterations: dict
    converged: bool
    step_trace: list
    mode: FitMode = FitMode.FOUR_STEP
    rho_boundary: bool = False
    seconds: float = 0.0

    @property
    def beta(self) -> np.ndarray:
        return self.theta_hat.beta

    @property
    def rho(self) -> tuple[float, ...]:
        return self.theta_hat.rho.params

    @property
    def se_model(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov_model), 0.0, None))

    @property
    def se_robust(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov_robust), 0.0, None))


# --------------------------------------------------------------------------
# pair bookkeeping


def _pair_arrays(dataset: Dataset, structure: CorrelationStructure):
    pairs = dataset.pairs
    same = pairs.same if structure.requires_subjects else np.ones(len(pairs), dtype=bool)
    return pairs, pairs.lag, same


def pair_rho(dataset: Dataset, structure: CorrelationStructure) -> np.ndarray:
    """rho_jk for every within-cluster pair, in kernel order."""
    if structure.requires_subjects and dataset.subjects is None:
        from .errors import StructureError

        raise StructureError(f"{structure.kind.value} needs subject labels (three-level data)")
    _, lag, same = _pair_arrays(dataset, structure)
    return structure.pair_values(lag, same)


# --------------------------------------------------------------------------
# EE1


def gee_terms(dataset: Dataset, theta: Theta):
    """Unscaled sums ``(sum U_i, sum D'V^-1 D, per-cluster U_i)``."""
    beta = np.asarray(theta.beta, dtype=float)
    if beta.shape != (dataset.n_covariates,):
        raise ArgumentError(f"beta has length {beta.size}, data have {dataset.n_covariates} covariates")
    return kernels.gee_accumulate(dataset.X, dataset.y, beta, dataset.offsets, pair_rho(dataset, theta.rho))


def gee_score(dataset: Dataset, theta: Theta):
    """``(m^-1 sum D'V^-1 S, m^-1 sum D'V^-1 D)``."""
    score, info, _ = gee_terms(dataset, theta)
    m = dataset.n_clusters
    return score / m, info / m


def solve_beta(
    dataset: Dataset,
    structure: CorrelationStructure,
    beta_init=None,
    config: SolverConfig | None = None,
    full_output: bool = False,
):
    """Fisher scoring for EE1 at a fixed correlation structure."""
    config = config or SolverConfig()
    p = dataset.n_covariates
    beta = np.zeros(p) if beta_init is None else np.array(beta_init, dtype=float)
    if beta.shape != (p,) or not np.all(np.isfinite(beta)):
        raise ArgumentError(f"beta_init must be a finite vector of length {p}")
    m = dataset.n_clusters
    pr = pair_rho(dataset, structure)

    def evaluate(b):
        s, info, _ = kernels.gee_accumulate(dataset.X, dataset.y, b, dataset.offsets, pr)
        return s / m, info / m

    score, info = evaluate(beta)
    norm = np.max(np.abs(score))
    trace = [(beta.copy(), norm)]
    for it in range(config.max_iter + 1):
        if norm < config.beta_tol:
            if np.max(np.abs(dataset.X @ beta)) > SATURATION_ETA:
                raise SeparationError(
                    "fitted probabilities saturate at 0 or 1; the outcomes look separated", trace
                )
            sol = BetaSolution(beta, it, score, trace)
            return sol if full_output else beta
        if it == config.max_iter:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        best = None
        t = 1.0
        for _ in range(config.max_halvings + 1):
            cand = beta + t * step
            s_c, i_c = evaluate(cand)
            n_c = np.max(np.abs(s_c))
            if best is None or n_c < best[2]:
                best = (cand, s_c, n_c, i_c)
            if n_c < norm:
                break
            t *= 0.5
        beta, score, norm, info = best
        trace.append((beta.copy(), norm))
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise SeparationError(
                f"coefficient norm exceeded {SEPARATION_NORM:g}; the outcomes look separated", trace
            )
    raise ConvergenceError(
        f"beta solver did not reach score norm {config.beta_tol:g} in {config.max_iter} iterations "
        f"(last {norm:.3g})",
        trace,
    )


# --------------------------------------------------------------------------
# EE2


def _pair_eval(dataset: Dataset, theta: Theta, order: int):
    pairs, lag, same = _pair_arrays(dataset, theta.rho)
    eta = dataset.X @ theta.beta
    rho = theta.rho.pair_values(lag, same)
    ll, d1, d2 = kernels.pair_terms(eta, dataset.y.astype(float), pairs.i, pairs.j, rho, order)
    return ll, d1, d2, lag, same


def composite_loglik(dataset: Dataset, theta: Theta) -> float:
    """Mean over clusters of the summed pairwise four-cell log-likelihoods."""
    ll, *_ = _pair_eval(dataset, theta, 0)
    if not np.all(np.isfinite(ll)):
        bad = int(dataset.pairs.cluster[np.flatnonzero(~np.isfinite(ll))[0]])
        raise DomainError(f"cluster {bad}: a pair cell probability is not positive at this theta")
    return float(ll.sum() / dataset.n_clusters)


def composite_score_rho(dataset: Dataset, theta: Theta) -> np.ndarray:
    """Analytic gradient of :func:`composite_loglik` in the structure parameters."""
    ll, d1, _, lag, same = _pair_eval(dataset, theta, 1)
    if not np.all(np.isfinite(ll)):
        raise DomainError("a pair cell probability is not positive at this theta")
    jac = theta.rho.pair_jacobian(lag, same)
    return (d1 @ jac) / dataset.n_clusters


def _rho_derivatives(dataset: Dataset, theta: Theta):
    ll, d1, d2, lag, same = _pair_eval(dataset, theta, 2)
    m = dataset.n_clusters
    if not np.all(np.isfinite(ll)):
        return -np.inf, None, None
    jac = theta.rho.pair_jacobian(lag, same)
    grad = (d1 @ jac) / m
    hess = (jac.T * d2) @ jac
    second = theta.rho.pair_hessian(lag, same)
    if second is not None:
        hess = hess + np.einsum("p,pab->ab", d1, second)
    return ll.sum() / m, grad, hess / m


def _at_cap(rho, kind: CorrelationKind) -> bool:
    return bool((np.sum(rho) if kind.nested else rho[0]) >= RHO_CAP - 1e-12)


def _project(rho, kind: CorrelationKind) -> np.ndarray:
    """Euclidean projection onto [0, cap] (scalar) or {rho >= 0, sum <= cap} (nested)."""
    r = np.clip(rho, 0.0, None)
    if not kind.nested:
        return np.minimum(r, RHO_CAP)
    if r.sum() <= RHO_CAP:
        return r
    # projection onto the capped simplex
    u = np.sort(rho)[::-1]
    css = np.cumsum(u) - RHO_CAP
    k = np.flatnonzero(u - css / np.arange(1, len(u) + 1) > 0)[-1]
    return np.clip(rho - css[k] / (k + 1), 0.0, None)


def _newton_direction(rho, g, H, kind: CorrelationKind) -> np.ndarray:
    """Newton ascent step with bound-active coordinates held fixed.

    Where the objective is not concave in the free subspace the step is the
    projected gradient scaled to unit sup-norm; the line search then cuts it.
    """
    q = len(rho)
    free = np.ones(q, dtype=bool)
    # the cap binds only while the gradient pushes through it
    at_cap = _at_cap(rho, kind) and g.sum() > 0
    step = np.zeros(q)
    for _ in range(q + 1):
        step[:] = 0.0
        idx = np.flatnonzero(free)
        if idx.size == 0:
            break
        if at_cap and (not kind.nested or idx.size == 1):
            break
        if at_cap:
            Z = null_space(np.ones((1, idx.size)))
        else:
            Z = np.eye(idx.size)
        Hr = Z.T @ H[np.ix_(idx, idx)] @ Z
        gr = Z.T @ g[idx]
        if np.linalg.eigvalsh(Hr)[-1] < 0:
            dr = -np.linalg.solve(Hr, gr)
        else:
            dr = gr / max(np.max(np.abs(gr)), 1e-300)
        step[idx] = Z @ dr
        blocked = free & (rho <= 0.0) & (step < 0.0)
        if not blocked.any():
            break
        free &= ~blocked
    return step


def solve_rho(
    dataset: Dataset,
    beta_fixed,
    structure_kind,
    config: SolverConfig | None = None,
    rho_start=None,
    full_output: bool = False,
):
    """Maximize the composite log-likelihood over the structure parameters.

    Projected Newton with an active set for the bounds ``rho >= 0`` and
    ``rho (or rho2 + rho3) <= 1 - 1e-6``, and a backtracking line search on
    the objective.  Solutions on a bound carry a boundary flag.
    """
    config = config or SolverConfig()
    kind = CorrelationKind.parse(structure_kind)
    q = kind.n_params
    beta = np.asarray(beta_fixed, dtype=float)
    if q == 0:
        sol = RhoSolution((), 0, np.zeros(0))
        return sol if full_output else ()
    if len(dataset.pairs) == 0:
        raise ArgumentError("estimating rho needs at least one within-cluster pair")
    if rho_start is None:
        rho_start = config.rho_init if config.rho_init is not None else (0.0,) * q
    rho = np.clip(np.array(rho_start, dtype=float), 0.0, None)
    if kind.nested and rho.sum() > RHO_CAP:
        rho *= RHO_CAP / rho.sum()
    elif not kind.nested:
        rho = np.minimum(rho, RHO_CAP)

    def at(r):
        return Theta(beta, CorrelationStructure(kind, tuple(r)))

    f, g, H = _rho_derivatives(dataset, at(rho))
    for it in range(config.max_iter + 1):
        # projected-gradient optimality measure
        measure = np.max(np.abs(_project(rho + g, kind) - rho))
        if measure < config.rho_tol:
            sol = RhoSolution(
                tuple(float(r) for r in rho), it, g, tuple(bool(v) for v in rho <= 0.0), bool(_at_cap(rho, kind))
            )
            return sol if full_output else sol.params
        if it == config.max_iter:
            break
        moved = False
        for direction in (_newton_direction(rho, g, H, kind), g):
            t = 1.0
            for _ in range(60):
                cand = _project(rho + t * direction, kind)
                if np.array_equal(cand, rho):
                    break
                f_c, g_c, H_c = _rho_derivatives(dataset, at(cand))
                if f_c > f:
                    moved = True
                    break
                t *= 0.5
            if moved:
                break
        if not moved:
            # no representable ascent left: accept if the score is at its noise floor
            if measure < config.rho_stall_tol:
                sol = RhoSolution(tuple(float(r) for r in rho), it, g, tuple(bool(v) for v in rho <= 0.0),
                                  bool(_at_cap(rho, kind)))
                return sol if full_output else sol.params
            break
        rho, f, g, H = cand, f_c, g_c, H_c
    raise ConvergenceError(
        f"rho solver stalled at {tuple(rho)} with score {tuple(g)}", [(tuple(rho), tuple(g))]
    )


# --------------------------------------------------------------------------
# orchestration


def fit(dataset: Dataset, structure_kind, config: SolverConfig | None = None) -> FitResult:
    from .variance import beta_covariances

    config = config or SolverConfig()
    kind = CorrelationKind.parse(structure_kind)
    if dataset.n_clusters < 1:
        raise ArgumentError("empty dataset")
    start = time.perf_counter()
    rho1 = config.rho_init if config.rho_init is not None else (0.0,) * kind.n_params
    structure1 = CorrelationStructure(kind, rho1)
    structure1.check_dataset(dataset)
    iters = {}

    b1 = solve_beta(dataset, structure1, None, config, full_output=True)
    iters["beta1"] = b1.iterations
    r2 = solve_rho(dataset, b1.beta, kind, config, rho_start=rho1, full_output=True)
    iters["rho2"] = r2.iterations
    s2 = CorrelationStructure(kind, r2.params)
    s2.check_dataset(dataset)
    b2 = solve_beta(dataset, s2, b1.beta, config, full_output=True)
    iters["beta2"] = b2.iterations
    r3 = solve_rho(dataset, b2.beta, kind, config, rho_start=r2.params, full_output=True)
    iters["rho3"] = r3.iterations
    trace = [(b1.beta.copy(), r2.params, b2.beta.copy(), r3.params)]
    beta, rho_sol = b2.beta, r3

    if config.mode is FitMode.ALTERNATE:
        prev_beta, prev_rho = b2.beta, np.array(r2.params)
        outer = 1
        while True:
            delta = max(
                float(np.max(np.abs(beta - prev_beta))),
                float(np.max(np.abs(np.array(rho_sol.params) - prev_rho), initial=0.0)),
            )
            if delta < config.outer_tol:
                break
            if outer >= config.max_outer:
                raise ConvergenceError(
                    f"alternation did not settle within {config.max_outer} rounds (last change {delta:.3g})", trace
                )
            s = CorrelationStructure(kind, rho_sol.params)
            s.check_dataset(dataset)
            prev_beta, prev_rho = beta, np.array(rho_sol.params)
            beta = solve_beta(dataset, s, beta, config)
            rho_sol = solve_rho(dataset, beta, kind, config, rho_start=rho_sol.params, full_output=True)
            trace.append((prev_beta.copy(), tuple(prev_rho), beta.copy(), rho_sol.params))
            outer += 1
        iters["outer"] = outer

    final = CorrelationStructure(kind, rho_sol.params)
    final.check_dataset(dataset)
    theta = Theta(beta, final)
    cov_model, cov_robust = beta_covariances(dataset, theta)
    return FitResult(
        theta_hat=theta,
        beta_cov_model=cov_model,
        beta_cov_robust=cov_robust,
        composite_loglik=composite_loglik(dataset, theta) if len(dataset.pairs) else 0.0,
        iterations=iters,
        converged=True,
        step_trace=trace,
        mode=config.mode,
        rho_boundary=rho_sol.boundary,
        seconds=time.perf_counter() - start,
    )
