"""Exact likelihood of the frailty model and its maximizer.

The probability of a cluster's outcome vector is an inclusion-exclusion sum
of survivor probabilities ``det(I + C^(1/2) diag(u) C^(1/2))^-1`` over the
subsets of its zero outcomes, so one cluster costs ``2**zeros``
determinants.  The maximizer works on an unconstrained scale (logit of the
scaled correlation, or a softmax for the nested pair) with central
difference gradients, then polishes with Newton steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from . import kernels
from .dataset import Dataset
from .errors import ConvergenceError, NumericalError, ResourceError
from .estimation import RHO_CAP, composite_loglik, fit as fit_proposed, pair_rho
from .model import PATTERN_SIZE_CAP, CorrelationKind, CorrelationStructure, Theta

MAX_GRAD_EVALS = 500
BOUNDARY_MARGIN = 1e-4
GRAD_TOL = 1e-6


@dataclass
class MLEResult:
    theta_hat: Theta
    loglik: float
    hessian_cov: np.ndarray
    converged: bool
    n_loglik_evals: int
    n_grad_evals: int = 0
    rho_boundary: bool = False
    grad_transformed: np.ndarray | None = None
    seconds: float = 0.0

    @property
    def beta(self) -> np.ndarray:
        return self.theta_hat.beta

    @property
    def rho(self) -> tuple[float, ...]:
        return self.theta_hat.rho.params

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.hessian_cov), 0.0, None))

    @property
    def beta_cov(self) -> np.ndarray:
        p = len(self.theta_hat.beta)
        return self.hessian_cov[:p, :p]


def full_loglik(dataset: Dataset, theta: Theta, cap: int = PATTERN_SIZE_CAP) -> float:
    """Sum over clusters of the log probability of the observed outcome vector."""
    if dataset.sizes.max() > cap:
        c = int(np.argmax(dataset.sizes > cap))
        raise ResourceError(f"cluster {c} has {dataset.sizes[c]} observations, above the size cap {cap}")
    theta.rho.check_dataset(dataset)
    eta = dataset.X @ theta.beta
    prob = kernels.pattern_prob(eta, dataset.y, dataset.offsets, pair_rho(dataset, theta.rho))
    bad = np.flatnonzero(~(prob > 0.0))
    if bad.size:
        c = int(bad[0])
        raise NumericalError(f"cluster {c}: pattern probability {prob[c]:.3g} is not positive", cluster=c)
    return float(np.log(prob).sum())


# --------------------------------------------------------------------------
# parameter transforms


def _to_free(kind: CorrelationKind, rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if kind.n_params == 0:
        return np.zeros(0)
    lo = BOUNDARY_MARGIN / 10
    if kind.nested:
        r = np.clip(rho, lo, None)
        rest = RHO_CAP - r.sum()
        if rest < lo:
            r = r * (RHO_CAP - lo) / r.sum()
            rest = lo
        return np.log(r / rest)
    return np.atleast_1d(logit(np.clip(rho[0], lo, RHO_CAP - lo) / RHO_CAP))


def _from_free(kind: CorrelationKind, t) -> tuple[float, ...]:
    t = np.asarray(t, dtype=float)
    if kind.n_params == 0:
        return ()
    if kind.nested:
        z = np.concatenate([t, [0.0]])
        z = np.exp(z - z.max())
        return tuple(float(v) for v in RHO_CAP * z[:2] / z.sum())
    return (float(RHO_CAP * expit(t[0])),)


def _on_boundary(kind: CorrelationKind, rho) -> bool:
    rho = np.asarray(rho, dtype=float)
    if rho.size == 0:
        return False
    level = rho.sum() if kind.nested else rho[0]
    return bool(np.any(rho < BOUNDARY_MARGIN) or level > RHO_CAP - BOUNDARY_MARGIN)


# --------------------------------------------------------------------------
# generic maximizer


def _central_grad(f, x, counter):
    g = np.empty_like(x)
    for k in range(len(x)):
        h = 6e-6 * max(abs(x[k]), 1.0)
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    counter[0] += 1
    return g


def _central_hessian(f, x, h_rel=1e-4):
    n = len(x)
    H = np.empty((n, n))
    h = h_rel * np.maximum(np.abs(x), 1.0)
    f0 = f(x)
    for a in range(n):
        ea = np.zeros(n)
        ea[a] = h[a]
        H[a, a] = (f(x + ea) - 2 * f0 + f(x - ea)) / h[a] ** 2
        for b in range(a):
            eb = np.zeros(n)
            eb[b] = h[b]
            H[a, b] = H[b, a] = (
                f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)
            ) / (4 * h[a] * h[b])
    return H


def _maximize(
    objective: Callable[[Theta], float],
    dataset: Dataset,
    kind: CorrelationKind,
    init: Theta,
    fix_rho: bool,
    max_grad_evals: int,
) -> MLEResult:
    start = time.perf_counter()
    p = len(init.beta)
    fixed = init.rho.params
    evals = [0]
    grads = [0]
    scale = 1.0 / dataset.n_clusters

    def unpack(x):
        rho = fixed if fix_rho else _from_free(kind, x[p:])
        return Theta(x[:p], CorrelationStructure(kind, rho))

    def negll(x):
        evals[0] += 1
        try:
            return -objective(unpack(x)) * scale
        except (NumericalError, ValueError):
            return np.inf

    def grad(x):
        if grads[0] >= max_grad_evals:
            raise _Budget()
        return _central_grad(negll, x, grads)

    x0 = np.concatenate([init.beta, np.zeros(0) if fix_rho else _to_free(kind, init.rho.params)])
    try:
        res = minimize(negll, x0, jac=grad, method="BFGS", options={"gtol": 1e-9, "maxiter": max_grad_evals})
        x = res.x
        # Newton polish on the coordinates that are not drifting to a bound
        for _ in range(8):
            g = grad(x)
            theta = unpack(x)
            free = np.ones(len(x), dtype=bool)
            if not fix_rho and _on_boundary(kind, theta.rho.params):
                free[p:] = False
            if np.max(np.abs(g[free])) / scale < GRAD_TOL:
                break
            idx = np.flatnonzero(free)
            H = _central_hessian(lambda z: negll(_embed(x, idx, z)), x[idx])
            try:
                step = np.linalg.solve(H, g[idx])
            except np.linalg.LinAlgError:
                break
            t = 1.0
            f0 = negll(x)
            while t > 1e-4:
                cand = x.copy()
                cand[idx] -= t * step
                if negll(cand) <= f0:
                    x = cand
                    break
                t *= 0.5
            else:
                break
        g = grad(x)
    except _Budget:
        raise ConvergenceError(
            f"likelihood maximization used {max_grad_evals} gradient evaluations without converging"
        ) from None

    theta = unpack(x)
    boundary = (not fix_rho) and _on_boundary(kind, theta.rho.params)
    free_g = g if not boundary else g[:p]
    converged = bool(np.max(np.abs(free_g)) / scale < 1e-5) if len(free_g) else True
    cov = _observed_cov(objective, theta, kind, fix_rho or boundary)
    return MLEResult(
        theta_hat=theta,
        loglik=objective(theta),
        hessian_cov=cov,
        converged=converged,
        n_loglik_evals=evals[0],
        n_grad_evals=grads[0],
        rho_boundary=boundary,
        grad_transformed=g / scale,
        seconds=time.perf_counter() - start,
    )


class _Budget(Exception):
    pass


def _embed(x, idx, z):
    out = x.copy()
    out[idx] = z
    return out


def _observed_cov(objective, theta: Theta, kind: CorrelationKind, beta_only: bool) -> np.ndarray:
    """Inverse observed information on the natural (beta, rho) scale.

    With rho fixed or on a bound only the beta block is estimated; rho
    rows and columns are NaN.
    """
    p = len(theta.beta)
    q = kind.n_params
    rho0 = np.asarray(theta.rho.params, dtype=float)
    n = p if beta_only else p + q

    def negll(v):
        rho = rho0 if beta_only else v[p:]
        try:
            return -objective(Theta(v[:p], CorrelationStructure(kind, tuple(rho))))
        except (NumericalError, ValueError):
            return np.inf

    v0 = np.concatenate([theta.beta, rho0])[:n]
    H = _central_hessian(negll, v0)
    if not beta_only:
        # keep the rho step inside the parameter space
        H = _central_hessian(negll, v0, h_rel=min(1e-4, 0.5 * float(np.min(rho0)) if q else 1e-4))
    out = np.full((p + q, p + q), np.nan)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return out
    out[:n, :n] = 0.5 * (cov + cov.T)
    return out


def fit_mle(
    dataset: Dataset,
    structure_kind,
    init: Theta | None = None,
    fix_rho: bool = False,
    max_grad_evals: int = MAX_GRAD_EVALS,
) -> MLEResult:
    """Maximize :func:`full_loglik`; ``init`` defaults to the four-step fit.

    ``fix_rho=True`` keeps the correlation at ``init.rho`` and fits beta only.
    """
    kind = CorrelationKind.parse(structure_kind)
    if dataset.sizes.max() > PATTERN_SIZE_CAP:
        raise ResourceError(f"largest cluster ({dataset.sizes.max()}) exceeds the size cap {PATTERN_SIZE_CAP}")
    if init is None:
        init = fit_proposed(dataset, kind).theta_hat
    if kind.n_params == 0:
        fix_rho = True
    return _maximize(lambda th: full_loglik(dataset, th), dataset, kind, init, fix_rho, max_grad_evals)


def fit_composite_ml(
    dataset: Dataset,
    structure_kind,
    init: Theta | None = None,
    max_grad_evals: int = MAX_GRAD_EVALS,
) -> MLEResult:
    """Joint maximizer of the pairwise composite likelihood over (beta, rho).

    For clusters of size two the composite and full likelihoods coincide,
    which makes this the cross-check for :func:`fit_mle`.
    """
    kind = CorrelationKind.parse(structure_kind)
    if init is None:
        init = fit_proposed(dataset, kind).theta_hat
    m = dataset.n_clusters
    return _maximize(
        lambda th: composite_loglik(dataset, th) * m, dataset, kind, init, kind.n_params == 0, max_grad_evals
    )
