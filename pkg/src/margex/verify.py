"""Self-checks run by ``margex verify``: closed forms against independent oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .dataset import Dataset
from .estimation import composite_loglik, composite_score_rho, solve_beta
from .frailty import gaussian_scale_matrix
from .mle import full_loglik
from .model import (
    ClusterData,
    CorrelationKind,
    CorrelationStructure,
    Theta,
    joint_prob_all_ones,
    pairwise_prob,
    pattern_table,
)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def random_structure(kind: CorrelationKind, rng: np.random.Generator) -> CorrelationStructure:
    if kind.nested:
        r2, r3 = rng.dirichlet([1.0, 1.0, 1.0])[:2] * 0.98
        return CorrelationStructure(kind, (r2, r3))
    if kind.n_params:
        return CorrelationStructure(kind, (rng.uniform(0.0, 0.95),))
    return CorrelationStructure(kind)


def random_cluster(kind: CorrelationKind, n: int, p: int, rng: np.random.Generator, sd: float = 2.0) -> ClusterData:
    X = np.column_stack([np.ones(n), rng.normal(0.0, sd, (n, p - 1))])
    y = rng.integers(0, 2, n)
    subjects = np.sort(rng.integers(0, max(1, n // 2), n)) if kind.nested else None
    if subjects is None:
        positions = np.arange(n)
    else:
        positions = np.concatenate([np.arange(c) for c in np.unique(subjects, return_counts=True)[1]])
    return ClusterData.from_arrays(X, y, positions, subjects)


def _check_pairwise_identity(rng) -> Check:
    worst = 0.0
    for _ in range(200):
        xj, xk = np.append(1.0, rng.normal(0, 2)), np.append(1.0, rng.normal(0, 2))
        beta = rng.normal(0, 1, 2)
        rho = rng.uniform(0, 1)
        C = np.array([[1.0, np.sqrt(rho)], [np.sqrt(rho), 1.0]])
        a = pairwise_prob(xj, xk, beta, rho)
        b = joint_prob_all_ones(np.vstack([xj, xk]), beta, C)
        worst = max(worst, abs(a - b))
    return Check("pairwise probability = 2x2 determinant identity", worst < 1e-12, f"max abs diff {worst:.2e}")


def _check_normalization(rng) -> Check:
    worst = 0.0
    for kind in CorrelationKind:
        for _ in range(10):
            n = int(rng.integers(2, 7))
            cluster = random_cluster(kind, n, 2, rng)
            theta = Theta(rng.normal(0, 1, 2), random_structure(kind, rng))
            try:
                theta.rho.check_layout(cluster.positions, cluster.subjects)
            except Exception:
                continue
            worst = max(worst, abs(pattern_table(cluster, theta).sum() - 1.0))
    return Check("pattern probabilities sum to one", worst < 1e-10, f"max |sum - 1| {worst:.2e}")


def _check_score(rng) -> Check:
    worst = 0.0
    for kind in (k for k in CorrelationKind if k.n_params):
        for _ in range(5):
            clusters = [random_cluster(kind, int(rng.integers(2, 6)), 2, rng) for _ in range(8)]
            data = Dataset.from_clusters(clusters)
            theta = Theta(rng.normal(0, 1, 2), random_structure(kind, rng))
            g = composite_score_rho(data, theta)
            for k in range(kind.n_params):
                h = 1e-6
                up = np.array(theta.rho.params)
                dn = up.copy()
                up[k] += h
                dn[k] -= h
                fd = (composite_loglik(data, theta.replace(rho=theta.rho.with_params(up)))
                      - composite_loglik(data, theta.replace(rho=theta.rho.with_params(dn)))) / (2 * h)
                worst = max(worst, abs(fd - g[k]) / max(abs(g[k]), 1e-3))
    return Check("composite rho-score = finite differences", worst < 1e-5, f"max rel err {worst:.2e}")


def _check_backends(rng) -> Check:
    if len(kernels.BACKENDS) < 2:
        return Check("compiled and fallback kernels agree", True, "fallback only; nothing to compare")
    clusters = [random_cluster(CorrelationKind.EXCHANGEABLE, int(rng.integers(1, 7)), 3, rng) for _ in range(40)]
    data = Dataset.from_clusters(clusters)
    beta = rng.normal(0, 0.5, 3)
    rho = rng.uniform(0, 0.9, len(data.pairs))
    eta = data.X @ beta
    worst = 0.0
    a = [kernels.gee_accumulate(data.X, data.y, beta, data.offsets, rho, backend=b) for b in ("cython", "python")]
    worst = max(worst, max(float(np.max(np.abs(u - v))) for u, v in zip(*a)))
    a = [kernels.pair_terms(eta, data.y, data.pairs.i, data.pairs.j, rho, backend=b) for b in ("cython", "python")]
    worst = max(worst, max(float(np.max(np.abs(u - v))) for u, v in zip(*a)))
    a = [kernels.pattern_prob(eta, data.y, data.offsets, rho, backend=b) for b in ("cython", "python")]
    worst = max(worst, float(np.max(np.abs(a[0] - a[1]))))
    return Check("compiled and fallback kernels agree", worst < 1e-10, f"max abs diff {worst:.2e}")


def logistic_mle(X, y) -> np.ndarray:
    """Plain logistic regression by BFGS on the exact log-likelihood."""

    def nll(b):
        eta = X @ b
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta))

    def grad(b):
        return X.T @ (1.0 / (1.0 + np.exp(-(X @ b))) - y)

    return minimize(nll, np.zeros(X.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-12}).x


def _check_logistic(rng) -> Check:
    clusters = [random_cluster(CorrelationKind.INDEPENDENCE, int(rng.integers(1, 6)), 2, rng) for _ in range(150)]
    data = Dataset.from_clusters(clusters)
    ref = logistic_mle(data.X, data.y.astype(float))
    est = solve_beta(data, CorrelationStructure(CorrelationKind.INDEPENDENCE))
    diff = float(np.max(np.abs(ref - est)))
    return Check("independence fit = logistic MLE", diff < 1e-6, f"max abs diff {diff:.2e}")


def _check_pairs_full(rng) -> Check:
    clusters = [random_cluster(CorrelationKind.EXCHANGEABLE, 2, 2, rng) for _ in range(50)]
    data = Dataset.from_clusters(clusters)
    theta = Theta(rng.normal(0, 1, 2), CorrelationStructure(CorrelationKind.EXCHANGEABLE, (0.4,)))
    diff = abs(full_loglik(data, theta) - composite_loglik(data, theta) * data.n_clusters)
    return Check("size-two clusters: full = composite likelihood", diff < 1e-9, f"abs diff {diff:.2e}")


def _check_frailty_mc(rng) -> Check:
    structure = CorrelationStructure(CorrelationKind.EXCHANGEABLE, (0.5,))
    scale = gaussian_scale_matrix(structure, np.arange(2))
    n = 400_000
    g = rng.standard_normal((2, n, 2)) @ scale.factor.T
    z = 0.5 * (g[0] ** 2 + g[1] ** 2)
    f = np.exp(-z.sum(axis=1))
    est, se = f.mean(), f.std() / np.sqrt(n)
    exact = pairwise_prob(np.ones(1), np.ones(1), np.zeros(1), 0.5)
    ok = abs(est - exact) < 4 * se
    return Check("pairwise probability = frailty Monte Carlo", ok, f"{est:.5f} +/- {se:.5f} vs {exact:.5f}")


SUITES: dict[str, Callable] = {
    "pairwise": _check_pairwise_identity,
    "normalization": _check_normalization,
    "score": _check_score,
    "backends": _check_backends,
    "logistic": _check_logistic,
    "pairs-full": _check_pairs_full,
    "frailty-mc": _check_frailty_mc,
}


def run_checks(seed: int = 20240101) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for fn in SUITES.values():
        try:
            out.append(fn(rng))
        except Exception as exc:  # a crash is a failed check, not a crashed command
            out.append(Check(fn.__name__.strip("_").replace("_", " "), False, f"{type(exc).__name__}: {exc}"))
    return out
