"""Model-based and sandwich covariances of the fitted parameters."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .dataset import Dataset
from .errors import ArgumentError, BoundaryError, NumericalError, UnreliableVarianceWarning
from .estimation import RHO_CAP, _pair_arrays, composite_score_rho, gee_terms
from .model import Theta
from . import kernels

FD_REL_STEP = 1e-5


@dataclass
class CovarianceReport:
    beta_cov_model: np.ndarray
    beta_cov_robust: np.ndarray
    joint_cov: np.ndarray | None
    ci_level: float = 0.95

    @property
    def se_model(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov_model), 0.0, None))

    @property
    def se_robust(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov_robust), 0.0, None))

    @property
    def se_joint(self) -> np.ndarray | None:
        if self.joint_cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.joint_cov), 0.0, None))


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _inv(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e14:
        raise NumericalError(f"{what} is singular")
    return np.linalg.inv(a)


def _warn_small(m: int, p: int):
    if m < p + 1:
        warnings.warn(
            f"sandwich meat from {m} cluster(s) for {p} parameters is rank-deficient; robust SEs are unreliable",
            UnreliableVarianceWarning,
            stacklevel=3,
        )


def beta_covariances(dataset: Dataset, theta: Theta):
    """Per-fit (already divided by m) model-based and robust covariances of beta-hat."""
    _, info, U = gee_terms(dataset, theta)
    bread = _inv(info, "information matrix sum D'V^-1 D")
    _warn_small(dataset.n_clusters, dataset.n_covariates)
    return _sym(bread), _sym(bread @ (U.T @ U) @ bread)


def model_based_cov(dataset: Dataset, theta_hat: Theta) -> np.ndarray:
    """``m (sum D'V^-1 D)^-1``; divide by m for the covariance of beta-hat."""
    _, info, _ = gee_terms(dataset, theta_hat)
    return _sym(dataset.n_clusters * _inv(info, "information matrix sum D'V^-1 D"))


def robust_cov(dataset: Dataset, theta_hat: Theta) -> np.ndarray:
    """``m A^-1 (sum U_i U_i') A^-1`` with ``A = sum D'V^-1 D``; divide by m per fit."""
    _, info, U = gee_terms(dataset, theta_hat)
    bread = _inv(info, "information matrix sum D'V^-1 D")
    _warn_small(dataset.n_clusters, dataset.n_covariates)
    return _sym(dataset.n_clusters * bread @ (U.T @ U) @ bread)


def cluster_rho_scores(dataset: Dataset, theta: Theta) -> np.ndarray:
    """Per-cluster composite score in rho, shape (m, q)."""
    pairs, lag, same = _pair_arrays(dataset, theta.rho)
    eta = dataset.X @ theta.beta
    rho = theta.rho.pair_values(lag, same)
    _, d1, _ = kernels.pair_terms(eta, dataset.y.astype(float), pairs.i, pairs.j, rho, 1)
    contrib = d1[:, None] * theta.rho.pair_jacobian(lag, same)
    out = np.zeros((dataset.n_clusters, contrib.shape[1]))
    np.add.at(out, pairs.cluster, contrib)
    return out


def joint_sandwich(dataset: Dataset, theta_hat: Theta, rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Per-fit covariance ``B^-1 C B^-T / m`` of (beta-hat, rho-hat).

    ``B`` is block lower-triangular: its beta block is the model information
    and its rho rows are central differences of the composite rho-score.
    """
    structure = theta_hat.rho
    params = np.asarray(structure.params, dtype=float)
    q = len(params)
    if q == 0:
        return robust_cov(dataset, theta_hat) / dataset.n_clusters
    level = params.sum() if structure.kind.nested else params[0]
    if np.any(params <= 0.0) or level >= RHO_CAP:
        raise BoundaryError(f"rho-hat {tuple(params)} is on the boundary; the joint sandwich does not apply")
    m = dataset.n_clusters
    p = dataset.n_covariates
    beta = theta_hat.beta
    _, info, U = gee_terms(dataset, theta_hat)
    S = cluster_rho_scores(dataset, theta_hat)

    B = np.zeros((p + q, p + q))
    B[:p, :p] = info / m
    theta_vec = np.concatenate([beta, params])
    for k in range(p + q):
        h = rel_step * max(abs(theta_vec[k]), 1.0) if k < p else rel_step * max(abs(theta_vec[k]), 1e-2)
        if k >= p:
            h = min(h, 0.5 * theta_vec[k], 0.5 * (RHO_CAP - level))
        cols = []
        for sgn in (1.0, -1.0):
            v = theta_vec.copy()
            v[k] += sgn * h
            th = Theta(v[:p], structure.with_params(v[p:]))
            cols.append(composite_score_rho(dataset, th))
        B[p:, k] = -(cols[0] - cols[1]) / (2 * h)

    psi = np.hstack([U, S])
    C = psi.T @ psi / m
    Binv = _inv(B, "joint sensitivity matrix B")
    _warn_small(m, p + q)
    return _sym(Binv @ C @ Binv.T / m)


def covariance_report(dataset: Dataset, theta_hat: Theta, ci_level: float = 0.95, joint: bool = False):
    model, robust = beta_covariances(dataset, theta_hat)
    jc = None
    if joint:
        try:
            jc = joint_sandwich(dataset, theta_hat)
        except BoundaryError:
            jc = None
    return CovarianceReport(model, robust, jc, ci_level)


def normal_quantile(prob):
    return ndtri(prob)


def wald_ci(estimate, se, level: float = 0.95, exponentiate: bool = False):
    """``estimate -/+ z se``; with ``exponentiate`` the endpoints go through exp."""
    if not 0.0 < level < 1.0:
        raise ArgumentError(f"level must lie in (0, 1), got {level}")
    se = np.asarray(se, dtype=float)
    if np.any(se < 0):
        raise ArgumentError("standard errors must be non-negative")
    est = np.asarray(estimate, dtype=float)
    z = ndtri(0.5 * (1.0 + level))
    lo, hi = est - z * se, est + z * se
    if exponentiate:
        lo, hi = np.exp(lo), np.exp(hi)
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi
