"""Closed-form probability kernel of the exponential-frailty binary model.

Given a frailty ``a ~ Exp(1)`` the outcome satisfies
``pr(Y = 1 | x, a) = exp(-a exp(-x'beta))``; integrating the frailty out
gives a logistic marginal ``pr(Y = 1 | x) = expit(x'beta)``.  Correlated
frailties are built from two Gaussian vectors with correlation ``C`` and
have correlation ``C * C`` (elementwise), so a structure on the frailty
correlation maps to ``C`` by an elementwise square root.

All exponentials ``exp(-x'beta)`` are handled on the log scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from . import kernels
from .errors import ArgumentError, DomainError, ResourceError, StructureError

PATTERN_SIZE_CAP = 20
PSD_TOL = -1e-10


def inverse_logit(eta):
    """``e^eta / (1 + e^eta)``, stable for large ``|eta|``."""
    return expit(eta)


def _log1p_exp(t):
    return np.logaddexp(0.0, t)


def _log_q(eta_j, eta_k, rho_jk):
    """log((1 - rho) u_j u_k + u_j + u_k + 1) with u = exp(-eta)."""
    eta_j, eta_k, rho_jk = np.broadcast_arrays(
        np.asarray(eta_j, float), np.asarray(eta_k, float), np.asarray(rho_jk, float)
    )
    # fixed operand order so that swapping j and k is bit-for-bit symmetric
    lo, hi = np.minimum(eta_j, eta_k), np.maximum(eta_j, eta_k)
    with np.errstate(divide="ignore"):
        first = np.where(rho_jk < 1.0, np.log1p(-np.minimum(rho_jk, 1.0)), -np.inf) - (lo + hi)
    return logsumexp(np.stack([first, -lo, -hi, np.zeros_like(lo)]), axis=0)


# --------------------------------------------------------------------------
# observations and clusters


@dataclass(frozen=True, eq=False)
class Observation:
    covariates: np.ndarray
    outcome: int
    position: int = 0
    subject_label: int | None = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ArgumentError("covariates must be a finite vector")
        if self.outcome not in (0, 1):
            raise ArgumentError(f"outcome must be 0 or 1, got {self.outcome!r}")
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "outcome", int(self.outcome))
        object.__setattr__(self, "position", int(self.position))


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One independent cluster: ordered observations plus a label."""

    observations: tuple[Observation, ...]
    cluster_label: int = 0

    def __post_init__(self):
        obs = tuple(self.observations)
        if not obs:
            raise ArgumentError("a cluster needs at least one observation")
        p = {len(o.covariates) for o in obs}
        if len(p) != 1:
            raise ArgumentError("covariate length differs within cluster")
        labelled = {o.subject_label is not None for o in obs}
        if len(labelled) != 1:
            raise ArgumentError("subject labels must be given for all observations or none")
        keys = [(o.subject_label, o.position) for o in obs]
        if len(set(keys)) != len(keys):
            raise ArgumentError("positions must be unique within a subject (or cluster)")
        object.__setattr__(self, "observations", obs)

    @classmethod
    def from_arrays(cls, X, y, positions=None, subjects=None, cluster_label=0):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = len(X)
        positions = range(n) if positions is None else positions
        subjects = [None] * n if subjects is None else [int(s) for s in subjects]
        obs = tuple(
            Observation(X[j], int(y[j]), int(positions[j]), subjects[j]) for j in range(n)
        )
        return cls(obs, cluster_label)

    def __len__(self):
        return len(self.observations)

    @property
    def X(self) -> np.ndarray:
        return np.vstack([o.covariates for o in self.observations])

    @property
    def y(self) -> np.ndarray:
        return np.array([o.outcome for o in self.observations], dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return np.array([o.position for o in self.observations], dtype=np.int64)

    @property
    def subjects(self) -> np.ndarray | None:
        if self.observations[0].subject_label is None:
            return None
        return np.array([o.subject_label for o in self.observations], dtype=np.int64)


def pair_layout(positions, subjects=None):
    """Lag and same-subject flag for every (j < k) pair of one cluster."""
    positions = np.asarray(positions, dtype=np.int64)
    jj, kk = np.triu_indices(len(positions), k=1)
    lag = np.abs(positions[jj] - positions[kk])
    if subjects is None:
        same = np.ones(len(jj), dtype=bool)
    else:
        subjects = np.asarray(subjects)
        same = subjects[jj] == subjects[kk]
    return lag, same


# --------------------------------------------------------------------------
# correlation structures


class CorrelationKind(str, Enum):
    INDEPENDENCE = "indep"
    EXCHANGEABLE = "exch"
    AR1 = "ar1"
    NESTED_EXCH = "nested-exch"
    NESTED_AR1 = "nested-ar1"

    @property
    def n_params(self) -> int:
        return {"indep": 0, "exch": 1, "ar1": 1}.get(self.value, 2)

    @property
    def nested(self) -> bool:
        return self in (CorrelationKind.NESTED_EXCH, CorrelationKind.NESTED_AR1)

    @property
    def param_names(self) -> tuple[str, ...]:
        if self.nested:
            return ("rho2", "rho3")
        return ("rho",) if self.n_params else ()

    @classmethod
    def parse(cls, value) -> "CorrelationKind":
        if isinstance(value, cls):
            return value
        aliases = {
            "independence": "indep",
            "exchangeable": "exch",
            "ar(1)": "ar1",
            "nested": "nested-exch",
            "nestedexchexch": "nested-exch",
            "nestedexchar1": "nested-ar1",
        }
        key = str(value).strip().lower().replace("_", "-")
        key = aliases.get(key.replace("-", ""), aliases.get(key, key))
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ArgumentError(f"unknown correlation structure {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class CorrelationStructure:
    """Parametric family of frailty correlations ``rho_jk``.

    ``params`` is empty for independence, ``(rho,)`` for exchangeable and
    AR(1), and ``(rho2, rho3)`` for the nested kinds, where ``rho2`` is the
    correlation between subjects of one cluster and ``rho2 + rho3`` (or
    ``rho2 + rho3**lag``) the correlation within a subject.
    """

    kind: CorrelationKind
    params: tuple[float, ...] = field(default=())

    def __post_init__(self):
        kind = CorrelationKind.parse(self.kind)
        params = tuple(float(v) for v in np.atleast_1d(np.asarray(self.params, dtype=float)))
        if kind.n_params == 0:
            params = ()
        if len(params) != kind.n_params:
            raise ArgumentError(f"{kind.value} takes {kind.n_params} parameter(s), got {len(params)}")
        if not all(math.isfinite(v) for v in params):
            raise DomainError("correlation parameters must be finite")
        if kind.nested:
            r2, r3 = params
            if r2 < 0 or r3 < 0 or r2 + r3 >= 1:
                raise DomainError(f"nested structure needs rho2, rho3 >= 0 and rho2 + rho3 < 1, got {params}")
        elif params and not 0.0 <= params[0] < 1.0:
            raise DomainError(f"rho must lie in [0, 1), got {params[0]}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", params)

    @classmethod
    def default(cls, kind) -> "CorrelationStructure":
        kind = CorrelationKind.parse(kind)
        return cls(kind, (0.0,) * kind.n_params)

    @property
    def n_params(self) -> int:
        return self.kind.n_params

    @property
    def requires_subjects(self) -> bool:
        return self.kind.nested

    def with_params(self, params) -> "CorrelationStructure":
        return CorrelationStructure(self.kind, tuple(np.atleast_1d(params)))

    # vectorised pair maps -------------------------------------------------

    def pair_values(self, lag, same) -> np.ndarray:
        lag = np.asarray(lag)
        same = np.asarray(same, dtype=bool)
        k = self.kind
        if k is CorrelationKind.INDEPENDENCE:
            return np.zeros(lag.shape)
        if k is CorrelationKind.EXCHANGEABLE:
            return np.full(lag.shape, self.params[0])
        if k is CorrelationKind.AR1:
            return self.params[0] ** lag.astype(float)
        r2, r3 = self.params
        if k is CorrelationKind.NESTED_EXCH:
            return r2 + r3 * same
        return r2 + np.where(same, r3 ** lag.astype(float), 0.0)

    def pair_jacobian(self, lag, same) -> np.ndarray:
        """d rho_jk / d params, shape (P, q)."""
        lag = np.asarray(lag, dtype=float)
        same = np.asarray(same, dtype=bool)
        k = self.kind
        P = lag.shape[0]
        if k is CorrelationKind.INDEPENDENCE:
            return np.zeros((P, 0))
        if k is CorrelationKind.EXCHANGEABLE:
            return np.ones((P, 1))
        if k is CorrelationKind.AR1:
            return _power_derivative(self.params[0], lag)[:, None]
        out = np.empty((P, 2))
        out[:, 0] = 1.0
        if k is CorrelationKind.NESTED_EXCH:
            out[:, 1] = same
        else:
            out[:, 1] = np.where(same, _power_derivative(self.params[1], lag), 0.0)
        return out

    def pair_hessian(self, lag, same) -> np.ndarray | None:
        """Second derivatives of rho_jk, shape (P, q, q); None when linear."""
        k = self.kind
        if k in (CorrelationKind.INDEPENDENCE, CorrelationKind.EXCHANGEABLE, CorrelationKind.NESTED_EXCH):
            return None
        lag = np.asarray(lag, dtype=float)
        if k is CorrelationKind.AR1:
            return _power_second_derivative(self.params[0], lag)[:, None, None]
        same = np.asarray(same, dtype=bool)
        out = np.zeros((lag.shape[0], 2, 2))
        out[:, 1, 1] = np.where(same, _power_second_derivative(self.params[1], lag), 0.0)
        return out

    # single-pair and matrix views ----------------------------------------

    def rho_pair(self, obs_j: Observation, obs_k: Observation) -> float:
        if obs_j is obs_k:
            raise ArgumentError("rho_pair needs two distinct observations")
        if self.requires_subjects and (obs_j.subject_label is None or obs_k.subject_label is None):
            raise StructureError(f"{self.kind.value} needs subject labels")
        lag = abs(obs_j.position - obs_k.position)
        same = obs_j.subject_label == obs_k.subject_label
        if self.kind in (CorrelationKind.AR1, CorrelationKind.NESTED_AR1) and lag == 0 and same:
            raise StructureError("AR(1) pairs need distinct positions")
        return float(self.pair_values(np.array([lag]), np.array([same]))[0])

    def correlation_matrix(self, positions, subjects=None) -> np.ndarray:
        """Frailty correlation matrix of a cluster layout (unit diagonal)."""
        n = len(positions)
        lag, same = self._layout_pairs(positions, subjects)
        R = np.eye(n)
        jj, kk = np.triu_indices(n, k=1)
        vals = self.pair_values(lag, same)
        R[jj, kk] = vals
        R[kk, jj] = vals
        return R

    def _layout_pairs(self, positions, subjects):
        if self.requires_subjects and subjects is None:
            raise StructureError(f"{self.kind.value} needs subject labels")
        lag, same = pair_layout(positions, subjects if self.requires_subjects else None)
        if self.kind is CorrelationKind.AR1 and np.any(lag == 0):
            raise StructureError("AR(1) needs distinct positions within a cluster")
        if self.kind is CorrelationKind.NESTED_AR1 and np.any((lag == 0) & same):
            raise StructureError("nested AR(1) needs distinct positions within a subject")
        return lag, same

    def check_layout(self, positions, subjects=None) -> None:
        """Eigenvalue test on the elementwise square root of the correlation."""
        lag, same = self._layout_pairs(positions, subjects)
        _check_psd(self.kind, self.params, len(positions), tuple(lag.tolist()), tuple(same.tolist()))

    def check_dataset(self, dataset) -> None:
        """Run :meth:`check_layout` once per distinct cluster shape in a dataset."""
        if self.requires_subjects and dataset.subjects is None:
            raise StructureError(f"{self.kind.value} needs subject labels (three-level data)")
        pairs = dataset.pairs
        lag = pairs.lag
        same = pairs.same if self.requires_subjects else np.ones_like(pairs.same)
        if self.kind is CorrelationKind.AR1 and np.any(lag == 0):
            raise StructureError("AR(1) needs distinct positions within a cluster")
        if self.kind is CorrelationKind.NESTED_AR1 and np.any((lag == 0) & same):
            raise StructureError("nested AR(1) needs distinct positions within a subject")
        if self.kind is CorrelationKind.INDEPENDENCE:
            return
        for n, lag_t, same_t in dataset.layouts(self.requires_subjects):
            _check_psd(self.kind, self.params, n, lag_t, same_t)


def _power_derivative(r, lag):
    # d/dr r**lag; 0**0 taken as 1 so lag 1 keeps slope 1 at r = 0
    lag = np.asarray(lag, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lag * np.where(lag >= 1, float(r) ** np.maximum(lag - 1, 0), 0.0)
    return out


def _power_second_derivative(r, lag):
    lag = np.asarray(lag, dtype=float)
    return lag * (lag - 1) * np.where(lag >= 2, float(r) ** np.maximum(lag - 2, 0), 0.0)


@lru_cache(maxsize=4096)
def _check_psd(kind, params, n, lag, same):
    structure = CorrelationStructure(kind, params)
    R = np.eye(n)
    if n > 1:
        jj, kk = np.triu_indices(n, k=1)
        vals = structure.pair_values(np.array(lag), np.array(same))
        R[jj, kk] = vals
        R[kk, jj] = vals
    lam = np.linalg.eigvalsh(np.sqrt(R))
    if lam[0] < PSD_TOL:
        raise StructureError(
            f"{kind.value} with params {params} is not admissible for a cluster of size {n} "
            f"(lags {lag}, same-subject {same}): elementwise square root has eigenvalue {lam[0]:.3g}"
        )
    return float(lam[0])


@dataclass(frozen=True, eq=False)
class Theta:
    """Marginal coefficients plus the frailty correlation structure."""

    beta: np.ndarray
    rho: CorrelationStructure

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise DomainError("beta must be finite")
        object.__setattr__(self, "beta", beta)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, np.asarray(self.rho.params, dtype=float)])

    def replace(self, beta=None, rho=None) -> "Theta":
        return Theta(self.beta if beta is None else beta, self.rho if rho is None else rho)


# --------------------------------------------------------------------------
# probabilities


def marginal_prob(x, beta) -> float:
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.shape[-1]:
        raise ArgumentError(f"dimension mismatch: x has {x.shape[-1]}, beta has {beta.shape[-1]}")
    return inverse_logit(x @ beta)


def pairwise_prob(x_j, x_k, beta, rho_jk) -> float:
    """pr(Y_j = 1, Y_k = 1) for two observations with frailty correlation rho_jk."""
    if not 0.0 <= rho_jk <= 1.0:
        raise DomainError(f"rho_jk must lie in [0, 1], got {rho_jk}")
    eta_j = float(marginal_eta(x_j, beta))
    eta_k = float(marginal_eta(x_k, beta))
    return float(np.exp(-_log_q(eta_j, eta_k, rho_jk)))


def marginal_eta(x, beta):
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.shape[-1]:
        raise ArgumentError(f"dimension mismatch: x has {x.shape[-1]}, beta has {beta.shape[-1]}")
    return x @ beta


def pair_covariance(eta_j, eta_k, rho_jk):
    """cov(Y_j, Y_k) = rho u_j u_k / ((1 + u_j)(1 + u_k) Q); no cancellation."""
    eta_j = np.asarray(eta_j, float)
    eta_k = np.asarray(eta_k, float)
    rho_jk = np.asarray(rho_jk, float)
    log_w = -eta_j - eta_k - _log_q(eta_j, eta_k, rho_jk)
    return rho_jk * np.exp(log_w - _log1p_exp(-eta_j) - _log1p_exp(-eta_k))


def covariance_matrix(cluster: ClusterData, theta: Theta) -> np.ndarray:
    """Model covariance of a cluster's outcome vector."""
    X = cluster.X
    eta = marginal_eta(X, theta.beta)
    n = len(eta)
    lag, same = theta.rho._layout_pairs(cluster.positions, cluster.subjects)
    theta.rho.check_layout(cluster.positions, cluster.subjects)
    mu = inverse_logit(eta)
    V = np.diag(mu * inverse_logit(-eta))
    if n > 1:
        jj, kk = np.triu_indices(n, k=1)
        vals = pair_covariance(eta[jj], eta[kk], theta.rho.pair_values(lag, same))
        V[jj, kk] = vals
        V[kk, jj] = vals
    return V


def joint_prob_all_ones(X_S, beta, C_S) -> float:
    """pr(Y_j = 1 for all j in S) = det(I + C_S diag(exp(-x_j'beta)))^-1."""
    X_S = np.atleast_2d(np.asarray(X_S, dtype=float))
    C_S = np.atleast_2d(np.asarray(C_S, dtype=float))
    n = X_S.shape[0]
    if C_S.shape != (n, n):
        raise ArgumentError(f"C_S must be {n}x{n}")
    if not np.allclose(C_S, C_S.T, atol=1e-12) or not np.allclose(np.diag(C_S), 1.0, atol=1e-12):
        raise DomainError("C_S must be symmetric with unit diagonal")
    if np.linalg.eigvalsh(C_S)[0] < PSD_TOL:
        raise DomainError("C_S is not positive semidefinite")
    half = np.exp(-0.5 * marginal_eta(X_S, beta))
    M = np.eye(n) + half[:, None] * C_S * half[None, :]
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        raise DomainError("determinant is not positive")
    return float(np.exp(-logdet))


def pattern_prob(cluster: ClusterData, theta: Theta, cap: int = PATTERN_SIZE_CAP) -> float:
    """pr(Y = y | X) for the cluster's observed outcome vector.

    Cost is ``2**(number of zeros)`` survivor determinants, hence the cap.
    The value is a signed inclusion-exclusion sum and can sit a few ulps
    below zero for extremely unlikely patterns.
    """
    n = len(cluster)
    if n > cap:
        raise ResourceError(f"cluster of size {n} exceeds the pattern size cap {cap}")
    lag, same = theta.rho._layout_pairs(cluster.positions, cluster.subjects)
    theta.rho.check_layout(cluster.positions, cluster.subjects)
    eta = marginal_eta(cluster.X, theta.beta)
    offsets = np.array([0, n])
    return float(kernels.pattern_prob(eta, cluster.y, offsets, theta.rho.pair_values(lag, same))[0])


def all_patterns(n: int) -> np.ndarray:
    """Every binary outcome vector of length n, shape (2**n, n)."""
    return ((np.arange(2**n)[:, None] >> np.arange(n)[::-1]) & 1).astype(np.int64)


def pattern_table(cluster: ClusterData, theta: Theta, cap: int = PATTERN_SIZE_CAP) -> np.ndarray:
    """pattern_prob for all 2**n outcome vectors of the cluster's design."""
    n = len(cluster)
    if n > cap:
        raise ResourceError(f"cluster of size {n} exceeds the pattern size cap {cap}")
    lag, same = theta.rho._layout_pairs(cluster.positions, cluster.subjects)
    theta.rho.check_layout(cluster.positions, cluster.subjects)
    eta = marginal_eta(cluster.X, theta.beta)
    pats = all_patterns(n)
    k = len(pats)
    rho = np.tile(theta.rho.pair_values(lag, same), k)
    offsets = np.arange(k + 1) * n
    return kernels.pattern_prob(np.tile(eta, k), pats.reshape(-1), offsets, rho)


def clusters_from(observations: Sequence[Observation], label: int = 0) -> ClusterData:
    return ClusterData(tuple(observations), label)
