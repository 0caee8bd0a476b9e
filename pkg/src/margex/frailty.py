"""Correlated standard-exponential frailties and synthetic clustered data.

A frailty vector is ``Z = (W1**2 + W2**2) / 2`` with ``W1, W2`` independent
``N(0, C)``; each ``Z_k`` is Exp(1) and ``cor(Z) = C * C``.  Every cluster
draws from its own counter-based substream keyed by (seed, cluster index),
so a dataset does not depend on how generation is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .errors import ArgumentError, StructureError
from .model import CorrelationKind, CorrelationStructure, PSD_TOL

REPAIR_WINDOW = 1e-8
REPAIR_JITTER = 1e-8


@dataclass(frozen=True)
class Categorical:
    values: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        values = tuple(int(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        if len(values) != len(probs) or not values:
            raise ArgumentError("values and probs must be non-empty and of equal length")
        if min(values) < 1:
            raise ArgumentError("sizes must be positive")
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ArgumentError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, values: Sequence[int]) -> "Categorical":
        return cls(tuple(values), tuple([1.0 / len(values)] * len(values)))

    def draw(self, rng: np.random.Generator) -> int:
        if len(self.values) == 1:
            return self.values[0]
        return self.values[int(np.searchsorted(np.cumsum(self.probs), rng.random(), side="right"))]


@dataclass(frozen=True)
class SizeLaw:
    """Cluster size law; ``obs_per_subject`` set means three-level clusters."""

    cluster_size: Categorical
    obs_per_subject: Categorical | None = None

    @property
    def three_level(self) -> bool:
        return self.obs_per_subject is not None

    def draw_layout(self, rng: np.random.Generator):
        """(positions, subjects) of one cluster; subjects is None for two-level."""
        n = self.cluster_size.draw(rng)
        if not self.three_level:
            return np.arange(n), None
        counts = [self.obs_per_subject.draw(rng) for _ in range(n)]
        subjects = np.repeat(np.arange(n), counts)
        positions = np.concatenate([np.arange(c) for c in counts])
        return positions, subjects


class DGPKind(str, Enum):
    FRAILTY = "frailty"
    LATENT_LOGISTIC = "latent-logistic"


@dataclass(frozen=True)
class DGPConfig:
    kind: DGPKind
    beta_true: tuple[float, ...]
    structure_true: CorrelationStructure | None
    cluster_count: int
    size_law: SizeLaw
    covariate_sd: float = 2.0
    seed: int = 0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", DGPKind(self.kind))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if self.cluster_count < 1:
            raise ArgumentError("cluster_count must be at least 1")
        if not self.covariate_sd > 0:
            raise ArgumentError("covariate_sd must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ArgumentError("seed must be a 64-bit unsigned integer")
        if self.kind is DGPKind.FRAILTY:
            if self.structure_true is None:
                raise ArgumentError("the frailty DGP needs a correlation structure")
            if self.structure_true.requires_subjects and not self.size_law.three_level:
                raise StructureError(f"{self.structure_true.kind.value} needs a three-level size law")

    def with_seed(self, seed: int) -> "DGPConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class GaussianScale:
    """Gaussian correlation ``C`` (elementwise root of the frailty correlation) and its factor."""

    matrix: np.ndarray
    factor: np.ndarray
    repaired: bool = False


def gaussian_scale_matrix(structure: CorrelationStructure, positions, subjects=None) -> GaussianScale:
    R = structure.correlation_matrix(positions, subjects)
    C = np.sqrt(R)
    lam = np.linalg.eigvalsh(C)[0]
    if lam < PSD_TOL:
        raise StructureError(
            f"{structure.kind.value}{structure.params} gives a non-PSD Gaussian correlation for layout "
            f"positions={list(np.asarray(positions))}, subjects="
            f"{None if subjects is None else list(np.asarray(subjects))} (min eigenvalue {lam:.3g})"
        )
    repaired = False
    if lam < REPAIR_WINDOW:
        C = C + REPAIR_JITTER * np.eye(len(C))
        d = np.sqrt(np.diag(C))
        C = C / d[:, None] / d[None, :]
        repaired = True
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        # rank-deficient but PSD (e.g. rho = 1 in a kernel check): eigen factor
        w, v = np.linalg.eigh(C)
        L = v * np.sqrt(np.clip(w, 0.0, None))
        repaired = True
    return GaussianScale(C, L, repaired)


def draw_frailties(factor, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Exp(1) frailties with correlation ``C * C`` where ``C = factor @ factor.T``.

    Returns shape ``(n,)``, or ``(size, n)`` when ``size`` is given.
    """
    L = factor.factor if isinstance(factor, GaussianScale) else np.asarray(factor, dtype=float)
    n = L.shape[0]
    k = 1 if size is None else int(size)
    g = rng.standard_normal((2, k, n)) @ L.T
    z = 0.5 * (g[0] ** 2 + g[1] ** 2)
    return z[0] if size is None else z


def cluster_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def _draw_cluster(config: DGPConfig, index: int, scale_cache: dict):
    rng = cluster_rng(config.seed, index)
    positions, subjects = config.size_law.draw_layout(rng)
    n = len(positions)
    beta = np.asarray(config.beta_true)
    x = rng.standard_normal((n, len(beta) - 1)) * config.covariate_sd
    X = np.column_stack([np.ones(n), x])
    eta = X @ beta
    if config.kind is DGPKind.FRAILTY:
        key = (n, tuple(positions.tolist()), None if subjects is None else tuple(subjects.tolist()))
        scale = scale_cache.get(key)
        if scale is None:
            scale = scale_cache[key] = gaussian_scale_matrix(config.structure_true, positions, subjects)
        a = draw_frailties(scale, rng)
        # pr(Y = 1 | a) = exp(-a exp(-eta)); compare a uniform on the log scale
        y = (np.log(rng.random(n)) < -a * np.exp(-eta)).astype(np.int64)
    else:
        u = rng.random()
        A = np.log(u) - np.log1p(-u)
        y = (eta + A > 0).astype(np.int64)
    return X, y, positions, subjects


def simulate_dataset(config: DGPConfig) -> Dataset:
    cache: dict = {}
    parts = [_draw_cluster(config, i, cache) for i in range(config.cluster_count)]
    sizes = [len(p[1]) for p in parts]
    X = np.vstack([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    positions = np.concatenate([p[2] for p in parts])
    subjects = np.concatenate([p[3] for p in parts]) if config.size_law.three_level else None
    p = X.shape[1]
    names = ("(Intercept)",) + tuple(f"x{k}" for k in range(1, p))
    return Dataset(X, y, np.concatenate([[0], np.cumsum(sizes)]), positions, subjects, None, names)


PRESETS = ("table1a", "table1b", "table2", "table3")
TRUE_BETA = (1.0, -1.2)


def preset_scenario(name: str, rho_values=None, *, seed: int = 0, cluster_count: int = 200) -> DGPConfig:
    """Simulation designs: 200 clusters, beta = (1, -1.2), covariate sd 2."""
    two_level = SizeLaw(Categorical.uniform((5, 6, 7)))
    rho = () if rho_values is None else tuple(np.atleast_1d(np.asarray(rho_values, dtype=float)))
    if name in ("table1a", "table1b"):
        kind = CorrelationKind.EXCHANGEABLE if name == "table1a" else CorrelationKind.AR1
        if len(rho) != 1:
            raise ArgumentError(f"{name} needs one rho value")
        structure, law, dgp = CorrelationStructure(kind, rho), two_level, DGPKind.FRAILTY
    elif name == "table2":
        if len(rho) != 2:
            raise ArgumentError("table2 needs two rho values (rho2, rho3)")
        law = SizeLaw(Categorical((2, 3), (0.8, 0.2)), Categorical((2, 3), (0.8, 0.2)))
        structure, dgp = CorrelationStructure(CorrelationKind.NESTED_EXCH, rho), DGPKind.FRAILTY
    elif name == "table3":
        structure, law, dgp = None, two_level, DGPKind.LATENT_LOGISTIC
    else:
        raise ArgumentError(f"unknown scenario {name!r}; expected one of {', '.join(PRESETS)}")
    return DGPConfig(dgp, TRUE_BETA, structure, cluster_count, law, 2.0, seed, name)
