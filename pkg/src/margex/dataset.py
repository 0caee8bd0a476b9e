"""Flat, cluster-sorted storage of a clustered binary dataset."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ArgumentError
from .model import ClusterData, Observation, pair_layout


class Mode(str, Enum):
    TWO_LEVEL = "two-level"
    THREE_LEVEL = "three-level"


@dataclass(frozen=True)
class PairIndex:
    """All within-cluster pairs (j < k in cluster order), concatenated by cluster."""

    i: np.ndarray
    j: np.ndarray
    cluster: np.ndarray
    lag: np.ndarray
    same: np.ndarray

    def __len__(self):
        return len(self.i)


class Dataset:
    """Clusters stored contiguously.

    Row ``r`` of ``X`` belongs to cluster ``c`` when
    ``offsets[c] <= r < offsets[c + 1]``.  ``positions`` drive AR(1) lags and
    ``subjects`` (three-level data only) the nested structures.
    """

    def __init__(
        self,
        X,
        y,
        offsets,
        positions=None,
        subjects=None,
        cluster_labels=None,
        covariate_names: Sequence[str] | None = None,
    ):
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2:
            raise ArgumentError("X must be two-dimensional")
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ArgumentError("y length differs from the number of rows of X")
        if not np.all((y == 0) | (y == 1)):
            raise ArgumentError("outcomes must be 0 or 1")
        if not np.all(np.isfinite(X)):
            raise ArgumentError("covariates must be finite")
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets[0] != 0 or offsets[-1] != len(y) or np.any(np.diff(offsets) < 1):
            raise ArgumentError("offsets must start at 0, end at n and give non-empty clusters")
        m = len(offsets) - 1
        sizes = np.diff(offsets)
        if positions is None:
            positions = np.concatenate([np.arange(n) for n in sizes]) if m else np.zeros(0)
        positions = np.asarray(positions, dtype=np.int64)
        if subjects is not None:
            subjects = np.asarray(subjects, dtype=np.int64)
        self.X = X
        self.y = y.astype(np.int64)
        self.offsets = offsets
        self.positions = positions
        self.subjects = subjects
        self.cluster_labels = (
            np.arange(m, dtype=np.int64) if cluster_labels is None else np.asarray(cluster_labels, dtype=np.int64)
        )
        p = X.shape[1]
        self.covariate_names = (
            tuple(covariate_names) if covariate_names is not None else ("(Intercept)",) + tuple(f"x{k}" for k in range(1, p))
        )
        if len(self.covariate_names) != p:
            raise ArgumentError("covariate_names length differs from the number of columns")
        self._check_positions()

    def _check_positions(self):
        unit = self.subjects if self.subjects is not None else np.zeros(len(self.y), dtype=np.int64)
        cl = np.repeat(np.arange(self.n_clusters), self.sizes)
        keys = np.stack([cl, unit, self.positions], axis=1)
        if len(np.unique(keys, axis=0)) != len(keys):
            raise ArgumentError("positions must be unique within each subject (or cluster)")

    # construction ---------------------------------------------------------

    @classmethod
    def from_arrays(cls, cluster, X, y, positions=None, subjects=None, covariate_names=None) -> "Dataset":
        """Group rows by cluster id, keeping clusters in order of first appearance."""
        cluster = np.asarray(cluster)
        X = np.asarray(X, dtype=float)
        labels, first = np.unique(cluster, return_index=True)
        order_of_label = np.argsort(first, kind="stable")
        rank = np.empty(len(labels), dtype=np.int64)
        rank[order_of_label] = np.arange(len(labels))
        code = rank[np.searchsorted(labels, cluster)]
        perm = np.argsort(code, kind="stable")
        sizes = np.bincount(code, minlength=len(labels))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        if positions is None:
            if subjects is None:
                positions = np.concatenate([np.arange(n) for n in sizes])
            else:
                positions = _rank_within(code[perm], np.asarray(subjects)[perm])
        else:
            positions = np.asarray(positions)[perm]
        return cls(
            X[perm],
            np.asarray(y)[perm],
            offsets,
            positions,
            None if subjects is None else np.asarray(subjects)[perm],
            labels[order_of_label],
            covariate_names,
        )

    @classmethod
    def from_clusters(cls, clusters: Sequence[ClusterData], covariate_names=None) -> "Dataset":
        if not clusters:
            raise ArgumentError("need at least one cluster")
        modes = {c.subjects is not None for c in clusters}
        if len(modes) != 1:
            raise ArgumentError("subject labels must be present in all clusters or none")
        X = np.vstack([c.X for c in clusters])
        y = np.concatenate([c.y for c in clusters])
        sizes = [len(c) for c in clusters]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        positions = np.concatenate([c.positions for c in clusters])
        subjects = np.concatenate([c.subjects for c in clusters]) if modes.pop() else None
        labels = [c.cluster_label for c in clusters]
        return cls(X, y, offsets, positions, subjects, labels, covariate_names)

    # views ----------------------------------------------------------------

    @property
    def n_clusters(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def mode(self) -> Mode:
        return Mode.TWO_LEVEL if self.subjects is None else Mode.THREE_LEVEL

    def cluster(self, c: int) -> ClusterData:
        s, e = self.offsets[c], self.offsets[c + 1]
        obs = tuple(
            Observation(
                self.X[r],
                int(self.y[r]),
                int(self.positions[r]),
                None if self.subjects is None else int(self.subjects[r]),
            )
            for r in range(s, e)
        )
        return ClusterData(obs, int(self.cluster_labels[c]))

    @property
    def clusters(self) -> list[ClusterData]:
        return [self.cluster(c) for c in range(self.n_clusters)]

    def __len__(self):
        return self.n_clusters

    @cached_property
    def pairs(self) -> PairIndex:
        ii, jj, cc, lag, same = [], [], [], [], []
        for c in range(self.n_clusters):
            s, e = self.offsets[c], self.offsets[c + 1]
            n = e - s
            if n < 2:
                continue
            a, b = np.triu_indices(n, k=1)
            subj = None if self.subjects is None else self.subjects[s:e]
            lg, sm = pair_layout(self.positions[s:e], subj)
            ii.append(a + s)
            jj.append(b + s)
            cc.append(np.full(len(a), c))
            lag.append(lg)
            same.append(sm)
        if not ii:
            z = np.zeros(0, dtype=np.int64)
            return PairIndex(z, z, z, z, np.zeros(0, dtype=bool))
        return PairIndex(
            np.concatenate(ii).astype(np.int64),
            np.concatenate(jj).astype(np.int64),
            np.concatenate(cc).astype(np.int64),
            np.concatenate(lag).astype(np.int64),
            np.concatenate(same),
        )

    def layouts(self, use_subjects: bool) -> tuple:
        """Distinct (size, lags, same-subject flags) triples, as hashable tuples."""
        return self._layouts[bool(use_subjects)]

    @cached_property
    def _layouts(self):
        return {flag: tuple(self._iter_layouts(flag)) for flag in (False, True)}

    def _iter_layouts(self, use_subjects: bool):
        seen = set()
        pairs = self.pairs
        bounds = np.concatenate([[0], np.cumsum(self.sizes * (self.sizes - 1) // 2)])
        for c in range(self.n_clusters):
            lo, hi = bounds[c], bounds[c + 1]
            same = pairs.same[lo:hi] if use_subjects else np.ones(hi - lo, dtype=bool)
            key = (int(self.sizes[c]), tuple(pairs.lag[lo:hi].tolist()), tuple(same.tolist()))
            if key not in seen:
                seen.add(key)
                yield key

    def subset(self, clusters) -> "Dataset":
        """Dataset restricted to the given cluster indices, in that order."""
        clusters = np.asarray(clusters, dtype=np.int64)
        rows = np.concatenate([np.arange(self.offsets[c], self.offsets[c + 1]) for c in clusters])
        sizes = self.sizes[clusters]
        return Dataset(
            self.X[rows],
            self.y[rows],
            np.concatenate([[0], np.cumsum(sizes)]),
            self.positions[rows],
            None if self.subjects is None else self.subjects[rows],
            self.cluster_labels[clusters],
            self.covariate_names,
        )

    def with_columns(self, X) -> "Dataset":
        return Dataset(X, self.y, self.offsets, self.positions, self.subjects, self.cluster_labels)


def _rank_within(codes, subjects):
    """Order of appearance of each row within its (cluster, subject) unit."""
    out = np.empty(len(codes), dtype=np.int64)
    counter: dict[tuple[int, int], int] = {}
    for r, key in enumerate(zip(codes.tolist(), subjects.tolist())):
        out[r] = counter.get(key, 0)
        counter[key] = out[r] + 1
    return out
