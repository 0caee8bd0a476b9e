import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from margex.errors import ArgumentError, DomainError, ResourceError, StructureError
from margex.model import (
    ClusterData,
    CorrelationKind,
    CorrelationStructure,
    Observation,
    Theta,
    all_patterns,
    covariance_matrix,
    inverse_logit,
    joint_prob_all_ones,
    marginal_prob,
    pairwise_prob,
    pattern_prob,
    pattern_table,
)
from margex.verify import random_cluster, random_structure

EXCH = CorrelationKind.EXCHANGEABLE
finite = st.floats(-6, 6, allow_nan=False)
unit = st.floats(0, 1, allow_nan=False)


def cluster(etas, y=None, positions=None, subjects=None):
    etas = np.asarray(etas, float)
    X = etas[:, None]
    y = np.zeros(len(etas), int) if y is None else np.asarray(y)
    return ClusterData.from_arrays(X, y, positions, subjects)


def exch(rho):
    return CorrelationStructure(EXCH, (rho,))


# ---------------------------------------------------------------- inverse_logit / marginals


def test_inverse_logit_examples():
    assert inverse_logit(0.0) == 0.5
    assert inverse_logit(1.0) == pytest.approx(0.7310585786, abs=1e-10)
    # 1 - exp(-40) rounds to 1.0 in double precision; no overflow on the way
    big = inverse_logit(40.0)
    assert big <= 1.0 and big == pytest.approx(1.0, abs=1e-16)
    assert 0.0 < 1.0 - inverse_logit(30.0) < 1e-12
    assert inverse_logit(-800.0) >= 0.0 and np.isfinite(inverse_logit(800.0))


def test_marginal_prob_examples():
    assert marginal_prob([1, 0], [0, -1.2]) == 0.5
    assert marginal_prob([1, 1], [1, -1.2]) == pytest.approx(inverse_logit(-0.2))
    assert marginal_prob([1, 1], [1, -1.2]) == pytest.approx(0.4502, abs=5e-5)
    with pytest.raises(ArgumentError):
        marginal_prob([1, 2, 3], [1, 2])


@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2))
def test_marginal_prob_open_interval(x, beta):
    p = marginal_prob(np.array(x) / 3, np.array(beta) / 3)
    assert 0.0 < p < 1.0


# ---------------------------------------------------------------- structures


def test_rho_pair_examples():
    a, b = Observation((1.0,), 0, 1), Observation((1.0,), 0, 3)
    assert exch(0.5).rho_pair(a, b) == 0.5
    assert CorrelationStructure(CorrelationKind.AR1, (0.5,)).rho_pair(a, b) == pytest.approx(0.25)
    nested = CorrelationStructure(CorrelationKind.NESTED_EXCH, (0.3, 0.3))
    same1, same2 = Observation((1.0,), 0, 0, subject_label=4), Observation((1.0,), 0, 1, subject_label=4)
    other = Observation((1.0,), 0, 0, subject_label=5)
    assert nested.rho_pair(same1, same2) == pytest.approx(0.6)
    assert nested.rho_pair(same1, other) == pytest.approx(0.3)


def test_structure_validation():
    with pytest.raises(DomainError):
        exch(1.0)
    with pytest.raises(DomainError):
        exch(-0.1)
    with pytest.raises(DomainError):
        CorrelationStructure(CorrelationKind.NESTED_EXCH, (0.6, 0.5))
    with pytest.raises(ArgumentError):
        CorrelationStructure(EXCH, (0.1, 0.2))
    with pytest.raises(ArgumentError):
        CorrelationKind.parse("unstructured")
    assert CorrelationKind.parse("Exchangeable") is EXCH
    assert CorrelationStructure(CorrelationKind.INDEPENDENCE).params == ()


def test_ar1_rejects_repeated_positions():
    s = CorrelationStructure(CorrelationKind.AR1, (0.4,))
    with pytest.raises(StructureError):
        s.check_layout(np.array([0, 0, 1]))


def test_nested_needs_subjects():
    s = CorrelationStructure(CorrelationKind.NESTED_EXCH, (0.3, 0.2))
    with pytest.raises(StructureError):
        s.check_layout(np.arange(3))


@given(st.sampled_from(list(CorrelationKind)), st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_pair_jacobian_matches_differences(kind, seed, n):
    rng = np.random.default_rng(seed)
    s = random_structure(kind, rng)
    if not s.params:
        return
    c = random_cluster(kind, n, 2, rng)
    lag, same = s._layout_pairs(c.positions, c.subjects)
    J = s.pair_jacobian(lag, same)
    for k in range(len(s.params)):
        h = 1e-7
        up, dn = np.array(s.params), np.array(s.params)
        up[k] += h
        dn[k] -= h
        if dn[k] < 0:
            continue
        fd = (s.with_params(up).pair_values(lag, same) - s.with_params(dn).pair_values(lag, same)) / (2 * h)
        np.testing.assert_allclose(J[:, k], fd, atol=1e-6)


# ---------------------------------------------------------------- pairwise probability


def test_pairwise_prob_examples():
    x, b = np.array([1.0]), np.array([0.0])
    assert pairwise_prob(x, x, b, 0.0) == pytest.approx(0.25, abs=1e-15)
    assert pairwise_prob(x, x, b, 1.0) == pytest.approx(1 / 3, abs=1e-15)
    assert pairwise_prob(x, x, b, 0.5) == pytest.approx(1 / 3.5, abs=1e-15)
    with pytest.raises(DomainError):
        pairwise_prob(x, x, b, 1.2)


@given(finite, finite, unit)
def test_pairwise_fréchet_and_symmetry(ej, ek, rho):
    x1, x2, b = np.array([ej]), np.array([ek]), np.array([1.0])
    p = pairwise_prob(x1, x2, b, rho)
    pj, pk = inverse_logit(ej), inverse_logit(ek)
    assert max(0.0, pj + pk - 1) - 1e-15 <= p <= min(pj, pk) + 1e-15
    assert p == pairwise_prob(x2, x1, b, rho)


@given(finite, finite)
def test_pairwise_independence_factorizes(ej, ek):
    p = pairwise_prob(np.array([ej]), np.array([ek]), np.array([1.0]), 0.0)
    assert p == pytest.approx(inverse_logit(ej) * inverse_logit(ek), rel=1e-14, abs=1e-300)


@given(finite, finite, unit)
def test_pairwise_matches_determinant(ej, ek, rho):
    X = np.array([[ej], [ek]])
    C = np.array([[1.0, math.sqrt(rho)], [math.sqrt(rho), 1.0]])
    a = pairwise_prob(X[0], X[1], np.array([1.0]), rho)
    assert joint_prob_all_ones(X, np.array([1.0]), C) == pytest.approx(a, abs=1e-12)


def test_pairwise_is_monotone_in_rho():
    x, b = np.array([0.3]), np.array([1.0])
    vals = [pairwise_prob(x, -x, b, r) for r in np.linspace(0, 1, 11)]
    assert np.all(np.diff(vals) > 0)


# ---------------------------------------------------------------- covariance matrix


def test_covariance_examples():
    single = covariance_matrix(cluster([0.0]), Theta([1.0], exch(0.5)))
    np.testing.assert_allclose(single, [[0.25]])
    indep = covariance_matrix(cluster([0.1, -0.5, 2.0]), Theta([1.0], CorrelationStructure(CorrelationKind.INDEPENDENCE)))
    assert np.count_nonzero(indep - np.diag(np.diag(indep))) == 0
    V = covariance_matrix(cluster([0.0, 0.0]), Theta([1.0], exch(0.5)))
    assert V[0, 1] == pytest.approx(1 / 3.5 - 0.25, abs=1e-15)
    np.testing.assert_allclose(np.linalg.eigvalsh(V), [0.25 - (1 / 3.5 - 0.25), 0.25 + 1 / 3.5 - 0.25], atol=1e-15)


@given(st.sampled_from(list(CorrelationKind)), st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_covariance_symmetric_psd(kind, seed, n):
    rng = np.random.default_rng(seed)
    c = random_cluster(kind, n, 2, rng)
    theta = Theta(rng.normal(0, 1, 2), random_structure(kind, rng))
    try:
        theta.rho.check_layout(c.positions, c.subjects)
    except StructureError:
        return
    V = covariance_matrix(c, theta)
    assert np.array_equal(V, V.T)
    assert np.linalg.eigvalsh(V)[0] >= -1e-10


# ---------------------------------------------------------------- joint and pattern probabilities


def test_joint_prob_examples():
    assert joint_prob_all_ones([[0.0]], [1.0], [[1.0]]) == pytest.approx(0.5)
    s = math.sqrt(0.5)
    assert joint_prob_all_ones([[0.0], [0.0]], [1.0], [[1, s], [s, 1]]) == pytest.approx(1 / 3.5, abs=1e-15)
    with pytest.raises(DomainError):
        joint_prob_all_ones([[0.0], [0.0]], [1.0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ArgumentError):
        joint_prob_all_ones([[0.0], [0.0]], [1.0], [[1.0]])


def test_pattern_prob_examples():
    assert pattern_prob(cluster([0.0], [0]), Theta([1.0], exch(0.5))) == pytest.approx(0.5)
    th = Theta([1.0], exch(0.5))
    p11 = 1 / 3.5
    got = {y: pattern_prob(cluster([0.0, 0.0], list(y)), th) for y in [(1, 1), (1, 0), (0, 1), (0, 0)]}
    assert got[(1, 1)] == pytest.approx(p11, abs=1e-15)
    assert got[(1, 0)] == pytest.approx(0.5 - p11, abs=1e-15)
    assert got[(0, 1)] == pytest.approx(0.5 - p11, abs=1e-15)
    assert got[(0, 0)] == pytest.approx(1 - 1 + p11, abs=1e-15)
    assert sum(got.values()) == pytest.approx(1.0, abs=1e-15)


def test_pattern_size_cap():
    c = cluster(np.zeros(21))
    with pytest.raises(ResourceError):
        pattern_prob(c, Theta([1.0], exch(0.2)))
    with pytest.raises(ResourceError):
        pattern_table(cluster(np.zeros(5)), Theta([1.0], exch(0.2)), cap=4)


def test_all_patterns_enumerates():
    pats = all_patterns(3)
    assert pats.shape == (8, 3)
    assert len({tuple(r) for r in pats}) == 8


@given(st.sampled_from(list(CorrelationKind)), st.integers(0, 2**32 - 1), st.integers(1, 7))
def test_patterns_normalize(kind, seed, n):
    rng = np.random.default_rng(seed)
    c = random_cluster(kind, n, 2, rng)
    theta = Theta(rng.normal(0, 1, 2), random_structure(kind, rng))
    try:
        theta.rho.check_layout(c.positions, c.subjects)
    except StructureError:
        return
    table = pattern_table(c, theta)
    assert abs(table.sum() - 1.0) < 1e-10
    assert table.min() >= -1e-12


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_patterns_marginalize_to_reduced_cluster(seed, n):
    rng = np.random.default_rng(seed)
    c = random_cluster(EXCH, n, 2, rng)
    theta = Theta(rng.normal(0, 1, 2), random_structure(EXCH, rng))
    full = pattern_table(c, theta).reshape(2 ** (n - 1), 2).sum(axis=1)
    reduced = ClusterData.from_arrays(c.X[:-1], c.y[:-1], c.positions[:-1])
    np.testing.assert_allclose(full, pattern_table(reduced, theta), atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_pattern_prob_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    c = random_cluster(EXCH, n, 2, rng)
    theta = Theta(rng.normal(0, 1, 2), random_structure(EXCH, rng))
    perm = rng.permutation(n)
    shuffled = ClusterData.from_arrays(c.X[perm], c.y[perm])
    assert pattern_prob(shuffled, theta) == pytest.approx(pattern_prob(c, theta), abs=1e-13)


def test_three_point_matches_frailty_simulation():
    # pr(all ones), n = 3, exchangeable 0.3, x'beta = 0, against simulated frailties
    rng = np.random.default_rng(3)
    C = np.full((3, 3), math.sqrt(0.3)) + (1 - math.sqrt(0.3)) * np.eye(3)
    L = np.linalg.cholesky(C)
    total, n = 0.0, 0
    for _ in range(10):
        g = rng.standard_normal((2, 1_000_000, 3)) @ L.T
        a = 0.5 * (g[0] ** 2 + g[1] ** 2)
        total += np.exp(-a.sum(axis=1)).sum()
        n += 1_000_000
    exact = joint_prob_all_ones(np.zeros((3, 1)), [1.0], C)
    assert abs(total / n - exact) < 1e-3
