"""Backend selection for the hot loops.

The compiled extension ``margex._ckernels`` is used when it imports; the
numpy module ``margex._pykernels`` is the fallback.  Setting the
environment variable ``MARGEX_PURE_PYTHON=1`` before import forces the
fallback.  Every wrapper accepts ``backend=`` to pin one implementation,
which is how the tests and the benchmark compare the two.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels
from .errors import ArgumentError, NumericalError

try:
    if os.environ.get("MARGEX_PURE_PYTHON", "").strip() not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels
except ImportError:
    _ckernels = None

try:
    from ._mckernel import frailty_pair_mc as _compiled_pair_mc
except ImportError:
    _compiled_pair_mc = _pykernels.frailty_pair_mc

BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"

# Cholesky pivot floor of the correlation-scaled covariance; a pivot below
# it means condition number above ~1e12.
PIVOT_TOL = 1e-12


def _impl(backend: str | None) -> ModuleType:
    name = BACKEND if backend is None else backend
    try:
        return BACKENDS[name]
    except KeyError:
        raise ArgumentError(f"backend {name!r} not available; have {sorted(BACKENDS)}") from None


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def gee_accumulate(X, y, beta, offsets, pair_rho, *, backend=None):
    """Sum of ``D'V^-1 S`` and ``D'V^-1 D`` over clusters, plus per-cluster scores."""
    score, info, per_cluster, bad = _impl(backend).gee_accumulate(
        _f64(X), _f64(y), _f64(beta), _i64(offsets), _f64(pair_rho), PIVOT_TOL
    )
    if bad >= 0:
        raise NumericalError(
            f"cluster {bad}: model covariance is singular (condition number above 1e12)",
            cluster=bad,
        )
    return score, info, per_cluster


def pair_terms(eta, y, pi, pj, rho, order=2, *, backend=None):
    """Pairwise composite log-likelihood terms and rho_jk derivatives."""
    rho = _f64(rho)
    if rho.size and (rho.min() < 0.0 or rho.max() > 1.0):
        raise ArgumentError("pair correlations must lie in [0, 1]")
    return _impl(backend).pair_terms(_f64(eta), _f64(y), _i64(pi), _i64(pj), rho, int(order))


def pattern_prob(eta, y, offsets, pair_rho, *, backend=None):
    """Probability of each cluster's outcome vector under the exact likelihood."""
    out, bad = _impl(backend).pattern_prob(_f64(eta), _i64(y), _i64(offsets), _f64(pair_rho))
    if bad >= 0:
        raise NumericalError(
            f"cluster {bad}: frailty correlation is not positive semidefinite",
            cluster=bad,
        )
    return out


def frailty_pair_mc(a1, z1, z2, z3, z4, c, u1, u2, sums, sumsq, *, backend=None):
    """Add sums of exp(-a1 u1 - a2 u2) and its square, per instance, into ``sums``/``sumsq``."""
    impl = _impl(backend)
    fn = _compiled_pair_mc if impl is _ckernels else impl.frailty_pair_mc
    fn(_f64(a1), _f64(z1), _f64(z2), _f64(z3), _f64(z4), _f64(c), _f64(u1), _f64(u2), sums, sumsq)
