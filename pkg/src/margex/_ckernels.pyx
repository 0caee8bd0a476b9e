# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Same signatures and return values as :mod:`margex._pykernels`; the selector
in :mod:`margex.kernels` decides which one is used.  Clusters are stored
flat: observation ``offsets`` (length m + 1) delimit clusters and pairwise
quantities are laid out cluster by cluster in (j < k) lexicographic order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline double _softplus(double t) noexcept nogil:
    if t > 0.0:
        return t + log1p(exp(-t))
    return log1p(exp(t))


cdef inline double _expit(double t) noexcept nogil:
    cdef double e
    if t >= 0.0:
        return 1.0 / (1.0 + exp(-t))
    e = exp(t)
    return e / (1.0 + e)


cdef inline double _logsumexp4(double a, double b, double c, double d) noexcept nogil:
    # a may be -inf-like (flagged by the caller passing -1e308)
    cdef double mx = b
    if c > mx:
        mx = c
    if d > mx:
        mx = d
    if a > mx:
        mx = a
    return mx + log(exp(a - mx) + exp(b - mx) + exp(c - mx) + exp(d - mx))


cdef inline double _log_q(double ej, double ek, double rho) noexcept nogil:
    """log((1-rho) u_j u_k + u_j + u_k + 1) with u = exp(-eta)."""
    cdef double a = -1e308
    if rho < 1.0:
        a = log(1.0 - rho) - ej - ek
    return _logsumexp4(a, -ej, -ek, 0.0)


def gee_accumulate(const double[:, ::1] X, const double[::1] y,
                   const double[::1] beta, const i64[::1] offsets,
                   const double[::1] pair_rho, double pivot_tol=1e-12):
    """Per-cluster D'V^-1 S and D'V^-1 D.

    Returns ``(score_sum, info_sum, per_cluster_scores, bad)`` where ``bad``
    is the index of the first cluster whose scaled covariance failed the
    pivot test, or -1.
    """
    cdef Py_ssize_t N = X.shape[0], p = X.shape[1]
    cdef Py_ssize_t m = offsets.shape[0] - 1
    cdef Py_ssize_t i, j, k, r, c, n, start, poff = 0, nmax = 1, pidx
    cdef double acc, rho, lq, piv
    cdef i64 bad = -1

    score_arr = np.zeros(p, dtype=np.float64)
    info_arr = np.zeros((p, p), dtype=np.float64)
    u_arr = np.zeros((m, p), dtype=np.float64)
    cdef double[::1] score = score_arr
    cdef double[:, ::1] info = info_arr
    cdef double[:, ::1] U = u_arr

    for i in range(m):
        n = offsets[i + 1] - offsets[i]
        if n > nmax:
            nmax = n

    cdef double* eta = <double*> malloc(nmax * sizeof(double))
    cdef double* R = <double*> malloc(nmax * nmax * sizeof(double))
    cdef double* Z = <double*> malloc(nmax * (p + 1) * sizeof(double))
    cdef Py_ssize_t w = p + 1
    cdef double pj, sj

    try:
        with nogil:
            for i in range(m):
                start = offsets[i]
                n = offsets[i + 1] - start
                # scaled design [sqrt(v) x | pearson residual]
                for j in range(n):
                    acc = 0.0
                    for c in range(p):
                        acc = acc + X[start + j, c] * beta[c]
                    eta[j] = acc
                    pj = _expit(acc)
                    sj = sqrt(pj * _expit(-acc))
                    for c in range(p):
                        Z[j * w + c] = sj * X[start + j, c]
                    Z[j * w + p] = (y[start + j] - pj) / sj
                # correlation-scaled covariance R = diag(v)^-1/2 V diag(v)^-1/2
                pidx = poff
                for j in range(n):
                    R[j * n + j] = 1.0
                    for k in range(j + 1, n):
                        rho = pair_rho[pidx]
                        pidx = pidx + 1
                        if rho > 0.0:
                            lq = _log_q(eta[j], eta[k], rho)
                            acc = rho * exp(-0.5 * (eta[j] + eta[k]) - lq)
                        else:
                            acc = 0.0
                        R[j * n + k] = acc
                        R[k * n + j] = acc
                poff = pidx
                # in-place Cholesky (lower triangle)
                for j in range(n):
                    for k in range(j + 1):
                        acc = R[j * n + k]
                        for c in range(k):
                            acc = acc - R[j * n + c] * R[k * n + c]
                        if j == k:
                            if acc < pivot_tol:
                                bad = i
                                break
                            R[j * n + j] = sqrt(acc)
                        else:
                            R[j * n + k] = acc / R[k * n + k]
                    if bad >= 0:
                        break
                if bad >= 0:
                    break
                # forward solve L Z' = Z
                for j in range(n):
                    piv = R[j * n + j]
                    for c in range(w):
                        acc = Z[j * w + c]
                        for k in range(j):
                            acc = acc - R[j * n + k] * Z[k * w + c]
                        Z[j * w + c] = acc / piv
                # accumulate Z_d' Z_d and Z_d' z_s
                for r in range(p):
                    acc = 0.0
                    for j in range(n):
                        acc = acc + Z[j * w + r] * Z[j * w + p]
                    U[i, r] = acc
                    score[r] = score[r] + acc
                    for c in range(r, p):
                        acc = 0.0
                        for j in range(n):
                            acc = acc + Z[j * w + r] * Z[j * w + c]
                        info[r, c] = info[r, c] + acc
        for r in range(p):
            for c in range(r):
                info[r, c] = info[c, r]
    finally:
        free(eta)
        free(R)
        free(Z)
    return score_arr, info_arr, u_arr, int(bad)


def pair_terms(const double[::1] eta, const double[::1] y,
               const i64[::1] pi, const i64[::1] pj,
               const double[::1] rho, int order=2):
    """Pairwise log-likelihood and its first two derivatives in rho_jk.

    Returns ``(loglik, d1, d2)``; derivative arrays are empty when not
    requested through ``order``.
    """
    cdef Py_ssize_t P = pi.shape[0], t
    ll_arr = np.empty(P, dtype=np.float64)
    d1_arr = np.empty(P if order >= 1 else 0, dtype=np.float64)
    d2_arr = np.empty(P if order >= 2 else 0, dtype=np.float64)
    cdef double[::1] ll = ll_arr
    cdef double[::1] d1 = d1_arr
    cdef double[::1] d2 = d2_arr
    cdef double ej, ek, r, lq, lqr, spj, spk, w, h, g, lom, a
    cdef double yj, yk
    with nogil:
        for t in range(P):
            ej = eta[pi[t]]
            ek = eta[pj[t]]
            yj = y[pi[t]]
            yk = y[pj[t]]
            r = rho[t]
            if r < 1.0:
                lom = log(1.0 - r)
            else:
                lom = -1e308
            lq = _logsumexp4(lom - ej - ek, -ej, -ek, 0.0)
            w = exp(-ej - ek - lq)
            if yj > 0.5 and yk > 0.5:
                ll[t] = -lq
                if order >= 1:
                    d1[t] = w
                if order >= 2:
                    d2[t] = w * w
            elif yj > 0.5:
                # y_j = 1, y_k = 0: u_k (1 + (1-rho) u_j) / ((1 + u_j) Q)
                a = _softplus(lom - ej) if r < 1.0 else 0.0
                ll[t] = -ek + a - _softplus(-ej) - lq
                if order >= 1:
                    h = exp(-ej - a)
                    d1[t] = w - h
                    if order >= 2:
                        d2[t] = w * w - h * h
            elif yk > 0.5:
                a = _softplus(lom - ek) if r < 1.0 else 0.0
                ll[t] = -ej + a - _softplus(-ek) - lq
                if order >= 1:
                    h = exp(-ek - a)
                    d1[t] = w - h
                    if order >= 2:
                        d2[t] = w * w - h * h
            else:
                # u_j u_k (Q + rho) / ((1 + u_j)(1 + u_k) Q)
                spj = _softplus(-ej)
                spk = _softplus(-ek)
                lqr = _logsumexp4(lom - ej - ek, -ej, -ek, log1p(r))
                ll[t] = -ej - ek + lqr - spj - spk - lq
                if order >= 1:
                    g = exp(-lqr) - exp(-ej - ek - lqr)
                    d1[t] = w + g
                    if order >= 2:
                        d2[t] = w * w - g * g
    return ll_arr, d1_arr, d2_arr


cdef int _subset_sum(const double* M, double* L, i64* members, Py_ssize_t n,
                     Py_ssize_t s, Py_ssize_t first, double logdet, double sign,
                     double* total) noexcept nogil:
    """Depth-first walk over supersets of the current member set.

    Rows 0..s-1 of ``L`` hold the Cholesky factor of M restricted to
    ``members[:s]``; appending an index costs one forward substitution.
    """
    cdef Py_ssize_t t, r, c, row
    cdef double v, d
    cdef int ret
    total[0] = total[0] + sign * exp(-logdet)
    for t in range(first, n):
        members[s] = t
        row = s * n
        d = M[t * n + t]
        for r in range(s):
            v = M[members[r] * n + t]
            for c in range(r):
                v = v - L[row + c] * L[r * n + c]
            v = v / L[r * n + r]
            L[row + r] = v
            d = d - v * v
        if d <= 0.0:
            return -1
        L[row + s] = sqrt(d)
        ret = _subset_sum(M, L, members, n, s + 1, t + 1, logdet + log(d), -sign, total)
        if ret < 0:
            return ret
    return 0


def pattern_prob(const double[::1] eta, const i64[::1] y,
                 const i64[::1] offsets, const double[::1] pair_rho):
    """Probability of each cluster's observed outcome vector.

    Inclusion-exclusion over the zero outcomes of survivor probabilities
    ``det(I + D^1/2 C D^1/2)^-1`` with ``C`` the elementwise square root of
    the frailty correlation and ``D = diag(exp(-eta))``.  Returns
    ``(prob, bad)``; ``bad`` is the first cluster with a non-positive
    Cholesky pivot (non-PSD correlation), or -1.  Probabilities are the raw
    signed sums, so round-off may leave them marginally negative.
    """
    cdef Py_ssize_t m = offsets.shape[0] - 1
    cdef Py_ssize_t i, j, k, a, b, n, start, nmax = 1, poff = 0, k0, nz
    cdef double total, v, d, logdet, rho
    cdef i64 bad = -1
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(m):
        n = offsets[i + 1] - offsets[i]
        if n > nmax:
            nmax = n
    cdef double* M = <double*> malloc(nmax * nmax * sizeof(double))
    cdef double* L = <double*> malloc(nmax * nmax * sizeof(double))
    cdef double* Mo = <double*> malloc(nmax * nmax * sizeof(double))
    cdef i64* order = <i64*> malloc(nmax * sizeof(i64))
    cdef i64* rank = <i64*> malloc(nmax * sizeof(i64))
    cdef i64* members = <i64*> malloc(nmax * sizeof(i64))
    cdef int ret
    try:
        with nogil:
            for i in range(m):
                start = offsets[i]
                n = offsets[i + 1] - start
                # ones first, then zeros
                k0 = 0
                for j in range(n):
                    if y[start + j] == 1:
                        order[k0] = j
                        k0 = k0 + 1
                nz = k0
                for j in range(n):
                    if y[start + j] != 1:
                        order[nz] = j
                        nz = nz + 1
                for a in range(n):
                    rank[order[a]] = a
                # M in original order, then permuted copy Mo
                for j in range(n):
                    M[j * n + j] = 1.0 + exp(-eta[start + j])
                    for k in range(j + 1, n):
                        rho = pair_rho[poff]
                        poff = poff + 1
                        if rho > 0.0:
                            v = exp(-0.5 * (eta[start + j] + eta[start + k])) * sqrt(rho)
                        else:
                            v = 0.0
                        M[j * n + k] = v
                        M[k * n + j] = v
                for a in range(n):
                    for b in range(n):
                        Mo[a * n + b] = M[order[a] * n + order[b]]
                # factor the always-present block of ones
                logdet = 0.0
                ret = 0
                for a in range(k0):
                    members[a] = a
                    d = Mo[a * n + a]
                    for b in range(a):
                        v = Mo[b * n + a]
                        for k in range(b):
                            v = v - L[a * n + k] * L[b * n + k]
                        v = v / L[b * n + b]
                        L[a * n + b] = v
                        d = d - v * v
                    if d <= 0.0:
                        ret = -1
                        break
                    L[a * n + a] = sqrt(d)
                    logdet = logdet + log(d)
                if ret == 0:
                    total = 0.0
                    ret = _subset_sum(Mo, L, members, n, k0, k0, logdet, 1.0, &total)
                if ret < 0:
                    bad = i
                    break
                out[i] = total
    finally:
        free(M)
        free(L)
        free(Mo)
        free(order)
        free(rank)
        free(members)
    return out_arr, int(bad)
