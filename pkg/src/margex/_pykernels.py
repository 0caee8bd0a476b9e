"""Reference numpy implementation of the inner loops.

Used when the compiled extension is unavailable or when
``MARGEX_PURE_PYTHON=1`` is set.  Each function mirrors the compiled one in
:mod:`margex._ckernels` argument for argument.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy.special import expit, logsumexp

_NEG = -1e308


def _log1m(rho):
    rho = np.asarray(rho, dtype=float)
    out = np.full(rho.shape, _NEG)
    ok = rho < 1.0
    out[ok] = np.log1p(-rho[ok])
    return out


def _log_q(ej, ek, rho, const=0.0):
    terms = np.stack(
        [_log1m(rho) - ej - ek, -ej, -ek, np.broadcast_to(const, np.shape(ej))]
    )
    return logsumexp(terms, axis=0)


def _triu_template(n):
    return np.triu_indices(n, k=1)


def gee_accumulate(X, y, beta, offsets, pair_rho, pivot_tol=1e-12):
    X = np.asarray(X, dtype=float)
    m = len(offsets) - 1
    p = X.shape[1]
    sizes = np.diff(offsets)
    pair_off = np.concatenate([[0], np.cumsum(sizes * (sizes - 1) // 2)])
    eta_all = X @ beta
    mu_all = expit(eta_all)
    sd_all = np.sqrt(mu_all * expit(-eta_all))

    score = np.zeros(p)
    info = np.zeros((p, p))
    U = np.zeros((m, p))
    first_bad = m
    for n in np.unique(sizes):
        idx = np.flatnonzero(sizes == n)
        rows = offsets[idx][:, None] + np.arange(n)
        eta = eta_all[rows]
        sd = sd_all[rows]
        Zd = sd[..., None] * X[rows]
        zs = (y[rows] - mu_all[rows]) / sd
        R = np.broadcast_to(np.eye(n), (len(idx), n, n)).copy()
        if n > 1:
            jj, kk = _triu_template(n)
            npair = len(jj)
            rho = pair_rho[pair_off[idx][:, None] + np.arange(npair)]
            ej, ek = eta[:, jj], eta[:, kk]
            val = np.zeros_like(rho)
            pos = rho > 0
            val[pos] = rho[pos] * np.exp(-0.5 * (ej[pos] + ek[pos]) - _log_q(ej[pos], ek[pos], rho[pos]))
            R[:, jj, kk] = val
            R[:, kk, jj] = val
        try:
            L = np.linalg.cholesky(R)
            piv = np.diagonal(L, axis1=1, axis2=2) ** 2
            bad = list(np.flatnonzero(piv.min(axis=1) < pivot_tol))
        except np.linalg.LinAlgError:
            L = None
            bad = []
            for a in range(len(idx)):
                try:
                    d = np.diag(np.linalg.cholesky(R[a])) ** 2
                    if d.min() < pivot_tol:
                        bad.append(a)
                except np.linalg.LinAlgError:
                    bad.append(a)
        if bad:
            first_bad = min(first_bad, int(idx[bad[0]]))
            continue
        rhs = np.concatenate([Zd, zs[..., None]], axis=2)
        sol = np.linalg.solve(L, rhs)
        Wd, ws = sol[..., :p], sol[..., p]
        U[idx] = np.einsum("knp,kn->kp", Wd, ws)
        info += np.einsum("knp,knq->pq", Wd, Wd)
    if first_bad < m:
        return score, info, U, first_bad
    score = U.sum(axis=0)
    return score, info, U, -1


def _softplus(t):
    return np.logaddexp(0.0, t)


def pair_terms(eta, y, pi, pj, rho, order=2):
    ej, ek = eta[pi], eta[pj]
    yj, yk = y[pi] > 0.5, y[pj] > 0.5
    lom = _log1m(rho)
    lq = _log_q(ej, ek, rho)
    w = np.exp(-ej - ek - lq)
    interior = rho < 1.0

    ll = np.empty_like(ej)
    d1 = np.empty_like(ej)
    d2 = np.empty_like(ej)

    c11 = yj & yk
    ll[c11] = -lq[c11]
    d1[c11] = w[c11]
    d2[c11] = w[c11] ** 2

    for sel, ea, eb in ((yj & ~yk, ej, ek), (~yj & yk, ek, ej)):
        a = np.where(interior, _softplus(np.where(interior, lom, 0.0) - ea), 0.0)
        ll[sel] = (-eb + a - _softplus(-ea) - lq)[sel]
        h = np.exp(-ea - a)
        d1[sel] = (w - h)[sel]
        d2[sel] = (w * w - h * h)[sel]

    c00 = ~yj & ~yk
    lqr = _log_q(ej, ek, rho, const=np.log1p(rho))
    ll[c00] = (-ej - ek + lqr - _softplus(-ej) - _softplus(-ek) - lq)[c00]
    g = np.exp(-lqr) - np.exp(-ej - ek - lqr)
    d1[c00] = (w + g)[c00]
    d2[c00] = (w * w - g * g)[c00]

    if order < 1:
        d1 = d1[:0]
    if order < 2:
        d2 = d2[:0]
    return ll, d1, d2


def pattern_prob(eta, y, offsets, pair_rho):
    m = len(offsets) - 1
    out = np.empty(m)
    poff = 0
    for i in range(m):
        s, e = offsets[i], offsets[i + 1]
        n = e - s
        u = np.exp(-eta[s:e])
        C = np.eye(n)
        if n > 1:
            jj, kk = _triu_template(n)
            r = np.sqrt(pair_rho[poff:poff + len(jj)])
            poff += len(jj)
            C[jj, kk] = r
            C[kk, jj] = r
        half = np.sqrt(u)
        M = np.eye(n) + half[:, None] * C * half[None, :]
        ones = list(np.flatnonzero(y[s:e] == 1))
        zeros = list(np.flatnonzero(y[s:e] != 1))
        total = 0.0
        for t in range(len(zeros) + 1):
            for extra in combinations(zeros, t):
                sub = ones + list(extra)
                if sub:
                    sign, logdet = np.linalg.slogdet(M[np.ix_(sub, sub)])
                    if sign <= 0:
                        return out, i
                else:
                    logdet = 0.0
                total += (-1.0) ** t * np.exp(-logdet)
        out[i] = total
    return out, -1


def frailty_pair_mc(a1, z1, z2, z3, z4, c, u1, u2, sums, sumsq):
    for k in range(len(c)):
        sk = np.sqrt(1.0 - c[k] ** 2)
        w2 = c[k] * z1 + sk * z2
        w4 = c[k] * z3 + sk * z4
        f = np.exp(-a1 * u1[k] - 0.5 * (w2 * w2 + w4 * w4) * u2[k])
        sums[k] += f.sum()
        sumsq[k] += (f * f).sum()
