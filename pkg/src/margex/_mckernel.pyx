# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Frailty Monte Carlo accumulator.

The loop lives in ``mc_accumulate.h`` and is built with ``-ffast-math`` so
the exp calls vectorize.  It only
feeds Monte Carlo checks, where reassociated sums are harmless.
"""

cdef extern from "mc_accumulate.h" nogil:
    void mc_accumulate(Py_ssize_t n, const double* a1, const double* z1, const double* z2,
                       const double* z3, const double* z4, double ck, double u1, double u2,
                       double* s_out, double* q_out)


def frailty_pair_mc(const double[::1] a1, const double[::1] z1, const double[::1] z2,
                    const double[::1] z3, const double[::1] z4,
                    const double[::1] c, const double[::1] u1, const double[::1] u2,
                    double[::1] sums, double[::1] sumsq):
    """Accumulate exp(-a1 u1 - a2 u2) over a chunk of frailty draws.

    ``a1`` is the first frailty (shared across instances); the second uses
    Gaussian coordinates ``c z1 + sqrt(1 - c^2) z2`` (and likewise z3, z4)
    so that corr(a1, a2) = c^2.  Results are added into ``sums``/``sumsq``.
    """
    cdef Py_ssize_t K = c.shape[0], n = a1.shape[0], k
    cdef double s, q
    if n == 0:
        return
    with nogil:
        for k in range(K):
            mc_accumulate(n, &a1[0], &z1[0], &z2[0], &z3[0], &z4[0], c[k], u1[k], u2[k], &s, &q)
            sums[k] = sums[k] + s
            sumsq[k] = sumsq[k] + q
