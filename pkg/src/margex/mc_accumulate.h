/* Inner loop of the frailty Monte Carlo accumulator.  On x86-64 GCC builds
   an AVX2 clone is selected at load time when the CPU supports it. */
#ifndef MARGEX_MC_ACCUMULATE_H
#define MARGEX_MC_ACCUMULATE_H

#include <math.h>
#include <stddef.h>

#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__)
#define MARGEX_CLONES __attribute__((target_clones("avx2", "fma", "default")))
#else
#define MARGEX_CLONES
#endif

MARGEX_CLONES
static void mc_accumulate(ptrdiff_t n, const double *a1, const double *z1, const double *z2,
                          const double *z3, const double *z4, double ck, double u1, double u2,
                          double *s_out, double *q_out)
{
    double sk = sqrt(1.0 - ck * ck), s = 0.0, q = 0.0;
    for (ptrdiff_t t = 0; t < n; t++) {
        double w2 = ck * z1[t] + sk * z2[t];
        double w4 = ck * z3[t] + sk * z4[t];
        double f = exp(-a1[t] * u1 - 0.5 * (w2 * w2 + w4 * w4) * u2);
        s += f;
        q += f * f;
    }
    *s_out = s;
    *q_out = q;
}

#endif
