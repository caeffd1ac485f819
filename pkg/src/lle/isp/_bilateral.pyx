# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bilateral filter kernels (forward pass and forward-mode tangents).

Inputs are channel-planar and edge-padded by ``w`` on both spatial axes:
``padded[c, y + w, x + w] == img[y, x, c]`` with replicated borders. Work is
split over (channel, row) pairs; the per-pixel sums always run over the taps
in one fixed order (row offset outer, column offset inner) on one thread, so
results are independent of ``num_threads``.

The normalized sum is a convex combination of the window samples, but its
floating-point evaluation can land a few ulps outside the window range; each
output is therefore clamped to the exact window [min, max].
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.math cimport exp, fmax, fmin
from libc.stdlib cimport free, malloc


def _spatial_table(double[::1] sigma1, int w):
    cdef int side = 2 * w + 1
    cdef double[:, ::1] table = np.empty((3, side * side), dtype=np.float64)
    cdef int c, m, n, t
    for c in range(3):
        t = 0
        for m in range(-w, w + 1):
            for n in range(-w, w + 1):
                table[c, t] = exp(-(m * m + n * n) / (2.0 * sigma1[c] * sigma1[c]))
                t += 1
    return np.asarray(table)


def bilateral_forward_planar(const double[:, :, ::1] padded, double[::1] sigma1,
                             double[::1] sigma2, int w, int num_threads=1):
    cdef Py_ssize_t H = padded.shape[1] - 2 * w, W = padded.shape[2] - 2 * w
    cdef Py_ssize_t r, i, j
    cdef int c, m, n, t
    cdef double s, kk, d, wq
    cdef const double *prow
    cdef const double *qrow
    cdef double *wsum
    cdef double *nsum
    cdef double *lo
    cdef double *hi
    cdef double[:, ::1] sw = _spatial_table(sigma1, w)
    cdef double k2[3]
    for c in range(3):
        k2[c] = 1.0 / (2.0 * sigma2[c] * sigma2[c])
    out_arr = np.empty((3, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr

    with nogil, parallel(num_threads=num_threads):
        wsum = <double *> malloc(W * sizeof(double))
        nsum = <double *> malloc(W * sizeof(double))
        lo = <double *> malloc(W * sizeof(double))
        hi = <double *> malloc(W * sizeof(double))
        for r in prange(3 * H, schedule="static"):
            c = <int> (r // H)
            i = r % H
            kk = k2[c]
            prow = &padded[c, i + w, w]
            for j in range(W):
                wsum[j] = 0.0
                nsum[j] = 0.0
                lo[j] = prow[j]
                hi[j] = prow[j]
            t = 0
            for m in range(-w, w + 1):
                for n in range(-w, w + 1):
                    s = sw[c, t]
                    qrow = &padded[c, i + w + m, w + n]
                    for j in range(W):
                        d = prow[j] - qrow[j]
                        wq = s * exp(-d * d * kk)
                        wsum[j] = wsum[j] + wq
                        nsum[j] = nsum[j] + wq * qrow[j]
                        lo[j] = fmin(lo[j], qrow[j])
                        hi[j] = fmax(hi[j], qrow[j])
                    t = t + 1
            for j in range(W):
                out[c, i, j] = fmin(fmax(nsum[j] / wsum[j], lo[j]), hi[j])
        free(wsum)
        free(nsum)
        free(lo)
        free(hi)
    return out_arr


def bilateral_jvp_planar(const double[:, :, ::1] padded, const double[:, :, :, ::1] tpadded,
                         double[::1] sigma1, double[::1] sigma2,
                         const double[:, ::1] dsigma1, const double[:, ::1] dsigma2,
                         int w, int num_threads=1):
    """Filter and push ``K`` padded planar tangent images through the filter.

    ``dsigma1[k, c]`` / ``dsigma2[k, c]`` are the derivatives of the channel-c
    sigmas along tangent direction k. Returns planar ``(3, H, W)`` and
    ``(K, 3, H, W)`` arrays.
    """
    cdef Py_ssize_t H = padded.shape[1] - 2 * w, W = padded.shape[2] - 2 * w
    cdef Py_ssize_t K = tpadded.shape[0]
    cdef Py_ssize_t r, i, j, k
    cdef int c, m, n, t, ntap = (2 * w + 1) * (2 * w + 1)
    cdef double s, kk, d, wq, gq, r2c, a1, a2, is2sq, is2c
    cdef const double *prow
    cdef const double *qrow
    cdef const double *tprow
    cdef const double *tqrow
    cdef double *wbuf
    cdef double *wsum
    cdef double *g
    cdef double *b1
    cdef double *b2
    cdef double *e
    cdef double *acc
    cdef double *lo
    cdef double *hi
    cdef double[:, ::1] sw = _spatial_table(sigma1, w)
    cdef double k2[3]
    cdef double inv_s1c[3]
    cdef double inv_s2sq[3]
    cdef double inv_s2c[3]
    for c in range(3):
        k2[c] = 1.0 / (2.0 * sigma2[c] * sigma2[c])
        inv_s1c[c] = 1.0 / (sigma1[c] * sigma1[c] * sigma1[c])
        inv_s2sq[c] = 1.0 / (sigma2[c] * sigma2[c])
        inv_s2c[c] = 1.0 / (sigma2[c] * sigma2[c] * sigma2[c])

    out_arr = np.empty((3, H, W), dtype=np.float64)
    tout_arr = np.empty((K, 3, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] tout = tout_arr

    with nogil, parallel(num_threads=num_threads):
        wbuf = <double *> malloc(ntap * W * sizeof(double))
        wsum = <double *> malloc(W * sizeof(double))
        g = <double *> malloc(W * sizeof(double))
        b1 = <double *> malloc(W * sizeof(double))
        b2 = <double *> malloc(W * sizeof(double))
        e = <double *> malloc(W * sizeof(double))
        acc = <double *> malloc(K * W * sizeof(double))
        lo = <double *> malloc(W * sizeof(double))
        hi = <double *> malloc(W * sizeof(double))
        for r in prange(3 * H, schedule="static"):
            c = <int> (r // H)
            i = r % H
            kk = k2[c]
            is2sq = inv_s2sq[c]
            is2c = inv_s2c[c]
            prow = &padded[c, i + w, w]
            for j in range(W):
                wsum[j] = 0.0
                g[j] = 0.0
                lo[j] = prow[j]
                hi[j] = prow[j]
            t = 0
            for m in range(-w, w + 1):
                for n in range(-w, w + 1):
                    s = sw[c, t]
                    qrow = &padded[c, i + w + m, w + n]
                    for j in range(W):
                        d = prow[j] - qrow[j]
                        wq = s * exp(-d * d * kk)
                        wbuf[t * W + j] = wq
                        wsum[j] = wsum[j] + wq
                        g[j] = g[j] + wq * qrow[j]
                        lo[j] = fmin(lo[j], qrow[j])
                        hi[j] = fmax(hi[j], qrow[j])
                    t = t + 1
            for j in range(W):
                g[j] = fmin(fmax(g[j] / wsum[j], lo[j]), hi[j])
                out[c, i, j] = g[j]
            for j in range(K * W):
                acc[j] = 0.0
            t = 0
            for m in range(-w, w + 1):
                for n in range(-w, w + 1):
                    qrow = &padded[c, i + w + m, w + n]
                    r2c = (m * m + n * n) * inv_s1c[c]
                    for j in range(W):
                        d = prow[j] - qrow[j]
                        gq = wbuf[t * W + j] * (qrow[j] - g[j])
                        b1[j] = gq * r2c
                        b2[j] = gq * d * d * is2c
                        e[j] = gq * d * is2sq
                    for k in range(K):
                        a1 = dsigma1[k, c]
                        a2 = dsigma2[k, c]
                        tprow = &tpadded[k, c, i + w, w]
                        tqrow = &tpadded[k, c, i + w + m, w + n]
                        for j in range(W):
                            acc[k * W + j] = acc[k * W + j] + wbuf[t * W + j] * tqrow[j] + (
                                a1 * b1[j] + a2 * b2[j] - e[j] * (tprow[j] - tqrow[j]))
                    t = t + 1
            for k in range(K):
                for j in range(W):
                    tout[k, c, i, j] = acc[k * W + j] / wsum[j]
        free(wbuf)
        free(wsum)
        free(g)
        free(b1)
        free(b2)
        free(e)
        free(acc)
        free(lo)
        free(hi)
    return out_arr, tout_arr
