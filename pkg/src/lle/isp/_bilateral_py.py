"""Pure-numpy bilateral kernels; same contract as the compiled ``_bilateral``.

Vectorized over pixels, looping over window taps in the same order as the
compiled core (row offset outer, column offset inner). Outputs are clamped
to the window range to remove rounding overshoot, as in the compiled core.
"""

import numpy as np


def _taps(w):
    for m in range(-w, w + 1):
        for n in range(-w, w + 1):
            yield m, n


def _shift(padded, m, n, w, H, W):
    return padded[w + m : w + m + H, w + n : w + n + W]


def bilateral_forward(img, sigma1, sigma2, w, num_threads=1):
    H, W, _ = img.shape
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    k2 = 1.0 / (2.0 * np.asarray(sigma2, dtype=np.float64) ** 2)
    padded = np.pad(img, ((w, w), (w, w), (0, 0)), mode="edge")
    wsum = np.zeros_like(img)
    nsum = np.zeros_like(img)
    lo, hi = img.copy(), img.copy()
    for m, n in _taps(w):
        fq = _shift(padded, m, n, w, H, W)
        d = img - fq
        wq = np.exp(-(m * m + n * n) / (2.0 * sigma1 * sigma1)) * np.exp(-d * d * k2)
        wsum += wq
        nsum += wq * fq
        np.minimum(lo, fq, out=lo)
        np.maximum(hi, fq, out=hi)
    return np.clip(nsum / wsum, lo, hi)


def bilateral_jvp(img, tangents, sigma1, sigma2, dsigma1, dsigma2, w, num_threads=1):
    H, W, _ = img.shape
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    k2 = 1.0 / (2.0 * sigma2**2)
    # (K, 1, 1, 3) so they broadcast against tangent stacks
    ds1 = np.asarray(dsigma1, dtype=np.float64)[:, None, None, :]
    ds2 = np.asarray(dsigma2, dtype=np.float64)[:, None, None, :]
    padded = np.pad(img, ((w, w), (w, w), (0, 0)), mode="edge")
    tpadded = np.pad(tangents, ((0, 0), (w, w), (w, w), (0, 0)), mode="edge")

    weights = []
    wsum = np.zeros_like(img)
    nsum = np.zeros_like(img)
    lo, hi = img.copy(), img.copy()
    for m, n in _taps(w):
        fq = _shift(padded, m, n, w, H, W)
        d = img - fq
        wq = np.exp(-(m * m + n * n) / (2.0 * sigma1 * sigma1)) * np.exp(-d * d * k2)
        weights.append(wq)
        wsum += wq
        nsum += wq * fq
        np.minimum(lo, fq, out=lo)
        np.maximum(hi, fq, out=hi)
    g = np.clip(nsum / wsum, lo, hi)

    acc = np.zeros_like(tangents)
    for (m, n), wq in zip(_taps(w), weights):
        fq = _shift(padded, m, n, w, H, W)
        tq = tpadded[:, w + m : w + m + H, w + n : w + n + W]
        d = img - fq
        gq = wq * (fq - g)
        acc += wq * tq + gq * (
            (m * m + n * n) / sigma1**3 * ds1
            + d * d / sigma2**3 * ds2
            - d * (tangents - tq) / sigma2**2
        )
    return g, acc / wsum
