"""Bilateral kernel backend selection.

The compiled OpenMP core is used when it imports; otherwise (or when
``LLE_FORCE_PYTHON=1``) the numpy implementation takes over. Both expose the
same two functions and agree to floating-point rounding.
"""

from __future__ import annotations

import os

import numpy as np

from . import _bilateral_py

try:
    if os.environ.get("LLE_FORCE_PYTHON"):
        raise ImportError("forced pure-python backend")
    from . import _bilateral as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Thread count for the compiled kernels. Output never depends on it."""
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def _pick(backend):
    backend = backend or BACKEND
    if backend == "cython" and _compiled is None:
        raise RuntimeError("compiled bilateral core is not available")
    if backend not in ("cython", "python"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def _planar(img, w):
    return np.ascontiguousarray(np.pad(img, ((w, w), (w, w), (0, 0)), mode="edge").transpose(2, 0, 1))


def bilateral_kernel(img, sigma1, sigma2, w, *, num_threads=None, backend=None):
    sigma1 = np.array(sigma1, dtype=np.float64)
    sigma2 = np.array(sigma2, dtype=np.float64)
    if _pick(backend) == "python":
        return _bilateral_py.bilateral_forward(img, sigma1, sigma2, w)
    out = _compiled.bilateral_forward_planar(_planar(img, w), sigma1, sigma2, int(w),
                                             num_threads or _num_threads)
    return np.ascontiguousarray(out.transpose(1, 2, 0))


def bilateral_jvp_kernel(img, tangents, sigma1, sigma2, dsigma1, dsigma2, w, *,
                         num_threads=None, backend=None):
    sigma1 = np.array(sigma1, dtype=np.float64)
    sigma2 = np.array(sigma2, dtype=np.float64)
    dsigma1 = np.array(dsigma1, dtype=np.float64)
    dsigma2 = np.array(dsigma2, dtype=np.float64)
    if _pick(backend) == "python":
        return _bilateral_py.bilateral_jvp(img, tangents, sigma1, sigma2, dsigma1, dsigma2, w)
    tpad = np.ascontiguousarray(
        np.pad(tangents, ((0, 0), (w, w), (w, w), (0, 0)), mode="edge").transpose(0, 3, 1, 2))
    out, tout = _compiled.bilateral_jvp_planar(_planar(img, w), tpad, sigma1, sigma2,
                                               dsigma1, dsigma2, int(w), num_threads or _num_threads)
    return (np.ascontiguousarray(out.transpose(1, 2, 0)),
            np.ascontiguousarray(tout.transpose(0, 2, 3, 1)))
