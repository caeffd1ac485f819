"""Differentiable exposure / gamma / bilateral operators and their composition.

The predictor emits 8 unconstrained raw values. :func:`squash` maps them onto
bounded parameters, and :func:`pipeline_jvp` carries one tangent image per raw
value through every operator, so the downstream loss gradient w.r.t. the raw
vector is a plain inner product with those tangents.

Raw / parameter index layout::

    0 exposure gain a      2..4 spatial sigma (R, G, B)
    1 gamma exponent       5..7 range sigma (R, G, B)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..image import as_image
from .backend import bilateral_jvp_kernel, bilateral_kernel

N_PARAMS = 8
GAMMA_EPS = 1e-6

PARAM_NAMES = ("a", "gamma", "sigma1_r", "sigma1_g", "sigma1_b", "sigma2_r", "sigma2_g", "sigma2_b")
LOWER = np.array([1.0, 0.2, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01])
UPPER = np.array([256.0, 5.0, 5.0, 5.0, 5.0, 1.0, 1.0, 1.0])
_LOG_SPAN = np.log(UPPER / LOWER)


class DomainError(ValueError):
    """A sample fell outside an operator's domain (e.g. negative gamma base)."""


@dataclass(frozen=True)
class LLEParams:
    a: float
    gamma: float
    sigma1: tuple[float, float, float]
    sigma2: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "sigma1", tuple(float(s) for s in np.broadcast_to(self.sigma1, 3)))
        object.__setattr__(self, "sigma2", tuple(float(s) for s in np.broadcast_to(self.sigma2, 3)))
        v = self.to_vector()
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError(f"parameters must be finite and positive: {v}")

    @classmethod
    def from_vector(cls, v) -> "LLEParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {v.shape}")
        return cls(v[0], v[1], tuple(v[2:5]), tuple(v[5:8]))

    @classmethod
    def identity(cls) -> "LLEParams":
        """Near-identity setting: unit gain and gamma, smallest spatial sigma."""
        return cls(1.0, 1.0, (LOWER[2],) * 3, (LOWER[5],) * 3)

    def to_vector(self) -> np.ndarray:
        return np.array([self.a, self.gamma, *self.sigma1, *self.sigma2], dtype=np.float64)

    def in_bounds(self, rtol: float = 1e-12) -> bool:
        v = self.to_vector()
        return bool(np.all(v >= LOWER * (1 - rtol)) and np.all(v <= UPPER * (1 + rtol)))

    def to_dict(self) -> dict:
        return {"a": self.a, "gamma": self.gamma, "sigma1": list(self.sigma1), "sigma2": list(self.sigma2)}

    @classmethod
    def from_dict(cls, d: dict) -> "LLEParams":
        return cls(d["a"], d["gamma"], d["sigma1"], d["sigma2"])


OPERATORS = {"E": "exposure", "G": "gamma", "S": "smoothing"}


@dataclass(frozen=True)
class PipelineSpec:
    """Operator order (subset of E/G/S, no repeats) and bilateral half-width."""

    order: tuple[str, ...] = ("E", "G", "S")
    w: int = 2

    def __post_init__(self):
        order = tuple(str(o).upper() for o in self.order)
        object.__setattr__(self, "order", order)
        if not order:
            raise ValueError("pipeline needs at least one operator")
        if any(o not in OPERATORS for o in order):
            raise ValueError(f"unknown operator in {order}; use E, G, S")
        if len(set(order)) != len(order):
            raise ValueError(f"duplicate operator in {order}")
        if int(self.w) < 1:
            raise ValueError("window half-width must be >= 1")
        object.__setattr__(self, "w", int(self.w))

    @classmethod
    def parse(cls, text: str, w: int = 2) -> "PipelineSpec":
        """``"EGS"`` or ``"E,G,S"`` -> spec."""
        return cls(tuple(c for c in text.upper() if c.isalpha()), w)

    @property
    def name(self) -> str:
        return "".join(self.order)

    def to_json(self) -> dict:
        return {"order": list(self.order), "w": self.w}

    @classmethod
    def from_json(cls, d: dict) -> "PipelineSpec":
        return cls(tuple(d["order"]), d.get("w", 2))


@dataclass
class TangentBundle:
    value: np.ndarray
    tangents: np.ndarray = field(repr=False)  # (8, H, W, 3), d value / d raw_k


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def exposure(img: np.ndarray, a: float) -> np.ndarray:
    if not np.isfinite(a) or a <= 0:
        raise ValueError(f"exposure gain must be finite and positive, got {a}")
    return img * a


def gamma(img: np.ndarray, g: float) -> np.ndarray:
    """``max(img, 1e-6) ** g``; negative samples are an upstream bug."""
    if not np.isfinite(g) or g <= 0:
        raise ValueError(f"gamma must be finite and positive, got {g}")
    if np.any(img < 0):
        raise DomainError("gamma received negative samples")
    return np.maximum(img, GAMMA_EPS) ** g


def _check_sigmas(sigma1, sigma2, w):
    s1 = np.broadcast_to(np.asarray(sigma1, dtype=np.float64), (3,))
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (3,))
    if np.any(~np.isfinite(s1)) or np.any(s1 <= 0) or np.any(~np.isfinite(s2)) or np.any(s2 <= 0):
        raise ValueError("bilateral sigmas must be finite and positive")
    if int(w) < 1:
        raise ValueError("window half-width must be >= 1")
    return s1, s2


def bilateral(img: np.ndarray, sigma1, sigma2, w: int = 2, *, num_threads=None, backend=None) -> np.ndarray:
    """Per-channel bilateral filter over a ``(2w+1)^2`` edge-replicated window.

    ``sigma1`` / ``sigma2`` are the spatial / range standard deviations, one per
    RGB channel (scalars broadcast).
    """
    s1, s2 = _check_sigmas(sigma1, sigma2, w)
    return bilateral_kernel(as_image(img), s1, s2, int(w), num_threads=num_threads, backend=backend)


# ---------------------------------------------------------------------------
# parameter squashing
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def squash_vector(raw) -> tuple[np.ndarray, np.ndarray]:
    """Log-space sigmoid onto the parameter bounds, with its elementwise derivative."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (N_PARAMS,) or not np.all(np.isfinite(raw)):
        raise ValueError(f"raw parameters must be {N_PARAMS} finite values")
    s = _sigmoid(raw)
    theta = np.clip(LOWER * np.exp(s * _LOG_SPAN), LOWER, UPPER)
    return theta, theta * _LOG_SPAN * s * (1.0 - s)


def squash(raw) -> tuple[LLEParams, np.ndarray]:
    theta, dtheta = squash_vector(raw)
    return LLEParams.from_vector(theta), dtheta


def unsquash(params: LLEParams) -> np.ndarray:
    """Inverse of :func:`squash` (bounds map to +-inf)."""
    s = np.log(params.to_vector() / LOWER) / _LOG_SPAN
    with np.errstate(divide="ignore"):
        return np.log(s) - np.log1p(-s)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def pipeline_apply(img: np.ndarray, params: LLEParams, spec: PipelineSpec = PipelineSpec(), *,
                   num_threads=None) -> np.ndarray:
    v = as_image(img)
    for op in spec.order:
        if op == "E":
            v = exposure(v, params.a)
        elif op == "G":
            v = gamma(v, params.gamma)
        else:
            v = bilateral(v, params.sigma1, params.sigma2, spec.w, num_threads=num_threads)
    return v


def pipeline_jvp(img: np.ndarray, raw, spec: PipelineSpec = PipelineSpec(), *, num_threads=None) -> TangentBundle:
    """Pipeline output plus its exact derivative along each of the 8 raw inputs."""
    params, dtheta = squash(raw)
    v = as_image(img)
    t = np.zeros((N_PARAMS,) + v.shape)
    for op in spec.order:
        if op == "E":
            t = t * params.a
            t[0] += v * dtheta[0]
            v = exposure(v, params.a)
        elif op == "G":
            out = gamma(v, params.gamma)
            base = np.maximum(v, GAMMA_EPS)
            # the floor is constant below eps, so input tangents die there
            slope = np.where(v > GAMMA_EPS, params.gamma * out / base, 0.0)
            t = t * slope
            t[1] += out * np.log(base) * dtheta[1]
            v = out
        else:
            ds1 = np.zeros((N_PARAMS, 3))
            ds2 = np.zeros((N_PARAMS, 3))
            for c in range(3):
                ds1[2 + c, c] = dtheta[2 + c]
                ds2[5 + c, c] = dtheta[5 + c]
            _, t = bilateral_jvp_kernel(v, t, params.sigma1, params.sigma2, ds1, ds2, spec.w,
                                        num_threads=num_threads)
            # value via the plain forward kernel so it matches pipeline_apply bit for bit
            v = bilateral(v, params.sigma1, params.sigma2, spec.w, num_threads=num_threads)
    return TangentBundle(v, t)
