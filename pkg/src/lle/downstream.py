"""Frozen differentiable downstream tasks.

Each task turns an enhanced image into a scalar loss against per-sample frozen
targets and, given the 8 pipeline tangents, returns the exact derivative of the
loss along each of them. Nothing here is ever updated by training; frozen
assets carry a digest that the harness re-checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .image import make_rng

LEAKY_SLOPE = 0.1


class ShapeMismatchError(ValueError):
    pass


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------


def heatmap_mse_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over the K keypoint maps of the summed squared difference.

    Both inputs are ``(K, H, W)``.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt, "heatmaps")
    if pred.ndim != 3 or pred.shape[0] < 1:
        raise ShapeMismatchError(f"heatmaps must be (K, H, W) with K >= 1, got {pred.shape}")
    return float(np.sum((pred - gt) ** 2) / pred.shape[0])


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img2d: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian blur of the last two axes, edge replication."""
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    pad = [(0, 0)] * (img2d.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img2d, pad, mode="edge")
    h, w = img2d.shape[-2:]
    rows = sum(k[i] * p[..., i : i + h, :] for i in range(len(k)))
    return sum(k[j] * rows[..., :, j : j + w] for j in range(len(k)))


DOG_SIGMA_INNER = 1.0
DOG_SIGMA_OUTER = 2.0


def dog_response(lum: np.ndarray) -> np.ndarray:
    """Unclipped difference-of-Gaussians response of one or more luminance maps."""
    return gaussian_blur(lum, DOG_SIGMA_INNER) - gaussian_blur(lum, DOG_SIGMA_OUTER)


def blob_detector(img: np.ndarray) -> np.ndarray:
    """Bright-blob heatmap (K=1): clipped DoG of the channel-mean luminance."""
    lum = np.asarray(img, dtype=np.float64).mean(axis=2)
    return np.maximum(dog_response(lum), 0.0)[None]


def render_heatmap(centers, shape, amplitudes=None, sigma: float = 2.0) -> np.ndarray:
    """Sum of isotropic Gaussians at ``(y, x)`` centers, returned as ``(1, H, W)``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    if amplitudes is None:
        amplitudes = [1.0] * len(centers)
    for (cy, cx), amp in zip(centers, amplitudes):
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    return out[None]


# ---------------------------------------------------------------------------
# frozen feature network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureNet:
    """Fixed conv -> leaky ReLU stages (weights ``(C_out, C_in, k, k)``)."""

    weights: tuple
    biases: tuple
    strides: tuple

    @classmethod
    def random(cls, seed: int = 0, channels=(8, 16), k: int = 3, stride: int = 2) -> "FeatureNet":
        rng = make_rng(seed)
        ws, bs, cin = [], [], 3
        for c in channels:
            bound = np.sqrt(3.0 / (cin * k * k))
            ws.append(rng.uniform(-bound, bound, size=(c, cin, k, k)))
            bs.append(rng.uniform(-0.05, 0.05, size=c))
            cin = c
        return cls(tuple(ws), tuple(bs), (stride,) * len(channels))

    def __post_init__(self):
        for a in (*self.weights, *self.biases):
            a.setflags(write=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (*self.weights, *self.biases):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr(self.strides).encode())
        return h.hexdigest()

    def forward(self, img: np.ndarray, tangents: np.ndarray | None = None):
        """Features of ``img`` and, if given, the pushed-forward tangents."""
        x = np.asarray(img, dtype=np.float64)[None]
        t = None if tangents is None else np.asarray(tangents, dtype=np.float64)
        for w, b, s in zip(self.weights, self.biases, self.strides):
            p = w.shape[2] // 2
            x, _ = nn.conv2d(x, w, b, s, p)
            if t is not None:
                t, _ = nn.conv2d(t, w, None, s, p)
                t = t * nn.leaky_relu_grad(x, LEAKY_SLOPE)
            x = nn.leaky_relu(x, LEAKY_SLOPE)
        return x[0], t


# ---------------------------------------------------------------------------
# losses with directional derivatives
# ---------------------------------------------------------------------------


def ref_mse_loss(img: np.ndarray, ref: np.ndarray, tangents: np.ndarray | None = None):
    """Pixel MSE against ``ref``; derivative along each tangent if given."""
    _same_shape(img, ref, "ref_mse")
    diff = img - ref
    loss = float(np.mean(diff * diff))
    if tangents is None:
        return loss, None
    _same_shape(tangents[0], img, "ref_mse tangents")
    d = 2.0 / diff.size * np.tensordot(tangents, diff, axes=diff.ndim)
    return loss, d


def feature_mse_loss(img, ref, net: FeatureNet, tangents=None, ref_features=None):
    _same_shape(img, ref, "feature_mse")
    fi, ft = net.forward(img, tangents)
    fr = net.forward(ref)[0] if ref_features is None else ref_features
    diff = fi - fr
    loss = float(np.mean(diff * diff))
    if tangents is None:
        return loss, None
    return loss, 2.0 / diff.size * np.tensordot(ft, diff, axes=diff.ndim)


def blob_heatmap_loss(img, gt_heatmap, tangents=None):
    lum = img.mean(axis=2)
    pre = dog_response(lum)
    pred = np.maximum(pre, 0.0)[None]
    loss = heatmap_mse_loss(pred, gt_heatmap)
    if tangents is None:
        return loss, None
    k = gt_heatmap.shape[0]
    dpred = dog_response(tangents.mean(axis=3)) * (pre > 0)
    diff = (pred - gt_heatmap).sum(axis=0)
    return loss, 2.0 / k * np.tensordot(dpred, diff, axes=2)


# ---------------------------------------------------------------------------
# pluggable task objects used by the harness
# ---------------------------------------------------------------------------


class Task:
    """Frozen scalar loss over (enhanced image, per-sample target)."""

    name = "task"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def config(self) -> dict:
        return {"task": self.name, "seed": self.seed}

    def target(self, bright: np.ndarray, meta: dict | None = None):
        raise NotImplementedError

    def loss(self, img, target, tangents=None):
        raise NotImplementedError

    def digest(self) -> str:
        return hashlib.sha256(repr(self.config()).encode()).hexdigest()

    def verify(self, expected: str) -> None:
        if self.digest() != expected:
            raise RuntimeError(f"frozen assets of {self.name} changed")


class RefMSETask(Task):
    name = "ref_mse"

    def target(self, bright, meta=None):
        return bright

    def loss(self, img, target, tangents=None):
        return ref_mse_loss(img, target, tangents)


class FeatureMSETask(Task):
    name = "feature_mse"

    def __init__(self, seed: int = 0, net: FeatureNet | None = None):
        super().__init__(seed)
        self.net = net or FeatureNet.random(seed)

    def target(self, bright, meta=None):
        return bright, self.net.forward(bright)[0]

    def loss(self, img, target, tangents=None):
        ref, feats = target
        return feature_mse_loss(img, ref, self.net, tangents, ref_features=feats)

    def digest(self) -> str:
        return self.net.digest()


class BlobHeatmapTask(Task):
    """Ground truth: sigma=2 Gaussians at the known blob centers, each scaled to
    the detector's response on the bright image at that center."""

    name = "blob_heatmap"
    gt_sigma = 2.0

    def target(self, bright, meta=None):
        centers = (meta or {}).get("blobs", [])
        resp = blob_detector(bright)[0]
        amps = [resp[int(round(cy)), int(round(cx))] for cy, cx in centers]
        return render_heatmap(centers, bright.shape[:2], amps, self.gt_sigma)

    def loss(self, img, target, tangents=None):
        return blob_heatmap_loss(img, target, tangents)


TASKS = {cls.name: cls for cls in (RefMSETask, FeatureMSETask, BlobHeatmapTask)}


def make_task(config: dict | str | None = None) -> Task:
    """Build a task from ``{"task": "ref_mse" | "feature_mse" | "blob_heatmap", "seed": int}``."""
    if config is None:
        config = {}
    if isinstance(config, str):
        config = {"task": config}
    name = config.get("task", "ref_mse")
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name](seed=int(config.get("seed", 0)))
