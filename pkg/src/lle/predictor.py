"""Fully convolutional parameter predictor: 6 conv layers -> global average pool -> 8 raw values.

Default layer table (kernel, stride, out channels)::

    L1 3 2  16  +BN  leaky      L4 3 2 128       leaky
    L2 3 2  32  +BN  leaky      L5 3 2 256       leaky  +Dropout(0.5)
    L3 3 2  64  +BN  leaky      L6 3 2   8       identity

All convolutions use zero padding ``k // 2``. Trainable parameter count is
:data:`DEFAULT_PARAM_COUNT` (conv weights + biases + BN scale/shift).

Initialization: weights ``U(-b, b)`` with ``b = gain * sqrt(3 / fan_in)``,
``gain = sqrt(2 / (1 + slope**2))`` for leaky layers and 1 for the last layer,
drawn layer by layer from one PCG64 stream; biases and BN shifts start at 0,
BN scales at 1, running mean 0, running variance 1.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .image import make_rng

CHECKPOINT_FORMAT = "lle-predictor"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    k: int
    s: int
    c: int
    bn: bool = False
    act: bool = True  # leaky ReLU after (BN then) conv


@dataclass(frozen=True)
class PredictorArch:
    layers: tuple[LayerSpec, ...]
    dropout_after: int | None = 5  # 1-based layer index
    dropout_rate: float = 0.5
    in_channels: int = 3
    input_size: int = 256
    out_dim: int = 8
    leaky_slope: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        if self.layers[-1].c != self.out_dim:
            raise ValueError("last layer must have out_dim channels")

    def param_count(self) -> int:
        total, cin = 0, self.in_channels
        for l in self.layers:
            total += l.k * l.k * cin * l.c + l.c
            if l.bn:
                total += 2 * l.c
            cin = l.c
        return total

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorArch":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)


DEFAULT_ARCH = PredictorArch(layers=(
    LayerSpec(3, 2, 16, bn=True),
    LayerSpec(3, 2, 32, bn=True),
    LayerSpec(3, 2, 64, bn=True),
    LayerSpec(3, 2, 128),
    LayerSpec(3, 2, 256),
    LayerSpec(3, 2, 8, act=False),
))

# 448+32 + 4640+64 + 18496+128 + 73856 + 295168 + 18440
DEFAULT_PARAM_COUNT = 411_272


@dataclass
class PredictorModel:
    arch: PredictorArch
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    training: bool = True

    def train(self) -> "PredictorModel":
        self.training = True
        return self

    def eval(self) -> "PredictorModel":
        self.training = False
        return self

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "PredictorModel":
        return PredictorModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()},
                              self.seed, self.step, self.training)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()


def init_predictor(arch: PredictorArch = DEFAULT_ARCH, seed: int = 0) -> PredictorModel:
    rng = make_rng(seed)
    params, buffers = {}, {}
    cin = arch.in_channels
    for i, l in enumerate(arch.layers, 1):
        fan_in = cin * l.k * l.k
        gain = np.sqrt(2.0 / (1.0 + arch.leaky_slope**2)) if l.act else 1.0
        bound = gain * np.sqrt(3.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, size=(l.c, cin, l.k, l.k))
        params[f"conv{i}.bias"] = np.zeros(l.c)
        if l.bn:
            params[f"bn{i}.scale"] = np.ones(l.c)
            params[f"bn{i}.shift"] = np.zeros(l.c)
            buffers[f"bn{i}.running_mean"] = np.zeros(l.c)
            buffers[f"bn{i}.running_var"] = np.ones(l.c)
        cin = l.c
    return PredictorModel(arch, params, buffers, seed=seed)


@dataclass
class ForwardCache:
    """Activations recorded by a forward pass, consumed by :func:`backward`."""

    training: bool
    dropout_seed: int | None
    layers: list = field(default_factory=list)
    final_shape: tuple = ()


def _as_batch(x, arch):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != arch.in_channels:
        raise ValueError(f"expected (N, H, W, {arch.in_channels}) input, got {x.shape}")
    if arch.input_size and (x.shape[1] != arch.input_size or x.shape[2] != arch.input_size):
        raise ValueError(f"predictor expects {arch.input_size}x{arch.input_size} crops, got {x.shape[1]}x{x.shape[2]}")
    return x, single


def predict(model: PredictorModel, x, dropout_seed: int | None = None):
    """Forward pass. ``x`` is one ``(H, W, 3)`` crop or a ``(N, H, W, 3)`` batch.

    Returns ``(raw, cache)`` with ``raw`` shaped ``(8,)`` or ``(N, 8)``. In train
    mode BN uses batch statistics (and updates the running ones) and dropout
    draws its mask from ``dropout_seed``; in eval mode dropout is skipped.
    """
    arch = model.arch
    x, single = _as_batch(x, arch)
    training = model.training
    if training and arch.dropout_after is not None and dropout_seed is None:
        raise ValueError("train-mode predict needs a dropout_seed")
    cache = ForwardCache(training, dropout_seed)
    h = x
    for i, l in enumerate(arch.layers, 1):
        rec = {"x_shape": h.shape}
        p = l.k // 2
        h, rec["cols"] = nn.conv2d(h, model.params[f"conv{i}.weight"], model.params[f"conv{i}.bias"], l.s, p)
        if l.bn:
            scale, shift = model.params[f"bn{i}.scale"], model.params[f"bn{i}.shift"]
            if training:
                h, (xhat, inv_std, mean, var) = nn.batchnorm_train(h, scale, shift, arch.bn_eps)
                rec["bn"] = (xhat, inv_std)
                m = h.shape[0] * h.shape[1] * h.shape[2]
                unbiased = var * m / max(m - 1, 1)
                mom = arch.bn_momentum
                rm, rv = model.buffers[f"bn{i}.running_mean"], model.buffers[f"bn{i}.running_var"]
                rm *= 1 - mom
                rm += mom * mean
                rv *= 1 - mom
                rv += mom * unbiased
            else:
                rm, rv = model.buffers[f"bn{i}.running_mean"], model.buffers[f"bn{i}.running_var"]
                h = (h - rm) / np.sqrt(rv + arch.bn_eps) * scale + shift
        if l.act:
            rec["pre_act"] = h
            h = nn.leaky_relu(h, arch.leaky_slope)
        if i == arch.dropout_after and training and arch.dropout_rate > 0:
            keep = 1.0 - arch.dropout_rate
            mask = (make_rng(dropout_seed).random(h.shape) < keep) / keep
            rec["mask"] = mask
            h = h * mask
        cache.layers.append(rec)
    cache.final_shape = h.shape
    raw = h.mean(axis=(1, 2))
    return (raw[0] if single else raw), cache


def backward(model: PredictorModel, cache: ForwardCache, grad_raw) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(raw * grad_raw)`` for every trainable tensor."""
    if not cache.training:
        raise ValueError("backward needs a cache from a train-mode predict")
    arch = model.arch
    if len(cache.layers) != len(arch.layers):
        raise ValueError("cache does not match model architecture")
    n, ho, wo, c = cache.final_shape
    g = np.asarray(grad_raw, dtype=np.float64).reshape(n, c)
    dh = np.broadcast_to(g[:, None, None, :] / (ho * wo), cache.final_shape).copy()
    grads = {}
    for i in range(len(arch.layers), 0, -1):
        l, rec = arch.layers[i - 1], cache.layers[i - 1]
        if "mask" in rec:
            dh = dh * rec["mask"]
        if l.act:
            dh = dh * nn.leaky_relu_grad(rec["pre_act"], arch.leaky_slope)
        if l.bn:
            xhat, inv_std = rec["bn"]
            dh, grads[f"bn{i}.scale"], grads[f"bn{i}.shift"] = nn.batchnorm_backward(
                dh, model.params[f"bn{i}.scale"], xhat, inv_std)
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = nn.conv2d_backward(
            dh, rec["cols"], rec["x_shape"], model.params[f"conv{i}.weight"], l.s, l.k // 2, need_dx=i > 1)
    return {k: grads[k] for k in model.params}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: PredictorModel, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()}, 0, lr, beta1, beta2, eps)


def adam_step(model: PredictorModel, state: AdamState, grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update, in place. Returns ``(model, state)``."""
    for name, g in grads.items():
        if name not in model.params or g.shape != model.params[name].shape:
            raise ValueError(f"gradient {name!r} does not match model parameters")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in model.params:
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        model.params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.step = t
    return model, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).astype(np.float64)


def checkpoint_bytes(model: PredictorModel) -> bytes:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "step": model.step,
        "tensors": [dict(name=k, **_pack(v)) for k, v in model.params.items()],
        "buffers": [dict(name=k, **_pack(v)) for k, v in model.buffers.items()],
    }
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(model: PredictorModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> PredictorModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: unreadable checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    arch = PredictorArch.from_dict(doc["arch"])
    params = {t["name"]: _unpack(t) for t in doc["tensors"]}
    buffers = {t["name"]: _unpack(t) for t in doc["buffers"]}
    ref = init_predictor(arch, 0)
    for name, p in ref.params.items():
        if name not in params or params[name].shape != p.shape:
            raise ValueError(f"{path}: tensor {name} missing or mis-shaped")
    model = PredictorModel(arch, params, buffers, seed=doc["seed"], step=doc["step"])
    return model.eval()
