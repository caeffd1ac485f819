"""Training loop, per-image grid-search oracle, evaluation reports and ablations.

Per-sample randomness (crop offsets, dropout masks) is keyed on
``SeedSequence([seed, epoch, index])`` so a run replays exactly from its seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import permutations
from pathlib import Path

import numpy as np

from .data import Sample, load_dataset
from .downstream import Task, make_task
from .image import center_crop, random_crop, to_bytes
from .isp import LLEParams, PipelineSpec, pipeline_apply, pipeline_jvp, squash
from .isp.ops import LOWER, UPPER, bilateral, exposure, gamma
from .predictor import (
    DEFAULT_ARCH,
    AdamState,
    PredictorArch,
    PredictorModel,
    adam_step,
    backward,
    init_predictor,
    predict,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def fmt(x: float) -> str:
    """Fixed 6-significant-digit float formatting used in every report."""
    return f"{x:.6g}"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    crop_size: int = 256
    seed: int = 0
    spec: PipelineSpec = field(default_factory=PipelineSpec)
    task: dict = field(default_factory=lambda: {"task": "ref_mse", "seed": 0})
    train_data: str | None = None
    test_data: str | None = None
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.spec, dict):
            self.spec = PipelineSpec.from_json(self.spec)
        elif isinstance(self.spec, str):
            self.spec = PipelineSpec.parse(self.spec)
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.crop_size < 1:
            raise ValueError("invalid training configuration")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_json()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _samples(data) -> list[Sample]:
    if data is None:
        raise ValueError("no dataset given")
    if isinstance(data, (str, Path)):
        return load_dataset(data)
    return list(data)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(cfg: TrainConfig, samples=None, task: Task | None = None, arch: PredictorArch = DEFAULT_ARCH,
          progress=None) -> tuple[PredictorModel, list[dict]]:
    """Fit the predictor end to end through the frozen task loss.

    Per sample: random crop -> predict raw -> pipeline JVP on the full dark
    image -> task loss and its raw-parameter gradient. The batch gradient is
    the mean over the batch in dataset order, followed by one Adam step.
    """
    samples = _samples(samples if samples is not None else cfg.train_data)
    task = task or make_task(cfg.task)
    frozen = task.digest()
    targets = [task.target(s.bright, s.meta) for s in samples]
    model = init_predictor(arch, cfg.seed).train()
    opt = AdamState.for_model(model, lr=cfg.lr)
    history = []
    if not samples:
        return model, history
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for start in range(0, len(samples), cfg.batch_size):
            idx = range(start, min(start + cfg.batch_size, len(samples)))
            crops = np.stack([random_crop(samples[i].dark, cfg.crop_size, derive_seed(cfg.seed, epoch, i))
                              for i in idx])
            raw, cache = predict(model, crops, dropout_seed=derive_seed(cfg.seed, epoch, start, 1))
            grad_raw = np.zeros_like(raw)
            for j, i in enumerate(idx):
                bundle = pipeline_jvp(samples[i].dark, raw[j], cfg.spec, num_threads=cfg.threads)
                loss, dloss = task.loss(bundle.value, targets[i], bundle.tangents)
                if not (math.isfinite(loss) and np.all(np.isfinite(dloss))):
                    params = squash(raw[j])[0] if np.all(np.isfinite(raw[j])) else raw[j]
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, image {samples[i].name!r}, params {params}")
                grad_raw[j] = dloss / len(idx)
                epoch_losses.append(loss)
            grads = backward(model, cache, grad_raw)
            adam_step(model, opt, grads)
        rec = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "step": opt.step}
        history.append(rec)
        log.info("epoch %d  train loss %s", epoch, fmt(rec["train_loss"]))
        if progress:
            progress(rec)
    task.verify(frozen)
    return model.eval(), history


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Per-parameter value lists; sigmas are tied across the three channels."""

    a: tuple = tuple(2.0 ** np.arange(9))
    gamma: tuple = tuple(5.0 ** np.linspace(-1, 1, 7))
    sigma1: tuple = tuple(np.geomspace(LOWER[2], UPPER[2], 5))
    sigma2: tuple = tuple(np.geomspace(LOWER[5], UPPER[5], 5))

    def __post_init__(self):
        for name, lo, hi in (("a", LOWER[0], UPPER[0]), ("gamma", LOWER[1], UPPER[1]),
                             ("sigma1", LOWER[2], UPPER[2]), ("sigma2", LOWER[5], UPPER[5])):
            vals = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ValueError(f"grid for {name} is empty")
            if any(v < lo * (1 - 1e-12) or v > hi * (1 + 1e-12) for v in vals):
                raise ValueError(f"grid for {name} leaves the bounds [{lo}, {hi}]")
        if 1.0 not in self.a or 1.0 not in self.gamma or min(self.sigma1) != LOWER[2]:
            raise ValueError("grid must contain the identity point (a=1, gamma=1, minimal sigma1)")

    @property
    def size(self) -> int:
        return len(self.a) * len(self.gamma) * len(self.sigma1) * len(self.sigma2)

    def identity_index(self) -> tuple[int, int, int, int]:
        return (self.a.index(1.0), self.gamma.index(1.0), self.sigma1.index(min(self.sigma1)), 0)

    @classmethod
    def identity_only(cls) -> "GridSpec":
        return cls((1.0,), (1.0,), (LOWER[2],), (LOWER[5],))

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("a", "gamma", "sigma1", "sigma2")}


def identity_params() -> LLEParams:
    return LLEParams.identity()


def grid_losses(img, target, task: Task, grid: GridSpec = GridSpec(), spec: PipelineSpec = PipelineSpec(),
                num_threads=None) -> np.ndarray:
    """Loss at every grid point as an array indexed ``[a, gamma, sigma1, sigma2]``.

    Operators missing from ``spec`` contribute a single index (their first grid
    value); prefixes of the operator chain are shared between grid points.
    """
    shape = (len(grid.a) if "E" in spec.order else 1,
             len(grid.gamma) if "G" in spec.order else 1,
             len(grid.sigma1) if "S" in spec.order else 1,
             len(grid.sigma2) if "S" in spec.order else 1)
    losses = np.empty(shape)
    order = spec.order

    def run(v, depth, idx):
        if depth == len(order):
            losses[idx] = task.loss(v, target)[0]
            return
        op = order[depth]
        if op == "E":
            for i, a in enumerate(grid.a):
                run(exposure(v, a), depth + 1, (i,) + idx[1:])
        elif op == "G":
            for i, g in enumerate(grid.gamma):
                run(gamma(v, g), depth + 1, idx[:1] + (i,) + idx[2:])
        else:
            for i, s1 in enumerate(grid.sigma1):
                for j, s2 in enumerate(grid.sigma2):
                    run(bilateral(v, s1, s2, spec.w, num_threads=num_threads), depth + 1, idx[:2] + (i, j))

    run(np.asarray(img, dtype=np.float64), 0, (0, 0, 0, 0))
    return losses


def _grid_params(grid, idx) -> LLEParams:
    ia, ig, i1, i2 = idx
    return LLEParams(grid.a[ia], grid.gamma[ig], (grid.sigma1[i1],) * 3, (grid.sigma2[i2],) * 3)


def grid_search(img, target, task: Task, grid: GridSpec = GridSpec(), spec: PipelineSpec = PipelineSpec(),
                num_threads=None) -> tuple[LLEParams, float]:
    """Exhaustive argmin; ties go to the earliest point in (a, gamma, sigma1, sigma2) order."""
    losses = grid_losses(img, target, task, grid, spec, num_threads)
    flat = int(np.argmin(losses))
    idx = np.unravel_index(flat, losses.shape)
    params = _grid_params(grid, idx)
    # absent operators take identity values, not just the first grid entry
    ident = LLEParams.identity()
    params = LLEParams(params.a if "E" in spec.order else ident.a,
                       params.gamma if "G" in spec.order else ident.gamma,
                       params.sigma1 if "S" in spec.order else ident.sigma1,
                       params.sigma2 if "S" in spec.order else ident.sigma2)
    return params, float(losses.flat[flat])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def psnr(img, ref) -> float:
    """PSNR (dB) of the 8-bit export of ``img`` against ``ref``."""
    out = to_bytes(img).astype(np.float64) / 255.0
    mse = float(np.mean((out - ref) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class RunReport:
    images: list[dict]
    aggregate: dict
    meta: dict

    def to_json(self) -> str:
        return json.dumps({"images": self.images, "aggregate": self.aggregate, "meta": self.meta},
                          indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        cols = ["loss", "loss_center", "identity_loss", "oracle_loss", "psnr", "identity_psnr"]
        cols = [c for c in cols if c in self.aggregate]
        rows = [[im["name"]] + [fmt(im[c]) for c in cols] for im in self.images]
        rows.append(["MEAN"] + [fmt(self.aggregate[c]) for c in cols])
        return format_table(["image"] + cols, rows)


def format_table(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(widths[i]) if i == 0 else str(c).rjust(widths[i])
                       for i, c in enumerate(r)) for r in [header] + rows]
    return "\n".join(lines) + "\n"


def predict_params(model: PredictorModel, img, crop_size: int = 256, seed: int | None = None) -> LLEParams:
    """Eval-mode parameters for ``img``: center crop, or a seeded random crop."""
    crop = center_crop(img, crop_size) if seed is None else random_crop(img, crop_size, seed)
    was_training = model.training
    model.eval()
    try:
        raw, _ = predict(model, crop)
    finally:
        model.training = was_training
    return squash(raw)[0]


def evaluate(model: PredictorModel | None, samples, task: Task | dict | None = None,
             spec: PipelineSpec = PipelineSpec(), repeats: int = 3, crop_size: int = 256, seed: int = 0,
             oracle: GridSpec | None = None, num_threads=None) -> RunReport:
    """Average the predictor's loss over ``repeats`` seeded random crops.

    Also reports the deterministic center-crop variant, the identity-parameter
    baseline and, when ``oracle`` is a grid, the per-image grid-search loss.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    t0 = time.perf_counter()
    samples = _samples(samples)
    task = task if isinstance(task, Task) else make_task(task)
    ident = LLEParams.identity()
    rows = []
    for i, s in enumerate(samples):
        target = task.target(s.bright, s.meta)
        base = pipeline_apply(s.dark, ident, spec, num_threads=num_threads)
        row = {"name": s.name,
               "identity_loss": task.loss(base, target)[0],
               "identity_psnr": psnr(base, s.bright)}
        if model is not None:
            losses, psnrs = [], []
            for r in range(repeats):
                p = predict_params(model, s.dark, crop_size, derive_seed(seed, r, i))
                out = pipeline_apply(s.dark, p, spec, num_threads=num_threads)
                losses.append(task.loss(out, target)[0])
                psnrs.append(psnr(out, s.bright))
            p = predict_params(model, s.dark, crop_size)
            out = pipeline_apply(s.dark, p, spec, num_threads=num_threads)
            row.update(loss=float(np.mean(losses)), psnr=float(np.mean(psnrs)),
                       loss_center=task.loss(out, target)[0], psnr_center=psnr(out, s.bright),
                       params=p.to_dict())
        if oracle is not None:
            op, ol = grid_search(s.dark, target, task, oracle, spec, num_threads)
            row.update(oracle_loss=ol, oracle_params=op.to_dict())
        rows.append(row)
    keys = [k for k in rows[0] if k not in ("name", "params", "oracle_params")] if rows else []
    agg = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    meta = {"seed": seed, "repeats": repeats, "crop_size": crop_size, "spec": spec.to_json(),
            "task": task.config(), "n_images": len(rows), "wall_time_s": time.perf_counter() - t0,
            "model_digest": model.digest() if model is not None else None}
    return RunReport(rows, agg, meta)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


ALL_ORDERS = [PipelineSpec(p) for p in permutations("EGS")]
SUBSETS = [PipelineSpec(o) for o in (("E", "G"), ("E", "S"), ("G", "S"), ("E", "G", "S"))]


@dataclass
class AblationTable:
    columns: list[str]
    rows: list[tuple[str, list[float]]]

    def text(self) -> str:
        return format_table(["order"] + self.columns, [[n] + [fmt(v) for v in vals] for n, vals in self.rows])

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": [{"order": n, "losses": v} for n, v in self.rows]}

    def loss(self, name: str, column: str = "ALL") -> float:
        for n, vals in self.rows:
            if n == name:
                return vals[self.columns.index(column)]
        raise KeyError(name)


def ablate(train_samples, test_sets: dict, cfg: TrainConfig, variants, task: Task | None = None,
           arch: PredictorArch = DEFAULT_ARCH, repeats: int = 1, progress=None) -> AblationTable:
    """Train one predictor per pipeline variant (same seed and settings) and
    tabulate the mean test loss per tier plus the pooled ``ALL`` column."""
    train_samples = _samples(train_samples)
    test_sets = {k: _samples(v) for k, v in test_sets.items()}
    task = task or make_task(cfg.task)
    columns = list(test_sets) + ["ALL"]
    rows = []
    for spec in variants:
        vcfg = replace(cfg, spec=spec)
        model, _ = train(vcfg, train_samples, task, arch)
        per_tier, pooled = [], []
        for name, samples in test_sets.items():
            rep = evaluate(model, samples, task, spec, repeats=repeats, crop_size=cfg.crop_size, seed=cfg.seed,
                           num_threads=cfg.threads)
            per_tier.append(rep.aggregate["loss"])
            pooled.extend(r["loss"] for r in rep.images)
        rows.append((spec.name, per_tier + [float(np.mean(pooled))]))
        if progress:
            progress(spec.name, rows[-1][1])
    return AblationTable(columns, rows)
