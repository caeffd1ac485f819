"""Synthetic bright scenes and paired dark/bright datasets.

On-disk layout::

    root/bright/NAME.png
    root/dark/NAME.png
    root/manifest.json   {"tier", "target_mean_255", "degrade", "pairs": [...]}

Each pair entry records its name, relative paths, the noise seed used for the
dark image and, for synthetic scenes, the bright-blob centers (``[y, x]``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .image import (
    TIERS,
    DegradeConfig,
    fit_attenuation,
    load_image,
    make_rng,
    quantize,
    save_image,
    synth_low_light,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class Sample:
    name: str
    dark: np.ndarray
    bright: np.ndarray
    meta: dict = field(default_factory=dict)


def synth_scene(size: int | tuple[int, int] = 128, seed: int = 0, n_blobs: int = 4):
    """Random piecewise-smooth RGB scene on the 8-bit grid.

    A bilinear color gradient, a few flat rectangles and disks, fine texture,
    and ``n_blobs`` small bright Gaussian blobs. Returns ``(image, blob_centers)``.
    """
    h, w = (size, size) if np.isscalar(size) else size
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    v, u = yy / max(h - 1, 1), xx / max(w - 1, 1)
    corners = rng.uniform(0.1, 0.7, size=(4, 3))
    img = ((1 - v) * (1 - u))[..., None] * corners[0] + ((1 - v) * u)[..., None] * corners[1] \
        + (v * (1 - u))[..., None] * corners[2] + (v * u)[..., None] * corners[3]
    for _ in range(int(rng.integers(2, 6))):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(h // 8 + 1, h // 3 + 2), rng.integers(w // 8 + 1, w // 3 + 2)
        img[y0 : y0 + rh, x0 : x0 + rw] = rng.uniform(0.05, 0.85, size=3)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(min(h, w) / 12, min(h, w) / 5)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = rng.uniform(0.05, 0.85, size=3)
    img += rng.normal(0.0, 0.02, size=img.shape)
    centers = []
    for _ in range(n_blobs):
        cy, cx = float(rng.integers(4, max(h - 4, 5))), float(rng.integers(4, max(w - 4, 5)))
        s = rng.uniform(1.2, 2.5)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += blob[..., None] * rng.uniform(0.3, 0.6)
        centers.append([cy, cx])
    return quantize(np.clip(img, 0.0, 1.0), 8), centers


def synth_scenes(n: int, size=128, seed: int = 0, n_blobs: int = 4):
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [synth_scene(size, int(s), n_blobs) for s in seeds]


def make_pairs(brights, degrade: DegradeConfig, names=None, metas=None) -> list[Sample]:
    """Degrade each bright image; pair ``i`` uses noise seed ``degrade.seed + i``."""
    out = []
    for i, bright in enumerate(brights):
        cfg = replace(degrade, seed=degrade.seed + i)
        meta = dict(metas[i]) if metas else {}
        meta["seed"] = cfg.seed
        name = names[i] if names else f"{i:05d}"
        out.append(Sample(name, synth_low_light(bright, cfg), bright, meta))
    return out


def synthetic_dataset(n: int, size=128, *, tier: str | None = "LL-E", attenuation: float | None = None,
                      read_noise_sigma: float = 0.0, quantize_bits: int | None = 8, seed: int = 0,
                      n_blobs: int = 4) -> tuple[list[Sample], DegradeConfig]:
    """In-memory paired set. The attenuation is fitted to ``tier`` unless given."""
    scenes = synth_scenes(n, size, seed, n_blobs)
    brights = [s[0] for s in scenes]
    if attenuation is None:
        attenuation = fit_attenuation(brights, TIERS[tier], quantize_bits=quantize_bits)
    degrade = DegradeConfig(attenuation, read_noise_sigma, quantize_bits, seed=seed)
    metas = [{"blobs": s[1]} for s in scenes]
    return make_pairs(brights, degrade, metas=metas), degrade


def write_dataset(root, samples: list[Sample], degrade: DegradeConfig, tier: str | None = None) -> Path:
    root = Path(root)
    if degrade.quantize_bits != 8:
        raise ValueError("on-disk datasets store 8-bit PNGs; use quantize_bits=8")
    (root / "bright").mkdir(parents=True, exist_ok=True)
    (root / "dark").mkdir(parents=True, exist_ok=True)
    pairs = []
    for s in samples:
        save_image(s.bright, root / "bright" / f"{s.name}.png")
        save_image(s.dark, root / "dark" / f"{s.name}.png")
        pairs.append({"name": s.name, "bright": f"bright/{s.name}.png", "dark": f"dark/{s.name}.png", **s.meta})
    doc = {
        "version": MANIFEST_VERSION,
        "tier": tier,
        "target_mean_255": TIERS[tier].target_mean_255 if tier in TIERS else None,
        "degrade": degrade.to_dict(),
        "pairs": pairs,
    }
    (root / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return root


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path}: dataset manifest not found")
    return json.loads(path.read_text())


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    doc = read_manifest(root)
    samples = []
    for p in doc["pairs"]:
        dark_path, bright_path = root / p["dark"], root / p["bright"]
        for path in (dark_path, bright_path):
            if not path.exists():
                raise FileNotFoundError(f"{path}: missing member of pair {p['name']!r}")
        meta = {k: v for k, v in p.items() if k not in ("name", "dark", "bright")}
        samples.append(Sample(p["name"], load_image(dark_path), load_image(bright_path), meta))
    return samples
