"""Image container conventions, codecs, crops and synthetic low-light degradation.

Images are ``float64`` numpy arrays of shape ``(H, W, 3)`` in RGB order. A stored
8-bit value ``v`` maps to ``v / 255`` with no sRGB linearization. Values inside
the pipeline may exceed 1; clamping only happens in :func:`save_image`.

All randomness goes through :func:`make_rng`, a numpy ``Generator`` over the
PCG64 bit generator (PCG-XSL-RR 128/64), so crops and noise replay bit-exactly
on any platform for a given 64-bit seed.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

log = logging.getLogger(__name__)


class ImageDecodeError(ValueError):
    """Raised when a file is not a supported 8-bit PNG / binary PPM."""


class UnreachableTargetError(ValueError):
    """Raised when a bright set cannot be degraded to the requested mean."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG used by this package."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_image(x, *, name: str = "image") -> np.ndarray:
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"{name} is empty: {img.shape}")
    return img


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(img: np.ndarray, bits: int | None) -> np.ndarray:
    """Snap ``[0, 1]`` samples onto the ``2**bits - 1`` level grid."""
    if bits is None:
        return img
    levels = float(2**bits - 1)
    return round_half_away(img * levels) / levels


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG (RGB, RGBA, gray, palette) or binary PPM/PGM.

    Alpha is dropped and gray images are replicated to three channels.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(64)
    except OSError as exc:
        raise ImageDecodeError(f"{path}: unreadable file ({exc})") from exc

    if head.startswith(_PNG_MAGIC):
        fmt = "PNG"
        # IHDR: bit depth at byte 24, color type at byte 25
        if len(head) < 26:
            raise ImageDecodeError(f"{path}: truncated PNG header")
        depth, ctype = head[24], head[25]
        if depth != 8 and not (ctype == 3 and depth < 8):
            raise ImageDecodeError(f"{path}: unsupported bit depth {depth} (only 8-bit PNG)")
    elif head[:2] in (b"P6", b"P5"):
        fmt = "PPM"
        tokens = re.sub(rb"#[^\n]*", b" ", head[2:]).split()
        if len(tokens) >= 3 and tokens[2] != b"255":
            raise ImageDecodeError(f"{path}: unsupported maxval {tokens[2].decode()} (bit depth must be 8, maxval 255)")
    elif head[:1] == b"P" and head[1:2] in (b"1", b"2", b"3", b"4"):
        raise ImageDecodeError(f"{path}: unsupported PNM variant {head[:2].decode()!r} (only binary P6/P5)")
    else:
        raise ImageDecodeError(f"{path}: unsupported format (expected PNG or binary PPM)")

    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ImageDecodeError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit samples are accepted")
            if mode == "1":
                raise ImageDecodeError(f"{path}: unsupported bit depth 1")
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            if mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            elif mode in ("RGB", "RGBA"):
                arr = np.asarray(im, dtype=np.uint8)[:, :, :3]
            else:
                raise ImageDecodeError(f"{path}: unsupported color mode {mode}")
    except ImageDecodeError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on corrupt input
        raise ImageDecodeError(f"{path}: cannot decode {fmt} ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Clamp to ``[0, 1]`` and convert to ``uint8`` with half-away-from-zero rounding."""
    img = as_image(img)
    if not np.all(np.isfinite(img)):
        raise ValueError("cannot export non-finite samples")
    return round_half_away(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as PNG or binary PPM depending on the file extension."""
    path = Path(path)
    data = to_bytes(img)
    ext = path.suffix.lower()
    if ext == ".png":
        PILImage.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)
    elif ext in (".ppm", ".pnm"):
        h, w, _ = data.shape
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(data.tobytes())
    else:
        raise ValueError(f"{path}: unknown image extension {ext!r} (use .png or .ppm)")


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------


def pad_to(img: np.ndarray, size: int) -> np.ndarray:
    """Edge-replicate ``img`` so both sides are at least ``size`` (split evenly)."""
    h, w, _ = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)), mode="edge")


def crop_offsets(height: int, width: int, size: int, seed: int) -> tuple[int, int]:
    """Top-left offsets for :func:`random_crop`: the first two PCG64 draws.

    ``y = rng.integers(0, height - size + 1)`` then ``x = rng.integers(0, width - size + 1)``.
    """
    rng = make_rng(seed)
    y = int(rng.integers(0, height - size + 1))
    x = int(rng.integers(0, width - size + 1))
    return y, x


def random_crop(img: np.ndarray, size: int, seed: int) -> np.ndarray:
    if size <= 0:
        raise ValueError("crop size must be positive")
    img = pad_to(as_image(img), size)
    y, x = crop_offsets(img.shape[0], img.shape[1], size, seed)
    return np.ascontiguousarray(img[y : y + size, x : x + size])


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    if size <= 0:
        raise ValueError("crop size must be positive")
    img = pad_to(as_image(img), size)
    y = (img.shape[0] - size) // 2
    x = (img.shape[1] - size) // 2
    return np.ascontiguousarray(img[y : y + size, x : x + size])


# ---------------------------------------------------------------------------
# low-light synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradeConfig:
    """Synthetic dark-capture model: scale, additive read noise, quantization.

    ``quantize_bits=None`` disables quantization (used for exact checks).
    """

    attenuation: float = 0.01
    read_noise_sigma: float = 0.0
    quantize_bits: int | None = 8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.attenuation <= 1.0) or not np.isfinite(self.attenuation):
            raise ValueError(f"attenuation must lie in [0, 1], got {self.attenuation}")
        if self.read_noise_sigma < 0:
            raise ValueError("read_noise_sigma must be >= 0")
        if self.quantize_bits is not None and not 1 <= self.quantize_bits <= 16:
            raise ValueError("quantize_bits must lie in [1, 16]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TierPreset:
    name: str
    target_mean_255: float


TIERS = {
    "LL-N": TierPreset("LL-N", 3.2),
    "LL-H": TierPreset("LL-H", 1.4),
    "LL-E": TierPreset("LL-E", 0.9),
}


def synth_low_light(img: np.ndarray, cfg: DegradeConfig) -> np.ndarray:
    """``quantize(clip(attenuation * img + N(0, sigma), 0, 1))``, seeded by ``cfg.seed``."""
    img = as_image(img)
    out = cfg.attenuation * img
    if cfg.read_noise_sigma > 0:
        out = out + cfg.read_noise_sigma * make_rng(cfg.seed).standard_normal(img.shape)
    out = np.clip(out, 0.0, 1.0)
    return quantize(out, cfg.quantize_bits)


def mean_intensity(img: np.ndarray) -> float:
    """Mean sample value on the 0-255 scale."""
    return 255.0 * float(np.mean(img))


def _set_mean(images, alpha, bits):
    cfg = DegradeConfig(attenuation=alpha, read_noise_sigma=0.0, quantize_bits=bits)
    total = sum(float(np.sum(synth_low_light(im, cfg))) for im in images)
    count = sum(im.size for im in images)
    return 255.0 * total / count


def fit_attenuation(bright_set, tier: TierPreset | float, quantize_bits: int | None = 8,
                    tol: float = 0.05, iters: int = 60) -> float:
    """Bisect the attenuation so the degraded set's pooled mean hits the tier target.

    Noise is off while fitting. The mean is monotone in the attenuation, so the
    bisection brackets the crossing; with coarse quantization the step function
    may skip over the target, in which case the closest side is returned and a
    warning is logged.
    """
    images = [as_image(im) for im in bright_set]
    if not images:
        raise ValueError("bright set is empty")
    target = tier.target_mean_255 if isinstance(tier, TierPreset) else float(tier)
    hi_mean = _set_mean(images, 1.0, quantize_bits)
    if hi_mean + tol < target:
        raise UnreachableTargetError(
            f"target mean {target:g} unreachable: achievable range is [0, {hi_mean:.4g}]")
    lo, hi = 0.0, 1.0
    lo_mean = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        m = _set_mean(images, mid, quantize_bits)
        if m < target:
            lo, lo_mean = mid, m
        else:
            hi, hi_mean = mid, m
    alpha, achieved = (hi, hi_mean) if abs(hi_mean - target) <= abs(target - lo_mean) else (lo, lo_mean)
    if alpha <= 0.0:
        alpha, achieved = hi, hi_mean
    if abs(achieved - target) > tol:
        log.warning("attenuation %.6g gives mean %.4g, off target %.4g by more than %.3g",
                    alpha, achieved, target, tol)
    return alpha
