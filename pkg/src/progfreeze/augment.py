"""Training-time augmentation: rotation, flip, masking, blur, and CutMix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 15.0
    p_rotate: float = 0.5
    p_flip: float = 0.5
    p_mask: float = 0.3
    mask_fraction_max: float = 0.25
    p_blur: float = 0.3
    blur_sigma_range: tuple[float, float] = (0.1, 1.5)

    def __post_init__(self):
        for name in ("p_rotate", "p_flip", "p_mask", "p_blur"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.rotation_max_deg < 0:
            raise ValueError("rotation_max_deg must be >= 0")
        if not 0.0 <= self.mask_fraction_max <= 1.0:
            raise ValueError("mask_fraction_max must be in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotate=0.0, p_flip=0.0, p_mask=0.0, p_blur=0.0)

    @property
    def active(self) -> bool:
        return any((self.p_rotate, self.p_flip, self.p_mask, self.p_blur))


@dataclass(frozen=True)
class CutMixConfig:
    enabled: bool = False
    beta_alpha: float = 1.0
    apply_prob: float = 0.5
    during_probe: bool = False

    def __post_init__(self):
        if self.beta_alpha <= 0:
            raise ValueError("beta_alpha must be positive")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must be a probability")


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Bilinear rotation about the centre with edge-replicating padding."""
    return ndimage.rotate(img, angle_deg, axes=(-2, -1), reshape=False, order=1, mode="nearest")


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma and normalized to sum 1."""
    sig = [0.0] * (img.ndim - 2) + [sigma, sigma]
    return ndimage.gaussian_filter(img, sig, mode="nearest", truncate=3.0)


def mask_box(h: int, w: int, fraction: float, rng: np.random.Generator):
    """Random axis-aligned box covering at most ``fraction`` of an h x w image."""
    area = fraction * h * w
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    bh = min(h, max(0, int(math.sqrt(area * aspect))))
    bw = min(w, int(area / bh)) if bh else 0
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, x0, bh, bw


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the base stack in the fixed order rotate, flip, mask, blur."""
    out = np.array(img, dtype=np.float64, copy=True)
    if rng.random() < cfg.p_rotate and cfg.rotation_max_deg > 0:
        out = rotate(out, rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    if rng.random() < cfg.p_flip:
        out = hflip(out)
    if rng.random() < cfg.p_mask and cfg.mask_fraction_max > 0:
        h, w = out.shape[-2:]
        y0, x0, bh, bw = mask_box(h, w, rng.uniform(0, cfg.mask_fraction_max), rng)
        out[..., y0:y0 + bh, x0:x0 + bw] = 0.0
    if rng.random() < cfg.p_blur:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma_range))
    return out


def pair_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random involutive permutation: samples are swapped in disjoint pairs.

    With an odd batch one sample is left paired with itself.
    """
    order = rng.permutation(n)
    partner = np.arange(n)
    for a, b in zip(order[0::2], order[1::2]):
        partner[a], partner[b] = b, a
    return partner


def cutmix_box(lam: float, h: int, w: int, rng: np.random.Generator):
    """Box of side ratio sqrt(1 - lam), placed fully inside the image."""
    ratio = math.sqrt(max(0.0, 1.0 - lam))
    bh, bw = int(h * ratio), int(w * ratio)
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, x0, bh, bw


def cutmix(batch: np.ndarray, targets: np.ndarray, cfg: CutMixConfig,
           rng: np.random.Generator, lam: float | None = None):
    """Paste a partner's box into every sample and mix targets by surviving area.

    Returns ``(batch', soft_targets, info)``; ``info`` records whether mixing
    happened, the realized ``lam_adj`` and a warning for batches of one.
    """
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(batch)
    if n < 2:
        return batch.copy(), targets.copy(), {"applied": False, "warning": "batch_size_1"}
    if lam is None:
        if rng.random() >= cfg.apply_prob:
            return batch.copy(), targets.copy(), {"applied": False}
        lam = float(rng.beta(cfg.beta_alpha, cfg.beta_alpha))
    h, w = batch.shape[-2:]
    partner = pair_partners(n, rng)
    y0, x0, bh, bw = cutmix_box(lam, h, w, rng)
    out = batch.copy()
    out[..., y0:y0 + bh, x0:x0 + bw] = batch[partner][..., y0:y0 + bh, x0:x0 + bw]
    lam_adj = 1.0 - (bh * bw) / (h * w)
    soft = lam_adj * targets + (1.0 - lam_adj) * targets[partner]
    soft = np.clip(soft, 0.0, 1.0)
    return out, soft, {"applied": True, "lam_adj": lam_adj, "box": (y0, x0, bh, bw),
                       "partner": partner}
