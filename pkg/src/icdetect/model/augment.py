"""Training-time patch augmentation (geometric + colour + noise)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    noise: bool = True
    hue: bool = True
    saturation: bool = True
    contrast: bool = True
    brightness: bool = True
    probability: float = 0.5
    noise_sigma: tuple = (0.0, 10.0)
    hue_shift: tuple = (-0.05, 0.05)
    saturation_scale: tuple = (0.8, 1.2)
    contrast_scale: tuple = (0.8, 1.2)
    brightness_offset: tuple = (-20.0, 20.0)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=False, vflip=False, rotate=False, noise=False, hue=False,
                   saturation=False, contrast=False, brightness=False)

    def __post_init__(self):
        for name in ("noise_sigma", "hue_shift", "saturation_scale", "contrast_scale",
                     "brightness_offset"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound above upper bound")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.noise_sigma[0] < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must be in [0, 1]")


def _hsv_adjust(img: np.ndarray, hue_shift: float, sat_scale: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(img, 0, 255) / 255.0)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    return hsv_to_rgb(hsv) * 255.0


def augment(patch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Each enabled transform fires with ``cfg.probability``; parameters are
    uniform over the configured range. Output keeps the input shape."""
    out = np.asarray(patch)
    p = cfg.probability

    def fires(enabled):
        # a coin is drawn for every slot so streams stay aligned across configs
        coin = rng.random()
        return enabled and coin < p

    if fires(cfg.hflip):
        out = out[:, ::-1]
    if fires(cfg.vflip):
        out = out[::-1, :]
    k = int(rng.integers(1, 4))
    if fires(cfg.rotate) and out.shape[0] == out.shape[1]:
        out = np.rot90(out, k)

    photometric = False
    img = out.astype(np.float64)
    hue = rng.uniform(*cfg.hue_shift)
    sat = rng.uniform(*cfg.saturation_scale)
    do_hue, do_sat = fires(cfg.hue), fires(cfg.saturation)
    if do_hue or do_sat:
        img = _hsv_adjust(img, hue if do_hue else 0.0, sat if do_sat else 1.0)
        photometric = True
    c = rng.uniform(*cfg.contrast_scale)
    if fires(cfg.contrast):
        mean = img.mean()
        img = (img - mean) * c + mean
        photometric = True
    b = rng.uniform(*cfg.brightness_offset)
    if fires(cfg.brightness):
        img = img + b
        photometric = True
    sigma = rng.uniform(*cfg.noise_sigma)
    if fires(cfg.noise):
        img = img + rng.normal(0.0, 1.0, img.shape) * sigma
        photometric = True

    if not photometric:
        return np.ascontiguousarray(out)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
