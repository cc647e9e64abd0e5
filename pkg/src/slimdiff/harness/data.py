"""Synthetic remote-sensing-like scenes and the degradation pipeline.

A scene is a smooth background with oriented stripes ("roads") and a few
sparse rectangles ("buildings"). The generator also returns the structure
mask so uncertainty maps can be scored against known texture.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..tensorcore import make_rng


@dataclass
class SceneParams:
    size: int = 64
    scale: int = 4
    n_stripes: tuple = (1, 3)
    stripe_width: tuple = (1.5, 3.5)
    n_rects: tuple = (2, 6)
    rect_size: tuple = (3, 9)
    blur_sigma: tuple = (0.5, 2.0)
    noise_sigma: tuple = (0.0, 0.02)
    background_smoothness: float = 10.0


@dataclass
class SynthScene:
    hr: np.ndarray
    lr: np.ndarray
    texture_mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.provenance.get("scale", 4)
        if self.lr.shape[0] * s != self.hr.shape[0] or self.lr.shape[1] * s != self.hr.shape[1]:
            raise ValueError("lr dims must equal hr dims / scale")


# ----------------------------------------------------------------------------
# bicubic resampling (Keys kernel, a = -0.5, antialiased when shrinking)

def _cubic(x, a=-0.5):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic interpolation matrix with edge replication.

    For downscaling the kernel is stretched by the scale factor, which acts as
    the antialiasing low-pass.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    width = 4.0 / stretch
    u = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = stretch * _cubic(stretch * (u[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return m


def bicubic_resize(img: np.ndarray, out_hw) -> np.ndarray:
    """Resize the last two axes of ``img``."""
    mh = resize_matrix(img.shape[-2], out_hw[0])
    mw = resize_matrix(img.shape[-1], out_hw[1])
    return np.einsum("ij,...jk,lk->...il", mh, img, mw)


# ----------------------------------------------------------------------------

def _draw_scene(rng: np.random.Generator, p: SceneParams):
    n = p.size
    bg = gaussian_filter(rng.standard_normal((n, n)), p.background_smoothness, mode="wrap")
    bg = (bg - bg.min()) / (np.ptp(bg) + 1e-12)
    img = 0.3 + 0.3 * bg
    mask = np.zeros((n, n), dtype=bool)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(rng.integers(p.n_stripes[0], p.n_stripes[1] + 1)):
        theta = rng.uniform(0, np.pi)
        c = rng.uniform(0.25 * n, 0.75 * n, size=2)
        half = 0.5 * rng.uniform(*p.stripe_width)
        dist = np.abs((xx - c[0]) * np.sin(theta) - (yy - c[1]) * np.cos(theta))
        road = dist <= half
        img[road] = rng.uniform(0.75, 0.9)
        mask |= road
    for _ in range(rng.integers(p.n_rects[0], p.n_rects[1] + 1)):
        h, w = rng.integers(p.rect_size[0], p.rect_size[1] + 1, size=2)
        y0, x0 = rng.integers(0, n - h), rng.integers(0, n - w)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0.0, 0.2) if rng.random() < 0.5 else rng.uniform(0.85, 1.0)
        mask[y0:y0 + h, x0:x0 + w] = True
    return np.clip(img, 0.0, 1.0), mask


def degrade(hr: np.ndarray, rng: np.random.Generator, p: SceneParams):
    sigma = rng.uniform(*p.blur_sigma)
    noise = rng.uniform(*p.noise_sigma)
    blurred = gaussian_filter(hr, sigma, mode="reflect")
    n = hr.shape[0] // p.scale
    lr = bicubic_resize(blurred, (n, n)) + noise * rng.standard_normal((n, n))
    return np.clip(lr, 0.0, 1.0), {"blur_sigma": float(sigma), "noise_sigma": float(noise)}


def gen_scenes(count: int, seed: int, params: SceneParams | None = None, split: str = "train"):
    """``count`` scenes; scene ``i`` depends only on ``(seed, split, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    p = params or SceneParams()
    if p.size % p.scale:
        raise ValueError("scene size must be divisible by the scale")
    scenes = []
    for i in range(count):
        rng = make_rng(seed, f"scene/{split}/{i}")
        hr, mask = _draw_scene(rng, p)
        lr, deg = degrade(hr, rng, p)
        prov = {"seed": int(seed), "split": split, "index": i, "scale": p.scale, **deg}
        scenes.append(SynthScene(hr, lr, mask, prov))
    return scenes


def stack(scenes, attr: str = "hr") -> np.ndarray:
    """``(B, 1, H, W)`` batch of one scene field."""
    return np.stack([getattr(s, attr) for s in scenes])[:, None].astype(np.float64)


def upsample_lr(lr: np.ndarray, scale: int) -> np.ndarray:
    return bicubic_resize(lr, (lr.shape[-2] * scale, lr.shape[-1] * scale))


def low_frequency_fraction(img: np.ndarray, cutoff: float = 0.125) -> float:
    """Share of non-DC spectral energy at radial frequency below ``cutoff`` cycles/px."""
    f = np.fft.fft2(img - img.mean())
    e = np.abs(f) ** 2
    fy = np.fft.fftfreq(img.shape[0])[:, None]
    fx = np.fft.fftfreq(img.shape[1])[None, :]
    r = np.sqrt(fy ** 2 + fx ** 2)
    total = e.sum()
    return float(e[r < cutoff].sum() / total) if total > 0 else 1.0
