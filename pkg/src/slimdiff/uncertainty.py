"""Uncertainty estimation and noise-level targeting.

The estimator predicts a mean latent and a per-element log-variance ``s``.
Its training loss is the negative log-posterior under a Gaussian likelihood
with a Jeffreys prior on the variance, which gives the ``3 s`` term::

    L = 1/(2N) * sum_i( exp(-s_i) * (z_gt_i - z_mean_i)**2 + 3 * s_i )

Matching the diffusion SNR ``a/(1-a)`` to the uncertainty SNR
``sigma_gt**2 / z_var`` gives the analytic noise level
``a = sigma_gt**2 / (sigma_gt**2 + z_var)``; a small learned predictor refines it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Module, Sigmoid, SiLU
from .tensorcore import check_finite


@dataclass
class UncertaintyOutput:
    z_mean: np.ndarray
    s: np.ndarray  # log-variance

    def __post_init__(self):
        if self.z_mean.shape != self.s.shape:
            raise ValueError("z_mean and s must have the same shape")

    @property
    def z_var(self) -> np.ndarray:
        return np.exp(self.s)


@dataclass
class AlphaTargetMap:
    """Spatial noise-level map, shape ``(B, 1, H, W)``, entries in (0, 1)."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not (np.all(v > 0) and np.all(v < 1)):
            raise ValueError("alpha target entries must lie strictly inside (0, 1)")

    def per_sample(self) -> np.ndarray:
        axes = tuple(range(1, self.values.ndim))
        return self.values.mean(axis=axes)

    @property
    def scalar_reduction(self) -> float:
        return float(self.values.mean())


def sample_observation(z_mean: np.ndarray, s: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if not (z_mean.shape == s.shape == eps.shape):
        raise ValueError("z_mean, s and eps must share a shape")
    return z_mean + eps * np.exp(0.5 * s)


def uncertainty_loss(z_gt: np.ndarray, out: UncertaintyOutput) -> float:
    return uncertainty_loss_and_grad(z_gt, out)[0]


def uncertainty_loss_and_grad(z_gt: np.ndarray, out: UncertaintyOutput):
    """Loss value and its gradients ``(d/dz_mean, d/ds)``."""
    if z_gt.shape != out.z_mean.shape:
        raise ValueError("z_gt and z_mean differ in shape")
    check_finite(z_gt, "z_gt")
    check_finite(out.z_mean, "z_mean")
    check_finite(out.s, "s")
    n = z_gt.size
    d = z_gt - out.z_mean
    inv = np.exp(-out.s)
    loss = float((inv * d * d + 3.0 * out.s).sum() / (2.0 * n))
    d_mean = -inv * d / n
    d_s = (3.0 - inv * d * d) / (2.0 * n)
    return loss, d_mean, d_s


def analytic_alpha_target(z_var: np.ndarray, sigma_gt_sq: float) -> AlphaTargetMap:
    if sigma_gt_sq <= 0:
        raise ValueError("sigma_gt_sq must be positive")
    z_var = np.asarray(z_var, dtype=np.float64)
    if np.any(z_var <= 0):
        raise ValueError("z_var must be positive")
    return AlphaTargetMap(sigma_gt_sq / (sigma_gt_sq + z_var))


def estimate_sigma_gt_sq(z_gt: np.ndarray) -> float:
    """Plug-in signal variance: empirical variance of ground-truth latents."""
    return float(np.var(z_gt))


def tv_loss(alpha_map) -> float:
    return tv_loss_and_grad(alpha_map)[0]


def tv_loss_and_grad(alpha_map):
    """Sum of squared forward differences along height and width."""
    a = alpha_map.values if isinstance(alpha_map, AlphaTargetMap) else np.asarray(alpha_map)
    if a.ndim < 2 or a.shape[-1] < 2 or a.shape[-2] < 2:
        raise ValueError("TV loss needs a map of at least 2x2")
    dh = a[..., 1:, :] - a[..., :-1, :]
    dw = a[..., :, 1:] - a[..., :, :-1]
    loss = float((dh * dh).sum() + (dw * dw).sum())
    g = np.zeros_like(a)
    g[..., 1:, :] += 2 * dh
    g[..., :-1, :] -= 2 * dh
    g[..., :, 1:] += 2 * dw
    g[..., :, :-1] -= 2 * dw
    return loss, g


class AlphaPredictor(Module):
    """Learned noise-level map from ``(z_ref, z_var)``.

    Two depthwise-separable conv layers, a pointwise mix to one channel, then
    a sigmoid. ``final_bias`` sets the starting noise level ``sigmoid(bias)``.
    """

    def __init__(self, latent_ch: int = 4, hidden: int = 8, rng=None, final_bias: float = 0.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = 2 * latent_ch
        self.latent_ch = latent_ch
        self.dw1 = Conv2d(c, c, 3, groups=c, rng=rng)
        self.pw1 = Conv2d(c, hidden, 1, rng=rng)
        self.act1 = SiLU()
        self.dw2 = Conv2d(hidden, hidden, 3, groups=hidden, rng=rng)
        self.pw2 = Conv2d(hidden, hidden, 1, rng=rng)
        self.act2 = SiLU()
        self.mix = Conv2d(hidden, 1, 1, rng=rng, init="zero")
        self.mix.params["bias"][...] = final_bias
        self.out = Sigmoid()

    def forward(self, z_ref: np.ndarray, z_var: np.ndarray) -> AlphaTargetMap:
        if z_ref.shape != z_var.shape:
            raise ValueError(f"z_ref {z_ref.shape} and z_var {z_var.shape} must be aligned")
        if z_ref.shape[1] != self.latent_ch:
            raise ValueError(f"expected {self.latent_ch} latent channels, got {z_ref.shape[1]}")
        h = np.concatenate([z_ref, z_var], axis=1)
        h = self.act1(self.pw1(self.dw1(h)))
        h = self.act2(self.pw2(self.dw2(h)))
        v = self.out(self.mix(h))
        # float32 sigmoid can round to exactly 0 or 1
        eps = np.finfo(v.dtype).eps
        return AlphaTargetMap(np.clip(v, eps, 1 - eps))

    def backward(self, d_values: np.ndarray):
        """Returns ``(d z_ref, d z_var)``."""
        d = self.mix.backward(self.out.backward(d_values))
        d = self.dw2.backward(self.pw2.backward(self.act2.backward(d)))
        d = self.dw1.backward(self.pw1.backward(self.act1.backward(d)))
        c = self.latent_ch
        return d[:, :c], d[:, c:]


def predictor_forward(z_ref: np.ndarray, z_var: np.ndarray, params: AlphaPredictor) -> AlphaTargetMap:
    return params.forward(z_ref, z_var)


class UncertaintyEstimator(Module):
    """Three 3x3 conv layers shared by a mean head and a log-variance head.

    The mean head is residual on the input latent.
    """

    def __init__(self, latent_ch: int = 4, hidden: int = 16, rng=None, s_init: float = -2.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c1 = Conv2d(latent_ch, hidden, 3, rng=rng)
        self.a1 = SiLU()
        self.c2 = Conv2d(hidden, hidden, 3, rng=rng)
        self.a2 = SiLU()
        self.c3 = Conv2d(hidden, hidden, 3, rng=rng)
        self.a3 = SiLU()
        self.mean_head = Conv2d(hidden, latent_ch, 3, rng=rng, init="zero")
        self.logvar_head = Conv2d(hidden, latent_ch, 3, rng=rng, init="zero")
        self.logvar_head.params["bias"][...] = s_init

    def forward(self, z_lr: np.ndarray) -> UncertaintyOutput:
        h = self.a3(self.c3(self.a2(self.c2(self.a1(self.c1(z_lr))))))
        return UncertaintyOutput(z_lr + self.mean_head(h), self.logvar_head(h))

    def backward(self, d_mean: np.ndarray, d_s: np.ndarray) -> np.ndarray:
        dh = self.mean_head.backward(d_mean) + self.logvar_head.backward(d_s)
        dh = self.c3.backward(self.a3.backward(dh))
        dh = self.c2.backward(self.a2.backward(dh))
        dh = self.c1.backward(self.a1.backward(dh))
        return dh + d_mean
