"""Noise schedules, forward diffusion and continuous timestep inversion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed lookup tables over timesteps ``0..T``.

    ``alpha_bars[0] == 1`` and ``alpha_bars[t] == prod_{i<=t} (1 - betas[i-1])``.
    """

    kind: str
    T: int
    betas: np.ndarray        # (T,), beta_1 .. beta_T
    alpha_bars: np.ndarray   # (T+1,)
    timesteps: np.ndarray    # (T+1,), 0..T

    def __post_init__(self):
        for arr in (self.betas, self.alpha_bars, self.timesteps):
            arr.setflags(write=False)

    @property
    def alpha_min(self) -> float:
        return float(self.alpha_bars[-1])

    @property
    def alpha_max(self) -> float:
        # t = 0 is excluded: the inversion clamps to t >= 1
        return float(self.alpha_bars[1])


def build_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("a schedule needs T >= 2")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if not (np.all(betas > 0) and np.all(betas < 1)):
        raise ValueError("betas must lie in (0, 1)")
    if not np.all(np.diff(alpha_bars) < 0):
        raise ValueError("alpha_bars must be strictly decreasing")
    return NoiseSchedule(kind, T, betas, alpha_bars, np.arange(T + 1, dtype=np.float64))


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def snr_diff(t: int, sched: NoiseSchedule) -> float:
    if t == 0:
        raise ValueError("SNR is infinite at t=0 (alpha_bar = 1)")
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside [1, {sched.T}]")
    ab = float(sched.alpha_bars[t])
    return ab / (1.0 - ab)


def snr_from_alpha(alpha_bar):
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    return alpha_bar / (1.0 - alpha_bar)


def _bracket(alpha_target, sched: NoiseSchedule):
    a = np.asarray(alpha_target, dtype=np.float64)
    if np.any(np.isnan(a)):
        raise ValueError("alpha_target is NaN")
    # ascending noise levels with their timesteps (T .. 1)
    asc = sched.alpha_bars[:0:-1]
    ts = sched.timesteps[:0:-1]
    clamped = np.clip(a, asc[0], asc[-1])
    j = np.clip(np.searchsorted(asc, clamped, side="left"), 1, asc.size - 1)
    return a, clamped, asc[j - 1], asc[j], ts[j - 1], ts[j]


def invert_alpha(alpha_target, sched: NoiseSchedule):
    """Continuous timestep ``t*`` whose noise level is ``alpha_target``.

    Binary search over the ascending alpha-bar table, then linear interpolation
    in timestep space between the bracketing entries. Targets outside
    ``[alpha_bars[T], alpha_bars[1]]`` are clamped. Accepts scalars or arrays.
    """
    _, a, lo, hi, t_lo, t_hi = _bracket(alpha_target, sched)
    t = t_lo + (a - lo) / (hi - lo) * (t_hi - t_lo)
    return float(t) if t.ndim == 0 else t


def invert_alpha_grad(alpha_target, sched: NoiseSchedule):
    """``d t* / d alpha_target``; zero where the target was clamped."""
    raw, a, lo, hi, t_lo, t_hi = _bracket(alpha_target, sched)
    g = (t_hi - t_lo) / (hi - lo)
    g = np.where(raw == a, g, 0.0)
    return float(g) if g.ndim == 0 else g


def alpha_at(t, sched: NoiseSchedule):
    """Noise level at a continuous timestep (linear interpolation of the table)."""
    return np.interp(np.asarray(t, dtype=np.float64), sched.timesteps, sched.alpha_bars)


def discretize(t_star) -> np.ndarray:
    """Integer conditioning step; ties go to the even neighbour."""
    return np.rint(np.asarray(t_star)).astype(np.int64)
