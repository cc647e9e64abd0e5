"""Feature distillation objectives.

Student features pass through a per-layer 1x1 adapter and are compared with
the teacher's twice: point-wise (squared error) and as distributions (RBF-kernel
MMD over per-position channel vectors)::

    L_dis = L_mse + lam * L_mmd
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Module


@dataclass(frozen=True)
class KernelConfig:
    """RBF bandwidth: a positive float, or ``"median"`` for the median heuristic."""

    bandwidth: float | str = "median"

    def __post_init__(self):
        bw = self.bandwidth
        if isinstance(bw, str):
            if bw != "median":
                raise ValueError(f"unknown bandwidth mode {bw!r}")
        elif not bw > 0:
            raise ValueError("bandwidth must be positive")

    def resolve(self, p: np.ndarray, q: np.ndarray) -> float:
        if self.bandwidth == "median":
            return median_bandwidth(p, q)
        return float(self.bandwidth)


def rbf_kernel(x, y, cfg: KernelConfig | float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("kernel arguments must have equal dimension")
    sigma = cfg if isinstance(cfg, (int, float)) else cfg.resolve(x[None], y[None])
    if not sigma > 0:
        raise ValueError("bandwidth must be positive")
    d2 = float(((x - y) ** 2).sum())
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def median_bandwidth(p: np.ndarray, q: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample set."""
    z = np.concatenate([np.asarray(p, np.float64), np.asarray(q, np.float64)], axis=0)
    if z.shape[0] < 2:
        return 1.0
    iu = np.triu_indices(z.shape[0], k=1)
    med = float(np.median(np.sqrt(_sqdist(z, z)[iu])))
    # identical points everywhere: any bandwidth gives mmd 0
    return med if med > 0 else 1.0


def _as_samples(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("sample sets must be non-empty (n, d) arrays")
    return s


def mmd2(p, q, cfg: KernelConfig = KernelConfig()) -> float:
    return mmd2_and_grad(p, q, cfg, grad=False)[0]


def mmd2_and_grad(p, q, cfg: KernelConfig = KernelConfig(), grad: bool = True):
    """Biased (V-statistic) squared MMD and its gradient w.r.t. both sets.

    The bandwidth is resolved once from the inputs and then held fixed, so the
    returned gradient treats a median-heuristic sigma as a constant.
    Returns ``(value, dP, dQ, sigma)``.
    """
    x, y = _as_samples(p), _as_samples(q)
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample sets have different dimensions")
    sigma = cfg.resolve(x, y)
    g = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-g * _sqdist(x, x))
    kyy = np.exp(-g * _sqdist(y, y))
    kxy = np.exp(-g * _sqdist(x, y))
    m, n = x.shape[0], y.shape[0]
    val = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    val = max(float(val), 0.0)
    if not grad:
        return val, None, None, sigma
    c = -2.0 * g
    dx = (2.0 / (m * m)) * c * (x * kxx.sum(1)[:, None] - kxx @ x) \
        - (2.0 / (m * n)) * c * (x * kxy.sum(1)[:, None] - kxy @ y)
    dy = (2.0 / (n * n)) * c * (y * kyy.sum(1)[:, None] - kyy @ y) \
        - (2.0 / (m * n)) * c * (y * kxy.sum(0)[:, None] - kxy.T @ x)
    return val, dx, dy, sigma


def feature_samples(f: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` feature map -> ``(B*H*W, C)`` per-position samples."""
    b, c, h, w = f.shape
    return f.transpose(0, 2, 3, 1).reshape(b * h * w, c)


def _unsample(g: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    return g.reshape(b, h, w, c).transpose(0, 3, 1, 2)


class FeatureAdapter(Module):
    """1x1 conv from student channels to the paired teacher layer's channels."""

    def __init__(self, c_student: int, c_teacher: int, rng=None):
        super().__init__()
        self.conv = Conv2d(c_student, c_teacher, 1, rng=rng)
        if c_student == c_teacher:
            self.conv.params["weight"][...] = np.eye(c_student)[:, :, None, None]
        self.c_teacher = c_teacher

    def forward(self, f):
        return self.conv(f)

    def backward(self, dy):
        return self.conv.backward(dy)


def _check_lists(student_feats, teacher_feats, adapters):
    if not (len(student_feats) == len(teacher_feats) == len(adapters)):
        raise ValueError(
            f"layer lists differ: {len(student_feats)} student, {len(teacher_feats)} teacher, "
            f"{len(adapters)} adapters"
        )
    if not student_feats:
        raise ValueError("no feature layers to distill")


def mse_dis(student_feats, teacher_feats, adapters, reduction: str = "sum") -> float:
    return mse_dis_and_grad(student_feats, teacher_feats, adapters, reduction, backward=False)[0]


def mse_dis_and_grad(student_feats, teacher_feats, adapters, reduction: str = "sum",
                     backward: bool = True):
    """Mean over layers of ``||adapter(f_s) - f_t||^2``.

    ``reduction="sum"`` takes the squared norm of each layer; ``"mean"`` divides
    it by the element count. With ``backward`` the adapters accumulate their
    parameter gradients and the student-feature gradients are returned.
    """
    _check_lists(student_feats, teacher_feats, adapters)
    n = len(student_feats)
    total = 0.0
    grads = []
    for fs, ft, ad in zip(student_feats, teacher_feats, adapters):
        a = ad.forward(fs)
        if a.shape != ft.shape:
            raise ValueError(f"adapted student feature {a.shape} != teacher {ft.shape}")
        diff = a - ft
        norm = diff.size if reduction == "mean" else 1
        total += float((diff.astype(np.float64) ** 2).sum()) / norm / n
        if backward:
            grads.append(ad.backward(2.0 * diff / norm / n))
    return total, grads


def dis_loss(student_feats, teacher_feats, adapters, cfg: KernelConfig = KernelConfig(),
             lam: float = 0.1, **kw) -> float:
    return dis_loss_and_grad(student_feats, teacher_feats, adapters, cfg, lam, backward=False, **kw)[0]


def dis_loss_and_grad(student_feats, teacher_feats, adapters, cfg: KernelConfig = KernelConfig(),
                      lam: float = 0.1, reduction: str = "sum", max_samples: int = 1024,
                      rng: np.random.Generator | None = None, backward: bool = True):
    """Combined distillation loss.

    MMD is computed per layer between adapted-student and teacher per-position
    samples (at most ``max_samples`` drawn per set with ``rng``) and averaged
    over layers. Returns ``(total, parts, student_grads)``.
    """
    mse, g_mse = mse_dis_and_grad(student_feats, teacher_feats, adapters, reduction, backward)
    parts = {"mse_dis": mse, "mmd_dis": 0.0}
    if lam == 0.0:
        return mse, parts, g_mse
    n = len(student_feats)
    mmd_total = 0.0
    g_out = list(g_mse) if backward else []
    for i, (fs, ft, ad) in enumerate(zip(student_feats, teacher_feats, adapters)):
        a = ad.forward(fs)
        ps, pt = feature_samples(a), feature_samples(ft)
        idx_s = _subsample(ps.shape[0], max_samples, rng)
        idx_t = _subsample(pt.shape[0], max_samples, rng)
        val, dps, _, _ = mmd2_and_grad(ps[idx_s], pt[idx_t], cfg, grad=backward)
        mmd_total += val / n
        if backward:
            full = np.zeros(ps.shape, dtype=np.float64)
            np.add.at(full, idx_s, dps * (lam / n))
            g_out[i] = g_out[i] + ad.backward(_unsample(full, a.shape).astype(a.dtype))
    parts["mmd_dis"] = mmd_total
    return mse + lam * mmd_total, parts, g_out


def _subsample(n: int, k: int, rng) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    if rng is None:
        raise ValueError("subsampling needs a seeded rng")
    return np.sort(rng.choice(n, size=k, replace=False))
