"""Dense tensor substrate.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout (or token-major
``(B, N, d)`` for attention). Everything here is a pure function; layers in
:mod:`slimdiff.layers` compose these primitives and keep their own caches.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """Raised when a tensor carries NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class ConvKernel:
    """Weights ``(C_out, C_in // groups, kH, kW)`` plus optional bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1
    stride: int = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError("conv weight must be 4-D")
        c_out = self.weight.shape[0]
        if self.groups < 1 or c_out % self.groups:
            raise ValueError(f"groups={self.groups} must divide C_out={c_out}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ValueError("bias must have shape (C_out,)")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.weight.shape[1] == 1 and self.groups == self.out_channels

    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``(C*kh*kw, B*ho*wo)`` patch matrix, channel-major to match the weight layout."""
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def _out_hw(xp, kh, kw, stride):
    return (xp.shape[2] - kh) // stride + 1, (xp.shape[3] - kw) // stride + 1


def _dense_corr(xp: np.ndarray, w: np.ndarray, stride: int, cache: dict | None = None) -> np.ndarray:
    o, c, kh, kw = w.shape
    b = xp.shape[0]
    ho, wo = _out_hw(xp, kh, kw, stride)
    if kh == 1 and kw == 1:
        xs = xp[:, :, ::stride, ::stride]
        out = w.reshape(o, c) @ xs.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        if cache is not None:
            cache["cols"] = cols
        out = w.reshape(o, -1) @ cols
    return np.ascontiguousarray(out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))


def _depthwise_corr(xp: np.ndarray, w: np.ndarray, stride: int, mult: int = 1) -> np.ndarray:
    # w: (C*mult, 1, kh, kw); output channel o reads input channel o // mult
    kh, kw = w.shape[2:]
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    src = np.repeat(xp, mult, axis=1) if mult > 1 else xp
    out = np.zeros((b, c * mult, ho, wo), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            tap = src[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += tap * w[None, :, 0, i, j, None, None]
    return out


def _corr(xp: np.ndarray, w: np.ndarray, stride: int, groups: int, cache=None) -> np.ndarray:
    if groups == 1:
        return _dense_corr(xp, w, stride, cache)
    c_in = xp.shape[1]
    if w.shape[1] == 1 and groups == c_in:
        return _depthwise_corr(xp, w, stride, mult=w.shape[0] // c_in)
    cig = c_in // groups
    cog = w.shape[0] // groups
    outs = [
        _dense_corr(xp[:, g * cig:(g + 1) * cig], w[g * cog:(g + 1) * cog], stride)
        for g in range(groups)
    ]
    return np.concatenate(outs, axis=1)


def conv2d(x: np.ndarray, kernel: ConvKernel, cache: dict | None = None) -> np.ndarray:
    """2-D cross-correlation (no kernel flip), NCHW.

    A ``cache`` dict receives the patch matrix so :func:`conv2d_backward` can
    skip rebuilding it.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if x.shape[1] != kernel.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernel expects {kernel.in_channels}"
        )
    check_finite(x, "conv2d input")
    ph, pw = _pair(kernel.padding)
    xp = _pad(x, ph, pw)
    kh, kw = kernel.kernel_size
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError("kernel larger than padded input")
    y = _corr(xp, kernel.weight, kernel.stride, kernel.groups, cache)
    if kernel.bias is not None:
        y = y + kernel.bias[None, :, None, None]
    return y


def conv2d_backward(dy: np.ndarray, x: np.ndarray, kernel: ConvKernel, cache: dict | None = None):
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv2d` given upstream ``dy``."""
    w = kernel.weight
    s = kernel.stride
    g = kernel.groups
    ph, pw = _pair(kernel.padding)
    kh, kw = kernel.kernel_size
    xp = _pad(x, ph, pw)
    b, c_in, hp, wp = xp.shape
    c_out = w.shape[0]
    ho, wo = dy.shape[2:]

    db = dy.sum(axis=(0, 2, 3)) if kernel.bias is not None else None

    # weight gradient
    if g == 1:
        dyo = dy.transpose(1, 0, 2, 3).reshape(c_out, -1)
        if kh == 1 and kw == 1:
            cols = xp[:, :, ::s, ::s][:, :, :ho, :wo].transpose(1, 0, 2, 3).reshape(c_in, -1)
        elif cache is not None and "cols" in cache:
            cols = cache.pop("cols")
        else:
            cols = _im2col(xp, kh, kw, s, ho, wo)
        dw = (dyo @ cols.T).reshape(w.shape)
    elif w.shape[1] == 1 and g == c_in:
        mult = c_out // c_in
        src = np.repeat(xp, mult, axis=1) if mult > 1 else xp
        dw = np.empty(w.shape, dtype=np.result_type(dy, xp))
        for i in range(kh):
            for j in range(kw):
                tap = src[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                dw[:, 0, i, j] = np.einsum("bohw,bohw->o", dy, tap)
    else:
        cig, cog = c_in // g, c_out // g
        dw = np.concatenate([
            (dy[:, k * cog:(k + 1) * cog].transpose(1, 0, 2, 3).reshape(cog, -1)
             @ _im2col(xp[:, k * cig:(k + 1) * cig], kh, kw, s, ho, wo).T).reshape(cog, cig, kh, kw)
            for k in range(g)
        ], axis=0)

    # input gradient: full correlation of the dilated dy with the flipped kernel
    if s > 1:
        dyd = np.zeros((b, c_out, (ho - 1) * s + 1, (wo - 1) * s + 1), dtype=dy.dtype)
        dyd[:, :, ::s, ::s] = dy
    else:
        dyd = dy
    dyp = _pad(dyd, kh - 1, 0)
    dyp = np.pad(dyp, ((0, 0), (0, 0), (0, 0), (kw - 1, kw - 1))) if kw > 1 else dyp
    wf = w[:, :, ::-1, ::-1]
    if g == 1:
        dxp = _dense_corr(dyp, np.ascontiguousarray(wf.transpose(1, 0, 2, 3)), 1)
    elif w.shape[1] == 1 and g == c_in:
        mult = c_out // c_in
        full = _depthwise_corr(dyp, np.ascontiguousarray(wf), 1)
        dxp = full.reshape(b, c_in, mult, *full.shape[2:]).sum(axis=2) if mult > 1 else full
    else:
        cig, cog = c_in // g, c_out // g
        dxp = np.concatenate([
            _dense_corr(dyp[:, k * cog:(k + 1) * cog],
                        np.ascontiguousarray(wf[k * cog:(k + 1) * cog].transpose(1, 0, 2, 3)), 1)
            for k in range(g)
        ], axis=1)
    # rows/cols of xp never touched by a window (stride remainder) get zero gradient
    eh, ew = hp - dxp.shape[2], wp - dxp.shape[3]
    if eh or ew:
        dxp = np.pad(dxp, ((0, 0), (0, 0), (0, eh), (0, ew)))
    dx = dxp[:, :, ph:hp - ph, pw:wp - pw]
    return np.ascontiguousarray(dx), dw.astype(w.dtype, copy=False), db


def conv2d_reference(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Naive loop implementation of :func:`conv2d`; slow, used as an oracle."""
    w = kernel.weight
    s, g = kernel.stride, kernel.groups
    ph, pw = _pair(kernel.padding)
    xp = _pad(x, ph, pw)
    b, c_in, hp, wp = xp.shape
    c_out, cig, kh, kw = w.shape
    cog = c_out // g
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    y = np.zeros((b, c_out, ho, wo))
    for n in range(b):
        for o in range(c_out):
            grp = o // cog
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cig):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[n, grp * cig + c, yy * s + i, xx * s + j]
                    y[n, o, yy, xx] = acc
    if kernel.bias is not None:
        y += kernel.bias[None, :, None, None]
    return y


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x, "softmax input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
    s = sigmoid(x) if s is None else s
    return s * (1.0 + x * (1.0 - s))


def box_blur3(x: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 mean filter, renormalised at the borders.

    Border pixels average only the in-bounds neighbours, so constant maps are
    preserved. The operator is linear and its adjoint is :func:`box_blur3_backward`.
    """
    count = _box_count(x.shape[2], x.shape[3], x.dtype)
    return _box_sum(x) / count


def box_blur3_backward(dy: np.ndarray) -> np.ndarray:
    count = _box_count(dy.shape[2], dy.shape[3], dy.dtype)
    return _box_sum(dy / count)


def _box_sum(x: np.ndarray) -> np.ndarray:
    xp = _pad(x, 1, 1)
    h, w = x.shape[2:]
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + h, j:j + w]
    return out


def _box_count(h: int, w: int, dtype) -> np.ndarray:
    rows = np.full(h, 3.0)
    cols = np.full(w, 3.0)
    if h > 1:
        rows[0] = rows[-1] = 2.0
    else:
        rows[:] = 1.0
    if w > 1:
        cols[0] = cols[-1] = 2.0
    else:
        cols[:] = 1.0
    return np.outer(rows, cols).astype(dtype)[None, None]


def avg_pool2d(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError("spatial dims must be divisible by the pool size")
    return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))


def upsample_nearest(x: np.ndarray, k: int = 2) -> np.ndarray:
    return x.repeat(k, axis=2).repeat(k, axis=3)


def upsample_nearest_backward(dy: np.ndarray, k: int = 2) -> np.ndarray:
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // k, k, w // k, k).sum(axis=(3, 5))


def space_to_depth(x: np.ndarray, k: int) -> np.ndarray:
    """``(B, C, H, W) -> (B, C*k*k, H/k, W/k)``; inverse of :func:`depth_to_space`."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError("spatial dims must be divisible by the block size")
    y = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(b, c * k * k, h // k, w // k)


def depth_to_space(x: np.ndarray, k: int) -> np.ndarray:
    b, ck, h, w = x.shape
    if ck % (k * k):
        raise ValueError("channel count must be divisible by k*k")
    c = ck // (k * k)
    y = x.reshape(b, c, k, k, h, w).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(b, c, h * k, w * k)


# ----------------------------------------------------------------------------
# RNG

def make_rng(seed: int, name: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, name)``.

    Distinct names give independent streams, so adding a new consumer never
    shifts the draws seen by existing ones.
    """
    digest = hashlib.blake2b(f"{int(seed)}/{name}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def gaussian(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    return rng.standard_normal(shape).astype(dtype, copy=False)


# ----------------------------------------------------------------------------
# Gradient checking

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` is evaluated twice at ``x`` first; differing values mean ``f`` is not
    deterministic and the check would be meaningless.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    f0, f1 = float(f(x.copy())), float(f(x.copy()))
    if f0 != f1:
        raise ValueError("function is not deterministic")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# ----------------------------------------------------------------------------
# Serialization
#
# Binary layout (little-endian):
#   magic  b"SDTN"  (4 bytes)
#   u8     version (1)
#   u8     dtype code: 1 = float32, 2 = float64, 3 = int64, 4 = uint8
#   u16    rank
#   u64 x rank  extents
#   payload, row-major
# A ``<file>.json`` sidecar holds free-form metadata.

MAGIC = b"SDTN"
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensor(path, x: np.ndarray, meta: dict | None = None) -> None:
    path = Path(path)
    arr = np.asarray(x)
    key = arr.dtype if arr.dtype.itemsize == 1 else arr.dtype.newbyteorder("<")
    if key not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    header = bytearray(MAGIC)
    header += bytes([1, _DTYPE_CODES[key]])
    header += np.uint16(arr.ndim).astype("<u2").tobytes()
    header += np.asarray(arr.shape, dtype="<u8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(np.ascontiguousarray(arr, dtype=key).tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": str(key)}
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    code = raw[5]
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    rank = int(np.frombuffer(raw, "<u2", 1, 6)[0])
    shape = tuple(int(v) for v in np.frombuffer(raw, "<u8", rank, 8))
    dt = _CODE_DTYPES[code]
    off = 8 + 8 * rank
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(raw, dt, n, off)
    if off + n * dt.itemsize != len(raw):
        raise ValueError(f"{path}: payload size does not match header")
    return data.reshape(shape).copy()


def load_tensor_meta(path) -> dict:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else {}
