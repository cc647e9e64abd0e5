"""Lightweight replacements for 3x3 convolutions and global self-attention.

* :class:`DSCLayer` - direction-separable conv: horizontal (1x3), vertical
  (3x1) and diagonal (vertical applied after horizontal) depthwise branches,
  per-channel weighted fusion, then two pointwise convs.
* :class:`FSCLayer` - frequency-separable conv: a depthwise conv on the input
  (low band) and one on the box-filter residual (high band), fused the same way.
* :class:`QGAMLayer` - query-driven global aggregation: ``M`` learned query
  tokens gather context from the ``N`` input tokens, which then read it back.
  Score cost is ``2*N*M*d`` instead of ``N**2 * d``.
"""
from __future__ import annotations

import numpy as np

from .layers import Conv2d, Module, lecun_normal, make_activation, tally
from .tensorcore import (
    box_blur3,
    box_blur3_backward,
    conv2d,
    conv2d_backward,
    softmax,
    softmax_backward,
)


class _SeparableBase(Module):
    n_branches = 0

    def __init__(self, c_in: int, c_out: int, rng=None, act: str = "silu", hidden: int | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        hidden = hidden or c_out
        self.add_param("fusion", np.full((self.n_branches, c_in), 1.0 / self.n_branches))
        self.pw1 = Conv2d(c_in, hidden, 1, rng=rng)
        self.act = make_activation(act)
        self.pw2 = Conv2d(hidden, c_out, 1, rng=rng)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"expected (B, {self.c_in}, H, W) input, got {x.shape}")

    def _fuse(self, branches):
        w = self.params["fusion"]
        self._branches = branches
        fused = sum(w[i][None, :, None, None] * b for i, b in enumerate(branches))
        tally(len(branches) * fused.size)
        return self.pw2(self.act(self.pw1(fused)))

    def _unfuse(self, dy):
        """Backprop through the pointwise head and fusion; returns branch grads."""
        dfused = self.pw1.backward(self.act.backward(self.pw2.backward(dy)))
        w = self.params["fusion"]
        for i, b in enumerate(self._branches):
            self.grads["fusion"][i] += (dfused * b).sum(axis=(0, 2, 3))
        return [dfused * w[i][None, :, None, None] for i in range(len(self._branches))]


class DSCLayer(_SeparableBase):
    n_branches = 3

    def __init__(self, c_in: int, c_out: int, rng=None, act: str = "silu", hidden: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(c_in, c_out, rng=rng, act=act, hidden=hidden)
        self.dw_h = Conv2d(c_in, c_in, (1, 3), padding=(0, 1), groups=c_in, rng=rng)
        self.dw_v = Conv2d(c_in, c_in, (3, 1), padding=(1, 0), groups=c_in, rng=rng)

    def forward(self, x):
        self._check(x)
        self._x = x
        kh, kv = self.dw_h.kernel, self.dw_v.kernel
        h = conv2d(x, kh)
        v = conv2d(x, kv)
        self._h = h
        d = conv2d(h, kv)
        tally(3 * (h.size + v.size + d.size))
        return self._fuse([h, v, d])

    def backward(self, dy):
        dh, dv, dd = self._unfuse(dy)
        kh, kv = self.dw_h.kernel, self.dw_v.kernel
        dh2, dwv_a, dbv_a = conv2d_backward(dd, self._h, kv)
        dx_v, dwv_b, dbv_b = conv2d_backward(dv, self._x, kv)
        dx_h, dwh, dbh = conv2d_backward(dh + dh2, self._x, kh)
        self.dw_v.grads["weight"] += dwv_a + dwv_b
        self.dw_v.grads["bias"] += dbv_a + dbv_b
        self.dw_h.grads["weight"] += dwh
        self.dw_h.grads["bias"] += dbh
        return dx_h + dx_v


class FSCLayer(_SeparableBase):
    n_branches = 2

    def __init__(self, c_in: int, c_out: int, rng=None, act: str = "silu", hidden: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(c_in, c_out, rng=rng, act=act, hidden=hidden)
        self.dw_low = Conv2d(c_in, c_in, 3, groups=c_in, rng=rng)
        self.dw_high = Conv2d(c_in, c_in, 3, groups=c_in, rng=rng)

    def forward(self, x):
        self._check(x)
        low = self.dw_low(x)
        resid = x - box_blur3(x)
        tally(9 * x.size)
        high = self.dw_high(resid)
        return self._fuse([low, high])

    def backward(self, dy):
        dlow, dhigh = self._unfuse(dy)
        dx = self.dw_low.backward(dlow)
        dres = self.dw_high.backward(dhigh)
        return dx + dres - box_blur3_backward(dres)


def dsc_forward(x: np.ndarray, layer: DSCLayer) -> np.ndarray:
    return layer.forward(x)


def fsc_forward(x: np.ndarray, layer: FSCLayer) -> np.ndarray:
    return layer.forward(x)


# ----------------------------------------------------------------------------
# attention

def cross_attention(xq, xkv, wq, wk, wv):
    """Softmax cross-attention ``softmax((xq wq)(xkv wk)^T / sqrt(d)) (xkv wv)``.

    ``xq`` may be 2-D ``(M, d_in)`` (shared learned queries) or batched
    ``(B, M, d_in)``; ``xkv`` is ``(B, N, d_in)``. Returns ``(out, cache)``.
    """
    q = xq @ wq
    k = xkv @ wk
    v = xkv @ wv
    scale = 1.0 / np.sqrt(wq.shape[1])
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    a = softmax(s, axis=-1)
    out = a @ v
    tally(q.size * wq.shape[0] + k.size * wk.shape[0] + v.size * wv.shape[0]
          + s.size * q.shape[-1] + out.size * a.shape[-1])
    return out, (xq, xkv, q, k, v, a, scale)


def cross_attention_backward(dout, cache, wq, wk, wv):
    xq, xkv, q, k, v, a, scale = cache
    da = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ dout
    ds = softmax_backward(da, a, axis=-1) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    if xq.ndim == 2:
        dwq = xq.T @ dq.sum(axis=0)
        dxq = (dq @ wq.T).sum(axis=0)
    else:
        dwq = np.einsum("bmi,bmo->io", xq, dq)
        dxq = dq @ wq.T
    dwk = np.einsum("bni,bno->io", xkv, dk)
    dwv = np.einsum("bni,bno->io", xkv, dv)
    dxkv = dk @ wk.T + dv @ wv.T
    return dxq, dxkv, dwq, dwk, dwv


class SelfAttention(Module):
    """Single-head softmax self-attention over ``(B, N, d)`` tokens."""

    def __init__(self, d: int, d_attn: int | None = None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        da = d_attn or d
        self.add_param("wq", lecun_normal(rng, (d, da), d))
        self.add_param("wk", lecun_normal(rng, (d, da), d))
        self.add_param("wv", lecun_normal(rng, (d, d), d))

    def forward(self, f):
        p = self.params
        out, self._cache = cross_attention(f, f, p["wq"], p["wk"], p["wv"])
        self.attn = self._cache[5]
        return out

    def backward(self, dout):
        p = self.params
        dxq, dxkv, dwq, dwk, dwv = cross_attention_backward(dout, self._cache, p["wq"], p["wk"], p["wv"])
        self.grads["wq"] += dwq
        self.grads["wk"] += dwk
        self.grads["wv"] += dwv
        return dxq + dxkv


class QGAMLayer(Module):
    """Two cross-attentions through ``M`` learnable query tokens."""

    def __init__(self, d: int, m: int = 64, d_attn: int | None = None, d_prime: int | None = None,
                 rng=None, n_tokens: int | None = None):
        super().__init__()
        if n_tokens is not None and not m < n_tokens:
            raise ValueError(f"QGAM needs fewer queries than tokens (M={m}, N={n_tokens})")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.m = d, m
        da, dp = d_attn or d, d_prime or d
        self.add_param("queries", rng.standard_normal((m, d)))
        self.add_param("wq", lecun_normal(rng, (d, da), d))
        self.add_param("wk", lecun_normal(rng, (d, da), d))
        self.add_param("wv", lecun_normal(rng, (d, d), d))
        self.add_param("wq2", lecun_normal(rng, (d, dp), d))
        self.add_param("wk2", lecun_normal(rng, (d, dp), d))
        self.add_param("wv2", lecun_normal(rng, (d, d), d))

    def forward(self, f):
        if f.ndim == 2:
            f = f[None]
            self._squeeze = True
        else:
            self._squeeze = False
        if f.shape[-1] != self.d:
            raise ValueError(f"token dim {f.shape[-1]} != layer dim {self.d}")
        p = self.params
        g, self._c1 = cross_attention(p["queries"], f, p["wq"], p["wk"], p["wv"])
        out, self._c2 = cross_attention(f, g, p["wq2"], p["wk2"], p["wv2"])
        self.context = g
        self.gather_attn = self._c1[5]  # (B, M, N): per-query maps over tokens
        return out[0] if self._squeeze else out

    def backward(self, dout):
        if self._squeeze:
            dout = dout[None]
        p = self.params
        df1, dg, dwq2, dwk2, dwv2 = cross_attention_backward(dout, self._c2, p["wq2"], p["wk2"], p["wv2"])
        dq, df2, dwq, dwk, dwv = cross_attention_backward(dg, self._c1, p["wq"], p["wk"], p["wv"])
        for k, v in (("wq2", dwq2), ("wk2", dwk2), ("wv2", dwv2), ("wq", dwq), ("wk", dwk),
                     ("wv", dwv), ("queries", dq)):
            self.grads[k] += v
        df = df1 + df2
        return df[0] if self._squeeze else df


def qgam_forward(f_in: np.ndarray, layer: QGAMLayer) -> np.ndarray:
    return layer.forward(f_in)


# ----------------------------------------------------------------------------
# cost accounting

def count_params(op: str, c_in: int, c_out: int | None = None, *, d: int | None = None,
                 m: int = 64, bias: bool = True) -> int:
    """Parameter count of one operator, matching the layer classes above."""
    c_out = c_in if c_out is None else c_out
    b = 1 if bias else 0
    if op == "conv3x3":
        return 9 * c_in * c_out + b * c_out
    if op == "dwconv3x3":
        return 9 * c_in + b * c_in
    if op == "dsc":
        return (3 + b) * c_in * 2 + 3 * c_in + (c_in * c_out + b * c_out) + (c_out * c_out + b * c_out)
    if op == "fsc":
        return (9 + b) * c_in * 2 + 2 * c_in + (c_in * c_out + b * c_out) + (c_out * c_out + b * c_out)
    if op == "self_attention":
        d = d or c_in
        return 3 * d * d
    if op == "qgam":
        d = d or c_in
        return m * d + 6 * d * d
    raise ValueError(f"unknown op {op!r}")


def count_macs(op: str, *, N: int = 0, M: int = 0, d: int = 0, C: int = 0, H: int = 0, W: int = 0,
               C_out: int | None = None, part: str = "total") -> int:
    """Multiply-accumulate count of one operator application.

    ``part="score"`` restricts attention ops to the query-key products, which is
    where the quadratic-versus-linear difference lives. Conv ops ignore ``part``.
    """
    if part not in ("total", "score"):
        raise ValueError("part must be 'total' or 'score'")
    c_out = C if C_out is None else C_out
    hw = H * W
    if op == "self_attention":
        score = N * N * d
        if part == "score":
            return score
        return 3 * N * d * d + score + N * N * d
    if op == "qgam":
        score = 2 * N * M * d
        if part == "score":
            return score
        proj = 3 * M * d * d + 3 * N * d * d
        return proj + score + M * N * d + N * M * d
    if op == "conv3x3":
        return 9 * C * c_out * hw
    if op == "conv1x1":
        return C * c_out * hw
    if op == "dwconv3x3":
        return 9 * C * hw
    if op == "dsc":
        return 3 * 3 * C * hw + 3 * C * hw + C * c_out * hw + c_out * c_out * hw
    if op == "fsc":
        return 9 * C * hw + 2 * 9 * C * hw + 2 * C * hw + C * c_out * hw + c_out * c_out * hw
    raise ValueError(f"unknown op {op!r}")
