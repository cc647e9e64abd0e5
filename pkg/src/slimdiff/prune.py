"""Toy UNet/VAE construction, semantic pruning, conv fusion and cost accounting.

A :class:`ToyUNetSpec` lists the UNet levels from shallow to deep. Pruning
drops the deepest levels and bridges the gap with one standard ResBlock at the
deepest retained width, so every remaining encoder level keeps its decoder
partner. Operator replacement swaps the 3x3 convs of a level for DSC/FSC and
its self-attention for QGAM.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import Conv2d, Linear, Module, SiLU, mac_tally
from .lightops import DSCLayer, FSCLayer, QGAMLayer, SelfAttention, count_macs, count_params
from .tensorcore import ConvKernel, depth_to_space, space_to_depth, upsample_nearest, upsample_nearest_backward

OPERATORS = ("standard", "dsc", "fsc")
ATTENTIONS = ("none", "self", "qgam")


@dataclass
class LevelSpec:
    width: int
    blocks: int = 1
    operator: str = "standard"
    attention: str = "none"

    def __post_init__(self):
        if self.width < 1 or self.blocks < 1:
            raise ValueError("level width and block count must be positive")
        if self.operator not in OPERATORS:
            raise ValueError(f"operator must be one of {OPERATORS}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}")


@dataclass
class ToyUNetSpec:
    levels: list[LevelSpec]
    in_channels: int = 4
    out_channels: int = 4
    conv_in_kernel: int = 3
    conv_out_kernel: int = 3
    time_conditioning: bool = True
    temb_dim: int = 32
    qgam_queries: int = 64
    deepest_removed: int = 0
    # optional explicit decoder widths, deepest first; must mirror the encoder
    decoder_widths: list[int] | None = None
    removed: list[LevelSpec] = field(default_factory=list)

    def __post_init__(self):
        self.levels = [lv if isinstance(lv, LevelSpec) else LevelSpec(**lv) for lv in self.levels]
        self.removed = [lv if isinstance(lv, LevelSpec) else LevelSpec(**lv) for lv in self.removed]

    @property
    def has_bridge(self) -> bool:
        return self.deepest_removed >= 1

    @property
    def widths(self) -> list[int]:
        return [lv.width for lv in self.levels]

    def validate(self) -> None:
        if not self.levels:
            raise ValueError("a UNet needs at least one level")
        if self.decoder_widths is not None and list(self.decoder_widths) != self.widths[::-1]:
            raise ValueError(
                f"skip pairing broken: decoder widths {list(self.decoder_widths)} do not mirror "
                f"encoder widths {self.widths}"
            )
        if self.deepest_removed != len(self.removed):
            raise ValueError("deepest_removed does not match the removed-level record")
        for k in (self.conv_in_kernel, self.conv_out_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError("conv_in/conv_out kernels must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyUNetSpec":
        return cls(**d)


@dataclass
class VAESpec:
    """Conv encoder/decoder; ``len(widths) - 1`` stride-2 stages."""

    widths: list[int] = field(default_factory=lambda: [8, 16])
    image_channels: int = 1
    latent_channels: int = 4
    # kernel of the channel-compressing/expanding convs at the latent boundary
    boundary_kernel: int = 1
    # affine latent normalisation baked into the boundary convs at init:
    # latent = scale * (pixel - shift)
    latent_scale: float = 1.0
    latent_shift: float = 0.0

    @property
    def downsamples(self) -> int:
        return len(self.widths) - 1

    @property
    def factor(self) -> int:
        return 2 ** self.downsamples

    @property
    def shortcut_channels(self) -> int:
        return self.image_channels * self.factor ** 2

    def validate(self) -> None:
        if not self.widths or min(self.widths) < 1:
            raise ValueError("VAE widths must be positive")
        if self.widths[-1] < self.shortcut_channels:
            raise ValueError(f"deepest VAE width must be >= {self.shortcut_channels} for the pixel shortcut")
        if self.boundary_kernel < 1 or self.boundary_kernel % 2 == 0:
            raise ValueError("boundary_kernel must be a positive odd integer")
        if not self.latent_scale > 0:
            raise ValueError("latent_scale must be positive")


# ----------------------------------------------------------------------------
# building blocks

def _make_op(operator: str, c_in: int, c_out: int, rng, zero: bool = False) -> Module:
    if operator == "standard":
        return Conv2d(c_in, c_out, 3, rng=rng, init="zero" if zero else "lecun")
    layer = {"dsc": DSCLayer, "fsc": FSCLayer}[operator](c_in, c_out, rng=rng)
    if zero:
        layer.pw2.params["weight"][...] = 0.0
    return layer


class ResBlock(Module):
    """``skip(x) + op2(silu(op1(silu(x)) + temb))``; op is a 3x3 conv, DSC or FSC."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int | None = None,
                 operator: str = "standard", rng=None):
        super().__init__()
        self.a1 = SiLU()
        self.op1 = _make_op(operator, c_in, c_out, rng)
        self.temb_proj = Linear(temb_dim, c_out, rng=rng) if temb_dim else None
        self.temb_act = SiLU() if temb_dim else None
        self.a2 = SiLU()
        self.op2 = _make_op(operator, c_out, c_out, rng, zero=True)
        self.skip = Conv2d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x, temb=None):
        h = self.op1(self.a1(x))
        if self.temb_proj is not None:
            if temb is None:
                raise ValueError("time-conditioned block needs an embedding")
            h = h + self.temb_proj(self.temb_act(temb))[:, :, None, None]
        h = self.op2(self.a2(h))
        return (self.skip(x) if self.skip is not None else x) + h

    def backward(self, dy):
        dh = self.a2.backward(self.op2.backward(dy))
        dtemb = None
        if self.temb_proj is not None:
            dtemb = self.temb_act.backward(self.temb_proj.backward(dh.sum(axis=(2, 3))))
        dx = self.a1.backward(self.op1.backward(dh))
        dx = dx + (self.skip.backward(dy) if self.skip is not None else dy)
        return dx, dtemb


class AttnBlock(Module):
    """Residual global mixing over the ``H*W`` tokens of a feature map."""

    def __init__(self, c: int, kind: str, m: int = 64, rng=None):
        super().__init__()
        self.kind = kind
        self.attn = SelfAttention(c, rng=rng) if kind == "self" else QGAMLayer(c, m=m, rng=rng)

    def forward(self, x):
        b, c, h, w = x.shape
        if self.kind == "qgam" and not self.attn.m < h * w:
            raise ValueError(f"QGAM with M={self.attn.m} queries needs more than {h * w} tokens")
        tok = x.reshape(b, c, h * w).transpose(0, 2, 1)
        out = self.attn(tok)
        return x + out.transpose(0, 2, 1).reshape(b, c, h, w)

    def backward(self, dy):
        b, c, h, w = dy.shape
        dtok = self.attn.backward(dy.reshape(b, c, h * w).transpose(0, 2, 1))
        return dy + dtok.transpose(0, 2, 1).reshape(b, c, h, w)


class TimeEmbedding(Module):
    """Sinusoidal features of a continuous timestep followed by a 2-layer MLP."""

    def __init__(self, dim: int, rng=None):
        super().__init__()
        self.dim = dim
        half = dim // 2
        self.freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        self.l1 = Linear(dim, dim, rng=rng)
        self.act = SiLU()
        self.l2 = Linear(dim, dim, rng=rng)

    def forward(self, t):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        self._arg = t[:, None] * self.freqs[None, :]
        feats = np.concatenate([np.sin(self._arg), np.cos(self._arg)], axis=1)
        dtype = self.l1.params["weight"].dtype
        return self.l2(self.act(self.l1(feats.astype(dtype))))

    def backward(self, de):
        df = self.l1.backward(self.act.backward(self.l2.backward(de)))
        half = self.freqs.size
        ds, dc = df[:, :half], df[:, half:]
        return ((ds * np.cos(self._arg) - dc * np.sin(self._arg)) * self.freqs[None, :]).sum(axis=1)


class _Down(Module):
    def __init__(self, c: int, rng=None):
        super().__init__()
        self.conv = Conv2d(c, c, 3, stride=2, padding=1, rng=rng)

    def forward(self, x):
        return self.conv(x)

    def backward(self, dy):
        return self.conv.backward(dy)


class _Up(Module):
    def __init__(self, c_in: int, c_out: int, rng=None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng=rng)

    def forward(self, x):
        return self.conv(upsample_nearest(x, 2))

    def backward(self, dy):
        return upsample_nearest_backward(self.conv.backward(dy), 2)


class _Level(Module):
    def __init__(self, c_in: int, lv: LevelSpec, temb_dim, m: int, rng):
        super().__init__()
        self.blocks = [ResBlock(c_in if i == 0 else lv.width, lv.width, temb_dim, lv.operator, rng)
                       for i in range(lv.blocks)]
        self.attn = AttnBlock(lv.width, lv.attention, m, rng) if lv.attention != "none" else None

    def forward(self, x, temb):
        for blk in self.blocks:
            x = blk(x, temb)
        return self.attn(x) if self.attn is not None else x

    def backward(self, dy):
        if self.attn is not None:
            dy = self.attn.backward(dy)
        dtemb = None
        for blk in reversed(self.blocks):
            dy, dt = blk.backward(dy)
            if dt is not None:
                dtemb = dt if dtemb is None else dtemb + dt
        return dy, dtemb


class UNet(Module):
    """Encoder/decoder with per-level skips.

    Feature maps are exposed as ``enc{i}`` (encoder output of level ``i``)
    and ``dec{i}`` (decoder output of level ``i`` before upsampling).
    """

    def __init__(self, spec: ToyUNetSpec, rng=None):
        super().__init__()
        spec.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        lv = spec.levels
        te = spec.temb_dim if spec.time_conditioning else None
        m = spec.qgam_queries
        self.temb = TimeEmbedding(spec.temb_dim, rng) if spec.time_conditioning else None
        self.conv_in = Conv2d(spec.in_channels, lv[0].width, spec.conv_in_kernel, rng=rng)
        self.enc = []
        self.down = []
        c = lv[0].width
        for i, level in enumerate(lv):
            self.enc.append(_Level(c, level, te, m, rng))
            c = level.width
            if i < len(lv) - 1:
                self.down.append(_Down(c, rng))
        self.bridge = ResBlock(c, c, te, "standard", rng) if spec.has_bridge else None
        self.dec = []
        self.up = []
        for i in reversed(range(len(lv))):
            self.dec.append(_Level(2 * lv[i].width, lv[i], te, m, rng))
            if i > 0:
                self.up.append(_Up(lv[i].width, lv[i - 1].width, rng))
        self.out_act = SiLU()
        self.conv_out = Conv2d(lv[0].width, spec.out_channels, spec.conv_out_kernel, rng=rng)
        self.features: dict[str, np.ndarray] = {}

    @property
    def feature_names(self) -> list[str]:
        n = len(self.spec.levels)
        return [f"enc{i}" for i in range(n)] + [f"dec{i}" for i in reversed(range(n))]

    def forward(self, x, t=None):
        if self.temb is None and t is not None:
            raise ValueError("this network has no time conditioning; do not pass a timestep")
        if self.temb is not None and t is None:
            raise ValueError("time-conditioned network needs a timestep")
        n = len(self.spec.levels)
        f = 2 ** (n - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial size must be divisible by {f}")
        temb = None
        if self.temb is not None:
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
            temb = self.temb(t)
        self.features = {}
        h = self.conv_in(x)
        skips = []
        for i in range(n):
            h = self.enc[i](h, temb)
            self.features[f"enc{i}"] = h
            skips.append(h)
            if i < n - 1:
                h = self.down[i](h)
        if self.bridge is not None:
            h = self.bridge(h, temb)
        self._split = []
        for k, i in enumerate(reversed(range(n))):
            self._split.append(h.shape[1])
            h = self.dec[k](np.concatenate([h, skips[i]], axis=1), temb)
            self.features[f"dec{i}"] = h
            if i > 0:
                h = self.up[k](h)
        return self.conv_out(self.out_act(h))

    def backward(self, dy, feature_grads: dict | None = None):
        """Returns ``(dx, dt)``; ``dt`` is ``None`` without time conditioning.

        ``feature_grads`` adds external gradients (e.g. distillation) at the
        named feature maps.
        """
        fg = feature_grads or {}
        n = len(self.spec.levels)
        dtemb = None

        def acc(d):
            nonlocal dtemb
            if d is not None:
                dtemb = d if dtemb is None else dtemb + d

        dh = self.out_act.backward(self.conv_out.backward(dy))
        dskips = [None] * n
        # walk decoder from shallow (last run) to deep (first run)
        order = list(enumerate(reversed(range(n))))
        for k, i in reversed(order):
            if i > 0:
                dh = self.up[k].backward(dh)
            if f"dec{i}" in fg:
                dh = dh + fg[f"dec{i}"]
            dcat, dt = self.dec[k].backward(dh)
            acc(dt)
            c = self._split[k]
            dh, dskips[i] = dcat[:, :c], dcat[:, c:]
        if self.bridge is not None:
            dh, dt = self.bridge.backward(dh)
            acc(dt)
        for i in reversed(range(n)):
            if i < n - 1:
                dh = self.down[i].backward(dh)
            dh = dh + dskips[i]
            if f"enc{i}" in fg:
                dh = dh + fg[f"enc{i}"]
            dh, dt = self.enc[i].backward(dh)
            acc(dt)
        dx = self.conv_in.backward(dh)
        dtime = self.temb.backward(dtemb) if self.temb is not None else None
        return dx, dtime


def build_unet(spec: ToyUNetSpec, rng=None) -> UNet:
    return UNet(spec, rng)


class EncoderTrunk(Module):
    """VAE encoder up to (not including) its last, channel-compressing conv.

    A parameter-free space-to-depth shortcut is added to the first
    ``image_channels * factor**2`` output channels, so the linear path from
    pixels to latents is lossless and the conv body learns a correction.
    """

    def __init__(self, spec: VAESpec, rng=None):
        super().__init__()
        w = spec.widths
        self.factor, self.k = spec.factor, spec.shortcut_channels
        self.layers = [Conv2d(spec.image_channels, w[0], 3, rng=rng), SiLU()]
        for i in range(spec.downsamples):
            self.layers += [Conv2d(w[i], w[i + 1], 3, stride=2, padding=1, rng=rng), SiLU()]
        self.layers += [Conv2d(w[-1], w[-1], 3, rng=rng, init="zero"), SiLU()]

    def forward(self, x):
        short = space_to_depth(x, self.factor)
        for layer in self.layers:
            x = layer(x)
        x[:, :self.k] += short
        return x

    def backward(self, dy):
        ds = depth_to_space(dy[:, :self.k], self.factor)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy + ds


class DecoderTrunk(Module):
    """VAE decoder after its first, channel-expanding conv.

    Mirrors the encoder shortcut: depth-to-space of the first channels is
    added to the output.
    """

    def __init__(self, spec: VAESpec, rng=None):
        super().__init__()
        w = spec.widths
        self.factor, self.k = spec.factor, spec.shortcut_channels
        self.layers = [SiLU(), Conv2d(w[-1], w[-1], 3, rng=rng), SiLU()]
        for i in reversed(range(spec.downsamples)):
            self.layers += [_Up(w[i + 1], w[i], rng), SiLU()]
        self.layers += [Conv2d(w[0], spec.image_channels, 3, rng=rng, init="zero")]

    def forward(self, x):
        short = depth_to_space(x[:, :self.k], self.factor)
        for layer in self.layers:
            x = layer(x)
        return x + short

    def backward(self, dy):
        ds = space_to_depth(dy, self.factor)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        dy = dy.copy()
        dy[:, :self.k] += ds
        return dy


class ToyVAE(Module):
    def __init__(self, spec: VAESpec = VAESpec(), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        spec.validate()
        self.spec = spec
        self.enc_trunk = EncoderTrunk(spec, rng)
        k = spec.boundary_kernel
        self.enc_last = Conv2d(spec.widths[-1], spec.latent_channels, k, rng=rng, init="zero")
        self.dec_first = Conv2d(spec.latent_channels, spec.widths[-1], k, rng=rng, init="zero")
        self.dec_trunk = DecoderTrunk(spec, rng)
        # boundary convs start as a channel selection/embedding of the shortcut
        # channels; with zero-initialised trunk bodies the codec is then exact
        # whenever latent_channels == shortcut_channels
        n = min(spec.latent_channels, spec.shortcut_channels)
        idx = np.arange(n)
        a, b = spec.latent_scale, spec.latent_shift
        self.enc_last.params["weight"][idx, idx, k // 2, k // 2] = a
        self.enc_last.params["bias"][idx] = -a * b
        self.dec_first.params["weight"][idx, idx, k // 2, k // 2] = 1.0 / a
        self.dec_first.params["bias"][idx] = b

    def encode(self, x):
        return self.enc_last(self.enc_trunk(x))

    def encode_backward(self, dz):
        return self.enc_trunk.backward(self.enc_last.backward(dz))

    def decode(self, z):
        return self.dec_trunk(self.dec_first(z))

    def decode_backward(self, dy):
        return self.dec_first.backward(self.dec_trunk.backward(dy))

    def forward(self, x):
        return self.decode(self.encode(x))

    def backward(self, dy):
        return self.encode_backward(self.decode_backward(dy))


# ----------------------------------------------------------------------------
# spec transforms

def semantic_prune(spec: ToyUNetSpec, levels_to_remove: int) -> ToyUNetSpec:
    """Drop the deepest levels; the network builder inserts a ResBlock bridge."""
    if levels_to_remove < 0:
        raise ValueError("levels_to_remove must be non-negative")
    if levels_to_remove >= len(spec.levels):
        raise ValueError("cannot remove every level")
    new = copy.deepcopy(spec)
    if levels_to_remove == 0:
        return new
    cut = len(spec.levels) - levels_to_remove
    new.removed = list(new.levels[cut:]) + new.removed
    new.levels = new.levels[:cut]
    new.deepest_removed = spec.deepest_removed + levels_to_remove
    new.decoder_widths = None
    new.validate()
    return new


def replace_operators(spec: ToyUNetSpec, operators, attention_map=None) -> ToyUNetSpec:
    """Per-level operator swap; attention kinds go through ``attention_map``."""
    attention_map = attention_map or {"self": "qgam"}
    new = copy.deepcopy(spec)
    if len(operators) != len(new.levels):
        raise ValueError("need one operator per level")
    for lv, op in zip(new.levels, operators):
        lv.operator = op
        lv.attention = attention_map.get(lv.attention, lv.attention)
    return new


def student_spec(teacher: ToyUNetSpec, levels_to_remove: int, operators, fused_channels: int,
                 fused_kernel: int = 5) -> ToyUNetSpec:
    """Pruned, operator-replaced, time-free spec whose conv_in/conv_out are fused convs."""
    s = replace_operators(semantic_prune(teacher, levels_to_remove), operators)
    s.time_conditioning = False
    s.in_channels = s.out_channels = fused_channels
    s.conv_in_kernel = s.conv_out_kernel = fused_kernel
    s.validate()
    return s


# ----------------------------------------------------------------------------
# conv fusion

def fuse_convs(a: ConvKernel, b: ConvKernel) -> ConvKernel:
    """Single conv equal to ``conv(conv(x, a), b)`` with no nonlinearity between.

    Exact everywhere for unpadded kernels. With zero padding the two differ only
    within ``b``'s padding width of the border, where the composed path sees the
    intermediate's zero padding.
    """
    for k, name in ((a, "a"), (b, "b")):
        if k.groups != 1:
            raise ValueError(f"kernel {name} is grouped; fusion supports dense convs only")
        if k.stride != 1:
            raise ValueError(f"kernel {name} is strided; fusion supports stride 1 only")
    if a.out_channels != b.in_channels:
        raise ValueError("channel mismatch between the two kernels")
    wa, wb = a.weight, b.weight
    ka_h, ka_w = wa.shape[2:]
    kb_h, kb_w = wb.shape[2:]
    fused = np.zeros((wb.shape[0], wa.shape[1], ka_h + kb_h - 1, ka_w + kb_w - 1),
                     dtype=np.result_type(wa, wb))
    for q1 in range(kb_h):
        for q2 in range(kb_w):
            fused[:, :, q1:q1 + ka_h, q2:q2 + ka_w] += np.einsum("oc,cipq->oipq", wb[:, :, q1, q2], wa)
    bias = None
    if a.bias is not None or b.bias is not None:
        bias = np.zeros(wb.shape[0], dtype=fused.dtype)
        if a.bias is not None:
            bias += wb.sum(axis=(2, 3)) @ a.bias
        if b.bias is not None:
            bias += b.bias
    pa, pb = a.padding, b.padding
    pa = (pa, pa) if isinstance(pa, int) else tuple(pa)
    pb = (pb, pb) if isinstance(pb, int) else tuple(pb)
    pad = (pa[0] + pb[0], pa[1] + pb[1])
    return ConvKernel(fused, bias, 1, 1, pad if pad[0] != pad[1] else pad[0])


# ----------------------------------------------------------------------------
# accounting

def _conv(ci, co, k=3):
    return k * k * ci * co + co


def _op_params(op, ci, co):
    return _conv(ci, co) if op == "standard" else count_params(op, ci, co)


def _res_params(ci, co, te, op):
    n = _op_params(op, ci, co) + _op_params(op, co, co)
    if ci != co:
        n += ci * co + co
    if te:
        n += te * co + co
    return n


def _attn_params(kind, c, m):
    if kind == "none":
        return 0
    return count_params("self_attention", c) if kind == "self" else count_params("qgam", c, m=m)


def unet_param_count(spec: ToyUNetSpec) -> int:
    """Closed-form parameter count of :func:`build_unet`'s network."""
    lv = spec.levels
    te = spec.temb_dim if spec.time_conditioning else 0
    n = _conv(spec.in_channels, lv[0].width, spec.conv_in_kernel)
    n += _conv(lv[0].width, spec.out_channels, spec.conv_out_kernel)
    if te:
        n += 2 * (te * te + te)
    c = lv[0].width
    for i, level in enumerate(lv):
        w = level.width
        n += _level_params(c, level, te, spec.qgam_queries)
        c = w
        if i < len(lv) - 1:
            n += _conv(w, w)
    if spec.has_bridge:
        n += _res_params(c, c, te, "standard")
    for i in reversed(range(len(lv))):
        n += _level_params(2 * lv[i].width, lv[i], te, spec.qgam_queries)
        if i > 0:
            n += _conv(lv[i].width, lv[i - 1].width)
    return n


def _level_params(ci, level, te, m):
    w = level.width
    n = _res_params(ci, w, te, level.operator)
    n += (level.blocks - 1) * _res_params(w, w, te, level.operator)
    return n + _attn_params(level.attention, w, m)


def level_param_count(spec: ToyUNetSpec, i: int) -> int:
    """Parameters owned by level ``i`` (encoder + decoder part, its down/up convs)."""
    lv = spec.levels
    te = spec.temb_dim if spec.time_conditioning else 0
    w = lv[i].width
    c_prev = lv[i - 1].width if i > 0 else w
    n = _level_params(c_prev, lv[i], te, spec.qgam_queries)
    n += _level_params(2 * w, lv[i], te, spec.qgam_queries)
    if i > 0:
        n += _conv(c_prev, c_prev)      # down conv feeding this level
        n += _conv(w, c_prev)           # up conv leaving this level
    return n


def _op_macs(op, ci, co, hw):
    if op == "standard":
        return 9 * ci * co * hw
    return count_macs(op, C=ci, C_out=co, H=hw, W=1)


def _res_macs(ci, co, te, op, hw):
    n = _op_macs(op, ci, co, hw) + _op_macs(op, co, co, hw)
    if ci != co:
        n += ci * co * hw
    if te:
        n += te * co
    return n


def _level_macs(ci, level, te, m, hw):
    w = level.width
    n = _res_macs(ci, w, te, level.operator, hw)
    n += (level.blocks - 1) * _res_macs(w, w, te, level.operator, hw)
    if level.attention != "none":
        kind = "self_attention" if level.attention == "self" else "qgam"
        n += count_macs(kind, N=hw, M=m, d=w)
    return n


def unet_macs(spec: ToyUNetSpec, height: int, width: int) -> int:
    """Closed-form MACs of one forward pass on a single ``height x width`` input."""
    lv = spec.levels
    te = spec.temb_dim if spec.time_conditioning else 0
    hw = height * width
    k_in, k_out = spec.conv_in_kernel, spec.conv_out_kernel
    n = k_in * k_in * spec.in_channels * lv[0].width * hw
    n += k_out * k_out * lv[0].width * spec.out_channels * hw
    if te:
        n += 2 * te * te
    c = lv[0].width
    res = [hw // (4 ** i) for i in range(len(lv))]
    for i, level in enumerate(lv):
        n += _level_macs(c, level, te, spec.qgam_queries, res[i])
        c = level.width
        if i < len(lv) - 1:
            n += 9 * c * c * res[i + 1]
    if spec.has_bridge:
        n += _res_macs(c, c, te, "standard", res[len(lv) - 1])
    for i in reversed(range(len(lv))):
        n += _level_macs(2 * lv[i].width, lv[i], te, spec.qgam_queries, res[i])
        if i > 0:
            n += 9 * lv[i].width * lv[i - 1].width * res[i - 1]
    return n


def vae_param_count(spec: VAESpec) -> int:
    w = spec.widths
    n = _conv(spec.image_channels, w[0])
    n += sum(_conv(w[i], w[i + 1]) for i in range(spec.downsamples))
    k = spec.boundary_kernel
    n += _conv(w[-1], w[-1]) + _conv(w[-1], spec.latent_channels, k)
    n += _conv(spec.latent_channels, w[-1], k) + _conv(w[-1], w[-1])
    n += sum(_conv(w[i + 1], w[i]) for i in range(spec.downsamples))
    n += _conv(w[0], spec.image_channels)
    return n


def vae_macs(spec: VAESpec, height: int, width: int) -> int:
    """Encoder + decoder MACs for one ``height x width`` image."""
    w = spec.widths
    hw = height * width
    res = [hw // (4 ** i) for i in range(len(w))]
    n = 9 * spec.image_channels * w[0] * hw
    n += sum(9 * w[i] * w[i + 1] * res[i + 1] for i in range(spec.downsamples))
    kk = spec.boundary_kernel ** 2
    n += 9 * w[-1] * w[-1] * res[-1] + kk * w[-1] * spec.latent_channels * res[-1]
    n += kk * spec.latent_channels * w[-1] * res[-1] + 9 * w[-1] * w[-1] * res[-1]
    n += sum(9 * w[i + 1] * w[i] * res[i] for i in range(spec.downsamples))
    n += 9 * w[0] * spec.image_channels * hw
    return n


@dataclass
class ComplexityReport:
    params_unet: int
    params_vae: int
    macs_unet: int
    macs_vae: int
    resolution: int

    @property
    def ratios(self) -> dict:
        pt = self.params_unet + self.params_vae
        mt = self.macs_unet + self.macs_vae
        return {
            "params": {"unet": 100.0 * self.params_unet / pt, "vae": 100.0 * self.params_vae / pt},
            "macs": {"unet": 100.0 * self.macs_unet / mt, "vae": 100.0 * self.macs_vae / mt},
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = self.ratios
        return d

    def table(self) -> str:
        r = self.ratios
        rows = [
            f"{'component':<10}{'params':>12}{'param %':>10}{'MACs':>16}{'MAC %':>9}",
            f"{'UNet':<10}{self.params_unet:>12,}{r['params']['unet']:>9.2f}%"
            f"{self.macs_unet:>16,}{r['macs']['unet']:>8.2f}%",
            f"{'VAE':<10}{self.params_vae:>12,}{r['params']['vae']:>9.2f}%"
            f"{self.macs_vae:>16,}{r['macs']['vae']:>8.2f}%",
        ]
        return "\n".join(rows)


# UNet/VAE split (percent) of a full-scale single-step latent diffusion SR model;
# printed for comparison only, the toy networks do not reproduce it
FULL_SCALE_REFERENCE = {"params": {"unet": 92.02, "vae": 7.98}, "macs": {"unet": 16.0, "vae": 84.0}}


def complexity_report(spec: ToyUNetSpec, vae_spec: VAESpec, resolution: int) -> ComplexityReport:
    """Parameter/MAC split between UNet and VAE for a ``resolution``-square image.

    The UNet runs at the VAE's latent resolution.
    """
    if resolution % vae_spec.factor:
        raise ValueError("resolution must be divisible by the VAE reduction factor")
    lat = resolution // vae_spec.factor
    return ComplexityReport(
        params_unet=unet_param_count(spec),
        params_vae=vae_param_count(vae_spec),
        macs_unet=unet_macs(spec, lat, lat),
        macs_vae=vae_macs(vae_spec, resolution, resolution),
        resolution=resolution,
    )


def measured_macs(module: Module, *args) -> int:
    """Run one forward under the MAC tally and return the total."""
    with mac_tally() as box:
        module(*args)
    return box[0]
