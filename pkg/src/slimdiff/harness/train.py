"""Staged desk-scale pipeline.

1. toy VAE pretrained as an autoencoder on HR and bicubic-upsampled LR images
2. uncertainty estimator trained on ``(z_lr -> z_gt)`` pairs, then frozen
3. teacher: time-conditioned UNet + noise-level predictor (+ decoder) trained with
   L1 reconstruction and TV on the predicted noise-level map; adaptive or fixed t
4. student: pruned, operator-replaced, time-free UNet between fused boundary
   convs, trained with L1 + feature distillation from the frozen teacher
"""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..distill import KernelConfig, FeatureAdapter, dis_loss_and_grad
from ..layers import SGD, Conv2d, Module, cosine_lr
from ..prune import (ToyUNetSpec, ToyVAE, UNet, build_unet, fuse_convs, student_spec,
                     unet_macs, unet_param_count, vae_macs, vae_param_count)
from ..schedule import build_schedule, invert_alpha, invert_alpha_grad
from ..tensorcore import ConvKernel, NonFiniteError, make_rng
from ..uncertainty import (AlphaPredictor, UncertaintyEstimator, UncertaintyOutput,
                           analytic_alpha_target, estimate_sigma_gt_sq, tv_loss_and_grad,
                           uncertainty_loss_and_grad)
from .config import ConfigError, RunConfig
from .data import gen_scenes, stack, upsample_lr
from .metrics import metrics

RECON_NOTE = "reconstruction loss is L1 only; perceptual and adversarial terms are not used"


class DivergenceError(RuntimeError):
    """Non-finite loss; ``state`` holds a small diagnostic dump."""

    def __init__(self, msg: str, state: dict):
        super().__init__(msg)
        self.state = state


# ----------------------------------------------------------------------------
# data

@dataclass
class Split:
    hr: np.ndarray
    lr_up: np.ndarray
    mask: np.ndarray
    z_lr: np.ndarray | None = None
    z_gt: np.ndarray | None = None
    s: np.ndarray | None = None

    def __len__(self):
        return self.hr.shape[0]

    @property
    def z_var(self):
        return np.exp(self.s)


def build_data(cfg: RunConfig) -> dict[str, Split]:
    from .data import SceneParams

    p = SceneParams(size=cfg.data.size, scale=cfg.data.scale)
    dt = np.dtype(cfg.precision)
    out = {}
    for split in ("train", "val", "test"):
        scenes = gen_scenes(getattr(cfg.data, split), cfg.seed, p, split)
        lr = stack(scenes, "lr")
        out[split] = Split(stack(scenes, "hr").astype(dt),
                           upsample_lr(lr, p.scale).astype(dt),
                           np.stack([s.texture_mask for s in scenes])[:, None])
    return out


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield perm[i:i + batch]
        if n < batch:
            yield perm


def _chunks(n: int, size: int = 16):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


# ----------------------------------------------------------------------------
# bookkeeping

class Curves:
    """Loss curves as flat rows: ``stage, iter, <metric>...``."""

    def __init__(self):
        self.rows: list[dict] = []

    def log(self, stage: str, it: int, **vals) -> None:
        self.rows.append({"stage": stage, "iter": it, **{k: float(v) for k, v in vals.items()}})

    def series(self, stage: str, key: str):
        pts = [(r["iter"], r[key]) for r in self.rows if r["stage"] == stage and key in r]
        return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])

    def stages(self):
        return list(dict.fromkeys(r["stage"] for r in self.rows))

    def write_csv(self, path) -> None:
        keys = sorted({k for r in self.rows for k in r} - {"stage", "iter"})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["stage", "iter", *keys], restval="")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path) -> "Curves":
        c = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {k: float(v) for k, v in row.items() if k not in ("stage", "iter") and v != ""}
                c.log(row["stage"], int(row["iter"]), **vals)
        return c


def _guard(loss: float, stage: str, it: int, **state):
    if not math.isfinite(loss):
        dump = {"stage": stage, "iter": it, "loss": repr(loss)}
        dump.update({k: (float(np.abs(v).max()) if isinstance(v, np.ndarray) else v) for k, v in state.items()})
        raise DivergenceError(f"{stage}: non-finite loss at iteration {it}", dump)


def _step(opt: SGD, stage: str, it: int) -> None:
    try:
        opt.step()
    except NonFiniteError as e:
        raise DivergenceError(f"{stage}: {e} at iteration {it}",
                              {"stage": stage, "iter": it, "error": str(e)}) from e


def _set_lr(opt: SGD, cfg: RunConfig, base: float, it: int, total: int) -> None:
    if cfg.lr_schedule == "cosine":
        opt.lr = cosine_lr(base, it, total, min(cfg.warmup, total // 4))
    else:
        opt.lr = base


def _l1(pred, gt):
    d = pred - gt
    return float(np.abs(d).mean()), np.sign(d) / d.size


# ----------------------------------------------------------------------------
# stage 1/2: VAE and uncertainty estimator

def train_vae(cfg: RunConfig, data: dict[str, Split], curves: Curves) -> ToyVAE:
    vc = cfg.vae
    vae = ToyVAE(vc.spec(), make_rng(cfg.seed, "init/vae")).astype(cfg.precision)
    imgs = np.concatenate([data["train"].hr, data["train"].lr_up])
    opt = SGD([vae], vc.lr, clip=1.0)
    it_rng = _batches(len(imgs), vc.batch, make_rng(cfg.seed, "batches/vae"))
    for it in range(1, vc.iterations + 1):
        x = imgs[next(it_rng)]
        _set_lr(opt, cfg, vc.lr, it, vc.iterations)
        opt.zero_grad()
        y = vae(x)
        d = y - x
        loss = float((d * d).mean())
        _guard(loss, "vae", it)
        vae.backward(2.0 * d / d.size)
        _step(opt, "vae", it)
        if it % cfg.log_every == 0 or it == vc.iterations:
            curves.log("vae", it, rec=loss)
    return vae.freeze()


def encode_splits(vae: ToyVAE, data: dict[str, Split]) -> None:
    for sp in data.values():
        sp.z_lr = np.concatenate([vae.encode(sp.lr_up[c]) for c in _chunks(len(sp))])
        sp.z_gt = np.concatenate([vae.encode(sp.hr[c]) for c in _chunks(len(sp))])


def train_ue(cfg: RunConfig, data: dict[str, Split], curves: Curves) -> UncertaintyEstimator:
    uc = cfg.ue
    tr = data["train"]
    ue = UncertaintyEstimator(tr.z_lr.shape[1], uc.hidden, make_rng(cfg.seed, "init/ue")).astype(cfg.precision)
    opt = SGD([ue], uc.lr, clip=1.0)
    it_rng = _batches(len(tr), uc.batch, make_rng(cfg.seed, "batches/ue"))
    for it in range(1, uc.iterations + 1):
        idx = next(it_rng)
        _set_lr(opt, cfg, uc.lr, it, uc.iterations)
        opt.zero_grad()
        out = ue(tr.z_lr[idx])
        loss, dm, ds = uncertainty_loss_and_grad(tr.z_gt[idx], out)
        _guard(loss, "ue", it)
        ue.backward(dm, ds)
        _step(opt, "ue", it)
        if it % cfg.log_every == 0 or it == uc.iterations:
            curves.log("ue", it, nll=loss)
    ue.freeze()
    for sp in data.values():
        outs = [ue(sp.z_lr[c]) for c in _chunks(len(sp))]
        sp.s = np.concatenate([o.s for o in outs])
    return ue


def texture_variance_contrast(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per scene: mean exp(s) over textured latent pixels minus over homogeneous ones.

    The HR mask is reduced to latent resolution with "any structure in the block".
    """
    f = mask.shape[-1] // s.shape[-1]
    b, _, h, w = s.shape
    m = mask.reshape(b, 1, h, f, w, f).any(axis=(3, 5))
    var = np.exp(s).mean(axis=1, keepdims=True)
    out = []
    for v, mm in zip(var, m):
        if mm.all() or not mm.any():
            out.append(np.nan)
        else:
            out.append(float(v[mm].mean() - v[~mm].mean()))
    return np.array(out)


# ----------------------------------------------------------------------------
# stage 3: teacher

class Teacher(Module):
    """Frozen encoder/UE inputs are precomputed; this holds the trainable parts.

    The UNet output ``u`` enters the noise estimate as ``eps = u + c(a) z_lr``
    with ``c = (1 - sqrt(a)) / sqrt(1 - a)``, so the one-step estimate reads
    ``z0 = z_lr - g(a) u`` with ``g = sqrt((1 - a) / a)``. An untrained UNet
    therefore returns the LR latent at every timestep.
    """

    def __init__(self, vae: ToyVAE, unet: UNet, predictor: AlphaPredictor, sched, mode: str,
                 fixed_t: int, sigma_gt_sq: float):
        super().__init__()
        self.vae = vae
        self.unet = unet
        self.predictor = predictor
        self.sched = sched
        self.mode = mode
        self.fixed_t = fixed_t
        self.sigma_gt_sq = sigma_gt_sq

    def forward(self, z_lr, z_gt=None, z_var=None):
        b = z_lr.shape[0]
        c = {"z_lr": z_lr}
        if self.mode == "adaptive":
            amap = self.predictor(z_gt, z_var)
            raw = amap.per_sample()
            alpha = np.clip(raw, self.sched.alpha_min, self.sched.alpha_max)
            t = np.asarray(invert_alpha(alpha, self.sched), dtype=np.float64).reshape(b)
            c.update(amap=amap, raw=raw)
        else:
            alpha = np.full(b, self.sched.alpha_bars[self.fixed_t])
            t = np.full(b, float(self.fixed_t))
        alpha = alpha.astype(z_lr.dtype)
        u = self.unet(z_lr, t)
        ra = np.sqrt(alpha)[:, None, None, None]
        rb = np.sqrt(1.0 - alpha)[:, None, None, None]
        z0 = z_lr - (rb / ra) * u
        x = self.vae.decode(z0)
        c.update(alpha=alpha, t=t, u=u, ra=ra, rb=rb, z0=z0)
        self._c = c
        return x

    def backward(self, dx, lambda_tv: float = 0.0):
        c = self._c
        dz0 = self.vae.decode_backward(dx)
        ra, rb = c["ra"], c["rb"]
        _, dt = self.unet.backward(-(rb / ra) * dz0)
        tv = 0.0
        if self.mode == "adaptive":
            a = c["alpha"][:, None, None, None]
            # d/da of -sqrt((1 - a) / a) * u
            dz0_da = c["u"] * ra / (2.0 * a * a * rb)
            da = (dz0 * dz0_da).sum(axis=(1, 2, 3)) + dt * invert_alpha_grad(c["alpha"], self.sched)
            da = np.where(c["raw"] == c["alpha"], da, 0.0)
            amap = c["amap"].values
            dmap = np.broadcast_to((da / amap[0].size)[:, None, None, None], amap.shape).astype(amap.dtype)
            if lambda_tv:
                tv, g = tv_loss_and_grad(amap)
                dmap = dmap + lambda_tv * g
            self.predictor.backward(dmap)
        return tv


def _teacher_modules(t: Teacher, train_decoder: bool = False):
    mods = [t.unet] + ([t.vae.dec_first, t.vae.dec_trunk] if train_decoder else [])
    return mods + ([t.predictor] if t.mode == "adaptive" else [])


def build_teacher(cfg: RunConfig, vae: ToyVAE, train: Split) -> Teacher:
    tc = cfg.teacher
    spec = tc.unet_spec(train.z_lr.shape[1])
    unet = build_unet(spec, make_rng(cfg.seed, "init/teacher")).astype(cfg.precision)
    # correction head starts at zero: the first prediction is the LR latent
    unet.conv_out.params["weight"][...] = 0.0
    sigma_gt_sq = estimate_sigma_gt_sq(train.z_gt)
    a0 = tc.predictor_init_alpha
    if a0 is None:
        a0 = float(analytic_alpha_target(train.z_var, sigma_gt_sq).values.mean())
    sched = build_schedule()
    a0 = float(np.clip(a0, sched.alpha_min, sched.alpha_max))
    pred = AlphaPredictor(train.z_lr.shape[1], tc.predictor_hidden, make_rng(cfg.seed, "init/predictor"),
                          final_bias=math.log(a0 / (1.0 - a0))).astype(cfg.precision)
    if tc.freeze_predictor:
        pred.freeze()
    return Teacher(copy.deepcopy(vae), unet, pred, sched, tc.mode, tc.fixed_t, sigma_gt_sq)


def teacher_predict(t: Teacher, sp: Split, idx=None):
    idx = np.arange(len(sp)) if idx is None else idx
    xs, alphas, ts = [], [], []
    for c in _chunks(len(idx)):
        j = idx[c]
        xs.append(t(sp.z_lr[j], sp.z_gt[j], sp.z_var[j]))
        alphas.append(t._c["alpha"])
        ts.append(t._c["t"])
    return np.concatenate(xs), np.concatenate(alphas), np.concatenate(ts)


def evaluate_teacher(t: Teacher, sp: Split) -> dict:
    x, alpha, ts = teacher_predict(t, sp)
    out = {"rec_l1": float(np.abs(x - sp.hr).mean())}
    out.update(metrics(x.astype(np.float64), sp.hr.astype(np.float64)))
    out["alpha_mean"] = float(alpha.mean())
    out["t_mean"] = float(ts.mean())
    return out


def train_teacher(cfg: RunConfig, vae: ToyVAE, data: dict[str, Split], curves: Curves,
                  stage: str = "teacher") -> Teacher:
    tc = cfg.teacher
    tr = data["train"]
    teacher = build_teacher(cfg, vae, tr)
    opt = SGD(_teacher_modules(teacher, tc.train_decoder), tc.lr, clip=1.0)
    # the predictor gets its own step size through a gradient pre-scale
    it_rng = _batches(len(tr), tc.batch, make_rng(cfg.seed, "batches/teacher"))
    eval_every = max(1, tc.iterations // 8)
    for it in range(1, tc.iterations + 1):
        idx = next(it_rng)
        _set_lr(opt, cfg, tc.lr, it, tc.iterations)
        opt.zero_grad()
        x = teacher(tr.z_lr[idx], tr.z_gt[idx], tr.z_var[idx])
        rec, dx = _l1(x, tr.hr[idx])
        tv = teacher.backward(dx, tc.lambda_tv)
        loss = rec + tc.lambda_tv * tv
        _guard(loss, stage, it, t_mean=float(teacher._c["t"].mean()))
        if tc.predictor_lr_scale != 1.0:
            for _, _, g in teacher.predictor.named_parameters():
                g *= tc.predictor_lr_scale
        _step(opt, stage, it)
        if it % cfg.log_every == 0 or it == tc.iterations:
            curves.log(stage, it, rec=rec, tv=tv, t_star=float(teacher._c["t"].mean()))
        if it % eval_every == 0 or it == tc.iterations:
            curves.log(stage, it, val_rec=evaluate_teacher(teacher, data["val"])["rec_l1"])
    return teacher.freeze()


# ----------------------------------------------------------------------------
# stage 4: student

class Student(Module):
    """``dec_trunk(unet(X1) + skip(X1))`` with ``X1 = enc_trunk(lr_up)``.

    ``unet`` starts with fuse(enc_last, conv_in) and ends with
    fuse(-g * conv_out, dec_first); ``skip`` carries fuse(enc_last, dec_first)
    so the teacher's ``z_lr`` path survives the fusion.
    """

    def __init__(self, enc_trunk, unet: UNet, skip: Conv2d, dec_trunk):
        super().__init__()
        self.enc_trunk = enc_trunk
        self.unet = unet
        self.skip = skip
        self.dec_trunk = dec_trunk

    @property
    def features(self):
        return self.unet.features

    def forward(self, x):
        x1 = self.enc_trunk(x)
        return self.dec_trunk(self.unet(x1) + self.skip(x1))

    def backward(self, dy, feature_grads=None):
        dx2 = self.dec_trunk.backward(dy)
        dx1, _ = self.unet.backward(dx2, feature_grads)
        return self.enc_trunk.backward(dx1 + self.skip.backward(dx2))


def _set_conv(conv: Conv2d, k: ConvKernel):
    conv.params["weight"][...] = k.weight
    conv.params["bias"][...] = k.bias


def build_student(cfg: RunConfig, teacher: Teacher, alpha_star: float) -> Student:
    sc = cfg.student
    vae = teacher.vae
    tspec = teacher.unet.spec
    w_last = vae.spec.widths[-1]
    k_fused = vae.spec.boundary_kernel + tspec.conv_in_kernel - 1
    spec = student_spec(tspec, sc.prune_levels, sc.operators, fused_channels=w_last, fused_kernel=k_fused)
    spec.qgam_queries = sc.qgam_queries
    rng = make_rng(cfg.seed, "init/student")
    unet = build_unet(spec, rng).astype(cfg.precision)
    # inherit every teacher tensor whose name and shape survive pruning
    own = {k: p for k, p, _ in unet.named_parameters()}
    for k, p, _ in teacher.unet.named_parameters():
        if k in own and own[k].shape == p.shape and not k.startswith(("conv_in", "conv_out")):
            own[k][...] = p
    enc_last, dec_first = vae.enc_last.kernel, vae.dec_first.kernel
    _set_conv(unet.conv_in, fuse_convs(enc_last, teacher.unet.conv_in.kernel))
    co = teacher.unet.conv_out.kernel
    g = -math.sqrt((1.0 - alpha_star) / alpha_star)
    _set_conv(unet.conv_out, fuse_convs(ConvKernel(g * co.weight, g * co.bias, 1, 1, co.padding), dec_first))
    skip = Conv2d(w_last, w_last, 2 * vae.spec.boundary_kernel - 1, rng=rng).astype(cfg.precision)
    _set_conv(skip, fuse_convs(enc_last, ConvKernel(dec_first.weight, None, 1, 1, dec_first.padding)))
    st = Student(copy.deepcopy(vae.enc_trunk), unet, skip, copy.deepcopy(vae.dec_trunk))
    for m in st.modules():
        m.frozen = False
    return st


def student_param_count(st: Student) -> int:
    return st.num_params()


def teacher_features(t: Teacher, sp: Split, hooks) -> dict[str, np.ndarray]:
    feats = {h: [] for h in hooks}
    for c in _chunks(len(sp)):
        t(sp.z_lr[c], sp.z_gt[c], sp.z_var[c])
        for h in hooks:
            feats[h].append(t.unet.features[h])
    return {h: np.concatenate(v) for h, v in feats.items()}


def check_hooks(student: Student, teacher: Teacher, hooks) -> None:
    s_names, t_names = set(student.unet.feature_names), set(teacher.unet.feature_names)
    missing = [h for h in hooks if h not in s_names or h not in t_names]
    if missing:
        raise ConfigError(f"feature hooks {missing} are not present in both teacher and student")


def evaluate_student(st: Student, sp: Split) -> dict:
    x = np.concatenate([st(sp.lr_up[c]) for c in _chunks(len(sp))])
    out = {"rec_l1": float(np.abs(x - sp.hr).mean())}
    out.update(metrics(x.astype(np.float64), sp.hr.astype(np.float64)))
    return out


def distill_student(cfg: RunConfig, teacher: Teacher, data: dict[str, Split], curves: Curves,
                    stage: str = "student", alpha_star: float | None = None):
    sc = cfg.student
    tr = data["train"]
    if alpha_star is None:
        alpha_star = float(teacher_predict(teacher, tr)[1].mean())
    st = build_student(cfg, teacher, alpha_star)
    hooks = list(sc.hooks)
    check_hooks(st, teacher, hooks)
    t_feats = teacher_features(teacher, tr, hooks) if sc.distill else {}
    adapters = []
    if sc.distill:
        st(tr.lr_up[:1])
        adapters = [FeatureAdapter(st.features[h].shape[1], t_feats[h].shape[1],
                                   make_rng(cfg.seed, f"init/adapter/{h}")).astype(cfg.precision)
                    for h in hooks]
    opt = SGD([st, *adapters], sc.lr, clip=1.0)
    it_rng = _batches(len(tr), sc.batch, make_rng(cfg.seed, "batches/student"))
    mmd_rng = make_rng(cfg.seed, f"mmd/{stage}")
    kcfg = KernelConfig(sc.bandwidth)
    eval_every = max(1, sc.iterations // 8)
    for it in range(1, sc.iterations + 1):
        idx = next(it_rng)
        _set_lr(opt, cfg, sc.lr, it, sc.iterations)
        opt.zero_grad()
        x = st(tr.lr_up[idx])
        rec, dx = _l1(x, tr.hr[idx])
        parts = {"mse_dis": 0.0, "mmd_dis": 0.0}
        fgrads = None
        dis = 0.0
        if sc.distill:
            sf = [st.features[h] for h in hooks]
            tf = [t_feats[h][idx] for h in hooks]
            dis, parts, g = dis_loss_and_grad(sf, tf, adapters, kcfg, sc.lam, sc.dis_reduction,
                                              sc.max_samples, mmd_rng)
            fgrads = dict(zip(hooks, g))
        _guard(rec + dis, stage, it)
        st.backward(dx, fgrads)
        _step(opt, stage, it)
        if it % cfg.log_every == 0 or it == sc.iterations:
            curves.log(stage, it, rec=rec, dis=dis, **parts)
        if it % eval_every == 0 or it == sc.iterations:
            curves.log(stage, it, val_rec=evaluate_student(st, data["val"])["rec_l1"])
    return st.freeze(), alpha_star


# ----------------------------------------------------------------------------
# cost summary

def complexity_summary(teacher: Teacher, student: Student | None, cfg: RunConfig) -> dict:
    """Params/MACs of the SR networks (VAE + UNet for the teacher; the whole student)."""
    vspec = teacher.vae.spec
    size = cfg.data.size
    lat = size // vspec.factor
    t_params = vae_param_count(vspec) + unet_param_count(teacher.unet.spec)
    t_macs = vae_macs(vspec, size, size) + unet_macs(teacher.unet.spec, lat, lat)
    out = {"teacher": {"params": int(t_params), "macs": int(t_macs)}}
    if student is not None:
        from ..prune import measured_macs

        probe = np.zeros((1, 1, size, size), dtype=np.dtype(cfg.precision))
        out["student"] = {"params": int(student.num_params()), "macs": int(measured_macs(student, probe))}
        out["param_reduction"] = 1.0 - out["student"]["params"] / t_params
        out["mac_reduction"] = 1.0 - out["student"]["macs"] / t_macs
    return out


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(to_jsonable(report), indent=2, sort_keys=True)
