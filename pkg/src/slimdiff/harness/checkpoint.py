"""Checkpoints: ``.npz`` of named parameters plus a JSON metadata entry."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..layers import Module
from ..prune import ToyVAE, build_unet
from ..schedule import build_schedule
from ..uncertainty import AlphaPredictor, UncertaintyEstimator
from .config import ConfigError, RunConfig
from .train import Teacher

_META = "__meta__"


def save_module(path, module: Module, meta: dict | None = None, extra: dict[str, Module] | None = None):
    arrays = {f"main.{k}": v for k, v in module.state_dict().items()}
    for name, mod in (extra or {}).items():
        arrays.update({f"{name}.{k}": v for k, v in mod.state_dict().items()})
    arrays[_META] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[_META]))
        groups: dict[str, dict] = {}
        for k in z.files:
            if k == _META:
                continue
            head, rest = k.split(".", 1)
            groups.setdefault(head, {})[rest] = z[k]
    return groups, meta


def save_teacher(path, teacher: Teacher, ue: UncertaintyEstimator, cfg: RunConfig) -> None:
    meta = {"config": cfg.to_dict(), "sigma_gt_sq": teacher.sigma_gt_sq, "mode": teacher.mode,
            "fixed_t": teacher.fixed_t, "unet_spec": teacher.unet.spec.to_dict()}
    save_module(path, teacher, meta, {"ue": ue})


def load_teacher(path):
    """Returns ``(teacher, ue, cfg)``, all frozen."""
    try:
        groups, meta = read_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot read teacher checkpoint {path}: {e}") from e
    cfg = RunConfig.from_dict(meta["config"])
    from ..prune import ToyUNetSpec

    spec = ToyUNetSpec.from_dict(meta["unet_spec"])
    lat = cfg.vae.latent_channels
    vae = ToyVAE(cfg.vae.spec()).astype(cfg.precision)
    unet = build_unet(spec).astype(cfg.precision)
    pred = AlphaPredictor(lat, cfg.teacher.predictor_hidden).astype(cfg.precision)
    teacher = Teacher(vae, unet, pred, build_schedule(), meta["mode"], meta["fixed_t"], meta["sigma_gt_sq"])
    teacher.load_state_dict(groups["main"])
    ue = UncertaintyEstimator(lat, cfg.ue.hidden).astype(cfg.precision)
    ue.load_state_dict(groups["ue"])
    return teacher.freeze(), ue.freeze(), cfg


def checkpoint_path(run_dir) -> Path:
    return Path(run_dir) / "checkpoints" / "teacher.npz"
