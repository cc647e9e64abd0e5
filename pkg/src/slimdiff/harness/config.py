"""Run configuration: nested dataclasses loaded from a versioned YAML document."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..prune import ToyUNetSpec, VAESpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: int = 64
    val: int = 16
    test: int = 32
    size: int = 64
    scale: int = 4


@dataclass
class VAEConfig:
    widths: list = field(default_factory=lambda: [8, 16])
    latent_channels: int = 4
    boundary_kernel: int = 1
    # centred, unit-ish latents keep plain SGD well conditioned downstream
    latent_scale: float = 4.0
    latent_shift: float = 0.5
    # the codec starts exact, so fine-tuning is optional
    iterations: int = 0
    batch: int = 8
    lr: float = 0.05

    def spec(self) -> VAESpec:
        return VAESpec(list(self.widths), 1, self.latent_channels, self.boundary_kernel,
                       self.latent_scale, self.latent_shift)


@dataclass
class UEConfig:
    hidden: int = 16
    iterations: int = 300
    batch: int = 8
    lr: float = 0.02


@dataclass
class TeacherConfig:
    mode: str = "adaptive"          # adaptive | fixed_t
    fixed_t: int = 500
    iterations: int = 300
    batch: int = 8
    lr: float = 0.4
    lambda_tv: float = 0.01
    predictor_hidden: int = 8
    predictor_lr_scale: float = 10.0
    # fine-tuning the pixel-resolution decoder with the UNet caps the stable step size
    train_decoder: bool = False
    # a fixed predictor reproduces a fixed-t trajectory (for equivalence checks)
    freeze_predictor: bool = False
    # starting noise level of the predictor (0.5 is a zero-bias sigmoid head);
    # None starts from the analytic target's mean
    predictor_init_alpha: float | None = 0.5
    unet: dict = field(default_factory=lambda: {
        "levels": [
            {"width": 8},
            {"width": 12, "attention": "self"},
            {"width": 24, "attention": "self"},
            {"width": 32, "attention": "self"},
        ],
        "temb_dim": 16,
    })

    def unet_spec(self, latent_channels: int) -> ToyUNetSpec:
        d = copy.deepcopy(self.unet)
        d.setdefault("in_channels", latent_channels)
        d.setdefault("out_channels", latent_channels)
        try:
            spec = ToyUNetSpec.from_dict(d)
            spec.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"teacher.unet: {e}") from e
        return spec


@dataclass
class StudentConfig:
    iterations: int = 300
    batch: int = 8
    lr: float = 0.2
    lam: float = 0.1
    distill: bool = True
    prune_levels: int = 2
    operators: list = field(default_factory=lambda: ["fsc", "dsc"])
    qgam_queries: int = 16
    max_samples: int = 256
    bandwidth: float | str = "median"
    dis_reduction: str = "mean"
    # feature names to distill; must exist in both networks
    hooks: list = field(default_factory=lambda: ["enc0", "enc1", "dec1", "dec0"])


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    precision: str = "float64"
    # per-stage learning rates follow this schedule over each stage's iterations
    lr_schedule: str = "cosine"
    warmup: int = 20
    log_every: int = 10
    data: DataConfig = field(default_factory=DataConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    ue: UEConfig = field(default_factory=UEConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be float64 or float32")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'")
        if self.warmup < 0:
            raise ConfigError("warmup must be non-negative")
        t = self.teacher
        if t.mode not in ("adaptive", "fixed_t"):
            raise ConfigError("teacher.mode must be 'adaptive' or 'fixed_t'")
        if t.mode == "fixed_t" and not 1 <= t.fixed_t <= 1000:
            raise ConfigError("teacher.fixed_t must lie in [1, 1000]")
        for sect, names in (("data", ("train", "val", "test", "size", "scale")),
                            ("vae", ("batch", "lr")),
                            ("ue", ("iterations", "batch", "lr")),
                            ("teacher", ("iterations", "batch", "lr")),
                            ("student", ("iterations", "batch", "lr"))):
            obj = getattr(self, sect)
            for n in names:
                if not getattr(obj, n) > 0:
                    raise ConfigError(f"{sect}.{n} must be positive")
        if self.vae.iterations < 0:
            raise ConfigError("vae.iterations must be non-negative")
        try:
            self.vae.spec().validate()
        except ValueError as e:
            raise ConfigError(f"vae: {e}") from e
        if t.lambda_tv < 0 or self.student.lam < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.data.size % self.data.scale:
            raise ConfigError("data.size must be divisible by data.scale")
        if self.student.dis_reduction not in ("sum", "mean"):
            raise ConfigError("student.dis_reduction must be 'sum' or 'mean'")
        spec = t.unet_spec(self.vae.latent_channels)
        kept = len(spec.levels) - self.student.prune_levels
        if not 1 <= kept:
            raise ConfigError("student.prune_levels must leave at least one level")
        if len(self.student.operators) != kept:
            raise ConfigError(f"student.operators needs one entry per kept level ({kept})")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d or {}, "").validate()

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` or top-level ``key=value`` replaced."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k].update(v)
            else:
                d[k] = v
        return RunConfig.from_dict(d)


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kw = {}
    for name, val in d.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kw[name] = _build(sub, val, name) if sub is not None else val
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e


_SECTIONS = {"data": DataConfig, "vae": VAEConfig, "ue": UEConfig,
             "teacher": TeacherConfig, "student": StudentConfig}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    raw = raw or {}
    if "schema_version" not in raw:
        raise ConfigError("config needs a schema_version field")
    unet = raw.get("teacher", {}).get("unet")
    if isinstance(unet, str):
        # network spec given as a separate file, relative to the config
        raw["teacher"]["unet"] = yaml.safe_load((path.parent / unet).read_text())
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = ["ConfigError", "RunConfig", "DataConfig", "VAEConfig", "UEConfig", "TeacherConfig",
           "StudentConfig", "load_config", "dump_config", "SCHEMA_VERSION"]
