"""Run orchestration: single runs with a run directory, and the ablation panel."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from ..tensorcore import save_tensor
from .config import RunConfig, dump_config
from .data import bicubic_resize
from .metrics import metrics
from .train import (RECON_NOTE, Curves, Split, Teacher, build_data, complexity_summary, distill_student,
                    dumps_report, encode_splits, evaluate_student, evaluate_teacher, teacher_predict,
                    texture_variance_contrast, train_teacher, train_ue, train_vae)

log = logging.getLogger("slimdiff")

FIXED_TS = (250, 500, 750)
ARMS = {"no_dis": {"distill": False}, "no_mmd": {"distill": True, "lam": 0.0}, "ours": {}}
# keys holding wall-clock measurements; excluded from determinism comparisons
TIMING_KEYS = ("timing",)


class Prepared:
    """Data, VAE and frozen uncertainty estimator shared by every arm of one seed."""

    def __init__(self, cfg: RunConfig, curves: Curves | None = None):
        self.cfg = cfg
        self.curves = curves if curves is not None else Curves()
        self.timing = {}
        t0 = time.perf_counter()
        self.data = build_data(cfg)
        self.vae = train_vae(cfg, self.data, self.curves)
        encode_splits(self.vae, self.data)
        self.timing["vae_s"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        self.ue = train_ue(cfg, self.data, self.curves)
        self.timing["ue_s"] = time.perf_counter() - t0

    def baseline(self, split: str = "test") -> dict:
        sp = self.data[split]
        return metrics(np.clip(sp.lr_up, 0, 1).astype(np.float64), sp.hr.astype(np.float64))

    def uncertainty_stats(self, split: str = "test") -> dict:
        sp = self.data[split]
        contrast = texture_variance_contrast(sp.s, sp.mask)
        ok = contrast[~np.isnan(contrast)]
        return {"scenes": int(ok.size), "fraction_textured_higher": float((ok > 0).mean()),
                "mean_contrast": float(ok.mean())}


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def run_teacher(prep: Prepared, cfg: RunConfig | None = None, stage: str = "teacher"):
    cfg = cfg or prep.cfg
    teacher, secs = _timed(train_teacher, cfg, prep.vae, prep.data, prep.curves, stage)
    res = {"val": evaluate_teacher(teacher, prep.data["val"]),
           "test": evaluate_teacher(teacher, prep.data["test"]),
           "sec_per_iter": secs / cfg.teacher.iterations}
    return teacher, res


def run_student(prep: Prepared, teacher: Teacher, cfg: RunConfig | None = None,
                stage: str = "student", alpha_star: float | None = None):
    cfg = cfg or prep.cfg
    (student, a_star), secs = _timed(distill_student, cfg, teacher, prep.data, prep.curves, stage, alpha_star)
    res = {"val": evaluate_student(student, prep.data["val"]),
           "test": evaluate_student(student, prep.data["test"]),
           "alpha_star": a_star,
           "sec_per_iter": secs / cfg.student.iterations,
           "complexity": complexity_summary(teacher, student, cfg)}
    return student, res


def _strip_timing(d):
    if isinstance(d, dict):
        return {k: _strip_timing(v) for k, v in d.items() if k not in TIMING_KEYS and k != "sec_per_iter"}
    return d


def _split_timing(res: dict) -> tuple[dict, dict]:
    return _strip_timing(res), {"sec_per_iter": res.get("sec_per_iter")}


def run_ablation_seed(cfg: RunConfig, fixed_ts=FIXED_TS, arms=ARMS) -> dict:
    """Everything needed for the ordering checks, for one seed."""
    prep = Prepared(cfg)
    out = {"seed": cfg.seed, "baseline_bicubic": prep.baseline(), "uncertainty": prep.uncertainty_stats(),
           "teachers": {}, "students": {}, "timing": dict(prep.timing)}
    log.info("seed %d: data/vae/ue ready (%.1fs)", cfg.seed, sum(prep.timing.values()))
    teacher, res = run_teacher(prep, cfg.with_overrides(teacher={"mode": "adaptive"}), "teacher/adaptive")
    out["teachers"]["adaptive"], out["timing"]["teacher/adaptive"] = _split_timing(res)
    log.info("seed %d adaptive teacher: val rec %.5f", cfg.seed, res["val"]["rec_l1"])
    for t in fixed_ts:
        _, r = run_teacher(prep, cfg.with_overrides(teacher={"mode": "fixed_t", "fixed_t": t}), f"teacher/t{t}")
        out["teachers"][f"t{t}"], out["timing"][f"teacher/t{t}"] = _split_timing(r)
        log.info("seed %d teacher t=%d: val rec %.5f", cfg.seed, t, r["val"]["rec_l1"])
    alpha_star = None
    for name, over in arms.items():
        scfg = cfg.with_overrides(student=over)
        _, r = run_student(prep, teacher, scfg, f"student/{name}", alpha_star)
        alpha_star = r["alpha_star"]
        out["students"][name], out["timing"][f"student/{name}"] = _split_timing(r)
        log.info("seed %d student %s: test psnr %.3f", cfg.seed, name, r["test"]["psnr"])
    out["curves"] = prep.curves
    return out


def ablation_checks(per_seed: list[dict], psnr_drop_max: float = 1.0, param_cut_min: float = 0.5) -> dict:
    """Ordering checks over a seed panel.

    (a) mean test PSNR: no_dis < no_mmd <= ours
    (b) per seed: adaptive teacher val rec-loss <= each fixed-t teacher
    (c) per seed: student (ours) params cut >= 50% and test PSNR drop <= 1 dB vs teacher
    """
    def mean(path):
        vals = []
        for s in per_seed:
            d = s
            for k in path:
                d = d[k]
            vals.append(d)
        return float(np.mean(vals))

    psnr = {arm: mean(("students", arm, "test", "psnr")) for arm in ARMS}
    a_ok = psnr["no_dis"] < psnr["no_mmd"] <= psnr["ours"]
    per_seed_a = [s["students"]["no_dis"]["test"]["psnr"] < s["students"]["no_mmd"]["test"]["psnr"]
                  <= s["students"]["ours"]["test"]["psnr"] for s in per_seed]
    b_rows = []
    for s in per_seed:
        ad = s["teachers"]["adaptive"]["val"]["rec_l1"]
        fixed = {k: v["val"]["rec_l1"] for k, v in s["teachers"].items() if k != "adaptive"}
        b_rows.append({"seed": s["seed"], "adaptive": ad, **fixed, "ok": all(ad <= v for v in fixed.values())})
    c_rows = []
    for s in per_seed:
        cx = s["students"]["ours"]["complexity"]
        drop = s["teachers"]["adaptive"]["test"]["psnr"] - s["students"]["ours"]["test"]["psnr"]
        c_rows.append({"seed": s["seed"], "param_reduction": cx["param_reduction"], "psnr_drop": drop,
                       "ok": cx["param_reduction"] >= param_cut_min and drop <= psnr_drop_max})
    return {
        "a": {"mean_psnr": psnr, "per_seed_ordered": per_seed_a, "ok": bool(a_ok)},
        "b": {"rows": b_rows, "ok": all(r["ok"] for r in b_rows)},
        "c": {"rows": c_rows, "ok": all(r["ok"] for r in c_rows)},
    }


def run_ablation(cfg: RunConfig, seeds, out_dir=None) -> dict:
    per_seed, timing = [], {}
    curves = {}
    for seed in seeds:
        res = run_ablation_seed(cfg.with_overrides(seed=int(seed)))
        curves[int(seed)] = res.pop("curves")
        timing[int(seed)] = res.pop("timing")
        per_seed.append(res)
    report = {"config": cfg.to_dict(), "seeds": [int(s) for s in seeds], "per_seed": per_seed,
              "checks": ablation_checks(per_seed), "notes": [RECON_NOTE], "timing": timing}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.copy").write_text(dump_config(cfg))
        (out / "ablation.json").write_text(dumps_report(report))
        for seed, c in curves.items():
            c.write_csv(out / f"curves_seed{seed}.csv")
        try:
            from .plotting import plot_ablation
            plot_ablation(report, curves, out)
        except ImportError:  # pragma: no cover - matplotlib missing
            log.warning("matplotlib unavailable; skipping figures")
    report["curves"] = curves
    return report


# ----------------------------------------------------------------------------
# single runs with a run directory

def _prepare_run_dir(run_dir, cfg: RunConfig) -> Path:
    rd = Path(run_dir)
    (rd / "checkpoints").mkdir(parents=True, exist_ok=True)
    (rd / "tensors").mkdir(exist_ok=True)
    (rd / "config.copy").write_text(dump_config(cfg))
    return rd


def run_teacher_dir(cfg: RunConfig, run_dir) -> dict:
    """``train-teacher``: VAE, UE and teacher; writes checkpoint, curves and report."""
    from .checkpoint import save_teacher

    rd = _prepare_run_dir(run_dir, cfg)
    t0 = time.perf_counter()
    prep = Prepared(cfg)
    teacher, res = run_teacher(prep, cfg, "teacher")
    save_teacher(rd / "checkpoints" / "teacher.npz", teacher, prep.ue, cfg)
    x, alpha, ts = teacher_predict(teacher, prep.data["test"], np.arange(min(4, len(prep.data["test"]))))
    save_tensor(rd / "tensors" / "teacher_test_pred.sdt", x.astype(np.float64), {"split": "test", "t_star": ts.tolist()})
    save_tensor(rd / "tensors" / "test_hr.sdt", prep.data["test"].hr[:4].astype(np.float64))
    save_tensor(rd / "tensors" / "test_lr_up.sdt", prep.data["test"].lr_up[:4].astype(np.float64))
    save_tensor(rd / "tensors" / "test_logvar.sdt", prep.data["test"].s[:4].astype(np.float64))
    save_tensor(rd / "tensors" / "test_mask.sdt", prep.data["test"].mask[:4].astype(np.uint8))
    prep.curves.write_csv(rd / "curves.csv")
    res_clean, tim = _split_timing(res)
    report = {
        "kind": "teacher",
        "config": cfg.to_dict(),
        "teacher": res_clean,
        "baseline_bicubic": prep.baseline(),
        "uncertainty": prep.uncertainty_stats(),
        "complexity": complexity_summary(teacher, None, cfg),
        "notes": [RECON_NOTE],
        "timing": {**prep.timing, **tim, "total_s": time.perf_counter() - t0},
    }
    (rd / "report.json").write_text(dumps_report(report))
    return report


def run_distill_dir(cfg: RunConfig, teacher_ckpt, run_dir) -> dict:
    """``distill``: rebuild data/latents, load the teacher, train the student."""
    from .checkpoint import load_teacher

    rd = _prepare_run_dir(run_dir, cfg)
    t0 = time.perf_counter()
    teacher, ue, tcfg = load_teacher(teacher_ckpt)
    cfg = cfg.with_overrides(vae=tcfg.vae.__dict__, teacher=tcfg.teacher.__dict__)
    data = build_data(cfg)
    encode_splits(teacher.vae, data)
    for sp in data.values():
        sp.s = np.concatenate([ue(sp.z_lr[i:i + 16]).s for i in range(0, len(sp), 16)])
    prep = _LoadedPrep(cfg, data)
    student, res = run_student(prep, teacher, cfg, "student")
    from .checkpoint import save_module

    save_module(rd / "checkpoints" / "student.npz", student, {"alpha_star": res["alpha_star"]})
    x = np.concatenate([student(data["test"].lr_up[:4])])
    save_tensor(rd / "tensors" / "student_test_pred.sdt", x.astype(np.float64), {"split": "test"})
    save_tensor(rd / "tensors" / "test_hr.sdt", data["test"].hr[:4].astype(np.float64))
    save_tensor(rd / "tensors" / "test_lr_up.sdt", data["test"].lr_up[:4].astype(np.float64))
    prep.curves.write_csv(rd / "curves.csv")
    res_clean, tim = _split_timing(res)
    report = {
        "kind": "distill",
        "config": cfg.to_dict(),
        "student": res_clean,
        "teacher_test": evaluate_teacher(teacher, data["test"]),
        "notes": [RECON_NOTE],
        "timing": {**tim, "total_s": time.perf_counter() - t0},
    }
    (rd / "report.json").write_text(dumps_report(report))
    return report


class _LoadedPrep:
    def __init__(self, cfg, data):
        self.cfg = cfg
        self.data = data
        self.curves = Curves()


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def strip_timing(report: dict) -> dict:
    return _strip_timing(report)
