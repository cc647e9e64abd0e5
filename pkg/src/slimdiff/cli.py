"""Command-line entry point: ``slimdiff <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 acceptance-check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ACCEPTANCE = 0, 2, 3, 4

log = logging.getLogger("slimdiff")


def _config(path):
    from .harness.config import RunConfig, load_config

    return load_config(path) if path else RunConfig()


# ----------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    from .harness.data import SceneParams, gen_scenes, low_frequency_fraction
    from .tensorcore import save_tensor

    p = SceneParams(size=args.size, scale=args.scale)
    scenes = gen_scenes(args.count, args.seed, p, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hr = np.stack([s.hr for s in scenes])
    lr = np.stack([s.lr for s in scenes])
    mask = np.stack([s.texture_mask for s in scenes]).astype(np.uint8)
    prov = [s.provenance for s in scenes]
    save_tensor(out / "hr.sdt", hr, {"provenance": prov})
    save_tensor(out / "lr.sdt", lr, {"provenance": prov})
    save_tensor(out / "mask.sdt", mask)
    w = csv.writer(sys.stdout)
    w.writerow(["index", "blur_sigma", "noise_sigma", "texture_fraction", "low_freq_fraction"])
    for s in scenes:
        pv = s.provenance
        w.writerow([pv["index"], f"{pv['blur_sigma']:.4f}", f"{pv['noise_sigma']:.4f}",
                    f"{s.texture_mask.mean():.4f}", f"{low_frequency_fraction(s.hr):.4f}"])
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .schedule import build_schedule, invert_alpha, snr_diff

    sched = build_schedule(args.kind, args.T)
    if args.action == "dump":
        w = csv.writer(sys.stdout)
        w.writerow(["t", "beta", "alpha_bar", "snr"])
        for t in range(sched.T + 1):
            beta = sched.betas[t - 1] if t else 0.0
            snr = snr_diff(t, sched) if t else math.inf
            w.writerow([t, repr(float(beta)), repr(float(sched.alpha_bars[t])), repr(snr)])
    else:
        if args.alpha is None:
            print("schedule invert needs --alpha", file=sys.stderr)
            return EXIT_CONFIG
        for a in args.alpha:
            print(f"{a}\t{invert_alpha(a, sched):.9f}")
    return EXIT_OK


def cmd_uncertainty(args) -> int:
    from .tensorcore import load_tensor
    from .uncertainty import UncertaintyOutput, uncertainty_loss

    z_gt = load_tensor(args.gt)
    pred = load_tensor(args.pred)
    c = z_gt.shape[1]
    if pred.shape[1] != 2 * c:
        print(f"--pred must hold mean and log-variance stacked on axis 1 ({2 * c} channels)", file=sys.stderr)
        return EXIT_CONFIG
    out = UncertaintyOutput(pred[:, :c], pred[:, c:])
    print(f"loss\t{uncertainty_loss(z_gt, out):.6f}")
    var = out.z_var.mean(axis=1)
    print(f"mean_var\t{var.mean():.6g}")
    if args.mask:
        m = load_tensor(args.mask).astype(bool)
        f = m.shape[-1] // var.shape[-1]
        if f > 1:
            b, h, w = var.shape
            m = m.reshape(b, h, f, w, f).any(axis=(2, 4))
        m = m.reshape(var.shape)
        print(f"textured_var\t{var[m].mean():.6g}")
        print(f"homogeneous_var\t{var[~m].mean():.6g}")
    return EXIT_OK


def _write_divergence(run_dir, err) -> None:
    rd = Path(run_dir)
    rd.mkdir(parents=True, exist_ok=True)
    (rd / "divergence.json").write_text(json.dumps(err.state, indent=2, sort_keys=True))


def cmd_train_teacher(args) -> int:
    from .harness.pipeline import run_teacher_dir

    cfg = _config(args.config)
    rep = run_teacher_dir(cfg, args.out)
    t = rep["teacher"]
    print(f"val_rec_l1\t{t['val']['rec_l1']:.6f}")
    print(f"test_psnr\t{t['test']['psnr']:.4f}")
    print(f"test_ssim\t{t['test']['ssim']:.4f}")
    print(f"checkpoint\t{Path(args.out) / 'checkpoints' / 'teacher.npz'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    if args.action == "probe":
        return _distill_probe(args)
    if not args.teacher:
        print("distill needs --teacher <checkpoint>", file=sys.stderr)
        return EXIT_CONFIG
    from .harness.pipeline import run_distill_dir

    rep = run_distill_dir(_config(args.config), args.teacher, args.out)
    s = rep["student"]
    print(f"student_test_psnr\t{s['test']['psnr']:.4f}")
    print(f"teacher_test_psnr\t{rep['teacher_test']['psnr']:.4f}")
    cx = s["complexity"]
    print(f"param_reduction\t{cx['param_reduction']:.4f}")
    print(f"mac_reduction\t{cx['mac_reduction']:.4f}")
    return EXIT_OK


def _distill_probe(args) -> int:
    from .distill import KernelConfig, feature_samples, median_bandwidth, mmd2
    from .tensorcore import load_tensor

    if not (args.p and args.q):
        print("distill probe needs --p and --q tensor files", file=sys.stderr)
        return EXIT_CONFIG

    def samples(a):
        return feature_samples(a) if a.ndim == 4 else a.reshape(a.shape[0], -1) if a.ndim > 1 else a[:, None]

    p, q = samples(load_tensor(args.p)), samples(load_tensor(args.q))
    bw = args.bandwidth if args.bandwidth == "median" else float(args.bandwidth)
    print(f"mmd2\t{mmd2(p, q, KernelConfig(bw)):.10g}")
    print(f"median_sigma\t{median_bandwidth(p, q):.10g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .layers import Conv2d
    from .lightops import DSCLayer, FSCLayer, QGAMLayer, SelfAttention, count_macs, count_params

    rng = np.random.default_rng(0)
    h, m = args.H, args.M
    n = h * h
    w = csv.writer(sys.stdout)
    w.writerow(["width", "op", "params", "macs", "score_macs", "ms_per_forward"])
    for c in args.widths:
        x = rng.standard_normal((1, c, h, h))
        tok = rng.standard_normal((1, n, c))
        rows = [
            ("conv3x3", Conv2d(c, c, 3, rng=rng), x, count_params("conv3x3", c),
             count_macs("conv3x3", C=c, H=h, W=h), ""),
            ("dsc", DSCLayer(c, c, rng=rng), x, count_params("dsc", c), count_macs("dsc", C=c, H=h, W=h), ""),
            ("fsc", FSCLayer(c, c, rng=rng), x, count_params("fsc", c), count_macs("fsc", C=c, H=h, W=h), ""),
            ("self_attention", SelfAttention(c, rng=rng), tok, count_params("self_attention", c),
             count_macs("self_attention", N=n, d=c), count_macs("self_attention", N=n, d=c, part="score")),
            ("qgam", QGAMLayer(c, m=m, rng=rng, n_tokens=n), tok, count_params("qgam", c, m=m),
             count_macs("qgam", N=n, M=m, d=c), count_macs("qgam", N=n, M=m, d=c, part="score")),
        ]
        for name, layer, inp, p, mc, sc in rows:
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                layer(inp)
            ms = 1000 * (time.perf_counter() - t0) / args.repeat
            w.writerow([c, name, p, mc, sc, f"{ms:.3f}"])
    return EXIT_OK


# a UNet with full-scale-like channel proportions for the default report
REFERENCE_UNET = {"levels": [{"width": 64, "blocks": 2}, {"width": 128, "blocks": 2, "attention": "self"},
                             {"width": 256, "blocks": 2, "attention": "self"}, {"width": 256, "blocks": 2}],
                  "temb_dim": 128}


def cmd_prune(args) -> int:
    import yaml

    from .prune import FULL_SCALE_REFERENCE, ToyUNetSpec, VAESpec, complexity_report, student_spec

    if args.spec:
        raw = yaml.safe_load(Path(args.spec).read_text()) or {}
        spec = ToyUNetSpec.from_dict(raw.get("unet", raw))
        vspec = VAESpec(**raw.get("vae", {"widths": [32, 64, 128, 128], "boundary_kernel": 3}))
    else:
        spec = ToyUNetSpec.from_dict(REFERENCE_UNET)
        vspec = VAESpec(widths=[32, 64, 128, 128], boundary_kernel=3)
    spec.validate()
    res = args.resolution
    rep = complexity_report(spec, vspec, res)
    print("teacher")
    print(rep.table())
    n_keep = len(spec.levels) - args.levels
    ops = args.operators or (["fsc"] + ["dsc"] * (n_keep - 1))
    st = student_spec(spec, args.levels, ops, fused_channels=vspec.widths[-1],
                      fused_kernel=vspec.boundary_kernel + spec.conv_in_kernel - 1)
    srep = complexity_report(st, vspec, res)
    print("\nstudent: deepest levels pruned, operators replaced, fused boundary convs counted in the UNet row")
    print(srep.table())
    print(f"\nreference full-scale split (params UNet/VAE %): {FULL_SCALE_REFERENCE['params']['unet']}/"
          f"{FULL_SCALE_REFERENCE['params']['vae']}, MACs {FULL_SCALE_REFERENCE['macs']['unet']}/{FULL_SCALE_REFERENCE['macs']['vae']}")
    if args.json:
        Path(args.json).write_text(json.dumps({"teacher": rep.to_dict(), "student": srep.to_dict()}, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness.plotting import plot_curves, plot_distill_terms, plot_images
    from .harness.train import Curves
    from .tensorcore import load_tensor

    rd = Path(args.run)
    rep_path = rd / "report.json"
    if not rep_path.exists():
        abl = rd / "ablation.json"
        if abl.exists():
            return _report_ablation(rd, args)
        print(f"no report.json in {rd}", file=sys.stderr)
        return EXIT_CONFIG
    rep = json.loads(rep_path.read_text())
    made = []
    if (rd / "curves.csv").exists():
        curves = Curves.read_csv(rd / "curves.csv")
        made.append(plot_curves(curves, rd))
        if any("mse_dis" in r for r in curves.rows):
            made.append(plot_distill_terms(curves, rd))
    tdir = rd / "tensors"
    panels = {}
    for title, fname in (("bicubic", "test_lr_up.sdt"), ("teacher", "teacher_test_pred.sdt"),
                         ("student", "student_test_pred.sdt"), ("ground truth", "test_hr.sdt")):
        if (tdir / fname).exists():
            panels[title] = np.clip(load_tensor(tdir / fname), 0, 1)
    if (tdir / "test_logvar.sdt").exists():
        panels["log-variance"] = load_tensor(tdir / "test_logvar.sdt").mean(axis=1, keepdims=True)
    if panels:
        made.append(plot_images(panels, rd))
    rows = _flatten(rep)
    with open(rd / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerows(rows)
    w = csv.writer(sys.stdout)
    for k, v in rows:
        if k.startswith(("teacher.", "student.", "baseline", "uncertainty", "teacher_test")):
            w.writerow([k, v])
    for p in made:
        print(f"figure\t{p}")
    return EXIT_OK


def _report_ablation(rd: Path, args) -> int:
    from .harness.plotting import plot_ablation
    from .harness.train import Curves

    rep = json.loads((rd / "ablation.json").read_text())
    curves = {s: Curves.read_csv(rd / f"curves_seed{s}.csv") for s in rep["seeds"]
              if (rd / f"curves_seed{s}.csv").exists()}
    for p in plot_ablation(rep, curves, rd):
        print(f"figure\t{p}")
    for k, v in _flatten(rep["checks"]):
        print(f"{k},{v}")
    return EXIT_OK


def _flatten(d, prefix=""):
    rows = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.extend(_flatten(v, key + "."))
        elif isinstance(v, (int, float, str, bool)) or v is None:
            rows.append((key, v))
    return rows


def cmd_ablate(args) -> int:
    from .harness.pipeline import run_ablation

    cfg = _config(args.config)
    rep = run_ablation(cfg, args.seeds, args.out)
    ok = True
    for name, chk in rep["checks"].items():
        print(f"7({name})\t{'pass' if chk['ok'] else 'FAIL'}")
        ok &= chk["ok"]
    return EXIT_OK if ok else EXIT_ACCEPTANCE


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slimdiff", description="Lightweight single-step diffusion SR toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenes into tensor files")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", default="scenes")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("schedule", help="dump the noise schedule or invert a noise level")
    p.add_argument("action", choices=["dump", "invert"])
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--kind", default="linear", choices=["linear", "cosine"])
    p.add_argument("--T", type=int, default=1000)
    p.set_defaults(fn=cmd_schedule)

    p = sub.add_parser("uncertainty", help="score an uncertainty prediction")
    p.add_argument("action", choices=["eval"])
    p.add_argument("--gt", required=True, help="ground-truth latents (B, C, H, W)")
    p.add_argument("--pred", required=True, help="mean and log-variance stacked on axis 1")
    p.add_argument("--mask", help="optional texture mask (B, H, W)")
    p.set_defaults(fn=cmd_uncertainty)

    p = sub.add_parser("train-teacher", help="train VAE, uncertainty estimator and teacher")
    p.add_argument("--config")
    p.add_argument("--out", default="runs/teacher")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint, or probe MMD")
    p.add_argument("action", nargs="?", choices=["probe"])
    p.add_argument("--config")
    p.add_argument("--teacher")
    p.add_argument("--out", default="runs/student")
    p.add_argument("--p")
    p.add_argument("--q")
    p.add_argument("--bandwidth", default="median")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("bench", help="parameter/MAC counts and timings of the operators")
    p.add_argument("action", choices=["ops"])
    p.add_argument("--widths", type=int, nargs="+", default=[8, 12, 24, 32])
    p.add_argument("--H", type=int, default=32)
    p.add_argument("--M", type=int, default=64)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("prune", help="complexity report before and after pruning")
    p.add_argument("action", choices=["report"])
    p.add_argument("--spec", help="YAML with a 'unet' (and optional 'vae') section")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--operators", nargs="+")
    p.add_argument("--json")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("report", help="render figures and a CSV summary for a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("ablate", help="run the ablation panel and check the orderings")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="runs/ablation")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    from .harness.config import ConfigError
    from .harness.train import DivergenceError
    from .tensorcore import NonFiniteError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except BrokenPipeError:
        # output piped into e.g. `head`
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as e:
        print(f"diverged: {e}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out and isinstance(e, DivergenceError):
            _write_divergence(out, e)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
