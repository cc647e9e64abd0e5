import json
import time

import numpy as np
import pytest

from slimdiff import cli
from slimdiff.harness.checkpoint import load_teacher, save_teacher
from slimdiff.harness.config import ConfigError, RunConfig, dump_config, load_config
from slimdiff.harness.data import (SceneParams, bicubic_resize, gen_scenes, low_frequency_fraction,
                                   resize_matrix)
from slimdiff.harness.metrics import metrics, psnr, ssim
from slimdiff.harness.pipeline import Prepared, run_teacher, run_teacher_dir, strip_timing
from slimdiff.harness.train import Curves, build_teacher, distill_student, train_teacher
from slimdiff.schedule import build_schedule

from conftest import param_grad_errors, tiny_config


@pytest.fixture(scope="module")
def prep():
    return Prepared(tiny_config())


# ----------------------------------------------------------------------------
# data

def test_scenes_deterministic():
    a = gen_scenes(6, 3)
    b = gen_scenes(6, 3)
    for x, y in zip(a, b):
        assert x.hr.tobytes() == y.hr.tobytes()
        assert x.lr.tobytes() == y.lr.tobytes()
        assert x.provenance == y.provenance
    c = gen_scenes(6, 4)
    assert any(x.hr.tobytes() != y.hr.tobytes() for x, y in zip(a, c))
    # scene i does not depend on how many scenes were asked for
    assert gen_scenes(2, 3)[1].hr.tobytes() == a[1].hr.tobytes()


def test_scene_contract():
    p = SceneParams()
    for s in gen_scenes(20, 0, p):
        assert s.lr.shape == (s.hr.shape[0] // 4, s.hr.shape[1] // 4)
        assert s.hr.min() >= 0.0 and s.hr.max() <= 1.0
        assert s.lr.min() >= 0.0 and s.lr.max() <= 1.0
        assert p.blur_sigma[0] <= s.provenance["blur_sigma"] <= p.blur_sigma[1]
        assert p.noise_sigma[0] <= s.provenance["noise_sigma"] <= p.noise_sigma[1]
        assert s.texture_mask.any() and not s.texture_mask.all()
    with pytest.raises(ValueError):
        gen_scenes(0, 0)
    with pytest.raises(ValueError):
        gen_scenes(1, 0, SceneParams(size=30))


def test_scene_spectrum_is_low_frequency():
    # pooled power spectrum of the generated set, energy below Nyquist/4
    hr = np.stack([s.hr for s in gen_scenes(64, 0)])
    hr = hr - hr.mean(axis=(1, 2), keepdims=True)
    power = (np.abs(np.fft.fft2(hr)) ** 2).sum(axis=0)
    f = np.fft.fftfreq(hr.shape[-1])
    radius = np.hypot(f[:, None], f[None, :])
    frac = power[radius < 0.25 * 0.5].sum() / power.sum()
    assert frac >= 0.6, frac


def test_low_frequency_fraction_examples():
    n = 64
    x = np.arange(n)
    slow = np.cos(2 * np.pi * 2 * x / n)[None, :] * np.ones((n, 1))
    fast = np.cos(2 * np.pi * 20 * x / n)[None, :] * np.ones((n, 1))
    assert low_frequency_fraction(slow) == pytest.approx(1.0)
    assert low_frequency_fraction(fast) == pytest.approx(0.0, abs=1e-12)
    assert low_frequency_fraction(slow + fast) == pytest.approx(0.5)
    assert low_frequency_fraction(np.full((8, 8), 0.3)) == 1.0


def test_resize_rows_sum_to_one():
    for n_in, n_out in ((16, 64), (64, 16), (7, 13)):
        np.testing.assert_allclose(resize_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)
    img = np.random.default_rng(0).random((16, 16))
    np.testing.assert_allclose(bicubic_resize(np.full((9, 9), 0.4), (36, 36)), 0.4, atol=1e-12)
    assert bicubic_resize(img, (64, 64)).shape == (64, 64)


def test_bicubic_upsample_matches_pillow_interior():
    from PIL import Image

    img = np.random.default_rng(1).random((16, 16)).astype(np.float32)
    ours = bicubic_resize(img.astype(np.float64), (64, 64))
    ref = np.asarray(Image.fromarray(img, mode="F").resize((64, 64), Image.BICUBIC))
    # Pillow renormalises the kernel at the border instead of replicating edges
    np.testing.assert_allclose(ours[8:-8, 8:-8], ref[8:-8, 8:-8], atol=1e-5)


# ----------------------------------------------------------------------------
# metrics

def test_metric_examples(rng):
    x = rng.random((32, 32))
    m = metrics(x, x)
    assert m["psnr"] == 100.0 and m["ssim"] == pytest.approx(1.0)
    y = np.full((20, 20), 0.5)
    assert psnr(y + 0.1, y) == pytest.approx(20.0, abs=1e-9)
    checker = (np.indices((32, 32)).sum(0) % 2).astype(float) * 0.8 + 0.1
    assert ssim(1.0 - checker, checker) < 0.1
    with pytest.raises(ValueError):
        metrics(x, x[:-1])


def test_metrics_match_skimage(rng):
    from skimage.metrics import peak_signal_noise_ratio, structural_similarity

    for _ in range(5):
        gt = rng.random((40, 40))
        pred = np.clip(gt + 0.1 * rng.standard_normal(gt.shape), 0, 1)
        assert psnr(pred, gt) == pytest.approx(peak_signal_noise_ratio(gt, pred, data_range=1.0), rel=1e-12)
        ref = structural_similarity(gt, pred, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert ssim(pred, gt) == pytest.approx(ref, abs=1e-9)


# ----------------------------------------------------------------------------
# config

def test_config_roundtrip(tmp_path):
    cfg = tiny_config(seed=7)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("over", [
    {"teacher": {"mode": "halfway"}},
    {"teacher": {"mode": "fixed_t", "fixed_t": 0}},
    {"teacher": {"mode": "fixed_t", "fixed_t": 1001}},
    {"teacher": {"lr": -0.1}},
    {"student": {"iterations": 0}},
    {"student": {"lam": -1.0}},
    {"student": {"operators": ["dsc"]}},
    {"teacher": {"bogus": 1}},
    {"precision": "float16"},
    {"schema_version": 99},
    {"data": {"size": 30}},
])
def test_config_errors(over):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(**over)


def test_config_file_needs_schema_version(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 1\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_config_unet_spec_from_file(tmp_path):
    (tmp_path / "net.yaml").write_text("levels:\n  - {width: 4}\n  - {width: 6}\n  - {width: 8}\n")
    (tmp_path / "c.yaml").write_text("schema_version: 1\nteacher:\n  unet: net.yaml\n"
                                    "student:\n  prune_levels: 1\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert [lv["width"] for lv in cfg.teacher.unet["levels"]] == [4, 6, 8]


# ----------------------------------------------------------------------------
# teacher

def test_teacher_gradients(prep):
    cfg = prep.cfg
    tr = prep.data["train"]
    t = build_teacher(cfg, prep.vae, tr)
    r = np.random.default_rng(0)
    for mod in (t.unet, t.predictor):
        for _, p, _ in mod.named_parameters():
            p += 0.05 * r.standard_normal(p.shape)
    idx = np.arange(2)
    w = r.standard_normal(tr.hr[idx].shape)
    lam = 0.3

    class Trainable:
        def zero_grad(self):
            t.zero_grad()

        def named_parameters(self):
            yield from t.unet.named_parameters("unet.")
            yield from t.predictor.named_parameters("pred.")

    def loss():
        x = t(tr.z_lr[idx], tr.z_gt[idx], tr.z_var[idx])
        tv = t.backward(w, lam)
        return float((x * w).sum()) + lam * tv

    errs = param_grad_errors(Trainable(), loss, sample=3)
    assert max(errs.values()) < 1e-4, errs


def test_untrained_teacher_returns_lr_latent(prep):
    tr = prep.data["val"]
    for over in ({"mode": "adaptive"}, {"mode": "fixed_t", "fixed_t": 500}):
        t = build_teacher(prep.cfg.with_overrides(teacher=over), prep.vae, tr)
        x = t(tr.z_lr, tr.z_gt, tr.z_var)
        np.testing.assert_allclose(x, prep.vae.decode(tr.z_lr), atol=1e-12)


def test_constant_predictor_matches_fixed_t(prep):
    sched = build_schedule()
    a250 = float(sched.alpha_bars[250])
    fixed = prep.cfg.with_overrides(teacher={"mode": "fixed_t", "fixed_t": 250, "lambda_tv": 0.0})
    const = prep.cfg.with_overrides(teacher={"mode": "adaptive", "freeze_predictor": True,
                                             "predictor_init_alpha": a250, "lambda_tv": 0.0})
    runs = []
    for cfg in (fixed, const):
        curves = Curves()
        t = train_teacher(cfg, prep.vae, prep.data, curves, "t")
        runs.append((curves.series("t", "rec")[1], t.unet.state_dict()))
    np.testing.assert_allclose(runs[0][0], runs[1][0], rtol=1e-9)
    for k in runs[0][1]:
        np.testing.assert_allclose(runs[0][1][k], runs[1][1][k], rtol=1e-7, atol=1e-10)


def test_tv_of_constant_map_is_zero(prep):
    # a constant predictor (zero mixing weights) contributes no TV loss
    t = build_teacher(prep.cfg, prep.vae, prep.data["train"])
    tr = prep.data["train"]
    x = t(tr.z_lr[:2], tr.z_gt[:2], tr.z_var[:2])
    assert t.backward(np.zeros_like(x), lambda_tv=1.0) == 0.0


def test_checkpoint_roundtrip(prep, tmp_path):
    t, _ = run_teacher(prep)
    path = tmp_path / "t.npz"
    save_teacher(path, t, prep.ue, prep.cfg)
    t2, ue2, cfg2 = load_teacher(path)
    sp = prep.data["test"]
    np.testing.assert_array_equal(t2(sp.z_lr, sp.z_gt, sp.z_var), t(sp.z_lr, sp.z_gt, sp.z_var))
    np.testing.assert_array_equal(ue2(sp.z_lr).s, prep.ue(sp.z_lr).s)
    assert cfg2.to_dict() == prep.cfg.to_dict()
    with pytest.raises(ConfigError):
        load_teacher(tmp_path / "nope.npz")


def test_teacher_budget():
    """2k iterations on 64x64 scenes must fit in 10 minutes; timed on 60 steps."""
    cfg = RunConfig().with_overrides(data={"train": 16, "val": 4, "test": 4}, ue={"iterations": 5},
                                     teacher={"iterations": 60})
    p = Prepared(cfg)
    t0 = time.perf_counter()
    train_teacher(cfg, p.vae, p.data, Curves())
    per_iter = (time.perf_counter() - t0) / 60
    assert 2000 * per_iter < 600, f"{per_iter:.3f} s/iter"


# ----------------------------------------------------------------------------
# student

def test_dis_loss_decreases_over_window():
    cfg = tiny_config(student={"iterations": 512, "lr": 0.05})
    p = Prepared(cfg)
    teacher, _ = run_teacher(p)
    curves = Curves()
    distill_student(cfg, teacher, p.data, curves)
    _, dis = curves.series("student", "dis")
    k = len(dis) // 8
    assert dis[-k:].mean() < dis[:k].mean()
    assert dis[-1] < dis[0]


def test_student_is_smaller(prep):
    from slimdiff.harness.pipeline import run_student

    teacher, _ = run_teacher(prep)
    _, res = run_student(prep, teacher)
    c = res["complexity"]
    assert c["student"]["params"] < c["teacher"]["params"]
    assert c["param_reduction"] > 0


def test_hook_misalignment_is_config_error(prep):
    teacher, _ = run_teacher(prep)
    cfg = prep.cfg.with_overrides(student={"hooks": ["enc0", "enc9"]})
    with pytest.raises(ConfigError):
        distill_student(cfg, teacher, prep.data, Curves())


# ----------------------------------------------------------------------------
# reports and CLI

def test_report_deterministic(tmp_path):
    cfg = tiny_config()
    reps = [strip_timing(run_teacher_dir(cfg, tmp_path / f"r{i}")) for i in range(2)]
    assert json.dumps(reps[0], sort_keys=True) == json.dumps(reps[1], sort_keys=True)
    a = json.loads((tmp_path / "r0" / "report.json").read_text())
    assert "timing" in a and set(a) - {"timing"} == set(reps[0])
    for name in ("config.copy", "curves.csv", "checkpoints/teacher.npz", "tensors/test_hr.sdt"):
        assert (tmp_path / "r0" / name).exists()


def _write_cfg(path, cfg):
    path.write_text(dump_config(cfg))
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["schedule", "invert", "--alpha", "0.5"]) == 0
    assert cli.main(["schedule", "invert"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nteacher: {mode: sideways}\n")
    assert cli.main(["train-teacher", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    hot = _write_cfg(tmp_path / "hot.yaml", tiny_config(teacher={"lr": 1e300, "iterations": 20},
                                                         warmup=0, lr_schedule="constant"))
    out = tmp_path / "div"
    assert cli.main(["train-teacher", "--config", hot, "--out", str(out)]) == 3
    assert json.loads((out / "divergence.json").read_text())["stage"] == "teacher"


def test_cli_ablate_failure_code(monkeypatch, tmp_path, capsys):
    from slimdiff.harness import pipeline

    def fake(cfg, seeds, out):
        return {"checks": {"a": {"ok": True}, "b": {"ok": False}, "c": {"ok": True}}}

    monkeypatch.setattr(pipeline, "run_ablation", fake)
    assert cli.main(["ablate", "--out", str(tmp_path)]) == 4
    assert "7(b)\tFAIL" in capsys.readouterr().out


def test_cli_train_distill_report(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", tiny_config())
    td, sd = tmp_path / "teacher", tmp_path / "student"
    assert cli.main(["train-teacher", "--config", cfg, "--out", str(td)]) == 0
    assert cli.main(["distill", "--config", cfg, "--teacher", str(td / "checkpoints" / "teacher.npz"),
                     "--out", str(sd)]) == 0
    for rd in (td, sd):
        assert cli.main(["report", "--run", str(rd)]) == 0
        assert (rd / "summary.csv").exists()
        assert list(rd.glob("*.png"))
    assert cli.main(["distill", "--config", cfg, "--out", str(sd)]) == 2
