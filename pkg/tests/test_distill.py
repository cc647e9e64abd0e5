import math

import numpy as np
import pytest

from slimdiff.distill import (
    FeatureAdapter,
    KernelConfig,
    dis_loss,
    dis_loss_and_grad,
    feature_samples,
    median_bandwidth,
    mmd2,
    mmd2_and_grad,
    mse_dis,
    mse_dis_and_grad,
    rbf_kernel,
)

from conftest import SEEDS, grad_error, param_grad_errors


def naive_mmd2(p, q, sigma):
    def k(a, b):
        return math.exp(-sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / (2 * sigma * sigma))

    m, n = len(p), len(q)
    kxx = sum(k(a, b) for a in p for b in p) / (m * m)
    kyy = sum(k(a, b) for a in q for b in q) / (n * n)
    kxy = sum(k(a, b) for a in p for b in q) / (m * n)
    return kxx + kyy - 2 * kxy


def naive_median_sigma(p, q):
    z = np.concatenate([p, q])
    d = [np.sqrt(((z[i] - z[j]) ** 2).sum()) for i in range(len(z)) for j in range(i + 1, len(z))]
    return float(np.median(d))


def test_rbf_examples(rng):
    x = rng.standard_normal(4)
    assert rbf_kernel(x, x, 0.7) == 1.0
    sigma = 1.3
    y = x.copy()
    y[0] += math.sqrt(2) * sigma
    assert rbf_kernel(x, y, sigma) == pytest.approx(math.exp(-1), rel=1e-14)
    for _ in range(10):
        a, b = rng.standard_normal((2, 3))
        assert rbf_kernel(a, b, 0.5) == rbf_kernel(b, a, 0.5)
    with pytest.raises(ValueError):
        rbf_kernel(x, y, -1.0)
    with pytest.raises(ValueError):
        rbf_kernel(x, y[:2], 1.0)


def test_kernel_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(0.0)
    with pytest.raises(ValueError):
        KernelConfig("mean")


def test_mmd_identical_sets_zero(rng):
    p = rng.standard_normal((30, 4))
    assert mmd2(p, p) == 0.0
    assert mmd2(p, p, KernelConfig(0.3)) == 0.0


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0, 3.0, 40.0])
def test_mmd_singletons(t):
    val = mmd2(np.array([[0.0]]), np.array([[t]]), KernelConfig(1.0))
    assert val == pytest.approx(2 - 2 * math.exp(-t * t / 2), abs=1e-15)


def test_mmd_matches_naive_oracle():
    rng = np.random.default_rng(11)
    for i in range(20):
        m, n, d = rng.integers(1, 51), rng.integers(1, 51), rng.integers(1, 6)
        p = rng.standard_normal((m, d))
        q = rng.standard_normal((n, d)) * 1.5 + 0.3
        sigma = float(rng.uniform(0.3, 3.0))
        assert abs(mmd2(p, q, KernelConfig(sigma)) - naive_mmd2(p, q, sigma)) <= 1e-12
        if m + n >= 2:
            s = naive_median_sigma(p, q)
            assert median_bandwidth(p, q) == pytest.approx(s, rel=1e-12)
            assert abs(mmd2(p, q) - naive_mmd2(p, q, s)) <= 1e-12


def test_mmd_nonnegative_and_symmetric():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        m, n, d = rng.integers(1, 12, size=3)
        p = rng.standard_normal((m, d))
        q = rng.standard_normal((n, d)) * rng.uniform(0.1, 3)
        v = mmd2(p, q)
        assert v >= 0.0
        assert v == pytest.approx(mmd2(q, p), abs=1e-14)


def test_mmd_permutation_and_scale_invariance(rng):
    p = rng.standard_normal((25, 3))
    q = rng.standard_normal((18, 3)) + 0.5
    base = mmd2(p, q)
    assert mmd2(p[rng.permutation(25)], q[rng.permutation(18)]) == pytest.approx(base, abs=1e-14)
    for c in (0.01, 3.0, 250.0):
        assert mmd2(c * p, c * q) == pytest.approx(base, rel=1e-10)


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd2(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mmd2(np.zeros((2, 3)), np.zeros((2, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_mmd_gradient(seed):
    r = np.random.default_rng(seed)
    p = r.standard_normal((12, 3))
    q = r.standard_normal((9, 3)) + 0.4
    cfg = KernelConfig(float(r.uniform(0.8, 2.0)))
    _, dp, dq, _ = mmd2_and_grad(p, q, cfg)
    assert grad_error(dp, lambda v: mmd2(v, q, cfg), p) < 1e-4
    assert grad_error(dq, lambda v: mmd2(p, v, cfg), q) < 1e-4


def test_mmd_gradient_holds_median_sigma_fixed(rng):
    p = rng.standard_normal((10, 2))
    q = rng.standard_normal((10, 2))
    _, dp, _, sigma = mmd2_and_grad(p, q)
    fixed = KernelConfig(sigma)
    assert grad_error(dp, lambda v: mmd2(v, q, fixed), p) < 1e-4


def test_feature_samples_layout(rng):
    f = rng.standard_normal((2, 3, 4, 5))
    s = feature_samples(f)
    assert s.shape == (40, 3)
    np.testing.assert_array_equal(s[7], f[0, :, 1, 2])


def _adapters(rng, pairs):
    return [FeatureAdapter(cs, ct, rng) for cs, ct in pairs]


def test_adapter_identity_when_widths_match(rng):
    ad = FeatureAdapter(4, 4, rng)
    f = rng.standard_normal((1, 4, 3, 3))
    np.testing.assert_allclose(ad(f), f + ad.conv.params["bias"][None, :, None, None])
    assert FeatureAdapter(3, 5, rng)(rng.standard_normal((1, 3, 2, 2))).shape == (1, 5, 2, 2)


def test_mse_dis_examples(rng):
    ad = FeatureAdapter(2, 2, rng)
    ad.conv.params["bias"][...] = 0.0
    f = rng.standard_normal((1, 2, 3, 3))
    assert mse_dis([f], [f.copy()], [ad]) == 0.0
    g = f.copy()
    g[0, 1, 2, 0] += 1.0
    assert mse_dis([f], [g], [ad]) == pytest.approx(1.0, abs=1e-14)
    assert mse_dis([f], [g], [ad], reduction="mean") == pytest.approx(1.0 / f.size, abs=1e-14)
    # two layers: mean over layers
    assert mse_dis([f, f], [g, f], [ad, ad]) == pytest.approx(0.5, abs=1e-14)


def test_mse_dis_errors(rng):
    ads = _adapters(rng, [(2, 3)])
    f = rng.standard_normal((1, 2, 3, 3))
    with pytest.raises(ValueError):
        mse_dis([f, f], [f], ads)
    with pytest.raises(ValueError):
        mse_dis([f], [f], ads)          # adapter output has 3 channels, teacher 2
    with pytest.raises(ValueError):
        mse_dis([], [], [])


@pytest.mark.parametrize("seed", SEEDS)
def test_mse_dis_gradients(seed):
    r = np.random.default_rng(seed)
    ad = FeatureAdapter(3, 4, r)
    fs = r.standard_normal((2, 3, 4, 4))
    ft = r.standard_normal((2, 4, 4, 4))

    def loss():
        val, _ = mse_dis_and_grad([fs], [ft], [ad])
        return val

    errs = param_grad_errors(ad, loss)
    assert max(errs.values()) < 1e-4, errs
    ad.zero_grad()
    _, (dfs,) = mse_dis_and_grad([fs], [ft], [ad])
    assert grad_error(dfs, lambda v: mse_dis([v], [ft], [ad]), fs) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_dis_loss_gradients(seed):
    r = np.random.default_rng(seed)
    ads = _adapters(r, [(3, 4), (2, 2)])
    fs = [r.standard_normal((1, 3, 3, 3)), r.standard_normal((1, 2, 2, 4))]
    ft = [r.standard_normal((1, 4, 3, 3)), r.standard_normal((1, 2, 2, 4))]
    cfg = KernelConfig(1.5)

    def loss():
        val, _, _ = dis_loss_and_grad(fs, ft, ads, cfg, lam=0.7)
        return val

    for ad in ads:
        ad.zero_grad()
    _, _, g = dis_loss_and_grad(fs, ft, ads, cfg, lam=0.7)
    for i in range(2):
        def f(v, i=i):
            cur = list(fs)
            cur[i] = v
            return dis_loss(cur, ft, ads, cfg, lam=0.7)
        assert grad_error(g[i], f, fs[i]) < 1e-4

    class Both:
        # adapters as one module for the parameter check
        def __init__(self, mods):
            self.mods = mods

        def zero_grad(self):
            for m in self.mods:
                m.zero_grad()

        def named_parameters(self):
            for k, m in enumerate(self.mods):
                for name, p, gr in m.named_parameters():
                    yield f"{k}.{name}", p, gr

    errs = param_grad_errors(Both(ads), loss)
    assert max(errs.values()) < 1e-4, errs


def test_dis_loss_composition(rng):
    ads = _adapters(rng, [(3, 4), (2, 2)])
    fs = [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 2, 2, 2))]
    ft = [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 2, 2, 2))]
    mse = mse_dis(fs, ft, ads)
    assert dis_loss(fs, ft, ads, lam=0.0) == mse
    mmd = np.mean([mmd2(feature_samples(a(f)), feature_samples(t)) for a, f, t in zip(ads, fs, ft)])
    assert dis_loss(fs, ft, ads, lam=0.1) == pytest.approx(mse + 0.1 * mmd, rel=1e-13)
    same = [a(f) for a, f in zip(ads, fs)]
    assert dis_loss(fs, same, ads, lam=0.1) == 0.0


def test_dis_loss_subsampling_is_seeded(rng):
    ads = _adapters(rng, [(2, 2)])
    fs = [rng.standard_normal((2, 2, 8, 8))]
    ft = [rng.standard_normal((2, 2, 8, 8))]
    a = dis_loss(fs, ft, ads, lam=1.0, max_samples=20, rng=np.random.default_rng(3))
    b = dis_loss(fs, ft, ads, lam=1.0, max_samples=20, rng=np.random.default_rng(3))
    assert a == b
    with pytest.raises(ValueError):
        dis_loss(fs, ft, ads, lam=1.0, max_samples=20)
