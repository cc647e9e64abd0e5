import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimdiff.tensorcore import (
    ConvKernel,
    NonFiniteError,
    box_blur3,
    box_blur3_backward,
    conv2d,
    conv2d_backward,
    conv2d_reference,
    depth_to_space,
    finite_diff_grad,
    load_tensor,
    load_tensor_meta,
    make_rng,
    save_tensor,
    softmax,
    space_to_depth,
)

from conftest import grad_error


def test_conv_ones():
    x = np.ones((1, 1, 3, 3))
    k = ConvKernel(np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(conv2d(x, k), [[[[9.0]]]])


def test_conv_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    np.testing.assert_array_equal(conv2d(x, ConvKernel(np.ones((1, 1, 1, 1)))), x)


@pytest.mark.parametrize("groups,stride,padding", [(1, 1, 0), (1, 2, 1), (3, 1, 1), (1, 1, (0, 1))])
def test_conv_matches_loop_reference(rng, groups, stride, padding):
    x = rng.standard_normal((2, 3, 8, 8))
    c_out = 3 if groups == 3 else 4
    k = ConvKernel(rng.standard_normal((c_out, 3 // groups, 3, 3)), rng.standard_normal(c_out),
                   groups=groups, stride=stride, padding=padding)
    np.testing.assert_allclose(conv2d(x, k), conv2d_reference(x, k), rtol=0, atol=1e-12)


def test_conv_linear(rng):
    x, y = rng.standard_normal((2, 2, 3, 7, 7))
    k = ConvKernel(rng.standard_normal((4, 3, 3, 3)), padding=1)
    np.testing.assert_allclose(conv2d(2.5 * x - 0.5 * y, k), 2.5 * conv2d(x, k) - 0.5 * conv2d(y, k), atol=1e-10)


@pytest.mark.parametrize("groups,stride,padding,ksize", [(1, 1, 1, 3), (1, 2, 1, 3), (4, 1, 1, 3), (1, 1, 0, 1),
                                                         (4, 1, (0, 1), (1, 3))])
def test_conv_backward(rng, groups, stride, padding, ksize):
    kh, kw = (ksize, ksize) if isinstance(ksize, int) else ksize
    x = rng.standard_normal((2, 4, 6, 6))
    k = ConvKernel(rng.standard_normal((4, 4 // groups, kh, kw)), rng.standard_normal(4),
                   groups=groups, stride=stride, padding=padding)
    w = rng.standard_normal(conv2d(x, k).shape)
    dx, dw, db = conv2d_backward(w, x, k)

    assert grad_error(dx, lambda v: float((conv2d(v, k) * w).sum()), x) < 1e-5

    def f_w(v):
        return float((conv2d(x, ConvKernel(v, k.bias, groups, stride, padding)) * w).sum())

    assert grad_error(dw, f_w, k.weight) < 1e-5
    np.testing.assert_allclose(db, w.sum(axis=(0, 2, 3)), atol=1e-12)


def test_conv_rejects_bad_input(rng):
    k = ConvKernel(np.ones((1, 2, 1, 1)))
    with pytest.raises(ValueError):
        conv2d(np.ones((1, 3, 4, 4)), k)
    bad = np.ones((1, 2, 4, 4))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        conv2d(bad, k)
    with pytest.raises(ValueError):
        ConvKernel(np.ones((3, 1, 3, 3)), groups=2)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    np.testing.assert_array_equal(softmax(np.array([1000.0, 0.0])), [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariant(vals, c):
    x = np.array(vals)
    p = softmax(x)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(softmax(x + c), p, atol=1e-12)


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda v: float((v ** 2).sum()), np.array([1.0, 2.0])),
                               [2.0, 4.0], atol=1e-6)
    g = finite_diff_grad(lambda v: float(v.sum()), np.array([0.3, -7.0, 12.0]))
    np.testing.assert_allclose(g, 1.0, atol=1e-9)


def test_finite_diff_rejects_nondeterministic():
    state = np.random.default_rng(0)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: float(v.sum() + state.random()), np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.1)


def test_box_blur_constant_and_adjoint(rng):
    c = np.full((1, 2, 5, 6), 0.7)
    np.testing.assert_allclose(box_blur3(c), c, atol=1e-15)
    x = rng.standard_normal((2, 2, 5, 6))
    y = rng.standard_normal((2, 2, 5, 6))
    # backward is the adjoint of the forward map
    assert abs((box_blur3(x) * y).sum() - (x * box_blur3_backward(y)).sum()) < 1e-10


def test_space_to_depth_roundtrip(rng):
    x = rng.standard_normal((2, 3, 8, 4))
    y = space_to_depth(x, 2)
    assert y.shape == (2, 12, 4, 2)
    np.testing.assert_array_equal(depth_to_space(y, 2), x)
    # adjoint pair (both are permutations)
    z = rng.standard_normal(y.shape)
    assert abs((y * z).sum() - (x * depth_to_space(z, 2)).sum()) < 1e-10


def test_rng_streams():
    a = make_rng(3, "x").standard_normal(5)
    np.testing.assert_array_equal(a, make_rng(3, "x").standard_normal(5))
    assert not np.array_equal(a, make_rng(3, "y").standard_normal(5))
    assert not np.array_equal(a, make_rng(4, "x").standard_normal(5))


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.uint8])
def test_tensor_file_roundtrip(tmp_path, rng, dtype):
    x = (rng.standard_normal((2, 3, 4)) * 10).astype(dtype)
    save_tensor(tmp_path / "t.sdt", x, {"note": "hi"})
    y = load_tensor(tmp_path / "t.sdt")
    assert y.dtype == x.dtype
    np.testing.assert_array_equal(y, x)
    assert load_tensor_meta(tmp_path / "t.sdt")["note"] == "hi"
    raw = (tmp_path / "t.sdt").read_bytes()
    assert raw[:4] == b"SDTN"
    (tmp_path / "bad.sdt").write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad.sdt")
