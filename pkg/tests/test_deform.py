import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edvr import tensor as T
from edvr.deform import (GradcheckReport, bilinear_sample, bilinear_sample_coord_grad, deform_conv2d,
                         deform_conv2d_reference, deform_gradcheck)


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_bilinear_sample_examples():
    patch = np.array([[0.0, 1.0], [2.0, 3.0]])[None, None]
    assert bilinear_sample(patch, 0.5, 0.5) == 1.5
    assert bilinear_sample(patch, -1, -1) == 0.0
    for y in range(2):
        for x in range(2):
            assert bilinear_sample(patch, y, x) == patch[0, 0, y, x]
    # half of the support outside: blend with zeros
    assert bilinear_sample(patch, 1.5, 0.0) == pytest.approx(1.0)


def test_bilinear_coord_grad_is_right_sided_at_integers():
    patch = np.array([[0.0, 1.0], [2.0, 5.0]])[None, None]
    assert bilinear_sample_coord_grad(patch, 0.0, 0.0) == (2.0, 1.0)
    # bottom-right corner: the right neighbours are outside the map
    assert bilinear_sample_coord_grad(patch, 1.0, 1.0) == (-5.0, -5.0)


def test_center_offset_half_pixel():
    x = t64(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    off = np.zeros((1, 2, 3, 3))
    off[0, 1, 1, 1] = 0.5
    out = deform_conv2d(x, t64(off), t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 1, 1)))).data
    assert out[0, 0, 1, 1] == 5.5


def test_tap_order_is_row_major():
    x = t64(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    zeros, ones = t64(np.zeros((1, 18, 3, 3))), t64(np.ones((1, 9, 3, 3)))
    taps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    assert len(taps) == 9
    for k, (dy, dx) in enumerate(taps):
        w = np.zeros((1, 1, 3, 3))
        w.flat[k] = 1.0
        out = deform_conv2d(x, zeros, ones, t64(w)).data
        assert out[0, 0, 1, 1] == x.data[0, 0, 1 + dy, 1 + dx]


@pytest.mark.parametrize("groups", [1, 2])
def test_matches_loop_reference(rng, groups):
    x = rng.standard_normal((2, 4, 5, 4))
    off = rng.uniform(-2.5, 2.5, (2, 18 * groups, 5, 4))
    mod = rng.uniform(0, 1, (2, 9 * groups, 5, 4))
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    out = deform_conv2d(t64(x), t64(off), t64(mod), t64(w), t64(b), groups).data
    np.testing.assert_allclose(out, deform_conv2d_reference(x, off, mod, w, b, groups), rtol=1e-12, atol=1e-12)


def test_zero_offsets_unit_modulation_equals_conv(rng):
    for dtype, exact in ((np.float64, True), (np.float32, False)):
        x = rng.standard_normal((2, 3, 6, 5)).astype(dtype)
        w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
        b = rng.standard_normal(4).astype(dtype)
        conv = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1, 1).data
        dcn = deform_conv2d(T.Tensor(x), T.Tensor(np.zeros((2, 18, 6, 5), dtype)),
                            T.Tensor(np.ones((2, 9, 6, 5), dtype)), T.Tensor(w), T.Tensor(b)).data
        if exact:
            assert np.array_equal(conv, dcn)
        else:
            np.testing.assert_allclose(dcn, conv, rtol=1e-6, atol=1e-6 * np.abs(conv).max())


@pytest.mark.parametrize("groups", [1, 2])
def test_gradcheck_passes(groups):
    shape = (1, 2, 5, 5) if groups == 1 else (1, 4, 5, 5)
    report = deform_gradcheck(seed=3, shape=shape, groups=groups)
    assert report.passed, str(report)
    assert set(report.max_rel_error) == {"input", "offsets", "modulation", "weight"}


def test_gradcheck_report_names_failing_target():
    report = GradcheckReport({"input": 1e-9, "offsets": 3e-3}, 1e-5)
    assert not report.passed
    assert report.failures() == ["offsets"]
    assert "FAILED: offsets" in str(report)


def test_zero_offset_gradient_is_forward_slope(rng):
    x = rng.standard_normal((1, 1, 4, 5))
    g = rng.standard_normal((1, 1, 4, 5))
    off = t64(np.zeros((1, 2, 4, 5)), grad=True)
    out = deform_conv2d(t64(x), off, t64(np.ones((1, 1, 4, 5))), t64(np.ones((1, 1, 1, 1))))
    out.backward(g)
    padded = np.pad(x[0, 0], ((0, 1), (0, 1)))
    slope_y = padded[1:, :-1] - padded[:-1, :-1]
    slope_x = padded[:-1, 1:] - padded[:-1, :-1]
    np.testing.assert_allclose(off.grad[0, 0], g[0, 0] * slope_y, atol=1e-12)
    np.testing.assert_allclose(off.grad[0, 1], g[0, 0] * slope_x, atol=1e-12)


def test_modulation_gradient_is_weight_times_sample(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    off = rng.uniform(-1.3, 1.3, (1, 2, 4, 4))
    mod = t64(rng.uniform(0, 1, (1, 1, 4, 4)), grad=True)
    w = 0.7
    g = rng.standard_normal((1, 1, 4, 4))
    deform_conv2d(t64(x), t64(off), mod, t64(np.full((1, 1, 1, 1), w))).backward(g)
    sampled = np.array([[bilinear_sample(x, i + off[0, 0, i, j], j + off[0, 1, i, j]) for j in range(4)]
                        for i in range(4)])
    np.testing.assert_allclose(mod.grad[0, 0], g[0, 0] * w * sampled, atol=1e-12)


@given(st.floats(0.1, 3.0), st.integers(0, 2**16))
def test_linear_in_modulation_and_input(alpha, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4))
    off = t64(rng.uniform(-2, 2, (1, 18, 4, 4)))
    mod = rng.uniform(0, 0.3, (1, 9, 4, 4))
    w = t64(rng.standard_normal((2, 2, 3, 3)))
    base = deform_conv2d(t64(x), off, t64(mod), w).data
    np.testing.assert_allclose(deform_conv2d(t64(alpha * x), off, t64(mod), w).data, alpha * base,
                               rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(deform_conv2d(t64(x), off, t64(alpha * mod), w).data, alpha * base,
                               rtol=1e-10, atol=1e-10)


def test_translation_consistency(rng):
    x = rng.standard_normal((1, 2, 8, 7))
    shifted = np.zeros_like(x)
    shifted[:, :, :-1] = x[:, :, 1:]          # content moves up one row
    off = rng.uniform(-0.8, 0.8, (1, 18, 8, 7))
    off_shift = off.copy()
    off_shift[:, 0::2] -= 1.0                  # dy of every tap
    mod, w = t64(rng.uniform(0, 1, (1, 9, 8, 7))), t64(rng.standard_normal((3, 2, 3, 3)))
    a = deform_conv2d(t64(x), t64(off), mod, w).data
    b = deform_conv2d(t64(shifted), t64(off_shift), mod, w).data
    # interior rows whose samples never leave either map
    np.testing.assert_allclose(a[:, :, 3:-3, 3:-3], b[:, :, 3:-3, 3:-3], atol=1e-12)


def test_shape_and_range_errors(rng):
    x, w = t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 3, 3)))
    with pytest.raises(T.ShapeError, match="offset"):
        deform_conv2d(x, t64(np.zeros((1, 17, 4, 4))), t64(np.ones((1, 9, 4, 4))), w)
    with pytest.raises(T.ShapeError, match="modulation"):
        deform_conv2d(x, t64(np.zeros((1, 18, 4, 4))), t64(np.ones((1, 8, 4, 4))), w)
    with pytest.raises(ValueError, match=r"\[0, ?1\]"):
        deform_conv2d(x, t64(np.zeros((1, 18, 4, 4))), t64(np.full((1, 9, 4, 4), 1.5)), w)
