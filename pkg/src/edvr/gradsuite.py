"""The float64 finite-difference suite behind ``edvr gradcheck``.

Small ops are checked element by element; network blocks check their inputs
element by element and their parameters through random directional
derivatives pooled over all tensors. Zero-initialised heads are re-drawn with small random weights so that
offsets are non-zero and sampling positions avoid the bilinear kinks.
"""
import numpy as np

from . import tensor as T
from .deform import GradcheckReport, bilinear_sample, bilinear_sample_coord_grad, deform_gradcheck
from .gradcheck import check_gradients, pooled_directional_error, rel_error
from .nn import Module
from .model import EDVR, EdvrConfig, OffsetHead, PcdAlign, PreDeblur, PyramidBuilder, SingleDcnAlign, SpatialAttention, TsaFusion
from .training import charbonnier_loss

TOL = 1e-5
MODEL_TOL = 1e-4


def _t(rng, shape, low=None):
    """Random float64 leaf; ``low`` keeps |x| >= low to stay clear of activation kinks."""
    x = rng.standard_normal(shape)
    if low:
        x = np.where(np.abs(x) < low, np.sign(x + 1e-12) * (low + np.abs(x)), x)
    return T.Tensor(x, requires_grad=True)


def _check(name, fn, inputs, rng, tol=TOL):
    with T.no_grad():
        shape = fn().shape
    proj = rng.standard_normal(shape)
    return GradcheckReport(check_gradients(fn, inputs, proj), tol, name)


def _offset_heads(module):
    for value in vars(module).values():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, OffsetHead):
                yield item
            elif isinstance(item, Module):
                yield from _offset_heads(item)


def _prepare(module, rng, head_std=0.05):
    """Cast to float64 and replace zero initialisations with random values.

    Offset heads get tiny weights and a bias near 0.25, so every level's
    offsets (coarse offsets are doubled on the way up) keep their fractional
    part well inside (0, 1) and no sample sits on a bilinear kink.
    """
    module.to(np.float64)
    for p in module.parameters():
        if not np.any(p.data):
            p.data = rng.normal(0.0, head_std, size=p.shape)
        p.requires_grad = True
    for head in _offset_heads(module):
        head.conv.weight.data = rng.normal(0.0, 0.002, size=head.conv.weight.shape)
        head.conv.bias.data[:head.n_off] = rng.uniform(0.2, 0.3, size=head.n_off)
    return module


def _check_block(name, fn, inputs, module, rng, tol=TOL):
    with T.no_grad():
        shape = fn().shape
    proj = rng.standard_normal(shape)
    errors = check_gradients(fn, inputs, proj)
    params = dict(module.named_parameters())
    errors["params"] = pooled_directional_error(fn, params, proj, rng, n_dirs=2)
    return GradcheckReport(errors, tol, name)


def op_checks(rng):
    yield _check("conv2d", lambda: T.conv2d(x, w, b, 1, 1), {"x": (x := _t(rng, (2, 3, 5, 6))),
                 "weight": (w := _t(rng, (4, 3, 3, 3))), "bias": (b := _t(rng, (4,)))}, rng)
    yield _check("conv2d[stride=2]", lambda: T.conv2d(x2, w2, None, 2, 1),
                 {"x": (x2 := _t(rng, (1, 2, 6, 6))), "weight": (w2 := _t(rng, (3, 2, 3, 3)))}, rng)
    yield _check("conv2d[1x1]", lambda: T.conv2d(x3, w3, b3),
                 {"x": (x3 := _t(rng, (2, 4, 3, 3))), "weight": (w3 := _t(rng, (2, 4, 1, 1))),
                  "bias": (b3 := _t(rng, (2,)))}, rng)
    a = _t(rng, (2, 3, 4, 4), low=1e-3)
    yield _check("leaky_relu", lambda: T.leaky_relu(a, 0.1), {"x": a}, rng)
    yield _check("sigmoid", lambda: T.sigmoid(a), {"x": a}, rng)
    yield _check("scale", lambda: T.scale(a, -1.7), {"x": a}, rng)
    c, d = _t(rng, (2, 3, 4, 4)), _t(rng, (2, 1, 4, 4))
    yield _check("ewise[add]", lambda: T.ewise(a, c, "add"), {"a": a, "b": c}, rng)
    yield _check("ewise[mul]", lambda: T.ewise(a, c, "mul"), {"a": a, "b": c}, rng)
    yield _check("ewise[mul,broadcast]", lambda: T.ewise(a, d, "mul"), {"a": a, "b": d}, rng)
    yield _check("ewise[add,broadcast]", lambda: T.ewise(a, d, "add"), {"a": a, "b": d}, rng)
    yield _check("sum_channels", lambda: T.sum_channels(a), {"x": a}, rng)
    yield _check("concat_channels", lambda: T.concat_channels([a, d]), {"a": a, "b": d}, rng)
    yield _check("slice_channels", lambda: T.slice_channels(a, 1, 3), {"x": a}, rng)
    yield _check("take_batch", lambda: T.take_batch(a, np.array([1, 0, 1, 1])), {"x": a}, rng)
    yield _check("reshape", lambda: T.reshape(a, (1, 6, 4, 4)), {"x": a}, rng)
    p = _t(rng, (1, 8, 3, 2))
    yield _check("pixel_shuffle", lambda: T.pixel_shuffle(p, 2), {"x": p}, rng)
    yield _check("pixel_unshuffle", lambda: T.pixel_unshuffle(a, 2), {"x": a}, rng)
    r = _t(rng, (1, 2, 3, 5))
    yield _check("bilinear_resize[x2]", lambda: T.bilinear_resize(r, 2), {"x": r}, rng)
    yield _check("bilinear_resize[x4]", lambda: T.bilinear_resize(r, 4), {"x": r}, rng)
    tgt = rng.standard_normal((2, 3, 4, 4))
    yield _check("charbonnier[mean]", lambda: charbonnier_loss(c, tgt, 1e-3, "per_element_mean"), {"pred": c}, rng)
    yield _check("charbonnier[global]", lambda: charbonnier_loss(c, tgt, 1e-3, "global_norm"), {"pred": c}, rng)
    yield bilinear_sample_check(rng)
    yield deform_gradcheck(seed=int(rng.integers(2**31)), groups=1)
    yield deform_gradcheck(seed=int(rng.integers(2**31)), shape=(2, 4, 4, 5), groups=2)


def bilinear_sample_check(rng, eps=1e-6, n_points=20):
    """Coordinate gradient of the scalar sampler against central differences."""
    feat = rng.standard_normal((1, 1, 6, 7))
    analytic, numeric = [], []
    for _ in range(n_points):
        y, x = rng.uniform(-1.0, 6.5), rng.uniform(-1.0, 7.5)
        y, x = y + 0.05 if abs(y - round(y)) < 0.05 else y, x + 0.05 if abs(x - round(x)) < 0.05 else x
        analytic.extend(bilinear_sample_coord_grad(feat, y, x))
        numeric.append((bilinear_sample(feat, y + eps, x) - bilinear_sample(feat, y - eps, x)) / (2 * eps))
        numeric.append((bilinear_sample(feat, y, x + eps) - bilinear_sample(feat, y, x - eps)) / (2 * eps))
    return GradcheckReport({"coords": rel_error(analytic, numeric)}, TOL, "bilinear_sample")


def block_checks(rng, ch=4, size=8, n_frames=3):
    builder = _prepare(PyramidBuilder(rng, ch), rng)
    pcd = _prepare(PcdAlign(rng, ch, groups=2), rng)
    nbr, ref = _t(rng, (1, ch, size, size)), _t(rng, (1, ch, size, size))

    pair = Module()
    pair.builder, pair.pcd = builder, pcd
    yield _check_block("pcd_align", lambda: pcd(builder(nbr), builder(ref)), {"neighbor": nbr, "reference": ref},
                       pair, rng)
    single = _prepare(SingleDcnAlign(rng, ch), rng)
    yield _check_block("single_dcn_align", lambda: single([nbr], [ref]), {"neighbor": nbr, "reference": ref},
                       single, rng)
    tsa = _prepare(TsaFusion(rng, ch, n_frames), rng)
    aligned = _t(rng, (2 * n_frames, ch, size, size))
    yield _check_block("temporal_attention", lambda: tsa.temporal_attention(aligned, 2, n_frames, 1),
                       {"aligned": aligned}, tsa, rng)
    yield _check_block("tsa_fusion", lambda: tsa(aligned, 2, n_frames, 1), {"aligned": aligned}, tsa, rng)
    sa = _prepare(SpatialAttention(rng, ch), rng)
    fused = _t(rng, (1, ch, size, size))
    yield _check_block("spatial_attention", lambda: sa(fused), {"fused": fused}, sa, rng)
    pre = _prepare(PreDeblur(rng, ch), rng)
    yield _check_block("predeblur", lambda: pre(fused), {"x": fused}, pre, rng)


def model_check(rng, **overrides):
    cfg = dict(n_frames=3, channels=4, extract_blocks=1, recon_blocks=1, seed=int(rng.integers(2**31)))
    cfg.update(overrides)
    config = EdvrConfig(**cfg)
    model = _prepare(EDVR(config), rng)
    m = config.spatial_multiple
    size = max(8, m)
    clip = T.Tensor(rng.uniform(0, 1, (1, config.n_frames, 3, size, size)), requires_grad=True)
    with T.no_grad():
        shape = model(clip).shape
    proj = rng.standard_normal(shape)
    fn = lambda: model(clip)  # noqa: E731
    errors = {"clip": pooled_directional_error(fn, {"clip": clip}, proj, rng, n_dirs=3),
              "params": pooled_directional_error(fn, dict(model.named_parameters()), proj, rng, n_dirs=2)}
    tag = ",".join(f"{k}={v}" for k, v in overrides.items())
    return GradcheckReport(errors, MODEL_TOL, f"edvr[{tag}]" if tag else "edvr")


def run_suite(seed=0):
    """Every gradient check; returns a list of :class:`GradcheckReport`."""
    rng = np.random.default_rng(seed)
    results = list(op_checks(rng))
    results.extend(block_checks(rng))
    results.append(model_check(rng))
    results.append(model_check(rng, align="single_dcn", fusion="concat"))
    results.append(model_check(rng, scale=1, hr_input=True, predeblur=True))
    return results
