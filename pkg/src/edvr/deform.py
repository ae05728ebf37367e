"""Modulated deformable convolution on CPU.

For output position p0 and kernel tap k the input is sampled bilinearly at
``p0 + p_k + offset_k`` and scaled by a modulation scalar in [0, 1] before the
usual weighted sum over taps and channels.

Channel layouts (fixed; they define checkpoint compatibility):

* offsets: (N, 2*K*G, H, W), channel ``(g*K + k)*2 + 0`` is dy, ``+ 1`` is dx.
* modulation: (N, K*G, H, W), channel ``g*K + k``.

Tap k enumerates the kernel row-major, so for a 3x3 kernel k=0 is (-1, -1)
and k=8 is (1, 1).
"""
import dataclasses
import math

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .nn import Module, kaiming_normal
from .tensor import Parameter, ShapeError


def bilinear_sample(feature, y, x, batch=0, channel=0):
    """Sample ``feature[batch, channel]`` at fractional (y, x).

    Neighbours outside the map contribute zero.
    """
    img = np.asarray(feature.data if isinstance(feature, T.Tensor) else feature)[batch, channel]
    h, w = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    value = 0.0
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                value += wy * wx * float(img[yy, xx])
    return value


def bilinear_sample_coord_grad(feature, y, x, batch=0, channel=0):
    """(d value/dy, d value/dx) of :func:`bilinear_sample` (right-sided at integers)."""
    img = np.asarray(feature.data if isinstance(feature, T.Tensor) else feature)[batch, channel]
    h, w = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0

    def v(yy, xx):
        return float(img[yy, xx]) if 0 <= yy < h and 0 <= xx < w else 0.0

    tl, tr, bl, br = v(y0, x0), v(y0, x0 + 1), v(y0 + 1, x0), v(y0 + 1, x0 + 1)
    gy = (1.0 - lx) * (bl - tl) + lx * (br - tr)
    gx = (1.0 - ly) * (tr - tl) + ly * (br - bl)
    return gy, gx


def _sampling_matrices(offsets_g, h, w, kh, kw, dtype, with_slopes=False):
    """Sparse bilinear-gather operators for one deformable group.

    Returns CSR matrices of shape (N*K*H*W, N*H*W) mapping pixel rows of the
    (N*H*W, C) feature matrix to sample rows ordered (n, k, y, x). With
    ``with_slopes`` the d/dy and d/dx operators are returned as well.
    """
    n, k = offsets_g.shape[:2]
    pad_y, pad_x = kh // 2, kw // 2
    ky, kx = np.divmod(np.arange(k), kw)
    base_y = (np.arange(h)[None, :, None] + (ky - pad_y)[:, None, None]).astype(dtype)
    base_x = (np.arange(w)[None, None, :] + (kx - pad_x)[:, None, None]).astype(dtype)
    py = base_y[None] + offsets_g[:, :, 0]
    px = base_x[None] + offsets_g[:, :, 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    batch_base = (np.arange(n) * (h * w))[:, None, None, None]

    idx, wts, dys, dxs = [], [], [], []
    for cy, cx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + cy
        xx = x0 + cx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        flat = batch_base + np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        wy = ly if cy else 1.0 - ly
        wx = lx if cx else 1.0 - lx
        idx.append(flat)
        wts.append(np.where(valid, wy * wx, 0.0))
        if with_slopes:
            sy = 1.0 if cy else -1.0
            sx = 1.0 if cx else -1.0
            dys.append(np.where(valid, sy * wx, 0.0))
            dxs.append(np.where(valid, wy * sx, 0.0))

    rows = n * k * h * w
    indices = np.stack([a.reshape(-1) for a in idx], axis=1).reshape(-1)
    indptr = np.arange(0, 4 * rows + 1, 4)
    shape = (rows, n * h * w)

    def csr(parts):
        data = np.stack([a.reshape(-1) for a in parts], axis=1).reshape(-1).astype(dtype)
        return sp.csr_matrix((data, indices, indptr), shape=shape)

    if with_slopes:
        return csr(wts), csr(dys), csr(dxs)
    return csr(wts)


def deform_conv2d(x, offsets, modulation, weight, bias=None, groups=1):
    """Modulated deformable convolution, stride 1, "same" padding.

    Args:
        x (Tensor): (N, C, H, W) features.
        offsets (Tensor): (N, 2*K*G, H, W) fractional sampling offsets in pixels.
        modulation (Tensor): (N, K*G, H, W) per-tap scalars in [0, 1].
        weight (Tensor): (O, C, kh, kw) kernel with odd kh, kw.
        bias (Tensor | None): (O,).
        groups (int): Deformable groups G; channels are split evenly.

    Returns:
        Tensor: (N, O, H, W).
    """
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    k = kh * kw
    g_ = groups
    if cw != c:
        raise ShapeError(f"deform_conv2d: input has {c} channels but weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"deform_conv2d: kernel {kh}x{kw} must be odd for same padding")
    if c % g_:
        raise ShapeError(f"deform_conv2d: {c} channels not divisible into {g_} groups")
    if offsets.shape != (n, 2 * k * g_, h, w):
        raise ShapeError(f"deform_conv2d: offsets shape {offsets.shape}, expected {(n, 2 * k * g_, h, w)}")
    if modulation.shape != (n, k * g_, h, w):
        raise ShapeError(f"deform_conv2d: modulation shape {modulation.shape}, expected {(n, k * g_, h, w)}")
    mod = modulation.data
    if mod.size and (mod.min() < 0.0 or mod.max() > 1.0):
        raise ValueError("deform_conv2d: modulation values must lie in [0, 1]")

    dtype = x.dtype
    cg = c // g_
    hw = h * w
    off = offsets.data.reshape(n, g_, k, 2, h, w)
    mod = mod.reshape(n, g_, k, hw)
    rows_all = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * hw, c)

    mats, sampled = [], np.empty((n, c, k, hw), dtype=dtype)
    for gi in range(g_):
        m = _sampling_matrices(off[:, gi], h, w, kh, kw, dtype)
        mats.append(m)
        s = m @ rows_all[:, gi * cg:(gi + 1) * cg]
        sampled[:, gi * cg:(gi + 1) * cg] = s.reshape(n, k, hw, cg).transpose(0, 3, 1, 2)
    cols = sampled.reshape(n, g_, cg, k, hw) * mod[:, :, None]
    cols = cols.reshape(n, c * k, hw)
    out = T.gemm_cols(weight.data, cols, None if bias is None else bias.data).reshape(n, o, h, w)

    def backward(gout):
        gout = gout.reshape(n, o, hw)
        gw, gcols, gb = T.gemm_cols_backward(gout, weight.data, cols)
        gcols = gcols.reshape(n, g_, cg, k, hw)
        samp = sampled.reshape(n, g_, cg, k, hw)
        gmod = (gcols * samp).sum(axis=2)  # (n, g, k, hw)
        gsamp = gcols * mod[:, :, None]
        gx_rows = np.empty_like(rows_all) if x.requires_grad else None
        goff = np.empty((n, g_, k, 2, hw), dtype=dtype) if offsets.requires_grad else None
        for gi in range(g_):
            grow = np.ascontiguousarray(gsamp[:, gi].transpose(0, 2, 3, 1)).reshape(n * k * hw, cg)
            if gx_rows is not None:
                gx_rows[:, gi * cg:(gi + 1) * cg] = mats[gi].T @ grow
            if goff is not None:
                _, my, mx = _sampling_matrices(off[:, gi], h, w, kh, kw, dtype, with_slopes=True)
                xg = rows_all[:, gi * cg:(gi + 1) * cg]
                goff[:, gi, :, 0] = np.einsum("rc,rc->r", my @ xg, grow).reshape(n, k, hw)
                goff[:, gi, :, 1] = np.einsum("rc,rc->r", mx @ xg, grow).reshape(n, k, hw)
        gx = None if gx_rows is None else np.ascontiguousarray(gx_rows.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        goff = None if goff is None else goff.reshape(offsets.shape)
        grads = (gx, goff, gmod.reshape(modulation.shape), gw)
        return grads + (gb,) if bias is not None else grads

    parents = (x, offsets, modulation, weight) + ((bias,) if bias is not None else ())
    return T._result(out, parents, backward)


def deform_conv2d_reference(x, offsets, modulation, weight, bias=None, groups=1):
    """Direct loop over output positions and taps using :func:`bilinear_sample`.

    Slow; only for cross-checking :func:`deform_conv2d` on tiny inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    k = kh * kw
    cg = c // groups
    out = np.zeros((n, o, h, w))
    for b in range(n):
        for yo in range(h):
            for xo in range(w):
                for ci in range(c):
                    gi = ci // cg
                    for t in range(k):
                        i, j = divmod(t, kw)
                        ch = (gi * k + t) * 2
                        sy = yo + i - kh // 2 + offsets[b, ch, yo, xo]
                        sx = xo + j - kw // 2 + offsets[b, ch + 1, yo, xo]
                        v = bilinear_sample(x, sy, sx, b, ci) * modulation[b, gi * k + t, yo, xo]
                        out[b, :, yo, xo] += weight[:, ci, i, j] * v
    if bias is not None:
        out += np.asarray(bias)[None, :, None, None]
    return out


class ModulatedDeformConv(Module):
    """Deformable conv layer; offsets and modulation come from outside."""

    def __init__(self, rng, in_ch, out_ch, kernel=3, groups=1, bias=True):
        self.weight = Parameter(kaiming_normal(rng, (out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None
        self.groups = groups
        self.taps = kernel * kernel

    def forward(self, x, offsets, modulation):
        return deform_conv2d(x, offsets, modulation, self.weight, self.bias, self.groups)


@dataclasses.dataclass
class GradcheckReport:
    max_rel_error: dict
    tolerance: float
    name: str = "deform_conv2d"

    @property
    def passed(self):
        return all(v < self.tolerance for v in self.max_rel_error.values())

    def failures(self):
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    def __str__(self):
        parts = [f"{k}={v:.2e}" for k, v in self.max_rel_error.items()]
        status = "ok" if self.passed else "FAILED: " + ", ".join(self.failures())
        return f"{self.name} gradcheck ({' '.join(parts)}) {status}"


def _offsets_away_from_kinks(rng, shape, low=-2.0, high=2.0, margin=0.05):
    """Offsets whose fractional part stays ``margin`` away from 0 and 0.5."""
    off = rng.uniform(low, high, size=shape)
    frac = off - np.floor(off)
    for kink in (0.0, 0.5, 1.0):
        near = np.abs(frac - kink) < margin
        off = np.where(near, off + 2 * margin, off)
        frac = off - np.floor(off)
    return off


def deform_gradcheck(seed=0, shape=(1, 2, 5, 5), out_ch=3, kernel=3, groups=1, eps=1e-6, tol=1e-5):
    """Central-difference check of all four gradient targets in float64.

    Sample positions are kept off integer coordinates (where the bilinear
    weights have a kink) and off half-integers.
    """
    from .gradcheck import check_gradients

    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    k = kernel * kernel
    x = T.Tensor(rng.standard_normal(shape), requires_grad=True)
    off = T.Tensor(_offsets_away_from_kinks(rng, (n, 2 * k * groups, h, w)), requires_grad=True)
    mod = T.Tensor(rng.uniform(0.1, 0.9, size=(n, k * groups, h, w)), requires_grad=True)
    wt = T.Tensor(rng.standard_normal((out_ch, c, kernel, kernel)), requires_grad=True)
    proj = rng.standard_normal((n, out_ch, h, w))

    errors = check_gradients(
        lambda: deform_conv2d(x, off, mod, wt, groups=groups),
        {"input": x, "offsets": off, "modulation": mod, "weight": wt},
        proj, eps=eps)
    return GradcheckReport(errors, tol, f"deform_conv2d[G={groups}]")
