"""Dense NCHW tensors with reverse-mode differentiation.

Every op computes its forward value with numpy and attaches a closure that maps
the output gradient to one gradient per parent.  ``Tensor.backward`` replays the
recorded graph in reverse topological order.
"""
import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent with an op's contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, data generation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Args:
        data (array-like): Values. float64 arrays stay float64 (gradient
            checking); everything else is stored as float32.
        requires_grad (bool): Whether gradients should flow to this tensor.
    """

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        data = np.asarray(data)
        if data.dtype != np.float64:
            data = data.astype(np.float32, copy=False)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """Named learnable tensor. Optimizer moments live in the optimizer state."""

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full_like(like.data, x))


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _check4(x, op):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a rank-4 NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"conv2d: kernel {kernel} larger than padded size {size + 2 * padding}")
    return span // stride + 1


def im2col(x, kh, kw, stride, padding):
    """Unfold (N, C, H, W) into columns of shape (N, C*kh*kw, Ho*Wo).

    Row index within the column is ``c*kh*kw + i*kw + j``.
    """
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return x.reshape(n, c, h * w)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :stride * ho:stride, :stride * wo:stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return cols.reshape(shape)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def gemm_cols(weight, cols, bias=None):
    """(O, C*K) weights times (N, C*K, P) columns -> (N, O, P).

    Shared by conv2d and the deformable convolution so that both reduce in the
    same order (zero offsets then give bit-identical results).
    """
    o = weight.shape[0]
    out = np.matmul(weight.reshape(o, -1), cols)
    if bias is not None:
        out += bias[None, :, None]
    return out


def gemm_cols_backward(g, weight, cols, need_cols_grad=True):
    """Gradients of :func:`gemm_cols` for weight, columns and bias."""
    o = weight.shape[0]
    wmat = weight.reshape(o, -1)
    gw = np.zeros_like(wmat)
    for gn, cn in zip(g, cols):
        gw += gn @ cn.T
    gw = gw.reshape(weight.shape)
    gb = g.sum(axis=(0, 2))
    gcols = np.matmul(wmat.T, g) if need_cols_grad else None
    return gw, gcols, gb


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    Args:
        x (Tensor): (N, C, H, W) input.
        weight (Tensor): (O, C, kh, kw) kernel.
        bias (Tensor | None): (O,) bias.
        stride (int): 1 or 2.
        padding (int): Zero padding on every border.

    Returns:
        Tensor: (N, O, Ho, Wo).
    """
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (O, C, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw} (weight {weight.shape})")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    cols = im2col(x.data, kh, kw, stride, padding)
    out = gemm_cols(weight.data, cols, None if bias is None else bias.data)
    out = out.reshape(n, o, ho, wo)

    # Stride-1 "same" convs: the input gradient is a correlation of g with the
    # flipped, transposed kernel, which avoids the col2im scatter.
    transposed = stride == 1 and kh > 1 and 2 * padding == kh - 1 and kh == kw

    def backward(g):
        g = g.reshape(n, o, ho * wo)
        gw, gcols, gb = gemm_cols_backward(g, weight.data, cols, x.requires_grad and not transposed)
        gx = None
        if x.requires_grad and transposed:
            wt = np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = gemm_cols(wt, im2col(g.reshape(n, o, ho, wo), kh, kw, 1, padding)).reshape(x.shape)
        elif x.requires_grad:
            gx = col2im(gcols, x.shape, kh, kw, stride, padding)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# elementwise


def leaky_relu(x, slope=0.1):
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _result(out, (x,), backward)


def sigmoid(x):
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


def activation(x, kind="leaky_relu", slope=0.1):
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def scale(x, c):
    c = float(c)

    def backward(g):
        return (g * g.dtype.type(c),)

    return _result(x.data * x.dtype.type(c), (x,), backward)


def _channel_broadcast(a, b, op):
    if a.shape == b.shape:
        return False
    if (b.data.ndim == 4 and a.data.ndim == 4 and b.shape[1] == 1
            and (b.shape[0], b.shape[2], b.shape[3]) == (a.shape[0], a.shape[2], a.shape[3])):
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not identical or channel-broadcastable")


def add(a, b):
    """Elementwise sum; ``b`` may be (N, 1, H, W) and broadcast over channels."""
    bcast = _channel_broadcast(a, b, "add")

    def backward(g):
        return g, (g.sum(axis=1, keepdims=True) if bcast else g)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b):
    """Elementwise product; ``b`` may be (N, 1, H, W) and broadcast over channels."""
    bcast = _channel_broadcast(a, b, "mul")

    def backward(g):
        gb = g * a.data
        if bcast:
            gb = gb.sum(axis=1, keepdims=True)
        return g * b.data, gb

    return _result(a.data * b.data, (a, b), backward)


def ewise(a, b, op):
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def sum_channels(x):
    """(N, C, H, W) -> (N, 1, H, W)."""
    _check4(x, "sum_channels")

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(x.data.sum(axis=1, keepdims=True), (x,), backward)


# ---------------------------------------------------------------------------
# layout


def concat_channels(inputs):
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    for t in inputs:
        _check4(t, "concat_channels")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: {t.shape} does not match {ref} outside the channel axis")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _result(np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), backward)


def slice_channels(x, start, stop):
    _check4(x, "slice_channels")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


def reshape(x, shape):
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward)


def take_batch(x, index):
    """Gather rows of the batch axis (repeats allowed); backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), backward)


def pixel_shuffle(x, r):
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r).

    Input channel ``c*r*r + dy*r + dx`` at (y, x) lands at (r*y + dy, r*x + dx).
    """
    _check4(x, "pixel_shuffle")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2 = {r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _result(out, (x,), backward)


def pixel_unshuffle(x, r):
    _check4(x, "pixel_unshuffle")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {h}x{w} not divisible by {r}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)

    def backward(g):
        return (g.reshape(n, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# resampling


def linear_resize_taps(n_in, factor):
    """Source indices (i0, i1) and weight of i1 for each output sample.

    Half-pixel centres, clamped to the valid range so both borders use a
    single tap with weight exactly 1.
    """
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def linear_resize_matrix(n_in, factor, dtype=np.float64):
    """(n_in*factor, n_in) interpolation matrix of :func:`linear_resize_taps`."""
    i0, i1, lam = linear_resize_taps(n_in, factor)
    m = np.zeros((n_in * factor, n_in), dtype=dtype)
    rows = np.arange(n_in * factor)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def _interp_axis(a, n_in, factor, axis):
    i0, i1, lam = linear_resize_taps(n_in, factor)
    shape = [1] * a.ndim
    shape[axis] = -1
    w1 = lam.astype(a.dtype).reshape(shape)
    w0 = (1.0 - lam).astype(a.dtype).reshape(shape)
    # two-tap products summed elementwise: mirror images give bit-identical results
    return np.take(a, i0, axis) * w0 + np.take(a, i1, axis) * w1


def bilinear_resize(x, factor=2):
    """Bilinear upsampling by an integer factor (align_corners=False convention)."""
    _check4(x, "bilinear_resize")
    n, c, h, w = x.shape
    out = _interp_axis(_interp_axis(x.data, h, factor, 2), w, factor, 3)

    def backward(g):
        my = linear_resize_matrix(h, factor, g.dtype)
        mx = linear_resize_matrix(w, factor, g.dtype)
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _result(out, (x,), backward)
