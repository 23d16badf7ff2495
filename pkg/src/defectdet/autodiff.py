"""Dense float64 tensors with reverse-mode differentiation.

Provides exactly the primitives the detector needs: convolution, pooling,
affine maps, ReLU, softmax, and the loss plumbing (gathers, clamped log,
smooth L1, reductions). The computation graph is the implicit DAG formed by
`Tensor` parent references; `backward` runs one reverse topological sweep
and accumulates gradients into `.grad`.

Tensors are immutable values once created and every operation is pure, so
separate graphs may be evaluated concurrently; a single graph belongs to one
logical thread. Everything is float64: throughput is not a goal here, stable
finite-difference verification is. Non-finite values anywhere in a forward
or backward pass raise `NumericError` immediately.
"""

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 array plus a gradient slot and graph linkage.

    `data` is always a C-contiguous float64 ndarray. `grad` is filled in by
    `backward` and has the same shape as `data`. Leaf tensors created with
    `requires_grad=True` act as parameters; op outputs inherit the flag from
    their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backprop=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(_parents)
        self._backprop = _backprop

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Copy of the value with no graph history."""
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Small operator surface; anything structural goes through the module
    # functions below.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else add_const(self, -other)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _op(data, parents, backprop, name=None):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, name=name,
                  _parents=parents, _backprop=backprop if needs else None)


def _toposort(root):
    """Parents-first ordering of every node reachable from `root`."""
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode sweep from a scalar loss node.

    Gradients of every reachable `requires_grad` tensor are (re)computed and
    stored in `.grad`; each graph node is visited exactly once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)
    for node in order:
        if node.grad is not None:
            _check_finite(node.grad, "gradient")


def gradient_map(params):
    """Gradients for a name->Tensor mapping; zeros where the loss did not touch."""
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    def backprop(g):
        _accum(a, g)
        _accum(b, g)
    return _op(a.data + b.data, (a, b), backprop)


def add_const(x, c):
    def backprop(g):
        _accum(x, g)
    return _op(x.data + c, (x,), backprop)


def sub_const(x, arr):
    """x minus a fixed array of the same shape (targets, offsets)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != x.shape:
        raise ShapeError(f"sub_const: {x.shape} vs {arr.shape}")
    def backprop(g):
        _accum(x, g)
    return _op(x.data - arr, (x,), backprop)


def scale(x, c):
    c = float(c)
    def backprop(g):
        _accum(x, c * g)
    return _op(c * x.data, (x,), backprop)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    def backprop(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _op(a.data * b.data, (a, b), backprop)


def sum_all(x):
    def backprop(g):
        _accum(x, np.broadcast_to(g, x.shape))
    return _op(x.data.sum(), (x,), backprop)


def reshape(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape}")
    def backprop(g):
        _accum(x, g.reshape(x.shape))
    return _op(x.data.reshape(shape), (x,), backprop)


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    def backprop(g):
        _accum(x, np.transpose(g, inverse))
    return _op(np.transpose(x.data, axes), (x,), backprop)


def pad2d(x, top, bottom, left, right):
    """Zero-pad the two trailing spatial axes of a CHW tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"pad2d expects CHW, got {x.shape}")
    padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))
    _, h, w = x.shape
    def backprop(g):
        _accum(x, g[:, top:top + h, left:left + w])
    return _op(padded, (x,), backprop)


def relu(x):
    mask = x.data > 0.0  # subgradient at 0 is 0
    def backprop(g):
        _accum(x, g * mask)
    return _op(x.data * mask, (x,), backprop)


def smooth_l1_elementwise(x):
    """0.5*x^2 inside |x|<1, |x|-0.5 outside; both branches meet at 0.5."""
    a = np.abs(x.data)
    inner = a < 1.0
    out = np.where(inner, 0.5 * x.data * x.data, a - 0.5)
    def backprop(g):
        _accum(x, g * np.where(inner, x.data, np.sign(x.data)))
    return _op(out, (x,), backprop)


def softmax(x):
    """Row-stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    def backprop(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))
    return _op(y, (x,), backprop)


def safe_log(x, floor=1e-12):
    """log with the argument clamped to `floor`; zero gradient inside the clamp."""
    clamped = np.maximum(x.data, floor)
    live = x.data > floor
    def backprop(g):
        _accum(x, np.where(live, g / clamped, 0.0))
    return _op(np.log(clamped), (x,), backprop)


# ---------------------------------------------------------------------------
# gathers

def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.intp)
    def backprop(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            _accum(x, dx)
    return _op(x.data[idx], (x,), backprop)


def take_per_row(x, idx):
    """out[i] = x[i, idx[i]] for a 2-d tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"take_per_row: index shape {idx.shape} for {x.shape}")
    rows = np.arange(n)
    def backprop(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (rows, idx), g)
            _accum(x, dx)
    return _op(x.data[rows, idx], (x,), backprop)


def take_columns(x, cols):
    """out[i, j] = x[i, cols[i, j]]; used to pick per-class regression slots."""
    cols = np.asarray(cols, dtype=np.intp)
    n = x.shape[0]
    if cols.ndim != 2 or cols.shape[0] != n:
        raise ShapeError(f"take_columns: column shape {cols.shape} for {x.shape}")
    rows = np.arange(n)[:, None]
    def backprop(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (rows, cols), g)
            _accum(x, dx)
    return _op(x.data[rows, cols], (x,), backprop)


def stack_rows(tensors):
    """Stack same-shaped tensors into an (N, prod(shape)) matrix, flattening each."""
    if not tensors:
        raise ContractError("stack_rows needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack_rows: {t.shape} vs {shape}")
    out = np.stack([t.data.reshape(-1) for t in tensors])
    def backprop(g):
        for r, t in enumerate(tensors):
            _accum(t, g[r].reshape(shape))
    return _op(out, tuple(tensors), backprop)


# ---------------------------------------------------------------------------
# network layers

def linear(x, weight, bias):
    """Affine map rows(x) @ weight + bias for x:(N,D), weight:(D,M), bias:(M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects matrices, got {x.shape} and {weight.shape}")
    n, d = x.shape
    dw, m = weight.shape
    if d != dw or bias.shape != (m,):
        raise ShapeError(f"linear: {x.shape} @ {weight.shape} + {bias.shape}")
    out = x.data @ weight.data + bias.data
    def backprop(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, g.sum(axis=0))
    return _op(out, (x, weight, bias), backprop)


def _im2col(xp, kh, kw, stride, oh, ow):
    c = xp.shape[0]
    col = np.empty((c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xp[:, i:i + oh * stride:stride, j:j + ow * stride:stride]
    return col.reshape(c * kh * kw, oh * ow)


def _col2im(dcol, cshape, kh, kw, stride, oh, ow):
    c, hp, wp = cshape
    dxp = np.zeros((c, hp, wp))
    dcol = dcol.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride] += dcol[:, i, j]
    return dxp


def conv2d(x, kernels, stride=1, pad=0):
    """Cross-correlation of a CHW input with a (K, C, kh, kw) kernel stack.

    The output extent (H + 2*pad - kh) / stride + 1 must divide exactly;
    anything else is a configuration error, not silent truncation.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects CHW and KCkhkw, got {x.shape} and {kernels.shape}")
    c, h, w = x.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {ck}")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigError(
            f"conv2d: output size not exact for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    col = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = kernels.data.reshape(k, -1)
    out = (kmat @ col).reshape(k, oh, ow)

    def backprop(g):
        gm = g.reshape(k, -1)
        _accum(kernels, (gm @ col.T).reshape(kernels.shape))
        if x.requires_grad:
            dxp = _col2im(kmat.T @ gm, (c, hp, wp), kh, kw, stride, oh, ow)
            _accum(x, dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    return _op(out, (x, kernels), backprop)


def add_channel_bias(x, bias):
    """Per-channel bias on a CHW tensor (the only broadcast this library does)."""
    c = x.shape[0]
    if bias.shape != (c,):
        raise ShapeError(f"add_channel_bias: bias {bias.shape} for {c} channels")
    def backprop(g):
        _accum(x, g)
        _accum(bias, g.sum(axis=(1, 2)))
    return _op(x.data + bias.data[:, None, None], (x, bias), backprop)


def bilinear_sample(x, ys, xs):
    """Edge-clamped bilinear samples of a CHW tensor, one per coordinate pair.

    ys, xs are equal-length float arrays in (fractional) grid coordinates;
    the result is (C, P). Out-of-range coordinates clamp to the border.
    Coordinates are constants here: the output is linear in the feature
    values and the gradient flows only into them.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects CHW, got {x.shape}")
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    if ys.shape != xs.shape:
        raise ShapeError(f"bilinear_sample: {ys.shape} ys vs {xs.shape} xs")
    _check_finite(ys, "sample y coordinates")
    _check_finite(xs, "sample x coordinates")
    c, h, w = x.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(ys), h - 2 if h > 1 else 0).astype(np.intp)
    x0 = np.minimum(np.floor(xs), w - 2 if w > 1 else 0).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = (w00 * x.data[:, y0, x0] + w01 * x.data[:, y0, x1]
           + w10 * x.data[:, y1, x0] + w11 * x.data[:, y1, x1])

    def backprop(g):
        if x.requires_grad:
            # bincount over flattened (channel, y, x) indices: much faster
            # than np.add.at for the many-duplicate scatters pooling creates
            base = (np.arange(c) * (h * w))[:, None]
            dx = np.zeros(c * h * w)
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                flat = (base + yy * w + xx).ravel()
                dx += np.bincount(flat, weights=(g * ww).ravel(), minlength=dx.size)
            _accum(x, dx.reshape(x.shape))

    return _op(out, (x,), backprop)


def max_pool(x, window, stride):
    """Max pooling over a CHW tensor; windows must tile the input exactly.

    Backward routes each output gradient to the window's argmax only, with
    row-major first-index tie-breaking, so gradient mass is conserved.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool expects CHW, got {x.shape}")
    c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ConfigError(f"max_pool: window {window}, stride {stride}")
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ConfigError(
            f"max_pool: {window}x{window}/{stride} windows do not cover {h}x{w} exactly")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    s0, s1, s2 = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data, (c, oh, ow, window, window), (s0, s1 * stride, s2 * stride, s1, s2))
    patches = view.reshape(c, oh, ow, window * window)
    arg = patches.argmax(axis=3)
    out = np.take_along_axis(patches, arg[..., None], axis=3)[..., 0]

    def backprop(g):
        if x.requires_grad:
            rows = (np.arange(oh) * stride)[None, :, None] + arg // window
            cols = (np.arange(ow) * stride)[None, None, :] + arg % window
            base = (np.arange(c) * (h * w))[:, None, None]
            flat = (base + rows * w + cols).ravel()
            dx = np.bincount(flat, weights=g.ravel(), minlength=c * h * w)
            _accum(x, dx.reshape(x.shape))

    return _op(out, (x,), backprop)
