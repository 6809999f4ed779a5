"""Dense-tensor compute layer with reverse-mode differentiation.

Arrays are numpy-backed, row-major, float32 by default; float64 can be
selected globally (gradient checks run there). Ops build the graph eagerly;
``grad_of`` runs the backward pass from a scalar loss and fills parameter
gradients. Everything here is deterministic for fixed inputs: no dropout,
no nondeterministic reductions.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Set the global compute dtype; returns the previous one."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported compute dtype {dt}")
    _DEFAULT_DTYPE = dt.type
    return prev


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def dtype_scope(dtype):
    prev = set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / embedding extraction)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward -----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar; got shape {self.data.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)


class Parameter(Tensor):
    """A named learnable tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(np.ascontiguousarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def grad_of(loss, parameters):
    """Reverse-mode gradients of a scalar loss for the given parameters.

    Parameters not reached by the graph keep a zero gradient. Returns a dict
    name -> gradient copy; the parameters' own .grad buffers are also filled.
    """
    params = list(parameters)
    for p in params:
        p.zero_grad()
    loss.backward()
    return {p.name: p.grad.copy() for p in params}


# ---------------------------------------------------------------------------
# graph internals


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def _accum(node, g):
    if isinstance(node, Parameter):
        node.grad += g
    elif node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra ops


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a, shape):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def narrow(a, axis, start, length):
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        _accum(a, ga)

    return _make(a.data[index], (a,), backward)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accum(t, g[tuple(index)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tile0(a, n):
    """Repeat a leading-1 tensor n times along axis 0 (e.g. CLS row per sample)."""
    a = _as_tensor(a)
    if a.data.shape[0] != 1:
        raise ValueError("tile0 expects leading extent 1")

    def backward(g):
        _accum(a, g.sum(axis=0, keepdims=True))

    return _make(np.repeat(a.data, n, axis=0), (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    scale = 1.0 / count

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g * scale, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg * scale, a.data.shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a):
    """tanh-approximation GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        _accum(a, g * grad)

    return _make(out_data, (a,), backward)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, (g - (g * y).sum(axis=axis, keepdims=True)) * y)

    return _make(y, (a,), backward)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=reduce_axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)

    return _make(out_data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# indexing ops


def embedding(table, ids):
    """Row lookup: table [V,d], ids int array [...] -> [..., d]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(table.data[ids], (table,), backward)


def gather_last(x, ids):
    """Pick one entry per position along the last axis: ids shape == x.shape[:-1]."""
    x = _as_tensor(x)
    ids = np.asarray(ids)
    out_data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        flat = gx.reshape(-1, gx.shape[-1])
        rows = np.arange(flat.shape[0])
        np.add.at(flat, (rows, ids.ravel()), g.ravel())
        _accum(x, gx)

    return _make(out_data, (x,), backward)


def take_tokens(x, idx):
    """Gather token rows per sample: x [N,L,D], idx [N,K] -> [N,K,D]."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    rows = np.arange(x.data.shape[0])[:, None]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _accum(x, gx)

    return _make(x.data[rows, idx], (x,), backward)


def put_tokens(x, idx, length):
    """Scatter token rows back to a zero-padded full sequence (inverse of take_tokens)."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    n, _, d = x.data.shape
    rows = np.arange(n)[:, None]
    out_data = np.zeros((n, length, d), dtype=x.data.dtype)
    out_data[rows, idx] = x.data

    def backward(g):
        _accum(x, g[rows, idx])

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# convolutions (stride 1, odd kernel, same padding) for segmentation decoders


def conv2d(x, w, b):
    """x [N,C,H,W], w [O,C,kh,kw] (odd kernels), b [O] -> [N,O,H,W]."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    b = _as_tensor(b, x)
    n, c, h, wd_ = x.data.shape
    o, _, kh, kw = w.data.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros((n, o, h, wd_), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out_data += np.einsum("oc,nchw->nohw", w.data[:, :, i, j],
                                  xp[:, :, i:i + h, j:j + wd_])
    out_data += b.data[:, None, None]

    def backward(g):
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g,
                                               xp[:, :, i:i + h, j:j + wd_])
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + wd_] += np.einsum(
                        "oc,nohw->nchw", w.data[:, :, i, j], g)
            _accum(x, gxp[:, :, ph:ph + h, pw:pw + wd_])

    return _make(out_data, (x, w, b), backward)


def conv3d(x, w, b):
    """x [N,C,D,H,W], w [O,C,kd,kh,kw] (odd kernels), b [O] -> [N,O,D,H,W]."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    b = _as_tensor(b, x)
    n, c, dd, h, wd_ = x.data.shape
    o, _, kd, kh, kw = w.data.shape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out_data = np.zeros((n, o, dd, h, wd_), dtype=x.data.dtype)
    for z in range(kd):
        for i in range(kh):
            for j in range(kw):
                out_data += np.einsum("oc,ncdhw->nodhw", w.data[:, :, z, i, j],
                                      xp[:, :, z:z + dd, i:i + h, j:j + wd_])
    out_data += b.data[:, None, None, None]

    def backward(g):
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for z in range(kd):
                for i in range(kh):
                    for j in range(kw):
                        gw[:, :, z, i, j] = np.einsum(
                            "nodhw,ncdhw->oc", g, xp[:, :, z:z + dd, i:i + h, j:j + wd_])
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for z in range(kd):
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, z:z + dd, i:i + h, j:j + wd_] += np.einsum(
                            "oc,nodhw->ncdhw", w.data[:, :, z, i, j], g)
            _accum(x, gxp[:, :, pd:pd + dd, ph:ph + h, pw:pw + wd_])

    return _make(out_data, (x, w, b), backward)
