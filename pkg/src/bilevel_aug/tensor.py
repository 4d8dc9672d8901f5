"""Dense tensors with a reverse-mode differentiation tape.

The tape records primitive operations; every backward rule is itself
expressed in primitive operations, so a backward pass can be recorded and
differentiated again (needed for the second-order terms of the truncated
hypergradient).

Usage contract: tensors participate in differentiation only while a Tape
is active and only if they were watched (leaves) or produced by a recorded
op. A tape and its tensors belong to one thread of execution; independent
runs must use independent tapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class TapeError(RuntimeError):
    """Raised for gradient requests that the active tape cannot honor."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN/Inf."""

    def __init__(self, op):
        super().__init__(f"{op}: produced non-finite values")


class _State(threading.local):
    def __init__(self):
        self.stack = []
        self.suspended = 0
        self.debug = False


_STATE = _State()


def set_debug(flag):
    """Enable per-op NaN/Inf checking (slow; meant for debugging runs)."""
    _STATE.debug = bool(flag)


def _active_tape():
    if _STATE.suspended or not _STATE.stack:
        return None
    return _STATE.stack[-1]


@contextmanager
def record_suspended():
    """Temporarily stop recording onto any tape."""
    _STATE.suspended += 1
    try:
        yield
    finally:
        _STATE.suspended -= 1


class Node:
    """One recorded primitive op: inputs precede it on the tape."""

    __slots__ = ("tape", "idx", "op", "inputs", "vjp", "shape", "dtype")

    def __init__(self, tape, op, inputs, vjp, shape, dtype):
        self.tape = tape
        self.idx = len(tape.nodes)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape
        self.dtype = dtype


class Tape:
    """Ordered record of primitive ops, scoped with a ``with`` block.

    Backward passes may themselves be recorded onto the same tape
    (``grad(..., create_graph=True)``), enabling grad-of-grad.
    """

    def __init__(self):
        self.nodes = []
        self.active = False

    def __enter__(self):
        _STATE.stack.append(self)
        self.active = True
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.stack.remove(self)
        self.active = False
        return False

    def watch(self, tensor):
        """Attach ``tensor`` as a differentiable leaf of this tape."""
        if tensor.node is not None and tensor.node.tape is self:
            return
        node = Node(self, "leaf", (), None, tensor.shape, tensor.dtype)
        self.nodes.append(node)
        tensor.node = node

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A dense n-d float array, optionally attached to a tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None):
        if dtype is None and not (
            isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES
        ):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.node = None

    # -- introspection ----------------------------------------------------

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

    def numpy(self):
        """The underlying array. Treat as read-only while a tape is live."""
        return self.data

    def __repr__(self):
        tag = "" if self.node is None else f", op={self.node.op}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, axes=None):
        return transpose(self, axes)


def astensor(x, like=None):
    """Coerce to Tensor; python scalars adopt ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype))


def zeros_like(t):
    return Tensor(np.zeros(t.shape, dtype=t.dtype))


def ones_like(t):
    return Tensor(np.ones(t.shape, dtype=t.dtype))


# -- recording core -------------------------------------------------------


def _result(op, data):
    if _STATE.debug and not np.isfinite(data).all():
        raise NonFiniteError(op)
    return Tensor(data)


def _record(op, out, in_tensors, vjp):
    tape = _active_tape()
    if tape is None:
        return out
    in_nodes = tuple(
        t.node if (isinstance(t, Tensor) and t.node is not None and t.node.tape is tape) else None
        for t in in_tensors
    )
    if not any(n is not None for n in in_nodes):
        return out
    node = Node(tape, op, in_nodes, vjp, out.shape, out.dtype)
    tape.nodes.append(node)
    out.node = node
    return out


def grad(output, inputs, create_graph=False):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. ``inputs``.

    With ``create_graph`` the returned tensors are recorded on the same
    tape and can be differentiated again. Inputs that are on the tape but
    do not influence ``output`` get zero gradients.
    """
    if not isinstance(output, Tensor) or output.size != 1:
        raise TapeError("grad: output must be a scalar tensor")
    onode = output.node
    if onode is None:
        raise TapeError("grad: output is not recorded on any tape")
    tape = onode.tape
    in_nodes = []
    for t in inputs:
        if t.node is None or t.node.tape is not tape:
            raise TapeError("grad: input tensor is not on the output's tape")
        in_nodes.append(t.node)

    limit = onode.idx + 1
    nodes = tape.nodes
    # dep[i]: node i transitively depends on a requested input
    dep = bytearray(limit)
    for nd in in_nodes:
        if nd.idx < limit:
            dep[nd.idx] = 1
    for i in range(limit):
        if dep[i]:
            continue
        for p in nodes[i].inputs:
            if p is not None and dep[p.idx]:
                dep[i] = 1
                break
    # live[i]: output transitively depends on node i
    live = bytearray(limit)
    live[onode.idx] = 1
    for i in range(onode.idx, -1, -1):
        if not live[i]:
            continue
        for p in nodes[i].inputs:
            if p is not None:
                live[p.idx] = 1

    adj = {}
    adj[onode.idx] = Tensor(np.ones(output.shape, dtype=output.dtype))

    def run():
        for i in range(onode.idx, -1, -1):
            if not (live[i] and dep[i]) or i not in adj:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            g = adj[i]
            needed = tuple(
                p is not None and live[p.idx] and dep[p.idx] for p in node.inputs
            )
            pieces = node.vjp(g, needed)
            for p, piece in zip(node.inputs, pieces):
                if p is None or piece is None:
                    continue
                j = p.idx
                adj[j] = piece if j not in adj else add(adj[j], piece)

    if create_graph:
        run()
    else:
        with record_suspended():
            run()

    out = []
    for t, nd in zip(inputs, in_nodes):
        g = adj.get(nd.idx)
        out.append(g if g is not None else zeros_like(t))
    return out


# -- elementwise primitives -----------------------------------------------


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (recordable)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, d in enumerate(shape) if d == 1 and g.shape[i + extra] != 1
    )
    r = tsum(g, axis=axes, keepdims=False) if axes else g
    return reshape(r, shape) if r.shape != shape else r


def _binary(op, a, b, fwd, vjp_maker):
    a = astensor(a, like=b if isinstance(b, Tensor) else None)
    b = astensor(b, like=a)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(op, a.shape, b.shape) from e
    out = _result(op, data)
    return _record(op, out, (a, b), vjp_maker(a, b, out))


def add(a, b):
    def make(a, b, out):
        def vjp(g, needed):
            return (
                _sum_to(g, a.shape) if needed[0] else None,
                _sum_to(g, b.shape) if needed[1] else None,
            )

        return vjp

    return _binary("add", a, b, np.add, make)


def sub(a, b):
    def make(a, b, out):
        def vjp(g, needed):
            return (
                _sum_to(g, a.shape) if needed[0] else None,
                _sum_to(neg(g), b.shape) if needed[1] else None,
            )

        return vjp

    return _binary("sub", a, b, np.subtract, make)


def mul(a, b):
    def make(a, b, out):
        def vjp(g, needed):
            return (
                _sum_to(mul(g, b), a.shape) if needed[0] else None,
                _sum_to(mul(g, a), b.shape) if needed[1] else None,
            )

        return vjp

    return _binary("mul", a, b, np.multiply, make)


def div(a, b):
    def make(a, b, out):
        def vjp(g, needed):
            ga = _sum_to(div(g, b), a.shape) if needed[0] else None
            gb = None
            if needed[1]:
                gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
            return ga, gb

        return vjp

    return _binary("div", a, b, np.divide, make)


def neg(a):
    a = astensor(a)
    out = _result("neg", -a.data)

    def vjp(g, needed):
        return (neg(g) if needed[0] else None,)

    return _record("neg", out, (a,), vjp)


def relu(a):
    a = astensor(a)
    out = _result("relu", np.maximum(a.data, 0))
    mask = Tensor((a.data > 0).astype(a.dtype))

    def vjp(g, needed):
        return (mul(g, mask) if needed[0] else None,)

    return _record("relu", out, (a,), vjp)


def tanh(a):
    a = astensor(a)
    out = _result("tanh", np.tanh(a.data))

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        return (mul(g, sub(1.0, mul(out, out))),)

    return _record("tanh", out, (a,), vjp)


def exp(a):
    a = astensor(a)
    out = _result("exp", np.exp(a.data))

    def vjp(g, needed):
        return (mul(g, out) if needed[0] else None,)

    return _record("exp", out, (a,), vjp)


def log(a):
    a = astensor(a)
    out = _result("log", np.log(a.data))

    def vjp(g, needed):
        return (div(g, a) if needed[0] else None,)

    return _record("log", out, (a,), vjp)


def clamp(a, lo, hi):
    """Elementwise clip; subgradient is zero outside (lo, hi) and at the bounds."""
    a = astensor(a)
    out = _result("clamp", np.clip(a.data, lo, hi))
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(a.dtype))

    def vjp(g, needed):
        return (mul(g, mask) if needed[0] else None,)

    return _record("clamp", out, (a,), vjp)


def floor_mod(a, m):
    """Floor modulo with constant modulus; gradient 1 w.r.t. the dividend.

    The function is piecewise ``x + const`` so the pass-through gradient is
    exact away from the wrap points.
    """
    a = astensor(a)
    out = _result("floor_mod", np.mod(a.data, m))

    def vjp(g, needed):
        return (g if needed[0] else None,)

    return _record("floor_mod", out, (a,), vjp)


# -- shape primitives ------------------------------------------------------


def reshape(a, shape):
    a = astensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", a.shape, shape) from e
    out = _result("reshape", data)
    old = a.shape

    def vjp(g, needed):
        return (reshape(g, old) if needed[0] else None,)

    return _record("reshape", out, (a,), vjp)


def transpose(a, axes=None):
    a = astensor(a)
    out = _result("transpose", np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g, needed):
        return (transpose(g, inv) if needed[0] else None,)

    return _record("transpose", out, (a,), vjp)


def broadcast_to(a, shape):
    a = astensor(a)
    out = _result("broadcast_to", np.broadcast_to(a.data, shape).copy())
    old = a.shape

    def vjp(g, needed):
        return (_sum_to(g, old) if needed[0] else None,)

    return _record("broadcast_to", out, (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out = _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims))
    in_shape = a.shape

    if axis is None:
        kd_shape = (1,) * len(in_shape)
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(i % len(in_shape) for i in ax)
        kd_shape = tuple(1 if i in ax else d for i, d in enumerate(in_shape))

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        r = g if keepdims else reshape(g, kd_shape)
        return (broadcast_to(r, in_shape),)

    return _record("sum", out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.size if axis is None else np.prod(
        [a.shape[i % a.ndim] for i in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def getitem(a, key):
    a = astensor(a)
    out = _result("slice", a.data[key].copy())
    in_shape = a.shape

    def vjp(g, needed):
        return (_slice_scatter(g, key, in_shape) if needed[0] else None,)

    return _record("slice", out, (a,), vjp)


def _slice_scatter(g, key, shape):
    g = astensor(g)
    data = np.zeros(shape, dtype=g.dtype)
    data[key] = g.data
    out = _result("slice_scatter", data)

    def vjp(u, needed):
        return (getitem(u, key) if needed[0] else None,)

    return _record("slice_scatter", out, (g,), vjp)


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *[t.shape for t in tensors])
    out = _result("stack", np.stack([t.data for t in tensors], axis=axis))
    ax = axis % out.ndim

    def vjp(g, needed):
        pieces = []
        for i, need in enumerate(needed):
            if not need:
                pieces.append(None)
                continue
            key = tuple(slice(None) if d != ax else i for d in range(out.ndim))
            pieces.append(getitem(g, key))
        return tuple(pieces)

    return _record("stack", out, tuple(tensors), vjp)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = _result("matmul", a.data @ b.data)

    def vjp(g, needed):
        ga = matmul(g, transpose(b)) if needed[0] else None
        gb = matmul(transpose(a), g) if needed[1] else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


# -- gather/scatter pair ---------------------------------------------------


def take_flat(a, idx, out_shape=None):
    """Gather ``a.flat[idx]``; adjoint of ``put_flat`` under the same idx."""
    a = astensor(a)
    idx = np.asarray(idx)
    data = a.data.reshape(-1)[idx.reshape(-1)]
    data = data.reshape(idx.shape if out_shape is None else out_shape)
    out = _result("take_flat", data.copy())
    in_shape = a.shape

    def vjp(g, needed):
        return (put_flat(g, idx, in_shape) if needed[0] else None,)

    return _record("take_flat", out, (a,), vjp)


def put_flat(v, idx, shape):
    """Scatter-add ``v`` into a zero tensor of ``shape`` at flat ``idx``."""
    v = astensor(v)
    idx = np.asarray(idx)
    data = np.zeros(shape, dtype=v.dtype)
    np.add.at(data.reshape(-1), idx.reshape(-1), v.data.reshape(-1))
    out = _result("put_flat", data)
    v_shape = v.shape

    def vjp(u, needed):
        return (take_flat(u, idx, v_shape) if needed[0] else None,)

    return _record("put_flat", out, (v,), vjp)


# -- convolution family ----------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """[B,C,H,W] -> [B,Ho,Wo,C*kh*kw] patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B,C,Ho,Wo,kh,kw] -> [B,Ho,Wo,C,kh,kw]
    win = win.transpose(0, 2, 3, 1, 4, 5)
    b, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b, ho, wo, -1)


def _col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of ``_im2col``: scatter patches back onto the image."""
    b, c, h, w = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def _conv_out_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", (h, w), (kh, kw))
    return ho, wo


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of [B,C,H,W] with [F,C,kh,kw]; zero padding."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    f, _, kh, kw = w.shape
    b = x.shape[0]
    ho, wo = _conv_out_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    cols = _im2col(x.data, kh, kw, stride, pad)
    data = cols.reshape(-1, cols.shape[-1]) @ w.data.reshape(f, -1).T
    out = _result("conv2d", data.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))

    def vjp(g, needed):
        gx = conv2d_input_grad(g, w, x.shape, stride, pad) if needed[0] else None
        gw = conv2d_weight_grad(g, x, w.shape, stride, pad) if needed[1] else None
        return gx, gw

    return _record("conv2d", out, (x, w), vjp)


def conv2d_input_grad(g, w, x_shape, stride, pad):
    """Adjoint of conv2d in its input: [B,F,Ho,Wo] x [F,C,kh,kw] -> [B,C,H,W]."""
    g, w = astensor(g), astensor(w)
    f, _, kh, kw = w.shape
    b, fo, ho, wo = g.shape
    # cols gradient = g (as [B,Ho,Wo,F]) @ wmat, then scatter
    gm = g.data.transpose(0, 2, 3, 1).reshape(-1, f)
    cols = gm @ w.data.reshape(f, -1)
    data = _col2im(cols.reshape(b, ho, wo, -1), x_shape, kh, kw, stride, pad)
    out = _result("conv2d_input_grad", data)

    def vjp(u, needed):
        gg = conv2d(u, w, stride, pad) if needed[0] else None
        gw = conv2d_weight_grad(g, u, w.shape, stride, pad) if needed[1] else None
        return gg, gw

    return _record("conv2d_input_grad", out, (g, w), vjp)


def conv2d_weight_grad(g, x, w_shape, stride, pad):
    """Adjoint of conv2d in its weights: [B,F,Ho,Wo] x [B,C,H,W] -> [F,C,kh,kw]."""
    g, x = astensor(g), astensor(x)
    f, c, kh, kw = w_shape
    cols = _im2col(x.data, kh, kw, stride, pad)
    gm = g.data.transpose(0, 2, 3, 1).reshape(-1, f)
    data = (cols.reshape(-1, cols.shape[-1]).T @ gm).T
    out = _result("conv2d_weight_grad", data.reshape(w_shape))

    def vjp(u, needed):
        gg = conv2d(x, u, stride, pad) if needed[0] else None
        gx = conv2d_input_grad(g, u, x.shape, stride, pad) if needed[1] else None
        return gg, gx

    return _record("conv2d_weight_grad", out, (g, x), vjp)


def max_pool2d(x, k=2, stride=None):
    """Max pooling; gradients route to the forward argmax (first max wins)."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape)
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(b, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    ki, kj = np.unravel_index(arg, (k, k))
    bi, ci, oi, oj = np.ix_(np.arange(b), np.arange(c), np.arange(ho), np.arange(wo))
    rows = oi * stride + ki
    cols = oj * stride + kj
    idx = ((bi * c + ci) * h + rows) * w + cols
    return take_flat(x, idx, out_shape=(b, c, ho, wo))


def global_avg_pool(x):
    """[B,C,H,W] -> [B,C] spatial mean."""
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    return tmean(x, axis=(2, 3))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of [B,C] logits against int labels [B].

    Composed from primitives (shift by a constant max for stability), so
    second derivatives are exact.
    """
    logits = astensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    b, c = logits.shape
    m = Tensor(logits.data.max(axis=1, keepdims=True).copy(), dtype=logits.dtype)
    z = sub(logits, m)
    lse = log(tsum(exp(z), axis=1))
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1
    picked = tsum(mul(z, Tensor(onehot)), axis=1)
    return tmean(sub(lse, picked))


def softmax(logits):
    logits = astensor(logits)
    m = Tensor(logits.data.max(axis=1, keepdims=True).copy(), dtype=logits.dtype)
    e = exp(sub(logits, m))
    return div(e, tsum(e, axis=1, keepdims=True))
