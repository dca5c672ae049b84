"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive's backward rule is itself built from recorded primitives,
so gradients are ordinary graph tensors and a second backward pass through
a first one (as the adversarial gradient regularizer needs) works for the
whole op set.  Conv2d and its data layout follow (batch, channels, H, W).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Immutable-by-convention value node in the computation graph.

    ``data`` is always a contiguous float64 ndarray.  ``parents`` / ``vjp``
    are set only for op results recorded while gradients are enabled.
    Leaf parameters carry ``requires_grad=True``; everything else inherits
    the flag from its inputs.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "op")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.data.shape} is not scalar")
        return float(self.data.reshape(()))

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} contains NaN or Inf")
        return self

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def tensor(data) -> Tensor:
    """Constant tensor (no gradient tracking of its own)."""
    return data if isinstance(data, Tensor) else Tensor(data)


def param(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, vjp=vjp, requires_grad=True, op=op)
    return Tensor(data, op=op)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (trailing-dim alignment)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return reshape(g, tuple(shape))


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = (_unbroadcast(neg(mul(g, div(a, mul(b, b)))), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, "div")


def neg(a):
    a = _lift(a)

    def vjp(g):
        return (neg(g),)

    return _make(-a.data, (a,), vjp, "neg")


def power(a, p):
    a = _lift(a)
    p = float(p)

    def vjp(g):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(a.data ** p, (a,), vjp, "pow")


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = _make(out_data, (a,), vjp, "exp")
    return out


def log(a):
    a = _lift(a)

    def vjp(g):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), vjp, "log")


def sqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (div(g, mul(2.0, out)),)

    out = _make(out_data, (a,), vjp, "sqrt")
    return out


def sin(a):
    a = _lift(a)

    def vjp(g):
        return (mul(g, cos(a)),)

    return _make(np.sin(a.data), (a,), vjp, "sin")


def cos(a):
    a = _lift(a)

    def vjp(g):
        return (neg(mul(g, sin(a))),)

    return _make(np.cos(a.data), (a,), vjp, "cos")


def _sigmoid_data(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _lift(a)
    out_data = _sigmoid_data(a.data)

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(out_data, (a,), vjp, "sigmoid")
    return out


def softplus(a):
    """log(1 + exp(x)), computed stably."""
    a = _lift(a)

    def vjp(g):
        return (mul(g, sigmoid(a)),)

    return _make(np.logaddexp(0.0, a.data), (a,), vjp, "softplus")


def relu(a):
    a = _lift(a)

    def vjp(g):
        return (mul(g, Tensor((a.data > 0).astype(np.float64))),)

    return _make(np.maximum(a.data, 0.0), (a,), vjp, "relu")


def leaky_relu(a, slope=0.2):
    a = _lift(a)

    def vjp(g):
        return (mul(g, Tensor(np.where(a.data > 0, 1.0, slope))),)

    return _make(np.maximum(a.data, slope * a.data), (a,), vjp, "leaky_relu")


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _lift(a)
    old = a.shape

    def vjp(g):
        return (reshape(g, old),)

    return _make(np.ascontiguousarray(a.data).reshape(shape), (a,), vjp, "reshape")


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), vjp, "transpose")


def broadcast_to(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape

    def vjp(g):
        return (_unbroadcast(g, src),)

    return _make(np.ascontiguousarray(out_data), (a,), vjp, "broadcast")


def getitem(a, idx):
    a = _lift(a)
    out_data = a.data[idx]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data, dtype=np.float64)
    src_shape = a.shape

    def vjp(g):
        return (unslice(g, idx, src_shape),)

    return _make(np.ascontiguousarray(out_data), (a,), vjp, "slice")


def unslice(g, idx, shape):
    """Scatter ``g`` into a zero tensor of ``shape`` at ``idx`` (adjoint of getitem)."""
    g = _lift(g)

    def vjp(go):
        return (getitem(go, idx),)

    buf = np.zeros(shape, dtype=np.float64)
    buf[idx] = g.data
    return _make(buf, (g,), vjp, "unslice")


def take_rows(a, idx):
    """Gather rows of a 2-d tensor by a unique integer index array."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        return (scatter_rows(g, idx, a.shape[0]),)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), vjp, "take_rows")


def scatter_rows(a, idx, n_rows):
    """Place rows of ``a`` into a zero (n_rows, ...) tensor at unique indices."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    buf = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    buf[idx] = a.data

    def vjp(g):
        return (take_rows(g, idx),)

    return _make(buf, (a,), vjp, "scatter_rows")


def concatenate(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        grads = []
        for k in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


def flip(a, axis):
    a = _lift(a)

    def vjp(g):
        return (flip(g, axis),)

    return _make(np.ascontiguousarray(np.flip(a.data, axis)), (a,), vjp, "flip")


def pad2d(a, pads):
    """Zero-pad the two trailing axes; pads = (top, bottom, left, right)."""
    a = _lift(a)
    t, b, l, r = pads
    width = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]
    h, w = a.shape[-2], a.shape[-1]

    def vjp(g):
        sl = (Ellipsis, slice(t, t + h), slice(l, l + w))
        return (getitem(g, sl),)

    return _make(np.pad(a.data, width), (a,), vjp, "pad2d")


def dilate2d(a, stride):
    """Insert stride-1 zeros between elements of the two trailing axes."""
    a = _lift(a)
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if sh == 1 and sw == 1:
        return a
    h, w = a.shape[-2], a.shape[-1]
    out_shape = a.shape[:-2] + ((h - 1) * sh + 1, (w - 1) * sw + 1)
    buf = np.zeros(out_shape, dtype=np.float64)
    buf[..., ::sh, ::sw] = a.data

    def vjp(g):
        return (getitem(g, (Ellipsis, slice(None, None, sh), slice(None, None, sw))),)

    return _make(buf, (a,), vjp, "dilate2d")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _axis_tuple(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def cumsum(a, axis=-1):
    a = _lift(a)

    def vjp(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp, "cumsum")


def l2_norm(a):
    """Euclidean norm over all elements."""
    return sqrt(tsum(mul(a, a)))


# ---------------------------------------------------------------------------
# matmul and conv2d
# ---------------------------------------------------------------------------

def matmul(a, b):
    """2-d or batched 3-d matrix product; a 2-d rhs is shared across batches."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} @ {b.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            bt = transpose(b, (0, 2, 1)) if b.ndim == 3 else transpose(b)
            ga = matmul(g, bt)
            if a.ndim == 2 and g.ndim == 3:
                ga = tsum(ga, axis=0)
        if b.requires_grad:
            at = transpose(a, (0, 2, 1)) if a.ndim == 3 else transpose(a)
            gb = matmul(at, g)
            if b.ndim == 2 and g.ndim == 3:
                gb = tsum(gb, axis=0)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def dense_lrelu(x, w, b, slope=0.2):
    """Fused leaky_relu(x @ w + b); one output allocation per layer.

    ``w`` may carry a leading batch axis (B, in, out) against a shared
    2-d ``x``, following matmul's broadcasting.  The sign of the
    pre-activation survives the leaky-relu, so the backward mask is
    recovered from the output itself.
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"dense_lrelu: inner dims differ for {x.shape} @ {w.shape}")
    out_data = np.matmul(x.data, w.data)
    out_data += b.data
    np.maximum(out_data, slope * out_data, out=out_data)

    def vjp(g):
        coef = Tensor(np.where(out.data > 0, 1.0, slope))
        gz = mul(g, coef)
        gx = gw = None
        if x.requires_grad:
            wt = transpose(w, (0, 2, 1)) if w.ndim == 3 else transpose(w)
            gx = matmul(gz, wt)
            if x.ndim == 2 and gz.ndim == 3:
                gx = tsum(gx, axis=0)
        if w.requires_grad:
            xt = transpose(x, (0, 2, 1)) if x.ndim == 3 else transpose(x)
            gw = matmul(xt, gz)
            if w.ndim == 2 and gz.ndim == 3:
                gw = tsum(gw, axis=0)
        gb = tsum(gz, axis=tuple(range(gz.ndim - 1)))
        return gx, gw, gb

    out = _make(out_data, (x, w, b), vjp, "dense_lrelu")
    return out


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of (B,C,H,W) input with (O,C,kh,kw) kernels."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch for input {x.shape} and kernel {w.shape}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    _, _, kh, kw = w.shape
    hp, wp = x.shape[2] + 2 * ph, x.shape[3] + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit padded input {x.shape} pad={pad}")

    xp = np.pad(x.data, [(0, 0), (0, 0), (ph, ph), (pw, pw)]) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    h_out, w_out = out.shape[2], out.shape[3]

    def vjp(g):
        gx = gw = None
        gd = dilate2d(g, (sh, sw))
        if x.requires_grad:
            # input gradient: full correlation with the rotated, channel-swapped kernel
            wt = transpose(flip(w, (2, 3)), (1, 0, 2, 3))
            gx = conv2d(pad2d(gd, (kh - 1, kh - 1, kw - 1, kw - 1)), wt)
            rem_h = hp - ((h_out - 1) * sh + kh)
            rem_w = wp - ((w_out - 1) * sw + kw)
            if rem_h or rem_w:
                gx = pad2d(gx, (0, rem_h, 0, rem_w))
            gx = getitem(gx, (Ellipsis, slice(ph, ph + x.shape[2]), slice(pw, pw + x.shape[3])))
        if w.requires_grad:
            # kernel gradient: correlate input with the dilated output gradient over the batch
            xt = transpose(x, (1, 0, 2, 3))
            if ph or pw:
                xt = pad2d(xt, (ph, ph, pw, pw))
            gw = conv2d(xt, transpose(gd, (1, 0, 2, 3)))
            gw = getitem(gw, (Ellipsis, slice(0, kh), slice(0, kw)))
            gw = transpose(gw, (1, 0, 2, 3))
        return gx, gw

    return _make(out, (x, w), vjp, "conv2d")


# ---------------------------------------------------------------------------
# graph walking and backward
# ---------------------------------------------------------------------------

def toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in a valid evaluation order."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass
class Graph:
    """Read-only view of the recorded graph under one output."""

    nodes: list
    leaves: list

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        nodes = toposort(out)
        leaves = [n for n in nodes if n.requires_grad and not n.parents]
        return cls(nodes=nodes, leaves=leaves)


def grad_map(output: Tensor, wrt, create_graph=False, free_graph=False) -> dict:
    """Gradients of a scalar ``output`` for each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are themselves recorded,
    so they can be differentiated again.  ``free_graph`` drops each node's
    backward closure as soon as it has been used, releasing forward
    activations early; the graph cannot be backpropagated a second time.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    want = {id(t) for t in wrt}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        cot = {id(output): Tensor(np.ones(output.shape))}
        for node in reversed(toposort(output)):
            g = cot.pop(id(node), None)
            if g is None or node.vjp is None:
                if g is not None and id(node) in want:
                    cot[id(node)] = g
                continue
            if id(node) in want:
                cot[id(node)] = g  # keep for the caller even though it has parents
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = cot.get(id(parent))
                cot[id(parent)] = pg if acc is None else add(acc, pg)
            if free_graph and not create_graph:
                node.vjp = None
                node.parents = ()
    out = {}
    for t in wrt:
        g = cot.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        out[t] = g
    return out


def backward(output: Tensor, leaves=None, create_graph=False, free_graph=False) -> dict:
    """Gradient of a scalar output for every requested leaf parameter.

    When ``leaves`` is omitted, all reachable ``requires_grad`` leaves of
    the graph are used.
    """
    if leaves is None:
        leaves = Graph.from_output(output).leaves
    return grad_map(output, leaves, create_graph=create_graph, free_graph=free_graph)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(fn, point: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    point = np.asarray(point, dtype=np.float64)
    g = np.zeros_like(point)
    flat = point.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(point.copy())).item()
        flat[i] = orig - eps
        fm = fn(Tensor(point.copy())).item()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def finite_diff_check(fn, point, eps=1e-5, details=False):
    """Max relative error between autodiff and central differences.

    Coordinates where the two one-sided differences disagree badly are
    treated as nondifferentiable kinks and excluded from the maximum.
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    point = np.asarray(point, dtype=np.float64)
    leaf = param(point.copy())
    out = fn(leaf)
    analytic = backward(out, [leaf])[leaf].data

    numeric = np.zeros_like(point)
    kink = np.zeros(point.shape, dtype=bool)
    flat, nf, kf = point.reshape(-1), numeric.reshape(-1), kink.reshape(-1)
    f0 = fn(Tensor(point.copy())).item()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(point.copy())).item()
        flat[i] = orig - eps
        fm = fn(Tensor(point.copy())).item()
        flat[i] = orig
        nf[i] = (fp - fm) / (2.0 * eps)
        fwd = (fp - f0) / eps
        bwd = (f0 - fm) / eps
        kf[i] = abs(fwd - bwd) > 0.05 * max(abs(fwd), abs(bwd), 1.0)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    rel_ok = np.where(kink, 0.0, rel)
    err = float(rel_ok.max()) if rel_ok.size else 0.0
    if details:
        return err, kink
    return err


# ---------------------------------------------------------------------------
# primitive dispatch surface
# ---------------------------------------------------------------------------

_OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "dense_lrelu": dense_lrelu,
    "conv2d": conv2d,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
    "sin": sin,
    "cos": cos,
    "sum": tsum,
    "mean": tmean,
    "cumsum": cumsum,
    "l2_norm": l2_norm,
    "concat": concatenate,
    "slice": getitem,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "pad2d": pad2d,
    "flip": flip,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by id; errors name the op and offending shapes."""
    if kind not in _OP_TABLE:
        raise KeyError(f"unknown primitive op '{kind}'")
    return _OP_TABLE[kind](*inputs, **kwargs)
