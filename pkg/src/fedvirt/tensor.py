"""Dense float64 tensors with a recorded forward pass and reverse-mode gradients.

Each primitive stores a vector-Jacobian product written in terms of other
primitives, so ``backward(..., create_graph=True)`` records the backward pass
itself and gradients can be differentiated again (needed when matching
parameter gradients against image pixels).

Broadcasting is limited to scalar-tensor arithmetic; anything else goes
through explicit ``reshape``/``expand``.
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractViolation, NumericOverflowError

_ids = itertools.count()
_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def grad_mode(enabled):
    prev = is_grad_enabled()
    _local.grad_enabled = enabled
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    return grad_mode(False)


@dataclass
class Node:
    """One primitive application in the computation record."""
    op: str
    inputs: tuple
    vjp: object
    meta: dict
    id: int


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "cols", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None
        self.cols = None  # cached im2col of ``data`` (see conv2d)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; python scalars take the cheap scalar paths
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(scale(self, -1.0), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(data):
    """A fresh leaf that gradients can be taken with respect to."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape))


def ones(shape):
    return Tensor(np.ones(shape))


def _record(op, data, inputs, vjp, meta=None):
    data = np.asarray(data, dtype=np.float64)
    if data.size and not np.isfinite(data).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericOverflowError(f"{op}: non-finite output from inputs of shape {shapes}")
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp, meta or {}, next(_ids))
    return out


def _shape_error(op, *shapes):
    return ContractViolation(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def _pair(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b
    if a.shape == ():
        return expand(a, b.shape), b
    if b.shape == ():
        return a, expand(b, a.shape)
    raise _shape_error(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g, out: (g, g))


def sub(a, b):
    a, b = _pair("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g, out: (g, scale(g, -1.0)))


def mul(a, b):
    a, b = _pair("mul", a, b)

    def vjp(g, out):
        return (mul(g, b) if a.requires_grad else None,
                mul(g, a) if b.requires_grad else None)
    return _record("mul", a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _pair("div", a, b)
    if (b.data == 0).any():
        raise NumericOverflowError("div: division by zero")

    def vjp(g, out):
        ga = div(g, b)
        return (ga if a.requires_grad else None,
                scale(mul(ga, out), -1.0) if b.requires_grad else None)
    return _record("div", a.data / b.data, (a, b), vjp)


def scale(a, c):
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g, out: (scale(g, c),), {"c": c})


def add_scalar(a, c):
    c = float(c)
    return _record("add_scalar", a.data + c, (a,), lambda g, out: (g,), {"c": c})


def exp(a):
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _record("exp", data, (a,), lambda g, out: (mul(g, out),))


def log(a):
    if (a.data <= 0).any():
        raise NumericOverflowError("log: non-positive input")
    return _record("log", np.log(a.data), (a,), lambda g, out: (div(g, a),))


def sqrt(a):
    if (a.data < 0).any():
        raise NumericOverflowError("sqrt: negative input")
    return _record("sqrt", np.sqrt(a.data), (a,), lambda g, out: (scale(div(g, out), 0.5),))


def relu(a):
    # relu(x) > 0 exactly where x > 0, so the mask is read off the output
    return _record("relu", np.maximum(a.data, 0.0), (a,),
                   lambda g, out: (mul(g, Tensor((out.data > 0).astype(np.float64))),))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(a.size // known if s == -1 and known else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise _shape_error("reshape", a.shape, shape)
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, out: (reshape(g, src),),
                   {"shape": shape})


def flatten(a):
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:]))))


def transpose(a):
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape)
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g, out: (transpose(g),))


def _check_expand(src, shape):
    if src == ():
        return
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise _shape_error("expand", src, shape)


def expand(a, shape):
    """Broadcast a scalar, or size-1 axes of a same-rank tensor, to ``shape``."""
    shape = tuple(shape)
    _check_expand(a.shape, shape)
    src = a.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _record("expand", data, (a,), lambda g, out: (reduce_to(g, src),), {"shape": shape})


def reduce_to(a, shape):
    """Sum ``a`` down to ``shape`` (the adjoint of ``expand``)."""
    shape = tuple(shape)
    _check_expand(shape, a.shape)
    if shape == ():
        data = np.sum(a.data)
    else:
        axes = tuple(i for i, (s, t) in enumerate(zip(shape, a.shape)) if s == 1 and t != 1)
        data = np.sum(a.data, axis=axes, keepdims=True) if axes else a.data.copy()
    src = a.shape
    return _record("reduce_to", data, (a,), lambda g, out: (expand(g, src),), {"shape": shape})


def sum_all(a):
    return reduce_to(a, ())


def mean_all(a):
    if a.size == 0:
        raise ContractViolation("mean: empty tensor")
    return scale(reduce_to(a, ()), 1.0 / a.size)


def row_sum(a):
    """[R, M] -> [R, 1]."""
    return reduce_to(a, (a.shape[0], 1))


def gather(a, index):
    """Rows ``a[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ContractViolation(f"gather: index out of range for axis of length {n}")
    return _record("gather", a.data[index], (a,), lambda g, out: (scatter_add(g, index, n),),
                   {"index": index})


def scatter_add(a, index, n):
    """Adjoint of ``gather``: rows of ``a`` summed into ``n`` slots."""
    index = np.asarray(index, dtype=np.int64)
    data = np.zeros((n,) + a.shape[1:])
    np.add.at(data, index, a.data)
    return _record("scatter_add", data, (a,), lambda g, out: (gather(g, index),),
                   {"index": index, "n": n})


def concat(tensors):
    """Concatenate along axis 0."""
    tensors = [as_tensor(t) for t in tensors]
    tail = {t.shape[1:] for t in tensors}
    if len(tail) != 1:
        raise _shape_error("concat", *(t.shape for t in tensors))
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, out):
        return tuple(gather(g, np.arange(bounds[i], bounds[i + 1])) if t.requires_grad else None
                     for i, t in enumerate(tensors))
    return _record("concat", np.concatenate([t.data for t in tensors], axis=0), tensors, vjp,
                   {"sizes": sizes})


# ---------------------------------------------------------------------------
# linear algebra, convolution, pooling
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def vjp(g, out):
        return (matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None)
    return _record("matmul", a.data @ b.data, (a, b), vjp)


def _conv_out(x_shape, w_shape, stride, pad):
    n, c, h, w = x_shape
    f, cw, kh, kw = w_shape
    return (n, f, _kernels.out_size(h, kh, stride, pad), _kernels.out_size(w, kw, stride, pad))


def _columns(x, kh, kw, stride, pad):
    """im2col of tensor ``x``, memoised on the tensor for reuse by the weight gradient."""
    key = (kh, kw, stride, pad)
    if x.cols is not None and x.cols[0] == key:
        return x.cols[1]
    cols = _kernels.im2col(x.data, kh, kw, stride, pad)
    if is_grad_enabled():
        x.cols = (key, cols)
    return cols


def _conv_forward(x, w, stride, pad):
    f, c, kh, kw = w.shape
    n, _, ho, wo = _conv_out(x.shape, w.shape, stride, pad)
    cols = _columns(x, kh, kw, stride, pad)
    return np.matmul(w.data.reshape(f, -1), cols).reshape(n, f, ho, wo)


def _conv_dx(g, w, x_shape, stride, pad):
    f, c, kh, kw = w.shape
    cols = np.matmul(w.reshape(f, -1).T, g.reshape(g.shape[0], f, -1))
    return _kernels.col2im(cols, x_shape, kh, kw, stride, pad)


def _conv_dw(x, g, w_shape, stride, pad):
    f, c, kh, kw = w_shape
    cols = _columns(x, kh, kw, stride, pad)
    gm = g.data.reshape(g.shape[0], f, -1)
    per_sample = np.matmul(gm, cols.transpose(0, 2, 1))
    return per_sample.sum(axis=0).reshape(w_shape)


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw], zero padding, no bias."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    if min(_conv_out(x.shape, w.shape, stride, pad)[2:]) < 1:
        raise _shape_error("conv2d", x.shape, w.shape)

    def vjp(g, out):
        return (conv2d_input_grad(g, w, x.shape, stride, pad) if x.requires_grad else None,
                conv2d_weight_grad(x, g, w.shape, stride, pad) if w.requires_grad else None)
    return _record("conv2d", _conv_forward(x, w, stride, pad), (x, w), vjp,
                   {"stride": stride, "pad": pad})


def conv2d_input_grad(g, w, x_shape, stride, pad):
    """d<conv2d(x, w), g>/dx; linear in both ``g`` and ``w``."""
    def vjp(u, out):
        return (conv2d(u, w, stride, pad) if g.requires_grad else None,
                conv2d_weight_grad(u, g, w.shape, stride, pad) if w.requires_grad else None)
    return _record("conv2d_input_grad", _conv_dx(g.data, w.data, x_shape, stride, pad), (g, w), vjp,
                   {"stride": stride, "pad": pad})


def conv2d_weight_grad(x, g, w_shape, stride, pad):
    """d<conv2d(x, w), g>/dw; linear in both ``x`` and ``g``."""
    def vjp(u, out):
        return (conv2d_input_grad(g, u, x.shape, stride, pad) if x.requires_grad else None,
                conv2d(x, u, stride, pad) if g.requires_grad else None)
    return _record("conv2d_weight_grad", _conv_dw(x, g, w_shape, stride, pad), (x, g), vjp,
                   {"stride": stride, "pad": pad})


def avg_pool2d(x, k=2):
    """Non-overlapping k x k average pooling (stride k, floor mode)."""
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise _shape_error("avg_pool2d", x.shape)
    src = x.shape
    return _record("avg_pool2d", _kernels.avgpool(x.data, k), (x,),
                   lambda g, out: (avg_unpool2d(g, k, src),), {"k": k})


def avg_unpool2d(g, k, x_shape):
    """Adjoint of ``avg_pool2d``."""
    return _record("avg_unpool2d", _kernels.avgunpool(g.data, k, tuple(x_shape)), (g,),
                   lambda u, out: (avg_pool2d(u, k),), {"k": k})


def resample2d(x, rows, cols):
    """Per-image linear map ``rows @ x[n, c] @ cols.T`` with constant matrices."""
    rows, cols = np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)
    if x.ndim != 4 or rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise _shape_error("resample2d", x.shape, rows.shape, cols.shape)
    src = x.shape
    n, c = src[:2]
    t = (x.data.reshape(n * c * src[2], src[3]) @ cols.T).reshape(n * c, src[2], cols.shape[0])
    data = np.matmul(rows, t).reshape(n, c, rows.shape[0], cols.shape[0])
    return _record("resample2d", data, (x,), lambda g, out: (resample2d(g, rows.T, cols.T),))


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------

def _row_mean(t):
    return scale(row_sum(t), 1.0 / t.shape[1])


def _spread(col, shape):
    return expand(col, shape)


def _channel_view(v):
    return v.reshape(1, -1, 1, 1)


def channel_sum(x):
    """[N,C,H,W] -> [C]."""
    c = x.shape[1]
    return reshape(reduce_to(x, (1, c, 1, 1)), (c,))


def channel_scale(x, s):
    """x * s per channel, s of shape [C]."""
    if x.ndim != 4 or s.shape != (x.shape[1],):
        raise _shape_error("channel_scale", x.shape, s.shape)

    def vjp(g, out):
        return (channel_scale(g, s) if x.requires_grad else None,
                channel_sum(mul(g, x)) if s.requires_grad else None)
    return _record("channel_scale", x.data * _channel_view(s.data), (x, s), vjp)


def channel_affine(x, gamma, beta):
    """x * gamma + beta per channel of [N,C,H,W]."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("channel_affine", x.shape, gamma.shape, beta.shape)

    def vjp(g, out):
        if not is_grad_enabled():
            gd = g.data
            return (Tensor(gd * _channel_view(gamma.data)) if x.requires_grad else None,
                    Tensor((gd * x.data).sum(axis=(0, 2, 3))) if gamma.requires_grad else None,
                    Tensor(gd.sum(axis=(0, 2, 3))) if beta.requires_grad else None)
        return (channel_scale(g, gamma) if x.requires_grad else None,
                channel_sum(mul(g, x)) if gamma.requires_grad else None,
                channel_sum(g) if beta.requires_grad else None)
    data = x.data * _channel_view(gamma.data)
    data += _channel_view(beta.data)
    return _record("channel_affine", data, (x, gamma, beta), vjp)


def group_norm(x, groups, eps=1e-5):
    """Per-sample group normalisation of [N,C,H,W], no affine part."""
    n, c = x.shape[:2]
    if x.ndim != 4 or c % groups:
        raise _shape_error("group_norm", x.shape, (groups,))
    src = x.shape
    rows = n * groups
    xr = x.data.reshape(rows, -1)
    centred = xr - xr.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(np.einsum("ij,ij->i", centred, centred)[:, None] / xr.shape[1] + eps)
    data = centred * inv

    def vjp(g, out):
        # the same primitive with or without recording, so first-order gradients
        # do not depend on create_graph
        return (group_norm_grad(x, g, groups, eps, saved=(centred, inv)),)
    return _record("group_norm", data.reshape(src), (x,), vjp, {"groups": groups, "eps": eps})


def _gn_rows(t, rows):
    return t.reshape(rows, -1)


def _gn_adjoint_recorded(x, g, u, groups, eps):
    """Adjoint of ``group_norm_grad`` at (x, g) applied to ``u``, from recorded primitives."""
    src = x.shape
    shape = (x.shape[0] * groups, x.size // (x.shape[0] * groups))

    def rmean(t):
        return _spread(_row_mean(t), shape)

    xt, gt, ut = reshape(x, shape), reshape(g, shape), reshape(u, shape)
    d = sub(xt, rmean(xt))
    s = div(Tensor(1.0), sqrt(add_scalar(rmean(mul(d, d)), eps)))
    s3 = mul(s, mul(s, s))
    gc = sub(gt, rmean(gt))
    uc = sub(ut, rmean(ut))
    c = rmean(mul(gt, d))
    u_gc, u_d = rmean(mul(ut, gc)), rmean(mul(ut, d))
    ux = sub(scale(mul(s3, add(mul(sub(u_gc, scale(mul(mul(s, s), mul(c, u_d)), 3.0)), d),
                               mul(u_d, gc))), -1.0),
             mul(mul(s3, c), uc))
    xh = mul(d, s)
    ug = mul(s, sub(uc, mul(xh, rmean(mul(ut, xh)))))
    return reshape(ux, src), reshape(ug, src)


def group_norm_grad(x, g, groups, eps=1e-5, saved=None):
    """d<group_norm(x), g>/dx as one primitive.

    Per normalised row of length m, with d = x - mean(x), s = 1/sqrt(mean(d^2) + eps),
    a = mean(g) and c = mean(g * d), the value is s*(g - a) - s^3 * c * d.
    Its adjoint has a closed form too, evaluated in numpy, or from recorded
    primitives when it must itself be differentiated (third order).
    ``saved`` is (d, s) as already computed by the forward pass of ``x``.
    """
    if x.shape != g.shape:
        raise _shape_error("group_norm_grad", x.shape, g.shape)
    src = x.shape
    rows = x.shape[0] * groups
    xr, gr = _gn_rows(x.data, rows), _gn_rows(g.data, rows)
    m = xr.shape[1]
    if saved is None:
        d = xr - xr.mean(axis=1, keepdims=True)
        s = 1.0 / np.sqrt(np.einsum("ij,ij->i", d, d)[:, None] / m + eps)
    else:
        d, s = saved
    gc = gr - gr.mean(axis=1, keepdims=True)
    c = np.einsum("ij,ij->i", gr, d)[:, None] / m
    data = s * gc - s ** 3 * c * d

    def vjp(u, out):
        if is_grad_enabled():
            ux, ug = _gn_adjoint_recorded(x, g, u, groups, eps)
            return (ux if x.requires_grad else None, ug if g.requires_grad else None)
        ur = _gn_rows(u.data, rows)
        uc = ur - ur.mean(axis=1, keepdims=True)
        s3 = s ** 3
        ux = None
        if x.requires_grad:
            u_gc = np.einsum("ij,ij->i", ur, gc)[:, None]
            u_d = np.einsum("ij,ij->i", ur, d)[:, None]
            ux = Tensor((-(s3 / m) * (u_gc - 3.0 * s * s * c * u_d) * d
                         - (s3 / m) * u_d * gc - s3 * c * uc).reshape(src))
        ug = None
        if g.requires_grad:
            # the map g -> value is self-adjoint up to the factor s
            xh = d * s
            proj = np.einsum("ij,ij->i", ur, xh)[:, None] / m
            ug = Tensor((s * (uc - xh * proj)).reshape(src))
        return ux, ug
    return _record("group_norm_grad", data.reshape(src), (x, g), vjp, {"groups": groups, "eps": eps})


def l2_normalize(x, eps=1e-12):
    """Rows of [N, D] divided by max(||row||, eps); exact for any row longer than ``eps``."""
    if x.ndim != 2:
        raise _shape_error("l2_normalize", x.shape)
    sq = (x.data * x.data).sum(axis=1, keepdims=True)
    small = np.sqrt(sq) <= eps
    norm = np.where(small, eps, np.sqrt(np.where(small, 1.0, sq)))

    def vjp(g, out):
        big = Tensor((~small).astype(np.float64))
        # floored rows are linear in x; +1 keeps sqrt differentiable there and is masked out
        safe = add(row_sum(mul(x, x)), Tensor(small.astype(np.float64)))
        nt = _spread(add(mul(sqrt(safe), big), Tensor(small * eps)), x.shape)
        y = div(x, nt)
        proj = _spread(mul(row_sum(mul(g, y)), big), x.shape)
        return (div(sub(g, mul(y, proj)), nt),)
    return _record("l2_normalize", x.data / norm, (x,), vjp, {"eps": eps})


def log_softmax(x):
    """Row-wise log-softmax of [N, K]."""
    if x.ndim != 2:
        raise _shape_error("log_softmax", x.shape)
    shifted = x.data - x.data.max(axis=1, keepdims=True) if x.shape[0] else x.data
    data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g, out):
        return (sub(g, mul(exp(out), _spread(row_sum(g), g.shape))),)
    return _record("log_softmax", data, (x,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def record_of(loss, floor=None):
    """Primitive applications reachable from ``loss`` in topological order.

    Nodes with an id below ``floor`` are not visited: they were recorded
    before every tensor of interest and so cannot lie between them and ``loss``.
    """
    seen, nodes, stack = set(), [], [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen or (floor is not None and t.node.id < floor):
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.node.inputs)
    nodes.sort(key=lambda t: t.node.id)
    return nodes


def backward(loss, wrt, create_graph=False):
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that ``loss`` does not depend on get zeros. With ``create_graph``
    the returned gradients are themselves recorded and can be differentiated.
    """
    if loss.shape != ():
        raise ContractViolation(f"backward: loss must be a scalar, got shape {loss.shape}")
    wrt = list(wrt)
    wanted = {id(t) for t in wrt}
    found = {}
    grads = {id(loss): Tensor(1.0)}
    floor = min(t.node.id for t in wrt) if wrt and all(t.node is not None for t in wrt) else None
    with grad_mode(create_graph):
        for t in reversed(record_of(loss, floor)):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in wanted:
                found[id(t)] = g
            for inp, gi in zip(t.node.inputs, t.node.vjp(g, t)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)
    found.update(grads)
    return [found.get(id(t)) if id(t) in found else Tensor(np.zeros(t.shape)) for t in wrt]
