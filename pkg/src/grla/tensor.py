"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed computation graph built dynamically per forward pass. The one
non-standard primitive is ``gradient_reversal``: identity forward, gradient
scaled by ``-lam`` on the way back, which is what makes adversarial domain
training work.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "GraphNode",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "no_grad",
    "apply_primitive",
    "backward",
    "clip_grad_norm",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "log1p_exp_neg_abs",
    "softmax",
    "conv2d",
    "max_pool2d",
    "global_avg_pool",
    "flatten",
    "reshape",
    "dropout",
    "reduce_sum",
    "reduce_mean",
    "clamp_min",
    "gather_rows",
    "gather_cols",
    "gradient_reversal",
    "detach",
]


class ShapeError(ValueError):
    """Input shapes invalid for a primitive."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


class GraphError(RuntimeError):
    """Backward called on a tensor without a usable graph."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Set the build-wide float precision ("float32" or "float64")."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
        _default_dtype = _DTYPES[dtype]
    elif dtype in (np.float32, np.float64):
        _default_dtype = dtype
    else:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default float precision."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphNode:
    """One recorded primitive application.

    ``backward_fn`` maps the upstream gradient to one gradient (or None)
    per input tensor, in input order.
    """

    __slots__ = ("op_kind", "inputs", "saved", "backward_fn")

    def __init__(self, op_kind, inputs, backward_fn, saved=None):
        self.op_kind = op_kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.saved = saved


class Tensor:
    """Dense n-dimensional value, optionally tracked in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

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
        return self.data

    def detach(self):
        return detach(self)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph=False):
        return backward(self, retain_graph=retain_graph)

    # operator sugar; constants are wrapped at this tensor's dtype so that
    # python floats never promote float32 graphs to float64
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result(op_kind, out_data, inputs, backward_fn, saved=None):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out.node = (
        GraphNode(op_kind, tuple(inputs), backward_fn, saved) if out.requires_grad else None
    )
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _check_broadcast("add", a.data, b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result("add", a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_broadcast("sub", a.data, b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result("sub", a.data - b.data, (a, b), bwd)


def mul(a, b):
    _check_broadcast("mul", a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result("mul", a.data * b.data, (a, b), bwd)


def div(a, b):
    _check_broadcast("div", a.data, b.data)
    if np.any(b.data == 0):
        raise NonFiniteError("div: divisor contains zero")

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _result("div", a.data / b.data, (a, b), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# activations and pointwise nonlinearities


def relu(x):
    out_data = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _result("relu", out_data, (x,), bwd)


def sigmoid(x):
    z = x.data
    out_data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out_data = out_data.astype(z.dtype, copy=False)

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _result("sigmoid", out_data, (x,), bwd)


def exp(x):
    out_data = np.exp(x.data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("exp: overflow to non-finite values")

    def bwd(g):
        return (g * out_data,)

    return _result("exp", out_data, (x,), bwd)


def log(x):
    if np.any(x.data <= 0):
        raise NonFiniteError("log: input contains non-positive values")
    out_data = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _result("log", out_data, (x,), bwd)


def log1p_exp_neg_abs(x):
    """log(1 + exp(-|x|)), the overflow-safe tail of logit cross-entropy."""
    neg_abs = -np.abs(x.data)
    e = np.exp(neg_abs)
    out_data = np.log1p(e)

    def bwd(g):
        return (g * (-np.sign(x.data)) * (e / (1.0 + e)),)

    return _result("log1p_exp_neg_abs", out_data, (x,), bwd)


def clamp_min(x, floor):
    """Elementwise max(x, floor); clamped entries receive zero gradient."""
    out_data = np.maximum(x.data, x.data.dtype.type(floor))

    def bwd(g):
        return (g * (x.data > floor),)

    return _result("clamp_min", out_data, (x,), bwd, saved={"floor": floor})


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _result("softmax", out_data, (x,), bwd, saved={"axis": axis})


# ---------------------------------------------------------------------------
# structural ops


def flatten(x):
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: need at least 2 dims, got shape {x.data.shape}")
    n = x.data.shape[0]
    out_data = x.data.reshape(n, -1)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _result("flatten", out_data, (x,), bwd)


def reshape(x, shape):
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}: {e}") from None

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _result("reshape", out_data, (x,), bwd, saved={"shape": shape})


def gather_rows(x, indices):
    """Select rows along axis 0. Unselected rows get an exactly-zero gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.data.shape[0]} rows")
    out_data = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result("gather_rows", out_data, (x,), bwd, saved={"indices": idx})


def gather_cols(x, col_indices):
    """Pick one entry per row: out[i] = x[i, col_indices[i]]."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_cols: need a 2-d input, got shape {x.data.shape}")
    n, c = x.data.shape
    idx = np.asarray(col_indices, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"gather_cols: indices must have shape ({n},), got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ShapeError(f"gather_cols: index out of range for {c} columns")
    rows = np.arange(n)
    out_data = x.data[rows, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _result("gather_cols", out_data, (x,), bwd, saved={"col_indices": idx})


def reduce_sum(x, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _result("reduce_sum", out_data, (x,), bwd, saved={"axis": axis})


def reduce_mean(x, axis=None, keepdims=False):
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / count,)

    return _result("reduce_mean", out_data, (x,), bwd, saved={"axis": axis})


def dropout(x, rate, train, rng=None):
    """Inverted dropout: scales survivors by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required in train mode")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(keep)
    out_data = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _result("dropout", out_data, (x,), bwd, saved={"rate": rate})


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout)


def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1, padding=0):
    """2-d cross-correlation. x: (N,C,H,W), w: (F,C,kH,kW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/kernel, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cw}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} stride {stride} pad {padding} underflows input {h}x{wd}"
        )

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(w.data.shape)
        # col2im in NHWC layout (contiguous writes), transpose once at the end
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[
                    :, :, :, :, i, j
                ]
        gxp = gxp.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return np.ascontiguousarray(gx), gw

    return _result("conv2d", out_data, (x, w), bwd, saved={"stride": stride, "padding": padding})


def max_pool2d(x, kernel=2, stride=None):
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: need 4-d input, got {x.data.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.data.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: kernel {kernel} stride {stride} underflows input {h}x{w}")
    s0, s1, s2, s3 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        ki, kj = np.unravel_index(arg.ravel(), (kernel, kernel))
        ni, ci, oi, oj = np.unravel_index(np.arange(arg.size), arg.shape)
        np.add.at(gx, (ni, ci, oi * stride + ki, oj * stride + kj), g.ravel())
        return (gx,)

    return _result("max_pool2d", out_data, (x,), bwd, saved={"kernel": kernel, "stride": stride})


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None], x.data.shape) / (h * w),)

    return _result("global_avg_pool", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# graph-control primitives


def gradient_reversal(x, lam):
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"gradient_reversal: lambda must be >= 0, got {lam}")

    def bwd(g):
        if lam == 0.0:
            return (np.zeros_like(g),)
        return (g * g.dtype.type(-lam),)

    return _result("gradient_reversal", x.data, (x,), bwd, saved={"lam": lam})


def detach(x):
    """Value-identical tensor with no graph history."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out.node = None
    return out


# ---------------------------------------------------------------------------
# uniform primitive entry point

_PRIMITIVES = {
    "add": (add, ()),
    "sub": (sub, ()),
    "mul": (mul, ()),
    "div": (div, ()),
    "matmul": (matmul, ()),
    "relu": (relu, ()),
    "sigmoid": (sigmoid, ()),
    "exp": (exp, ()),
    "log": (log, ()),
    "log1p_exp_neg_abs": (log1p_exp_neg_abs, ()),
    "clamp_min": (clamp_min, ("floor",)),
    "softmax": (softmax, ("axis",)),
    "flatten": (flatten, ()),
    "reshape": (reshape, ("shape",)),
    "gather_rows": (gather_rows, ("indices",)),
    "gather_cols": (gather_cols, ("col_indices",)),
    "reduce_sum": (reduce_sum, ("axis", "keepdims")),
    "reduce_mean": (reduce_mean, ("axis", "keepdims")),
    "dropout": (dropout, ("rate", "train", "rng")),
    "conv2d": (conv2d, ("stride", "padding")),
    "max_pool2d": (max_pool2d, ("kernel", "stride")),
    "global_avg_pool": (global_avg_pool, ()),
    "gradient_reversal": (gradient_reversal, ("lam",)),
    "detach": (detach, ()),
}


def apply_primitive(kind, inputs, attrs=None):
    """Dispatch a primitive by name. ``attrs`` must match the primitive's options."""
    if kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    fn, allowed = _PRIMITIVES[kind]
    attrs = dict(attrs or {})
    unknown = set(attrs) - set(allowed)
    if unknown:
        raise ValueError(f"{kind}: unsupported attrs {sorted(unknown)}")
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss, retain_graph=False):
    """Backpropagate from a scalar loss.

    Accumulates ``.grad`` on every requires_grad leaf reachable from the loss
    and returns a map {leaf tensor: gradient array}. The graph is freed
    afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        if loss.requires_grad:
            # a bare leaf: gradient of itself is one
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: g}
        raise GraphError("backward: loss is detached from any computation graph")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_map = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            leaf_map[t] = t.grad
            continue
        parent_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        if not retain_graph:
            t.node = None
    return leaf_map


def clip_grad_norm(grads, max_norm):
    """Scale a gradient map in place so its global L2 norm is <= max_norm.

    Returns the pre-clip global norm. Raises NonFiniteError naming the first
    offending entry if any gradient is not finite.
    """
    if max_norm <= 0:
        raise ValueError(f"clip_grad_norm: max_norm must be > 0, got {max_norm}")
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"clip_grad_norm: non-finite gradient for {name!r}")
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm
