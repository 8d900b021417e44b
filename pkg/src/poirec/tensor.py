"""Dense float64 tensors with taped reverse-mode gradients.

Every learned computation in this package is expressed through the small
operation catalog below.  Each op records its inputs and a backward closure
when any input participates in gradients, so `backward()` on a scalar loss
fills `.grad` on every reachable parameter.  Arrays are row-major float64
throughout; with a fixed seed all ops are bitwise deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/inf value enters a computation that rejects it."""


class Tensor:
    """A dense float64 array, optionally tracked on the gradient tape.

    Leaf tensors created with ``requires_grad=True`` own a same-shape
    ``.grad`` buffer.  Op results carry their parents and a backward
    closure; tensors without gradient participation carry neither, so
    evaluation-mode code builds no tape at all.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_needs_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._needs_grad = self.requires_grad

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        if any(p._needs_grad for p in parents):
            out._parents = tuple(parents)
            out._backward = backward_fn
            out._needs_grad = True
        else:
            out._parents = ()
            out._backward = None
            out._needs_grad = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# -- arithmetic ----------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return Tensor._op(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("subtract", a, b)
    return Tensor._op(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("elementwise_multiply", a, b)
    return Tensor._op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, factor):
    a = _as_tensor(a)
    c = float(factor)
    return Tensor._op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product for 2-D/1-D operand combinations."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul: operands must be 1-D or 2-D, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != (b.data.shape[0] if b.ndim >= 1 else None):
        raise ShapeMismatch(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad  # 1-D dot: g is scalar

    return Tensor._op(out, (a, b), backward)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose: expected 2-D, got {a.shape}")
    return Tensor._op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_add(a, v):
    """Add a (d,) vector to every row of an (n, d) matrix."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.ndim != 2 or v.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeMismatch(f"broadcast_add: incompatible shapes {a.shape} and {v.shape}")
    return Tensor._op(a.data + v.data, (a, v), lambda g: (g, g.sum(axis=0)))


def scale_rows(a, s):
    """Multiply row i of an (n, d) matrix by s[i]."""
    a, s = _as_tensor(a), _as_tensor(s)
    if a.ndim != 2 or s.ndim != 1 or a.data.shape[0] != s.data.shape[0]:
        raise ShapeMismatch(f"scale_rows: incompatible shapes {a.shape} and {s.shape}")
    out = a.data * s.data[:, None]

    def backward(g):
        return g * s.data[:, None], (g * a.data).sum(axis=1)

    return Tensor._op(out, (a, s), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._op(data, tensors, backward)


def row_gather(table, indices):
    """Select rows of a table (first-axis gather); duplicates allowed."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch(f"row_gather: indices must be 1-D, got shape {idx.shape}")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row_gather: index out of range for table with {n} rows")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._op(out, (table,), backward)


# -- reductions and nonlinearities ----------------------------------------------


def sum_all(a):
    a = _as_tensor(a)
    shape = a.data.shape
    return Tensor._op(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_lastaxis(a):
    a = _as_tensor(a)
    if a.ndim == 0:
        raise ShapeMismatch("mean_lastaxis: scalar input")
    k = a.data.shape[-1]
    return Tensor._op(a.data.mean(axis=-1), (a,), lambda g: (np.repeat(np.asarray(g)[..., None], k, axis=-1) / k,))


def mean_rows(a):
    """Mean over axis 0 of an (n, d) matrix, returning a (d,) vector."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"mean_rows: expected 2-D, got {a.shape}")
    n = a.data.shape[0]
    return Tensor._op(a.data.mean(axis=0), (a,), lambda g: (np.tile(g / n, (n, 1)),))


def l2_norm_squared(a):
    a = _as_tensor(a)
    return Tensor._op(np.asarray((a.data * a.data).sum()), (a,), lambda g: (2.0 * float(g) * a.data,))


def exponential(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._op(out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return Tensor._op(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a):
    """Exact (erf-based) GELU, the catalog's smooth nonlinearity."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return Tensor._op(out, (a,), backward)


def softmax_lastdim(a):
    """Row-wise softmax with max subtraction; rows sum to 1 and stay positive."""
    a = _as_tensor(a)
    if a.ndim == 0:
        raise ShapeMismatch("softmax_lastdim: scalar input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return ((g - dot) * p,)

    return Tensor._op(p, (a,), backward)


def logsumexp_lastdim(a):
    """log(sum(exp(x))) over the last axis, computed without materializing softmax."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)

    def backward(g):
        p = np.exp(a.data - m) / s
        return (np.asarray(g)[..., None] * p,)

    return Tensor._op(out, (a,), backward)


def cross_entropy_rows(logits, targets):
    """Mean over rows of logsumexp(row) - row[target]; log-sum-exp guarded."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ShapeMismatch(f"cross_entropy_rows: logits {logits.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.data.shape[1]):
        raise IndexError("cross_entropy_rows: target index out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    rows = np.arange(t.shape[0])
    out = np.asarray((lse - z[rows, t]).mean())

    def backward(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, t] -= 1.0
        return (p * (float(g) / t.shape[0]),)

    return Tensor._op(out, (logits,), backward)


# -- graph-segment ops -----------------------------------------------------------


def segment_softmax(logits, segment_ids, num_segments):
    """Softmax of a flat logit vector within segments (stable per segment)."""
    logits = _as_tensor(logits)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if logits.ndim != 1 or seg.shape != logits.data.shape:
        raise ShapeMismatch(f"segment_softmax: logits {logits.shape} vs segments {seg.shape}")
    mx = np.full(num_segments, -np.inf)
    np.maximum.at(mx, seg, logits.data)
    e = np.exp(logits.data - mx[seg])
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    p = e / denom[seg]

    def backward(g):
        dot = np.zeros(num_segments)
        np.add.at(dot, seg, g * p)
        return ((g - dot[seg]) * p,)

    return Tensor._op(p, (logits,), backward)


def segment_sum(values, segment_ids, num_segments):
    """Sum rows of an (m, d) matrix into per-segment rows of an (n, d) result."""
    values = _as_tensor(values)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if values.ndim != 2 or seg.shape != (values.data.shape[0],):
        raise ShapeMismatch(f"segment_sum: values {values.shape} vs segments {seg.shape}")
    out = np.zeros((num_segments, values.data.shape[1]))
    np.add.at(out, seg, values.data)
    return Tensor._op(out, (values,), lambda g: (g[seg],))


def spmm(matrix, x):
    """Fixed sparse matrix times a dense tape tensor; the matrix is a constant."""
    x = _as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.data.shape[0]:
        raise ShapeMismatch(f"spmm: {matrix.shape} @ {x.shape}")
    mt = matrix.T.tocsr()
    return Tensor._op(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    a = _as_tensor(a)
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout: rate must be < 1")
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return Tensor._op(a.data * mask, (a,), lambda g: (g * mask,))


# -- catalog dispatch and the gradient engine -------------------------------------

#: Public operation catalog: name -> callable. "relu_or_gelu" resolves to the
#: smooth erf-based GELU used throughout the model.
OP_CATALOG = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "elementwise_multiply": multiply,
    "scale": scale,
    "concat": concat,
    "row_gather": row_gather,
    "softmax_lastdim": softmax_lastdim,
    "mean_lastaxis": mean_lastaxis,
    "sum": sum_all,
    "relu_or_gelu": gelu,
    "exponential": exponential,
    "l2_norm_squared": l2_norm_squared,
    "transpose": transpose,
    "broadcast_add": broadcast_add,
}


def forward_op(op_kind, *inputs, **kwargs):
    """Validating dispatcher over the op catalog.

    Rejects unknown kinds, tensor inputs containing non-finite values, and
    shape violations (raised by the individual ops with the shapes named).
    """
    if op_kind not in OP_CATALOG:
        raise KeyError(f"unknown op kind {op_kind!r}; valid: {sorted(OP_CATALOG)}")
    flat = []
    for x in inputs:
        if isinstance(x, (list, tuple)):
            flat.extend(x)
        else:
            flat.append(x)
    for x in flat:
        if isinstance(x, Tensor) and not np.isfinite(x.data).all():
            raise NonFiniteError(f"forward_op({op_kind}): non-finite input")
    return OP_CATALOG[op_kind](*inputs, **kwargs)


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Accumulates dloss/dparam into ``.grad`` of every reachable tensor with
    ``requires_grad``; unreachable parameters keep their (zeroed) buffers.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.data.shape}")
    # Iterative post-order topological sort (sampler tapes run deep).
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g.reshape(node.grad.shape)
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent._needs_grad:
                continue
            acc = grads.get(id(parent))
            # out-of-place: backward closures may hand the same array to
            # several parents, so stored gradients must never be mutated
            grads[id(parent)] = pg if acc is None else acc + pg


def grad_check(func, point, epsilon=1e-5):
    """Max relative error between taped and central-difference gradients.

    ``func`` maps a Tensor to a scalar Tensor.  The error at each coordinate
    is |analytic - numeric| / max(1e-8, |analytic| + |numeric|); non-finite
    evaluations are reported with the offending coordinate.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    out = func(x)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: non-finite function value at the base point")
    backward(out)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = func(Tensor(x.data)).item()
        flat[i] = orig - epsilon
        f_minus = func(Tensor(x.data)).item()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"grad_check: non-finite evaluation at coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)

    a = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
