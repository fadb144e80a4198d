"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array plus an optional backward closure recorded at
construction. Calling :func:`backward` on a scalar output replays the tape in
reverse topological order and accumulates gradients additively into every
``requires_grad`` leaf. Integer index arrays (gathers, neighbor lists, argmin
selections) are recorded as constants: no gradient flows through index
selection. All arithmetic is 64-bit.
"""

import numpy as np

from .errors import GradientError

LEAKY_SLOPE = 0.1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are promoted on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, backward_fn):
    """Record one primitive: ``backward_fn(g)`` must push gradients into the
    parents via :func:`accumulate`. Constant-only inputs skip the tape."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def accumulate(t, g):
    """Add ``g`` into ``t.grad`` (no-op for constants)."""
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.empty_like(t.data)  # own a buffer; g may be a borrowed view
        np.copyto(t.grad, g)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` along axes that were broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(out):
    """Populate ``grad`` on every requires_grad leaf reachable from ``out``.

    ``out`` must hold exactly one element. Gradients accumulate across
    calls; reset leaves explicitly between passes.
    """
    if not isinstance(out, Tensor):
        raise GradientError("backward expects a Tensor")
    if out.data.size != 1:
        raise GradientError(f"backward expects a scalar output, got shape {out.data.shape}")
    if not out.requires_grad:
        return
    order = _toposort(out)
    out.grad = np.ones_like(out.data)
    for node in order:
        if node._backward is not None:
            node._backward(node.grad)
            node.grad = None  # interior grads are transient; leaves keep theirs


def _toposort(root):
    """Reverse topological order (root first), iteratively."""
    order = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 1
            order.append(node)
            continue
        if id(node) in state:
            continue
        state[id(node)] = 0
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in state and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    def back(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_op(a.data + b.data, (a, b), back)


def sub(a, b):
    def back(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_op(a.data - b.data, (a, b), back)


def mul(a, b):
    def back(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return make_op(a.data * b.data, (a, b), back)


def div(a, b):
    def back(g):
        accumulate(a, g / b.data)
        accumulate(b, -g * a.data / (b.data * b.data))

    return make_op(a.data / b.data, (a, b), back)


def matmul(a, b):
    def back(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), back)


def exp(a):
    out_data = np.exp(a.data)

    def back(g):
        accumulate(a, g * out_data)

    return make_op(out_data, (a,), back)


def log(a):
    def back(g):
        accumulate(a, g / a.data)

    return make_op(np.log(a.data), (a,), back)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def back(g):
        accumulate(a, g / (2.0 * out_data))

    return make_op(out_data, (a,), back)


def absolute(a):
    # subgradient 0 at exactly 0
    def back(g):
        accumulate(a, g * np.sign(a.data))

    return make_op(np.abs(a.data), (a,), back)


def power(a, exponent):
    """a ** c for a constant exponent."""
    c = float(exponent)

    def back(g):
        accumulate(a, g * c * a.data ** (c - 1.0))

    return make_op(a.data ** c, (a,), back)


def tsum(a, axis=None, keepdims=False):
    def back(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(gg, a.data.shape))

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / count))


def amax(a, axis):
    """Max reduction along one axis; ties route to the lowest index."""
    arg = np.argmax(a.data, axis=axis)  # first occurrence wins
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        accumulate(a, ga)

    return make_op(out_data, (a,), back)


def amin(a, axis):
    """Min reduction along one axis; ties route to the lowest index."""
    arg = np.argmin(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        accumulate(a, ga)

    return make_op(out_data, (a,), back)


def leaky_relu(a, slope=LEAKY_SLOPE):
    scale = np.where(a.data > 0, 1.0, slope)

    def back(g):
        accumulate(a, g * scale)

    return make_op(a.data * scale, (a,), back)


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where the input was not clipped."""
    out_data = np.clip(a.data, lo, hi)
    passthrough = np.ones_like(a.data)
    if lo is not None:
        passthrough *= a.data > lo
    if hi is not None:
        passthrough *= a.data < hi

    def back(g):
        accumulate(a, g * passthrough)

    return make_op(out_data, (a,), back)


def logsumexp(a, axis):
    """log(sum(exp(a), axis)), stabilized; backward recomputes the softmax
    from the saved output instead of caching the exponentials."""
    m = a.data.max(axis=axis, keepdims=True)
    out_data = (m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))).squeeze(axis)

    def back(g):
        s = np.exp(a.data - np.expand_dims(out_data, axis))
        accumulate(a, np.expand_dims(g, axis) * s)

    return make_op(out_data, (a,), back)


def softmax(a, axis):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        accumulate(a, out_data * (g - dot))

    return make_op(out_data, (a,), back)


def reshape(a, shape):
    orig = a.data.shape

    def back(g):
        accumulate(a, g.reshape(orig))

    return make_op(a.data.reshape(shape), (a,), back)


def transpose(a):
    def back(g):
        accumulate(a, g.T)

    return make_op(a.data.T, (a,), back)


def concat(tensors, axis):
    tensors = [(_wrap(t)) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate(t, piece)

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def take_rows(a, idx):
    """Gather rows of a 2-D tensor with a constant integer array.

    Output shape is idx.shape + a.shape[1:]. Backward scatter-adds.
    """
    idx = np.asarray(idx)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1, *a.data.shape[1:]))
        accumulate(a, ga)

    return make_op(a.data[idx], (a,), back)


def take2d(a, rows, cols):
    """Gather a[rows, cols] elementwise with constant index arrays."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        accumulate(a, ga)

    return make_op(a.data[rows, cols], (a,), back)


def select_col(a, j):
    """Column j of a 2-D tensor as a 1-D tensor."""
    jj = int(j)

    def back(g):
        ga = np.zeros_like(a.data)
        ga[:, jj] = g
        accumulate(a, ga)

    return make_op(a.data[:, jj].copy(), (a,), back)


def dropout(a, rate, rng):
    """Inverted dropout with a caller-supplied random generator."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)

    def back(g):
        accumulate(a, g * keep)

    return make_op(a.data * keep, (a,), back)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(loss_fn, params, step, exclude=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the computation from ``params`` (a list of
    requires_grad Tensors) and returns a scalar Tensor. ``exclude`` is an
    optional list of boolean masks (one per parameter, True = skip entry),
    used to drop entries sitting within a step of a nondifferentiable kink.
    """
    if step <= 0:
        raise GradientError(f"step must be positive, got {step}")
    for p in params:
        p.zero_grad()
    out = loss_fn()
    if not np.isfinite(out.data).all():
        raise GradientError("loss is non-finite at the evaluation point")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        mask = None if exclude is None else np.asarray(exclude[pi]).reshape(-1)
        for j in range(flat.size):
            if mask is not None and mask[j]:
                continue
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_fn().item()
            flat[j] = orig - step
            lo = loss_fn().item()
            flat[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GradientError("loss is non-finite at a perturbed point")
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[pi].reshape(-1)[j]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
