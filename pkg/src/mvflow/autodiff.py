"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation records its inputs and a vector-Jacobian
product, and the graph is rebuilt on each forward pass.  The vjp closures
are themselves written in terms of the primitive ops, so ``grad`` with
``create_graph=True`` yields cotangents that are graph tensors and can be
differentiated again (needed for Jacobian-trace terms inside a loss).

Broadcasting is limited to numpy-compatible leading/batch dimensions; no
convolutions, no GPU, single-threaded graph construction.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


# Global switch; ops executed while disabled produce constant tensors.
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager suppressing graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """Dense float64 array, optionally a node in the differentiation graph.

    ``grad`` is populated on leaves by :func:`backward`; repeated uses of a
    leaf accumulate additively.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

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
        return float(np.asarray(self.data).item())

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp):
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Reduce cotangent ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# primitive ops ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    return _node(
        data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not conform")
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not conform")
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(div(g, b), a.shape),
            _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data
    return _node(
        data, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    )


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (transpose(g),))


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (reshape(g, orig),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    orig = a.shape
    data = np.broadcast_to(a.data, shape).copy()
    return _node(data, (a,), lambda g: (_unbroadcast(g, orig),))


def repeat_rows(a, k):
    """Repeat each row of a 2-D tensor ``k`` times along axis 0."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"repeat_rows expects a 2-D tensor, got shape {a.shape}")
    n = a.shape[0]
    data = np.repeat(a.data, k, axis=0)

    def vjp(g):
        return (tsum(reshape(g, (n, k) + a.shape[1:]), axis=1),)

    return _node(data, (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    orig = a.shape

    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        if not keepdims:
            kept = tuple(1 if i in axes else s for i, s in enumerate(orig))
            g = reshape(g, kept)
        return (broadcast_to(g, orig),)

    return _node(data, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % tensors[0].ndim
    offsets = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = tuple(
                slice(lo, hi) if i == ax else slice(None) for i in range(t.ndim)
            )
            outs.append(getitem(g, idx))
        return tuple(outs)

    return _node(data, tuple(tensors), vjp)


def getitem(a, idx):
    a = as_tensor(a)
    data = np.array(a.data[idx])
    orig = a.shape
    return _node(data, (a,), lambda g: (scatter(g, idx, orig),))


def scatter(g, idx, shape):
    """Place ``g`` into a zero tensor of ``shape`` at ``idx`` (adjoint of getitem)."""
    g = as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, idx, g.data)
    return _node(data, (g,), lambda c: (getitem(c, idx),))


def texp(a):
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), None)
    if out._parents:
        out._vjp = lambda g: (mul(g, out),)
    return out


def tlog(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def tanh(a):
    a = as_tensor(a)
    out = _node(np.tanh(a.data), (a,), None)
    if out._parents:
        out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def sigmoid(a):
    a = as_tensor(a)
    # overflow-safe via tanh: sigmoid(x) = (tanh(x/2) + 1) / 2
    data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = _node(data, (a,), None)
    if out._parents:
        out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a):
    a = as_tensor(a)
    x = a.data
    # stable: max(x, 0) + log1p(exp(-|x|))
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(data, (a,), lambda g: (mul(g, sigmoid(a)),))


def swish(a):
    """x * sigmoid(x), composite of primitives."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def clip(a, lo, hi):
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _node(data, (a,), lambda g: (mul(g, mask),))


# backward machinery -----------------------------------------------------


def _topo(output):
    """Ancestors of ``output`` in parents-before-children order."""
    order, visited = [], set()
    stack = [(output, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def grad(output, inputs, cotangent=None, create_graph=False):
    """Cotangents of ``output`` with respect to ``inputs``.

    ``inputs`` may be any tensors in the graph, not only leaves.  Returns a
    list of tensors aligned with ``inputs`` (zeros where disconnected).
    With ``create_graph=True`` the returned tensors are differentiable.
    """
    order = _topo(output)
    input_ids = {id(t): i for i, t in enumerate(inputs)}

    # Propagate only through nodes from which some input is reachable.
    needed = set()
    for t in order:
        if id(t) in input_ids or any(id(p) in needed for p in t._parents):
            needed.add(id(t))

    if cotangent is None:
        cot0 = Tensor(np.ones(output.shape))
    else:
        cot0 = as_tensor(cotangent)
    cots = {id(output): cot0}
    results = {}

    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for t in reversed(order):
            g = cots.pop(id(t), None)
            if g is None:
                continue
            if id(t) in input_ids:
                i = input_ids[id(t)]
                results[i] = g if i not in results else add(results[i], g)
                continue  # stop at requested inputs
            if t._vjp is None:
                continue
            for p, pg in zip(t._parents, t._vjp(g)):
                if pg is None or not p.requires_grad or id(p) not in needed:
                    continue
                prev = cots.get(id(p))
                cots[id(p)] = pg if prev is None else add(prev, pg)

    return [
        results.get(i, Tensor(np.zeros(t.shape))) for i, t in enumerate(inputs)
    ]


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Accumulation is additive across calls and across multiple uses of a leaf.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    leaves = [t for t in _topo(loss) if t.requires_grad and not t._parents]
    for t, g in zip(leaves, grad(loss, leaves)):
        t.grad = g.data.copy() if t.grad is None else t.grad + g.data


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a deterministic scalar-valued closure over ``params`` (tensors
    whose ``.data`` is perturbed in place).  A non-finite intermediate is
    reported as failure (inf).
    """
    out = f()
    grads = grad(out, params)
    max_err = 0.0
    for p, g in zip(params, grads):
        flat = p.data.ravel()
        gflat = g.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            num = (fp - fm) / (2.0 * step)
            ana = gflat[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            max_err = max(max_err, err)
    return max_err
