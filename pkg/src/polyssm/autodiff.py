"""Small reverse-mode automatic differentiation on numpy arrays.

Values are recorded at array granularity: one node per vector or matrix
operation, not per scalar.  A :class:`Tape` owns every node that (directly
or indirectly) depends on a leaf created with ``requires_grad=True``;
operations whose inputs are all constant produce untracked constant nodes
and never touch the tape.

Example::

    tape = Tape()
    x = tape.leaf(3.0)
    y = x * x
    grads = tape.backward(y)      # {x.id: array(6.)}
"""

from __future__ import annotations

import numpy as np

from .errors import DegeneracyError, DomainError, UsageError

__all__ = [
    "Node",
    "Tape",
    "leaf",
    "const",
    "apply",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_int",
    "exp",
    "log",
    "sum",
    "where_finite",
    "dot",
    "matvec",
    "matmul",
    "transpose",
    "maximum",
    "take",
    "logsumexp",
    "logsumexp_value",
    "sin",
    "cos",
    "wrap_angle",
    "backward",
]


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    """A value on (or off) a tape, together with its adjoint.

    ``parents`` holds ``(node, vjp)`` pairs where ``vjp`` maps this node's
    adjoint to the contribution for that parent.  Untracked constants have
    ``id == -1`` and no tape.
    """

    __slots__ = ("value", "_adjoint", "parents", "stop_flag", "requires_grad", "id", "tape")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), requires_grad=False, tape=None, stop_flag=False):
        self.value = value
        self._adjoint = None
        self.parents = parents
        self.stop_flag = stop_flag
        self.requires_grad = requires_grad
        self.tape = tape
        self.id = -1
        if tape is not None:
            tape._record(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def adjoint(self):
        if self._adjoint is None:
            return np.zeros_like(self.value, dtype=float)
        return self._adjoint

    grad = adjoint

    def _accumulate(self, g):
        if self._adjoint is None:
            self._adjoint = np.array(g, dtype=float, copy=True).reshape(np.shape(self.value))
        else:
            self._adjoint += g

    def __repr__(self):
        tag = "leaf" if not self.parents else "op"
        return f"Node(id={self.id}, {tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __pow__(self, n):
        return pow_int(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of tracked nodes.

    A tape can be swept backward once.  A second call raises
    :class:`UsageError` rather than accumulating into stale adjoints.
    """

    def __init__(self):
        self.nodes = []
        self.swept = False
        self.last_sweep_count = 0

    def __len__(self):
        return len(self.nodes)

    def _record(self, node):
        if self.swept:
            raise UsageError("tape has already been swept; create a new tape")
        node.id = len(self.nodes)
        self.nodes.append(node)

    def leaf(self, value, requires_grad=True):
        value = np.array(value, dtype=float)
        return Node(value, requires_grad=requires_grad, tape=self)

    def backward(self, root):
        """Populate adjoints from scalar ``root``; return ``{leaf id: grad}``."""
        if not isinstance(root, Node):
            raise UsageError("backward needs a Node root")
        if np.size(root.value) != 1:
            raise UsageError(f"backward root must be scalar, got shape {root.shape}")
        if self.swept:
            raise UsageError("backward called twice on the same tape")
        if root.tape is not self:
            raise UsageError("root does not belong to this tape")
        self.swept = True
        root._accumulate(np.ones_like(root.value, dtype=float))
        visited = 0
        for node in reversed(self.nodes[: root.id + 1]):
            g = node._adjoint
            if g is None:
                continue
            visited += 1
            if node.stop_flag:
                continue
            for parent, vjp in node.parents:
                parent._accumulate(vjp(g))
        self.last_sweep_count = visited
        return {
            n.id: n.adjoint for n in self.nodes if not n.parents and n.requires_grad
        }


def backward(root):
    """Sweep the tape that owns ``root``."""
    if not isinstance(root, Node) or root.tape is None:
        raise UsageError("root is a constant; nothing to differentiate")
    return root.tape.backward(root)


def leaf(value, requires_grad=True, tape=None):
    """Create a leaf node; a fresh tape is made when none is given."""
    if tape is None:
        tape = Tape()
    return tape.leaf(value, requires_grad=requires_grad)


def const(value):
    """Untracked constant node."""
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=float))


def _lift(x):
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=float))


def apply(value, *parent_vjps):
    """Build a node from ``value`` and ``(parent, vjp)`` pairs.

    Constant parents are dropped.  If no parent needs gradients the result is
    an untracked constant.  This is the hook for fused primitives defined
    outside this module.
    """
    tracked = tuple((p, f) for p, f in parent_vjps if p.requires_grad)
    if not tracked:
        return Node(value)
    tape = tracked[0][0].tape
    for p, _ in tracked[1:]:
        if p.tape is not tape:
            raise UsageError("operands live on different tapes")
    return Node(value, parents=tracked, requires_grad=True, tape=tape)


def stop_gradient(x):
    """Identity on values; blocks every adjoint flowing back into ``x``."""
    x = _lift(x)
    # Kept off the tape: a constant carrying a back-reference for inspection.
    return Node(x.value, parents=((x, None),), requires_grad=False, stop_flag=True)


def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return apply(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return apply(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: -_unbroadcast(g, sb)),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    return apply(
        av * bv,
        (a, lambda g: _unbroadcast(g * bv, sa)),
        (b, lambda g: _unbroadcast(g * av, sb)),
    )


def div(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    sa, sb = a.shape, b.shape
    return apply(
        out,
        (a, lambda g: _unbroadcast(g / bv, sa)),
        (b, lambda g: _unbroadcast(-g * out / bv, sb)),
    )


def neg(a):
    a = _lift(a)
    return apply(-a.value, (a, lambda g: -g))


def pow_int(a, n):
    """``a ** n`` for integer ``n >= 0``."""
    if int(n) != n or n < 0:
        raise DomainError(f"pow_int needs a nonnegative integer exponent, got {n!r}")
    n = int(n)
    a = _lift(a)
    av = a.value
    if n == 0:
        return Node(np.ones_like(av, dtype=float))
    return apply(av**n, (a, lambda g: g * n * av ** (n - 1)))


def exp(a):
    a = _lift(a)
    out = np.exp(a.value)
    return apply(out, (a, lambda g: g * out))


def log(a):
    a = _lift(a)
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of a nonpositive value")
    return apply(np.log(av), (a, lambda g: g / av))


def sum(a, axis=None, keepdims=False):
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return apply(np.sum(a.value, axis=axis, keepdims=keepdims), (a, vjp))


def where_finite(a, fill=-np.inf):
    """Replace non-finite entries by ``fill``; they receive no adjoint."""
    a = _lift(a)
    ok = np.isfinite(a.value)
    return apply(np.where(ok, a.value, fill), (a, lambda g: np.where(ok, g, 0.0)))


def dot(a, b):
    """Inner product of two vectors."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise UsageError(f"dot needs equal-length vectors, got {av.shape} and {bv.shape}")
    return apply(np.dot(av, bv), (a, lambda g: g * bv), (b, lambda g: g * av))


def matvec(m, v):
    m, v = _lift(m), _lift(v)
    mv, vv = m.value, v.value
    if mv.ndim != 2 or vv.ndim != 1:
        raise UsageError(f"matvec needs (matrix, vector), got {mv.shape} and {vv.shape}")
    return apply(mv @ vv, (m, lambda g: np.outer(g, vv)), (v, lambda g: mv.T @ g))


def matmul(a, b):
    """Matrix product of two 2-d operands."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise UsageError(f"matmul needs 2-d operands, got {av.shape} and {bv.shape}")
    return apply(av @ bv, (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))


def transpose(a):
    a = _lift(a)
    return apply(a.value.T, (a, lambda g: g.T))


def maximum(a, b):
    """Elementwise max; ties send the adjoint to ``a``."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    pick_a = av >= bv
    sa, sb = a.shape, b.shape
    return apply(
        np.maximum(av, bv),
        (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), sa)),
        (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), sb)),
    )


def take(a, idx):
    """Index along the leading axis (integer arrays allowed, repeats summed)."""
    a = _lift(a)
    av = a.value
    idx = np.asarray(idx) if not isinstance(idx, (int, np.integer, slice)) else idx

    def vjp(g):
        out = np.zeros_like(av, dtype=float)
        np.add.at(out, idx, g)
        return out

    return apply(av[idx], (a, vjp))


def logsumexp_value(av, axis=None):
    """Plain-array kernel shared by :func:`logsumexp` and non-taped filters.

    Returns ``(out, softmax)``.  Raises :class:`DegeneracyError` if every entry
    (along ``axis``) is -inf.
    """
    m = np.max(av, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegeneracyError("logsumexp over entries that are all -inf")
    shifted = np.exp(av - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    soft = shifted / s
    if axis is None:
        return out_keep.reshape(()), soft
    return np.squeeze(out_keep, axis=axis), soft


def logsumexp(a, axis=None, return_softmax=False):
    """Stable ``log(sum(exp(a)))``; the adjoint is the softmax of ``a``.

    With ``return_softmax`` the (plain array) softmax is returned as well.
    """
    a = _lift(a)
    out, soft = logsumexp_value(a.value, axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return g * soft

    node = apply(out, (a, vjp))
    return (node, soft) if return_softmax else node


def sin(a):
    a = _lift(a)
    av = a.value
    return apply(np.sin(av), (a, lambda g: g * np.cos(av)))


def cos(a):
    a = _lift(a)
    av = a.value
    return apply(np.cos(av), (a, lambda g: -g * np.sin(av)))


def wrap_angle(a):
    """``atan2(sin a, cos a)``; locally a shift by a multiple of 2*pi, so the adjoint passes through."""
    a = _lift(a)
    av = a.value
    return apply(np.arctan2(np.sin(av), np.cos(av)), (a, lambda g: g))
