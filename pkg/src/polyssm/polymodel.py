"""Polynomial transition model: degree matrix, evaluation, graphs.

The model maps a state ``x`` in R^n to ``C @ phi(x)`` where ``phi(x)[j]`` is
the monomial ``prod_i x_i ** D[i, j]``.  ``D`` is fixed by ``(n, d)``; ``C``
is what gets learned.

Monomials are ordered by total degree, then lexicographically within a
degree (``"deg-lex"``).  For ``n=3, d=2`` that gives the columns
``1, x1, x2, x3, x1^2, x1x2, x1x3, x2^2, x2x3, x3^2``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ZERO_TOL = 1e-6
ORDERING = "deg-lex"


def monomial_count(n_x: int, d: int) -> int:
    """Number of monomials of total degree <= ``d`` in ``n_x`` variables."""
    if n_x < 1 or d < 0:
        raise ValueError(f"need n_x >= 1 and d >= 0, got n_x={n_x}, d={d}")
    return sum(math.comb(n + n_x - 1, n_x - 1) for n in range(d + 1))


@dataclass(frozen=True, eq=False)
class DegreeMatrix:
    """Exponent table: ``entries[i, j]`` is the power of ``x_i`` in monomial ``j``.

    ``slots`` lists, for each monomial, the variable index of each of its
    ``max_degree`` factors, padded with ``n_x`` (a stand-in for the constant 1).
    """

    entries: np.ndarray
    max_degree: int
    slots: np.ndarray = field(init=False, repr=False)
    _scatter: tuple = field(init=False, repr=False)

    def __post_init__(self):
        n, m = self.entries.shape
        slots = np.full((m, self.max_degree), n, dtype=np.int64)
        for j in range(m):
            vars_j = np.repeat(np.arange(n), self.entries[:, j])
            slots[j, : len(vars_j)] = vars_j
        slots.setflags(write=False)
        object.__setattr__(self, "slots", slots)
        scatter = []
        for s in range(self.max_degree):
            onehot = np.zeros((m, n + 1))
            onehot[np.arange(m), slots[:, s]] = 1.0
            scatter.append(onehot)
        object.__setattr__(self, "_scatter", tuple(scatter))

    @property
    def n_x(self) -> int:
        return self.entries.shape[0]

    @property
    def n_monomials(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self):
        return self.entries.shape

    def __eq__(self, other):
        if not isinstance(other, DegreeMatrix):
            return NotImplemented
        return self.max_degree == other.max_degree and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash((self.max_degree, self.entries.tobytes()))

    def labels(self, names=None):
        """Human readable monomial names, e.g. ``['1', 'x1', 'x1*x2']``."""
        names = names or [f"x{i + 1}" for i in range(self.n_x)]
        out = []
        for col in self.entries.T:
            parts = []
            for name, p in zip(names, col):
                if p == 1:
                    parts.append(name)
                elif p > 1:
                    parts.append(f"{name}^{p}")
            out.append("*".join(parts) or "1")
        return out


def generate_degree_matrix(n_x: int, d: int) -> DegreeMatrix:
    """Enumerate combinations with replacement of ``{1..n_x}`` up to length ``d``.

    ``itertools.combinations_with_replacement`` already yields each degree's
    multisets in lexicographic order, so iterating degrees 0..d produces the
    deg-lex ordering directly.
    """
    if n_x < 1 or d < 0:
        raise ValueError(f"need n_x >= 1 and d >= 0, got n_x={n_x}, d={d}")
    cols = []
    for delta in range(d + 1):
        for combo in itertools.combinations_with_replacement(range(n_x), delta):
            col = np.zeros(n_x, dtype=np.int64)
            for i in combo:
                col[i] += 1
            cols.append(col)
    entries = np.stack(cols, axis=1)
    entries.setflags(write=False)
    return DegreeMatrix(entries=entries, max_degree=d)


def _factors(x, D):
    """``F[k, j, s]``: the s-th factor of monomial j at state k (1 for padding)."""
    k = x.shape[0]
    xpad = np.concatenate([x, np.ones((k, 1))], axis=1)
    return xpad[:, D.slots]


def monomial_values(x, D: DegreeMatrix):
    """Evaluate every monomial at each row of ``x`` (shape ``(K, n_x)`` or ``(n_x,)``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    phi = np.prod(_factors(x2, D), axis=2)
    return phi[0] if single else phi


def monomials(x, D: DegreeMatrix):
    """Tape-aware monomial features ``phi(x)`` for a batch of states.

    ``x`` is a node (or array) of shape ``(K, n_x)``; returns ``(K, M)``.
    Each monomial is a product of ``d`` factors, so its derivative with
    respect to one factor is the product of the others; no division by
    ``x`` is involved and zeros are handled exactly.
    """
    x = ad._lift(x)
    xv = x.value
    F = _factors(xv, D)
    phi = np.prod(F, axis=2)
    if not x.requires_grad:
        return ad.const(phi)
    d = D.max_degree
    n = D.n_x

    def vjp(g):
        grad = np.zeros((xv.shape[0], n + 1))
        for s in range(d):
            others = np.prod(np.delete(F, s, axis=2), axis=2) if d > 1 else 1.0
            grad += (g * others) @ D._scatter[s]
        return grad[:, :n]

    return ad.apply(phi, (x, vjp))


def eval_polynomial(x, C, D: DegreeMatrix):
    """Transition mean ``C @ phi(x)``; batched over rows when ``x`` is 2-d.

    Either argument may be a tape node; the result is a node when any input is.
    """
    if isinstance(x, ad.Node) or isinstance(C, ad.Node):
        xn = ad._lift(x)
        single = xn.value.ndim == 1
        if single:
            xn = ad.apply(xn.value[None, :], (xn, lambda g: g[0]))
        out = ad.matmul(monomials(xn, D), ad.transpose(ad._lift(C)))
        if single:
            out = ad.apply(out.value[0], (out, lambda g: g[None, :]))
        return out
    C = np.asarray(C, dtype=float)
    _check_shapes(C, D)
    phi = monomial_values(x, D)
    return phi @ C.T


def _check_shapes(C, D):
    if C.shape != D.shape:
        raise ValueError(f"coefficient shape {C.shape} does not match degree matrix {D.shape}")


def init_coefficients(n_x: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Uniform(-1, 1) coefficients."""
    return rng.uniform(-1.0, 1.0, size=(n_x, m))


def threshold(C, zero_tol=ZERO_TOL):
    """Copy of ``C`` with numerically-zero entries set to exactly 0."""
    C = np.array(C, dtype=float)
    C[np.abs(C) <= zero_tol] = 0.0
    return C


def adjacency(C, D: DegreeMatrix, zero_tol=ZERO_TOL) -> np.ndarray:
    """Directed connectivity: ``A[a, b] = 1`` iff state ``b`` enters the update of ``a``."""
    C = threshold(C, zero_tol)
    _check_shapes(C, D)
    weight = np.abs(C) @ D.entries.T
    return (weight > zero_tol).astype(np.int64)


def per_monomial_graphs(C, D: DegreeMatrix, zero_tol=ZERO_TOL):
    """One adjacency matrix per monomial; their elementwise OR is :func:`adjacency`."""
    C = threshold(C, zero_tol)
    _check_shapes(C, D)
    absC = np.abs(C)
    return [
        (np.outer(absC[:, j], D.entries[:, j]) > zero_tol).astype(np.int64)
        for j in range(D.n_monomials)
    ]


# -- serialization -----------------------------------------------------------

def to_json_dict(C, D: DegreeMatrix) -> dict:
    C = np.asarray(C, dtype=float)
    _check_shapes(C, D)
    return {
        "n_x": int(D.n_x),
        "d": int(D.max_degree),
        "ordering": ORDERING,
        "degrees": [int(v) for v in D.entries.ravel()],
        "coefficients": [float(v) for v in C.ravel()],
    }


def from_json_dict(payload: dict):
    """Inverse of :func:`to_json_dict`; returns ``(C, D)``.

    Raises ``ValueError`` on any structural inconsistency.
    """
    try:
        n_x = int(payload["n_x"])
        d = int(payload["d"])
        ordering = payload.get("ordering", ORDERING)
        coeffs = np.asarray(payload["coefficients"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed coefficient file: {exc}") from exc
    if ordering != ORDERING:
        raise ValueError(f"unsupported monomial ordering {ordering!r}")
    D = generate_degree_matrix(n_x, d)
    if "degrees" in payload:
        degrees = np.asarray(payload["degrees"], dtype=np.int64)
        if degrees.size != D.entries.size or not np.array_equal(degrees.reshape(D.shape), D.entries):
            raise ValueError("degree table does not match the deg-lex layout for (n_x, d)")
    if coeffs.size != D.entries.size:
        raise ValueError(f"expected {D.entries.size} coefficients, found {coeffs.size}")
    C = coeffs.reshape(D.shape)
    if not np.all(np.isfinite(C)):
        raise ValueError("coefficients must be finite")
    return C, D


def save_json(path, C, D: DegreeMatrix, extra=None):
    payload = to_json_dict(C, D)
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed coefficient file {path}: {exc}") from exc
    return from_json_dict(payload)


def to_dot(A, name="G", labels=None) -> str:
    """DOT text for adjacency ``A`` with edges ``b -> a`` wherever ``A[a, b] == 1``."""
    A = np.asarray(A)
    n = A.shape[0]
    labels = labels or [f"x{i + 1}" for i in range(n)]
    lines = [f"digraph {name} {{"]
    for lab in labels:
        lines.append(f'  "{lab}";')
    for a in range(n):
        for b in range(n):
            if A[a, b]:
                lines.append(f'  "{labels[b]}" -> "{labels[a]}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
