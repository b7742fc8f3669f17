"""Tape-based reverse-mode differentiation with forward spatial jets.

Every node lives on a :class:`Graph` (a tape).  Nodes are appended in creation
order, which is a valid topological order, so :func:`backward` is a single
reverse sweep over the tape.  Values are numpy arrays; a 0-d node is the
scalar case.

Spatial jets carry ``(value, gradient, second-order part)`` for a batch of
points, stacked along a leading component axis so that one matrix product
propagates every component through a dense layer.  The second-order part is
described by a :class:`JetLayout`:

* ``FULL``   -- 6 upper-triangle Hessian entries ``xx, xy, xz, yy, yz, zz``
* ``DIAG``   -- the 3 diagonal entries
* ``TRACE``  -- a single slot holding the (weighted) Laplacian

All three are closed under affine maps, products and elementwise functions,
because each second-order slot only ever depends on itself and on the
gradient.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Var",
    "DifferentiableScalar",
    "NonFiniteError",
    "GraphMismatchError",
    "record_leaf",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sin",
    "cos",
    "square",
    "linear",
    "take",
    "component",
    "sum_all",
    "mean_all",
    "JetLayout",
    "FULL",
    "DIAG",
    "TRACE",
    "Jet3",
    "jet_seed",
    "jet_arith",
    "jet_add",
    "jet_sub",
    "jet_mul",
    "jet_scale",
    "jet_sin",
    "jet_affine",
    "jet_combine",
    "jet_input",
    "jet_apply",
    "jet_exp",
    "jet_cos",
    "laplacian",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by '{op}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class GraphMismatchError(ValueError):
    """Raised when operands recorded on different graphs are combined."""


class Graph:
    """A tape of nodes.  Build a fresh one per evaluation."""

    _counter = itertools.count()

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Var] = []
        self.check_finite = check_finite
        self.id = next(Graph._counter)

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"Graph(id={self.id}, nodes={len(self.nodes)})"


class Var:
    """A node on a :class:`Graph` carrying an array value."""

    __slots__ = ("value", "graph", "parents", "vjp", "op", "is_parameter", "index")
    __array_priority__ = 1000

    def __init__(self, value, graph: Graph, parents: tuple = (), vjp: Callable | None = None,
                 op: str = "leaf", is_parameter: bool = False):
        self.value = value
        self.graph = graph
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.is_parameter = is_parameter
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    def __repr__(self) -> str:
        if np.ndim(self.value) == 0:
            return f"Var({float(self.value)!r}, op={self.op})"
        return f"Var(shape={self.shape}, op={self.op})"

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

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _getitem(self, key)


# The scalar case of Var; kept as a name for readability at call sites.
DifferentiableScalar = Var


def _check(graph: Graph, value, op: str):
    if graph.check_finite and not np.all(np.isfinite(value)):
        raise NonFiniteError(op)


def _graph_of(*operands) -> Graph:
    graph = None
    for x in operands:
        if isinstance(x, Var):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise GraphMismatchError(
                    f"operands belong to different graphs ({graph.id} and {x.graph.id})")
    if graph is None:
        raise TypeError("at least one operand must be a Var")
    return graph


def _val(x):
    return x.value if isinstance(x, Var) else x


def _node(value, parents, vjp, op) -> Var:
    graph = _graph_of(*parents)
    _check(graph, value, op)
    return Var(value, graph, parents=parents, vjp=vjp, op=op)


def record_leaf(value, graph: Graph, is_parameter: bool = False) -> Var:
    """Record ``value`` as a leaf on ``graph``.

    Parameter leaves are the ones reported by :func:`backward`.
    """
    value = np.asarray(value)
    if not np.issubdtype(value.dtype, np.floating):
        value = value.astype(np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("record_leaf", "leaf value must be finite")
    return Var(value, graph, is_parameter=is_parameter)


def backward(root: Var) -> dict[Var, np.ndarray]:
    """Reverse sweep from ``root``; returns adjoints of every parameter leaf.

    Parameter leaves that ``root`` does not depend on map to zeros.
    A non-scalar root is seeded with ones (the gradient of its sum).
    """
    nodes = root.graph.nodes
    adj: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    out: dict[Var, np.ndarray] = {}
    for i in range(root.index, -1, -1):
        g = adj.pop(i, None)
        node = nodes[i]
        if node.is_parameter:
            out[node] = g if g is not None else np.zeros_like(node.value)
            continue
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not isinstance(parent, Var):
                continue
            j = parent.index
            adj[j] = adj[j] + pg if j in adj else pg
    # parameters recorded after the root cannot influence it
    for node in nodes[root.index + 1:]:
        if node.is_parameter:
            out[node] = np.zeros_like(node.value)
    return out


# ---------------------------------------------------------------------------
# elementary operations
#
# Broadcasting is limited to a python/numpy constant against a node or two
# nodes of identical shape; anything else is a usage error.


def _same_shape(a, b, op):
    if isinstance(a, Var) and isinstance(b, Var) and a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, like):
    """Sum a broadcast adjoint back down to the shape of ``like``."""
    shape = np.shape(like)
    if g.shape == shape:
        return g
    return np.broadcast_to(np.sum(g), shape).copy() if shape == () else g


def add(a, b) -> Var:
    _same_shape(a, b, "add")
    av, bv = _val(a), _val(b)
    return _node(av + bv, (a, b), lambda g: (_reduce_to(g, av), _reduce_to(g, bv)), "add")


def sub(a, b) -> Var:
    _same_shape(a, b, "sub")
    av, bv = _val(a), _val(b)
    return _node(av - bv, (a, b), lambda g: (_reduce_to(g, av), _reduce_to(-g, bv)), "sub")


def mul(a, b) -> Var:
    _same_shape(a, b, "mul")
    av, bv = _val(a), _val(b)
    return _node(av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, av), _reduce_to(g * av, bv)), "mul")


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _node(c * a.value, (a,), lambda g: (c * g,), "scale")


def sin(a: Var) -> Var:
    v = a.value
    return _node(np.sin(v), (a,), lambda g: (g * np.cos(v),), "sin")


def cos(a: Var) -> Var:
    v = a.value
    return _node(np.cos(v), (a,), lambda g: (-g * np.sin(v),), "cos")


def square(a: Var) -> Var:
    v = a.value
    return _node(v * v, (a,), lambda g: (2.0 * g * v,), "square")


def linear(x, weight: Var, bias: Var | None = None, factor: float = 1.0) -> Var:
    """``factor * (x @ weight.T + bias)`` for a batch ``x`` of shape (n, fan_in)."""
    xv, wv = _val(x), _val(weight)
    out = xv @ wv.T
    if bias is not None:
        out += _val(bias)
    if factor != 1.0:
        out *= factor

    def vjp(g):
        if factor != 1.0:
            g = g * factor
        gx = g @ wv if isinstance(x, Var) else None
        gw = g.T @ xv
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    return _node(out, (x, weight, bias), vjp, "linear")


def take(a: Var, rows) -> Var:
    """Select rows (first axis) of ``a``."""
    rows = np.asarray(rows, dtype=np.intp)
    v = a.value

    def vjp(g):
        out = np.zeros_like(v)
        np.add.at(out, rows, g)
        return (out,)

    return _node(v[rows], (a,), vjp, "take")


def component(a: Var, j: int) -> Var:
    """``a[..., j]`` of the last axis."""
    v = a.value

    def vjp(g):
        out = np.zeros_like(v)
        out[..., j] = g
        return (out,)

    return _node(v[..., j], (a,), vjp, "component")


def _getitem(a: Var, key) -> Var:
    v = a.value

    def vjp(g):
        out = np.zeros_like(v)
        np.add.at(out, key, g)
        return (out,)

    return _node(v[key], (a,), vjp, "getitem")


def sum_all(a: Var) -> Var:
    v = a.value
    return _node(np.sum(v), (a,), lambda g: (np.full_like(v, g),), "sum")


def mean_all(a: Var) -> Var:
    v = a.value
    n = v.size
    return _node(np.sum(v) / n, (a,), lambda g: (np.full_like(v, g / n),), "mean")


# ---------------------------------------------------------------------------
# spatial jets


@dataclass(frozen=True)
class JetLayout:
    """Second-order slots of a jet; each slot is a sum of ``d2/dx_p dx_q`` terms."""

    name: str
    slots: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def n_components(self) -> int:
        return 4 + len(self.slots)


FULL = JetLayout("full", (((0, 0),), ((0, 1),), ((0, 2),), ((1, 1),), ((1, 2),), ((2, 2),)))
DIAG = JetLayout("diag", (((0, 0),), ((1, 1),), ((2, 2),)))
TRACE = JetLayout("trace", (((0, 0), (1, 1), (2, 2)),))

_HESS_INDEX = {(0, 0): 0, (0, 1): 1, (0, 2): 2, (1, 1): 3, (1, 2): 4, (2, 2): 5}


def _sym(layout: JetLayout, ga, gb):
    """Per slot: sum over (p, q) of (ga_p gb_q + ga_q gb_p) / 2.  Stacked on axis 0."""
    out = []
    for slot in layout.slots:
        acc = None
        for p, q in slot:
            term = ga[p] * gb[p] if p == q else 0.5 * (ga[p] * gb[q] + ga[q] * gb[p])
            acc = term if acc is None else acc + term
        out.append(acc)
    return np.stack(out)


def _sym_vjp(layout: JetLayout, gs, gb):
    """Adjoint w.r.t. ``ga`` of ``sum_k gs[k] * _sym(ga, gb)[k]``."""
    out = np.zeros_like(gb)
    for k, slot in enumerate(layout.slots):
        for p, q in slot:
            if p == q:
                out[p] += gs[k] * gb[p]
            else:
                out[p] += 0.5 * gs[k] * gb[q]
                out[q] += 0.5 * gs[k] * gb[p]
    return out


class Jet3:
    """Value, spatial gradient and second-order part of a batch of functions.

    ``data`` is a single node of shape ``(4 + n_slots, *batch)``: component 0
    is the value, 1..3 the gradient, the rest the second-order slots of
    ``layout``.
    """

    __slots__ = ("data", "layout")

    def __init__(self, data: Var, layout: JetLayout = FULL):
        if data.shape[0] != layout.n_components:
            raise ValueError(f"jet data has {data.shape[0]} components, layout "
                             f"'{layout.name}' needs {layout.n_components}")
        self.data = data
        self.layout = layout

    @property
    def graph(self) -> Graph:
        return self.data.graph

    @property
    def v(self) -> Var:
        return self.data[0]

    @property
    def g(self) -> tuple[Var, Var, Var]:
        return self.data[1], self.data[2], self.data[3]

    @property
    def h(self) -> tuple[Var, ...]:
        """Upper-triangle Hessian ``xx, xy, xz, yy, yz, zz`` (FULL layout only)."""
        if self.layout is not FULL:
            raise AttributeError(f"Hessian entries unavailable for layout '{self.layout.name}'")
        return tuple(self.data[4 + k] for k in range(6))

    def hessian(self) -> np.ndarray:
        """Dense symmetric ``(3, 3, *batch)`` Hessian values (FULL layout only)."""
        h = [x.value for x in self.h]
        out = np.empty((3, 3) + np.shape(h[0]), dtype=h[0].dtype)
        for (p, q), k in _HESS_INDEX.items():
            out[p, q] = out[q, p] = h[k]
        return out

    def __repr__(self) -> str:
        return f"Jet3(layout={self.layout.name}, batch={self.data.shape[1:]})"


def jet_seed(coords, graph: Graph, layout: JetLayout = FULL, axis_scale=(1.0, 1.0, 1.0)) -> list[Jet3]:
    """Seed the three coordinate inputs.

    ``coords`` is a 3-sequence of scalars or equal-shape arrays.  Jet ``i``
    has value ``coords[i]``, gradient ``axis_scale[i] * e_i`` and a zero
    second-order part.  ``axis_scale`` lets the jets measure derivatives with
    respect to a rescaled coordinate; a TRACE layout then yields the weighted
    Laplacian ``sum_i axis_scale[i]**2 d2/du_i^2``.
    """
    coords = [np.asarray(c, dtype=np.float64) for c in coords]
    if len(coords) != 3:
        raise ValueError("need exactly three coordinates")
    if not all(np.all(np.isfinite(c)) for c in coords):
        raise NonFiniteError("jet_seed", "coordinates must be finite")
    shape = np.broadcast_shapes(*(c.shape for c in coords))
    jets = []
    for i, c in enumerate(coords):
        data = np.zeros((layout.n_components,) + shape)
        data[0] = c
        data[1 + i] = axis_scale[i]
        jets.append(Jet3(record_leaf(data, graph), layout))
    return jets


def _same_layout(*jets: Jet3) -> JetLayout:
    layout = jets[0].layout
    for j in jets[1:]:
        if j.layout != layout:
            raise ValueError("jets have different layouts")
    _graph_of(*(j.data for j in jets))
    return layout


def jet_add(a: Jet3, b: Jet3) -> Jet3:
    layout = _same_layout(a, b)
    return Jet3(add(a.data, b.data), layout)


def jet_sub(a: Jet3, b: Jet3) -> Jet3:
    layout = _same_layout(a, b)
    return Jet3(sub(a.data, b.data), layout)


def jet_scale(a: Jet3, c: float) -> Jet3:
    return Jet3(scale(a.data, c), a.layout)


def jet_mul(a: Jet3, b: Jet3) -> Jet3:
    """Product rule, including the ``g_a g_b^T + g_b g_a^T`` Hessian cross term."""
    layout = _same_layout(a, b)
    A, B = a.data.value, b.data.value
    av, bv = A[0], B[0]
    out = A * bv + B * av
    out[0] = av * bv
    out[4:] += 2.0 * _sym(layout, A[1:4], B[1:4])

    def vjp(G):
        # every component c >= 1 has the form A_c*bv + B_c*av (+ cross terms)
        ga = G * bv
        gb = G * av
        ga[0] = G[0] * bv + np.sum(G[1:] * B[1:], axis=0)
        gb[0] = G[0] * av + np.sum(G[1:] * A[1:], axis=0)
        ga[1:4] += 2.0 * _sym_vjp(layout, G[4:], B[1:4])
        gb[1:4] += 2.0 * _sym_vjp(layout, G[4:], A[1:4])
        return ga, gb

    return Jet3(_node(out, (a.data, b.data), vjp, "jet_mul"), layout)


def _sin_jet(layout: JetLayout, J):
    v = J[0]
    s, c = np.sin(v), np.cos(v)
    out = J * c
    out[0] = s
    q = _sym(layout, J[1:4], J[1:4])
    out[4:] -= s * q
    return out, s, c, q


def _sin_jet_vjp(layout: JetLayout, J, G, s, c, q):
    grad = G * c
    # d/dv: value c*G0; gradient -s*g*G_g; second order (-s*h - c*q)*G_h
    gv = c * G[0] - s * np.sum(J[1:4] * G[1:4], axis=0)
    gv -= np.sum((s * J[4:] + c * q) * G[4:], axis=0)
    grad[0] = gv
    grad[1:4] -= 2.0 * _sym_vjp(layout, s * G[4:], J[1:4])
    return grad


def jet_sin(a: Jet3) -> Jet3:
    """``sin`` with ``g' = cos(v) g`` and ``h' = cos(v) h - sin(v) g g^T``."""
    layout = a.layout
    J = a.data.value
    out, s, c, q = _sin_jet(layout, J)
    return Jet3(_node(out, (a.data,), lambda G: (_sin_jet_vjp(layout, J, G, s, c, q),), "jet_sin"),
                layout)


def jet_affine(x: Jet3, weight: Var, bias: Var | None = None, factor: float = 1.0) -> Jet3:
    """Dense layer on a jet whose batch is ``(n, fan_in)``: ``factor * (x W^T + b)``.

    The bias only enters the value component.
    """
    layout = x.layout
    X = x.data.value
    W = _val(weight)
    C = X.shape[0]
    flat = X.reshape(-1, X.shape[-1])
    out = (flat @ W.T).reshape(X.shape[:-1] + (W.shape[0],))
    if bias is not None:
        out[0] += _val(bias)
    if factor != 1.0:
        out *= factor

    def vjp(G):
        if factor != 1.0:
            G = G * factor
        Gf = G.reshape(-1, G.shape[-1])
        gx = (Gf @ W).reshape(X.shape)
        gw = Gf.T @ flat
        gb = G[0].reshape(-1, G.shape[-1]).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    del C
    return Jet3(_node(out, (x.data, weight, bias), vjp, "jet_affine"), layout)


def jet_combine(jets: Sequence[Jet3], coeffs: Sequence[float], const: float = 0.0) -> Jet3:
    """``sum_k coeffs[k] * jets[k] + const`` for jets sharing a batch shape."""
    layout = _same_layout(*jets)
    acc = jet_scale(jets[0], coeffs[0])
    for j, c in zip(jets[1:], coeffs[1:]):
        acc = jet_add(acc, jet_scale(j, c))
    if const:
        shift = np.zeros(acc.data.shape)
        shift[0] = const
        acc = Jet3(add(acc.data, shift), layout)
    return acc


_JET_OPS = {
    "add": jet_add,
    "sub": jet_sub,
    "mul": jet_mul,
    "scale": jet_scale,
    "sin": jet_sin,
    "affine": jet_combine,
}


def jet_arith(kind: str, *operands, **kwargs) -> Jet3:
    """Dispatch a jet operation by name: add, sub, mul, scale, sin, affine."""
    try:
        fn = _JET_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown jet operation '{kind}'") from None
    return fn(*operands, **kwargs)


def laplacian(j: Jet3) -> Var:
    """Sum of the pure second derivatives as a graph node."""
    layout = j.layout
    if layout == TRACE:
        return j.data[4]
    idx = [4 + k for k, slot in enumerate(layout.slots) if slot[0][0] == slot[0][1]]
    D = j.data.value
    shape = D.shape

    def vjp(g):
        out = np.zeros(shape, dtype=D.dtype)
        for i in idx:
            out[i] = g
        return (out,)

    return _node(sum(D[i] for i in idx), (j.data,), vjp, "laplacian")


def jet_input(points, graph: Graph, layout: JetLayout = TRACE, axis_scale=(1.0, 1.0, 1.0),
              dtype=np.float64) -> Jet3:
    """Seed a batch of 3D points as one jet with batch shape ``(n, 3)``.

    Column ``i`` is the seeded coordinate ``i`` (see :func:`jet_seed`).
    """
    points = np.asarray(points, dtype=dtype)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise NonFiniteError("jet_input", "coordinates must be finite")
    data = np.zeros((layout.n_components,) + points.shape, dtype=points.dtype)
    data[0] = points
    for i in range(3):
        data[1 + i, :, i] = axis_scale[i]
    return Jet3(record_leaf(data, graph), layout)



def jet_apply(a: Jet3, derivs, name: str = "jet_apply") -> Jet3:
    """Elementwise function given ``derivs = (f, df, d2f, d3f)``.

    ``g' = df(v) g`` and ``h' = df(v) h + d2f(v) g g^T``; the third
    derivative enters the adjoint of the second-order part.
    """
    f, d1, d2, d3 = derivs
    layout = a.layout
    J = a.data.value
    v = J[0]
    f0, f1, f2 = f(v), d1(v), d2(v)
    q = _sym(layout, J[1:4], J[1:4])
    out = J * f1
    out[0] = f0
    out[4:] += f2 * q

    def vjp(G):
        f3 = d3(v)
        grad = G * f1
        gv = f1 * G[0] + f2 * np.sum(J[1:4] * G[1:4], axis=0)
        gv += np.sum((f2 * J[4:] + f3 * q) * G[4:], axis=0)
        grad[0] = gv
        grad[1:4] += 2.0 * _sym_vjp(layout, f2 * G[4:], J[1:4])
        return (grad,)

    return Jet3(_node(out, (a.data,), vjp, name), layout)


def jet_exp(a: Jet3) -> Jet3:
    return jet_apply(a, (np.exp, np.exp, np.exp, np.exp), "jet_exp")


def jet_cos(a: Jet3) -> Jet3:
    return jet_apply(a, (np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v), np.sin), "jet_cos")
