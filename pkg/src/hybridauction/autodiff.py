"""Small define-then-run reverse-mode differentiation over dense matrices.

Every value is a stack of matrices with shape ``(batch, rows, cols)``. The
batch axis only vectorizes independent samples; parameters are bound with
batch size 1 and their gradients are summed over the batch. Elementwise
operands may broadcast along any axis of size 1 (row vectors, column vectors,
per-sample scalars, batch-shared parameters); any other shape mix is rejected.

Example::

    g = Graph()
    x = g.input("x")
    w = g.param("w")
    y = g.sum(g.tanh(g.matmul(x, w)))
    ev = g.forward({"x": X, "w": W})
    grads = g.backward(ev, y, wrt=[w])
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node: "Node"):
        super().__init__(f"non-finite value at node {node.id} ({node.op}{' ' + node.name if node.name else ''})")
        self.node = node


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: str = ""

    def __repr__(self):
        return f"Node({self.id}, {self.op}{', ' + self.name if self.name else ''})"


def _as3(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1, 1)
    if a.ndim == 2:
        return a[None]
    if a.ndim != 3:
        raise ShapeError(f"expected a matrix or a batch of matrices, got ndim={a.ndim}")
    return a


def _check_broadcast(a: np.ndarray, b: np.ndarray, node: Node) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"node {node.id} ({node.op}): incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _bmm(a, b):
    # a batch of row blocks times one shared matrix is a single 2-d product
    if b.shape[0] == 1 and a.shape[0] > 1:
        return (a.reshape(-1, a.shape[2]) @ b[0]).reshape(a.shape[0], a.shape[1], b.shape[2])
    return a @ b


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class Evaluation:
    """Values (and cached partials) of one forward pass."""

    def __init__(self, graph: "Graph"):
        self.graph = graph
        self.values: list = [None] * len(graph.nodes)
        self.cache: dict = {}

    def __getitem__(self, node: Node) -> np.ndarray:
        return self.values[node.id]


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, Node] = {}

    # construction ---------------------------------------------------------
    def _add(self, op, parents=(), name="", **attrs) -> Node:
        for p in parents:
            if not isinstance(p, Node) or self.nodes[p.id] is not p:
                raise ValueError(f"operand {p!r} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(parents), attrs, name)
        self.nodes.append(node)
        return node

    def input(self, name: str) -> Node:
        if name in self._names:
            raise ValueError(f"duplicate input name {name!r}")
        node = self._add("input", name=name)
        self._names[name] = node
        return node

    param = input

    def constant(self, value, name: str = "") -> Node:
        return self._add("const", name=name, value=_as3(value))

    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def affine(self, x, w, b):
        """``x @ w + b`` with ``b`` a row vector."""
        return self._add("affine", (x, w, b))

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def scale(self, a, c: float):
        return self._add("scale", (a,), c=float(c))

    def tanh(self, a):
        return self._add("tanh", (a,))

    def sigmoid(self, a):
        return self._add("sigmoid", (a,))

    def row_softmax(self, a):
        return self._add("row_softmax", (a,))

    def col_softmax(self, a):
        return self._add("col_softmax", (a,))

    def total_softmax(self, a):
        """Softmax over all entries of each matrix."""
        return self._add("total_softmax", (a,))

    def minimum(self, a, b):
        return self._add("minimum", (a, b))

    def sum(self, a):
        return self._add("sum", (a,))

    def reshape(self, a, rows: int, cols: int):
        return self._add("reshape", (a,), shape=(rows, cols))

    def slice(self, a, rows=None, cols=None):
        return self._add("slice", (a,), rows=rows or slice(None), cols=cols or slice(None))

    def concat(self, parts, axis: str):
        if axis not in ("rows", "cols"):
            raise ValueError("axis must be 'rows' or 'cols'")
        return self._add("concat", tuple(parts), axis=1 if axis == "rows" else 2)

    def mask(self, a, mask, fill: float = -1e9):
        """Replace entries where ``mask`` is 0 by adding ``fill`` (logit masking)."""
        return self._add("mask", (a, mask), fill=float(fill))

    # evaluation -----------------------------------------------------------
    def forward(self, bindings: dict, check_finite: bool = True) -> Evaluation:
        ev = Evaluation(self)
        vals = ev.values
        for node in self.nodes:
            op = node.op
            if op == "input":
                if node.name not in bindings:
                    raise KeyError(f"input {node.name!r} is not bound")
                out = _as3(bindings[node.name])
            else:
                args = [vals[p.id] for p in node.parents]
                out = self._forward_op(node, args, ev)
            if check_finite and not np.isfinite(out).all():
                raise NonFiniteError(node)
            vals[node.id] = out
        return ev

    def _forward_op(self, node: Node, args, ev: Evaluation) -> np.ndarray:
        op = node.op
        if op == "const":
            return node.attrs["value"]
        if op in ("matmul", "affine"):
            a, b = args[0], args[1]
            if a.shape[2] != b.shape[1] or (a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0])):
                raise ShapeError(f"node {node.id} ({op}): cannot multiply {a.shape} by {b.shape}")
            out = _bmm(a, b)
            if op == "affine":
                bias = args[2]
                if bias.shape[1] != 1 or bias.shape[2] != out.shape[2]:
                    raise ShapeError(f"node {node.id}: offset must be a row vector of width {out.shape[2]}")
                out = out + bias
            return out
        if op in ("add", "sub", "mul", "minimum"):
            a, b = args
            _check_broadcast(a, b, node)
            if op == "add":
                return a + b
            if op == "sub":
                return a - b
            if op == "mul":
                return a * b
            pick_first = a <= b
            ev.cache[node.id] = pick_first
            return np.where(pick_first, a, b)
        if op == "scale":
            return node.attrs["c"] * args[0]
        if op == "tanh":
            return np.tanh(args[0])
        if op == "sigmoid":
            x = args[0]
            # split by sign so exp never overflows
            e = np.exp(-np.abs(x))
            return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        if op == "row_softmax":
            return _softmax(args[0], 2)
        if op == "col_softmax":
            return _softmax(args[0], 1)
        if op == "total_softmax":
            x = args[0]
            flat = _softmax(x.reshape(x.shape[0], 1, -1), 2)
            return flat.reshape(x.shape)
        if op == "sum":
            return args[0].sum(axis=(1, 2), keepdims=True)
        if op == "reshape":
            x = args[0]
            r, c = node.attrs["shape"]
            if x.shape[1] * x.shape[2] != r * c:
                raise ShapeError(f"node {node.id}: cannot reshape {x.shape[1:]} to {(r, c)}")
            return x.reshape(x.shape[0], r, c)
        if op == "slice":
            return args[0][:, node.attrs["rows"], node.attrs["cols"]]
        if op == "concat":
            axis = node.attrs["axis"]
            batch = max(a.shape[0] for a in args)
            other = 3 - axis
            if len({a.shape[other] for a in args}) != 1:
                raise ShapeError(f"node {node.id}: concat operands disagree on the other axis")
            parts = [np.broadcast_to(a, (batch,) + a.shape[1:]) for a in args]
            return np.concatenate(parts, axis=axis)
        if op == "mask":
            a, m = args
            _check_broadcast(a, m, node)
            return a + (1.0 - m) * node.attrs["fill"]
        raise ValueError(f"unknown op {op!r}")

    def backward(self, ev: Evaluation, output, seed=None, wrt=()) -> dict:
        """Gradients of ``sum(seed * output)`` with respect to each node in ``wrt``.

        ``output`` may also be a ``{node: seed}`` mapping; the seeded outputs
        are then summed into one scalar objective.
        """
        if ev.graph is not self:
            raise ValueError("evaluation belongs to another graph")
        seeds = dict(output) if isinstance(output, dict) else {output: seed}
        for node in (*seeds, *wrt):
            if not isinstance(node, Node) or node.id >= len(self.nodes) or self.nodes[node.id] is not node:
                raise ValueError(f"{node!r} is not a node of this graph")
        vals = ev.values
        wanted = {n.id for n in wrt}
        last = max(n.id for n in seeds)
        needs = [False] * len(self.nodes)
        for node in self.nodes[: last + 1]:
            needs[node.id] = node.id in wanted or any(needs[p.id] for p in node.parents)
        grads: dict[int, np.ndarray] = {}
        for node, s in seeds.items():
            out_val = vals[node.id]
            s = np.ones_like(out_val) if s is None else np.broadcast_to(_as3(s), out_val.shape)
            grads[node.id] = grads[node.id] + s if node.id in grads else np.array(s, dtype=np.float64)
        for node in reversed(self.nodes[: last + 1]):
            g = grads.get(node.id)
            if g is None or not node.parents or not needs[node.id]:
                continue
            if node.id not in wanted:
                del grads[node.id]
            for parent, pg in zip(node.parents, self._backward_op(node, g, ev, needs)):
                if pg is None or not needs[parent.id]:
                    continue
                pg = _unbroadcast(pg, vals[parent.id].shape)
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return {n: grads.get(n.id, np.zeros_like(vals[n.id])) for n in wrt}

    def _backward_op(self, node: Node, g: np.ndarray, ev: Evaluation, needs) -> list:
        op = node.op
        vals = ev.values
        args = [vals[p.id] for p in node.parents]
        want = [needs[p.id] for p in node.parents]
        out = vals[node.id]
        if op in ("matmul", "affine"):
            a, b = args[0], args[1]
            ga = gb = None
            # contract the batch axis directly for batch-shared operands
            if want[0]:
                if a.shape[0] == 1 and g.shape[0] > 1:
                    if b.shape[0] > 1:
                        ga = np.tensordot(g, b, axes=([0, 2], [0, 2]))[None]
                    else:
                        ga = (g.sum(axis=0) @ b[0].T)[None]
                else:
                    ga = _bmm(g, np.swapaxes(b, 1, 2))
            if want[1]:
                if b.shape[0] == 1 and g.shape[0] > 1:
                    if a.shape[0] > 1:
                        gb = (a.reshape(-1, a.shape[2]).T @ g.reshape(-1, g.shape[2]))[None]
                    else:
                        gb = (a[0].T @ g.sum(axis=0))[None]
                else:
                    gb = np.swapaxes(a, 1, 2) @ g
            if op == "affine":
                return [ga, gb, g if want[2] else None]
            return [ga, gb]
        if op == "add":
            return [g, g]
        if op == "sub":
            return [g, -g]
        if op == "mul":
            a, b = args
            return [g * b if want[0] else None, g * a if want[1] else None]
        if op == "minimum":
            pick_first = ev.cache[node.id]
            return [np.where(pick_first, g, 0.0), np.where(pick_first, 0.0, g)]
        if op == "scale":
            return [node.attrs["c"] * g]
        if op == "tanh":
            return [g * (1.0 - out * out)]
        if op == "sigmoid":
            return [g * out * (1.0 - out)]
        if op == "row_softmax":
            return [out * (g - (g * out).sum(axis=2, keepdims=True))]
        if op == "col_softmax":
            return [out * (g - (g * out).sum(axis=1, keepdims=True))]
        if op == "total_softmax":
            return [out * (g - (g * out).sum(axis=(1, 2), keepdims=True))]
        if op == "sum":
            return [np.broadcast_to(g, args[0].shape)]
        if op == "reshape":
            return [g.reshape(g.shape[0], *args[0].shape[1:])]
        if op == "slice":
            x = args[0]
            full = np.zeros((g.shape[0],) + x.shape[1:])
            full[:, node.attrs["rows"], node.attrs["cols"]] = g
            return [full]
        if op == "concat":
            axis = node.attrs["axis"]
            splits = np.cumsum([a.shape[axis] for a in args])[:-1]
            return np.split(g, splits, axis=axis)
        if op == "mask":
            return [g, None]
        raise ValueError(f"no backward rule for {op!r}")

    def min_selections(self, ev: Evaluation) -> dict:
        """Operand choices of every ``minimum`` node in a forward pass."""
        return {nid: sel for nid, sel in ev.cache.items() if self.nodes[nid].op == "minimum"}


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    passed: bool


@dataclass
class GradCheckReport:
    blocks: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def worst(self) -> float:
        checked = [b.max_rel_error for b in self.blocks if b.n_checked]
        return max(checked, default=0.0)

    @property
    def nondifferentiable(self) -> bool:
        return any(b.n_excluded for b in self.blocks)


def grad_check(
    graph: Graph,
    bindings: dict,
    output: Node,
    wrt,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed=None,
    max_coords: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    ``wrt`` is a sequence of input nodes. Relative error of a block is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    A coordinate whose perturbation flips the operand chosen by any
    ``minimum`` node sits on a kink; it is excluded and counted instead.
    ``max_coords`` subsamples coordinates per block using ``rng``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    base = {k: _as3(v).copy() for k, v in bindings.items()}
    ev = graph.forward(base)
    seed_arr = np.ones_like(ev[output]) if seed is None else np.broadcast_to(_as3(seed), ev[output].shape)
    analytic = graph.backward(ev, output, seed=seed_arr, wrt=list(wrt))
    base_sel = graph.min_selections(ev)

    def f(b):
        e = graph.forward(b)
        flipped = any(not np.array_equal(e.cache[k], v) for k, v in base_sel.items())
        return float((seed_arr * e[output]).sum()), flipped

    blocks = []
    for node in wrt:
        x = base[node.name]
        coords = list(np.ndindex(*x.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        ga = analytic[node]
        num, ana, excluded = [], [], 0
        for c in coords:
            orig = x[c]
            x[c] = orig + h
            fp, flip_p = f(base)
            x[c] = orig - h
            fm, flip_m = f(base)
            x[c] = orig
            if flip_p or flip_m:
                excluded += 1
                continue
            num.append((fp - fm) / (2 * h))
            ana.append(ga[c])
        num, ana = np.asarray(num), np.asarray(ana)
        if len(num):
            scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
            err = float(np.abs(num - ana).max() / scale)
        else:
            err = 0.0
        blocks.append(BlockReport(node.name, err, len(num), excluded, err < tol))
    return GradCheckReport(blocks, tol)
