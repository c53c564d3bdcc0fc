"""A small reverse-mode tape over dense matrix operations.

Only the operations needed to assemble the condensed MPC problem are
supported. Expensive solvers (DARE, QP) plug in as custom nodes whose
backward rule is looked up by name in a registry::

    tape = Tape()
    a = tape.param(A)
    b = tape.const(B)
    y = tape.matmul(a, b)
    grads = tape.backward(y, np.ones_like(y.value))
    grads[a.id]
"""
import numpy as np

KINDS = (
    "input",
    "add",
    "sub",
    "matmul",
    "transpose",
    "scalar-mul",
    "matrix-power-chain",
    "concat-block",
    "custom",
)

_RULES = {}


class GraphError(Exception):
    pass


def register_rule(name, rule):
    """Register ``rule(ctx, parent_values, adjoint) -> list of parent adjoints``."""
    _RULES[name] = rule


def unregister_rule(name):
    _RULES.pop(name, None)


class Node:
    __slots__ = ("id", "kind", "parents", "value", "requires_grad", "attrs", "tape")

    def __init__(self, tape, id, kind, parents, value, requires_grad, attrs=None):
        self.tape = tape
        self.id = id
        self.kind = kind
        self.parents = tuple(parents)
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs or {}

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    @property
    def T(self):
        return self.tape.transpose(self)

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.shape})"


class Tape:
    """Topologically ordered record of one forward pass."""

    def __init__(self):
        self.nodes = []
        self.adjoints = {}

    def _record(self, kind, parents, value, attrs=None, requires_grad=None):
        for p in parents:
            if p.tape is not self:
                raise GraphError("parent node belongs to a different tape")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), kind, parents, value, requires_grad, attrs)
        self.nodes.append(node)
        return node

    # --- leaves -----------------------------------------------------------

    def input(self, value, requires_grad=True, name=None):
        value = np.array(value, dtype=float)
        if value.ndim == 1:
            value = value.reshape(-1, 1)
        if value.ndim != 2:
            raise GraphError(f"inputs must be matrices, got ndim={value.ndim}")
        return self._record("input", (), value, {"name": name}, requires_grad)

    def param(self, value, name=None):
        return self.input(value, True, name)

    def const(self, value, name=None):
        return self.input(value, False, name)

    # --- built-in operations ----------------------------------------------

    def add(self, a, b):
        _same_shape("add", a, b)
        return self._record("add", (a, b), a.value + b.value)

    def sub(self, a, b):
        _same_shape("sub", a, b)
        return self._record("sub", (a, b), a.value - b.value)

    def matmul(self, a, b):
        if a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        return self._record("matmul", (a, b), a.value @ b.value)

    def transpose(self, a):
        return self._record("transpose", (a,), a.value.T.copy())

    def scale(self, a, alpha):
        alpha = float(alpha)
        return self._record("scalar-mul", (a,), alpha * a.value, {"alpha": alpha})

    def power_chain(self, a, x, count, start=0):
        """Stack ``[a^start x; a^(start+1) x; ...]`` with ``count`` blocks."""
        if a.shape[0] != a.shape[1]:
            raise GraphError(f"power chain needs a square matrix, got {a.shape}")
        if a.shape[1] != x.shape[0]:
            raise GraphError(f"power chain: {a.shape} cannot multiply {x.shape}")
        if count < 1 or start < 0:
            raise GraphError("power chain needs count >= 1 and start >= 0")
        powers = [x.value]
        for _ in range(start + count - 1):
            powers.append(a.value @ powers[-1])
        value = np.vstack(powers[start:])
        return self._record(
            "matrix-power-chain", (a, x), value,
            {"start": start, "count": count, "powers": powers},
        )

    def concat(self, grid, row_sizes=None, col_sizes=None):
        """Block matrix from a grid of nodes; ``None`` entries are zero blocks."""
        nr, nc = len(grid), len(grid[0])
        if any(len(row) != nc for row in grid):
            raise GraphError("concat: ragged block grid")
        rows = list(row_sizes) if row_sizes is not None else [None] * nr
        cols = list(col_sizes) if col_sizes is not None else [None] * nc
        for i, row in enumerate(grid):
            for j, blk in enumerate(row):
                if blk is None:
                    continue
                r, c = blk.shape
                if rows[i] is None:
                    rows[i] = r
                if cols[j] is None:
                    cols[j] = c
                if (rows[i], cols[j]) != (r, c):
                    raise GraphError(
                        f"concat: block ({i},{j}) has shape {(r, c)}, expected {(rows[i], cols[j])}")
        if None in rows or None in cols:
            raise GraphError("concat: an all-zero block row/column needs an explicit size")
        roff = np.concatenate([[0], np.cumsum(rows)]).astype(int)
        coff = np.concatenate([[0], np.cumsum(cols)]).astype(int)
        value = np.zeros((roff[-1], coff[-1]))
        parents, slots = [], []
        for i, row in enumerate(grid):
            for j, blk in enumerate(row):
                if blk is None:
                    continue
                sl = (slice(roff[i], roff[i + 1]), slice(coff[j], coff[j + 1]))
                value[sl] = blk.value
                parents.append(blk)
                slots.append(sl)
        return self._record("concat-block", parents, value, {"slots": slots})

    def vstack(self, blocks):
        return self.concat([[b] for b in blocks])

    def hstack(self, blocks):
        return self.concat([list(blocks)])

    def custom(self, name, parents, value, ctx=None):
        """Record a node whose value was computed outside the tape."""
        value = np.asarray(value, dtype=float)
        if value.ndim != 2:
            raise GraphError("custom node values must be matrices")
        return self._record("custom", parents, value, {"rule": name, "ctx": ctx})

    # --- reverse pass -----------------------------------------------------

    def backward(self, seed, seed_adjoint=None):
        """Accumulate adjoints of every node that ``seed`` depends on.

        Returns the adjoint map ``node id -> matrix``.
        """
        if seed_adjoint is None:
            if seed.shape != (1, 1):
                raise GraphError("a seed adjoint is required for non-scalar seeds")
            seed_adjoint = np.ones((1, 1))
        seed_adjoint = np.asarray(seed_adjoint, dtype=float)
        if seed_adjoint.shape != seed.shape:
            raise GraphError(f"seed adjoint shape {seed_adjoint.shape} != {seed.shape}")
        adj = {seed.id: seed_adjoint.copy()}
        for node in reversed(self.nodes[: seed.id + 1]):
            g = adj.get(node.id)
            if g is None or not node.requires_grad or node.kind == "input":
                continue
            for parent, pg in zip(node.parents, self._parent_adjoints(node, g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in adj:
                    adj[parent.id] = adj[parent.id] + pg
                else:
                    adj[parent.id] = pg
        self.adjoints = adj
        return adj

    def grad(self, node):
        g = self.adjoints.get(node.id)
        return np.zeros_like(node.value) if g is None else g

    def _parent_adjoints(self, node, g):
        kind = node.kind
        if kind == "add":
            return g, g
        if kind == "sub":
            return g, -g
        if kind == "matmul":
            a, b = node.parents
            return (g @ b.value.T if a.requires_grad else None,
                    a.value.T @ g if b.requires_grad else None)
        if kind == "transpose":
            return (g.T,)
        if kind == "scalar-mul":
            return (node.attrs["alpha"] * g,)
        if kind == "matrix-power-chain":
            return _power_chain_backward(node, g)
        if kind == "concat-block":
            return [g[sl] for sl in node.attrs["slots"]]
        if kind == "custom":
            name = node.attrs["rule"]
            rule = _RULES.get(name)
            if rule is None:
                raise GraphError(f"no backward rule registered for custom node {name!r}")
            out = rule(node.attrs["ctx"], [p.value for p in node.parents], g)
            if len(out) != len(node.parents):
                raise GraphError(f"rule {name!r} returned {len(out)} adjoints for {len(node.parents)} parents")
            return out
        raise GraphError(f"unknown node kind {kind!r}")


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise GraphError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _power_chain_backward(node, g):
    a, x = node.parents
    start, count = node.attrs["start"], node.attrs["count"]
    powers = node.attrs["powers"]
    rows = x.shape[0]
    A = a.value
    adj_a = np.zeros_like(A)
    # lam_j is the adjoint of W_j = A^j x, walked from the last power down.
    last = start + count - 1
    lam = g[(last - start) * rows:(last - start + 1) * rows].copy()
    for j in range(last - 1, -1, -1):
        adj_a += lam @ powers[j].T
        lam = A.T @ lam
        if j >= start:
            lam += g[(j - start) * rows:(j - start + 1) * rows]
    return adj_a, lam
