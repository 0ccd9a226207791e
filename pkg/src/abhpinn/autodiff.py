"""Reverse-mode automatic differentiation on an explicit, replayable tape.

The solver needs exact first- and second-order partials of network outputs
with respect to network *inputs* (wealth, productivity, time), and first-order
gradients of scalar losses with respect to network *parameters*. Both come out
of one mechanism: every primitive operation is recorded as a `DiffNode` on a
`Tape`, and a backward pass is itself recorded as new nodes on the same tape,
so differentiating twice is just running the backward pass over a previous
backward pass (reverse-over-reverse). No hand-coded Hessian rules.

Values are float64 numpy arrays. A node is a scalar computation per
collocation point; arrays batch that scalar program over many points at once
(the graph shape is identical across points, only the numbers differ). A
handful of structural primitives (`matmul`, `transpose`, `sum`, column
pack/unpack) exist so a dense layer is one node instead of thousands; the
math semantics per point are unchanged.

Derivative conventions:
  * `max_const` / `min_const` use the right-hand derivative at the kink.
  * Gate nodes (the 0/1 masks behind the kinks) propagate no gradient, so the
    second derivative through a hinge is zero almost everywhere, matching the
    subgradient convention.

Replaying a tape with `forward` recomputes every node in creation order and
is bitwise deterministic for identical inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError

__all__ = [
    "DiffNode",
    "Tape",
    "forward",
    "gradient",
    "grad_nodes",
    "second_partial",
    "param_gradient",
    "backward_values",
    "tanh",
    "softplus",
    "exp",
    "log",
    "recip",
    "pow_const",
    "max_const",
    "min_const",
]

_LEAF_OPS = ("constant", "input")


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


class DiffNode:
    """One recorded operation: value, operation tag, parents and local metadata.

    Nodes are append-only and acyclic: parents always precede children on the
    tape, so a single reverse sweep over indices is a valid reverse
    topological order.
    """

    __slots__ = ("tape", "idx", "op", "parents", "value", "const", "input_id")

    def __init__(self, tape, idx, op, parents, value, const=None, input_id=None):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.value = value
        self.const = const
        self.input_id = input_id

    def local_partials(self):
        """Partial of this node's value w.r.t. each parent, as plain arrays.

        Recomputable from stored state; used by introspection and tests, not
        by the backward passes (those build the same quantities as nodes).
        """
        rule = _VJP_VALUE.get(self.op)
        if rule is None:
            return []
        ones = np.ones_like(self.value)
        return [
            np.zeros_like(p.value) if g is None else g
            for p, g in zip(self.parents, rule(self, ones))
        ]

    # -- arithmetic sugar -------------------------------------------------
    def _lift(self, other):
        if isinstance(other, DiffNode):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __neg__(self):
        return self.tape.neg(self)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.neg(self._lift(other)))

    def __rsub__(self, other):
        return self.tape.add(self._lift(other), self.tape.neg(self))

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.mul(self, self.tape.recip(self._lift(other)))

    def __rtruediv__(self, other):
        return self.tape.mul(self._lift(other), self.tape.recip(self))

    def __pow__(self, exponent):
        return self.tape.pow_const(self, float(exponent))

    def __repr__(self):
        return f"DiffNode(idx={self.idx}, op={self.op!r}, shape={np.shape(self.value)})"


def _compute(op, pv, const):
    """Forward rule for one operation given parent values. Single source of
    truth for both eager evaluation and tape replay. Non-finite results are
    produced silently here and reported by the tape's finiteness check."""
    if op == "add":
        return pv[0] + pv[1]
    if op == "mul":
        return pv[0] * pv[1]
    if op == "neg":
        return -pv[0]
    if op == "recip":
        return 1.0 / pv[0]
    if op == "pow_const":
        return pv[0] ** const
    if op == "exp":
        return np.exp(pv[0])
    if op == "log":
        return np.log(pv[0])
    if op == "tanh":
        return np.tanh(pv[0])
    if op == "softplus":
        return np.logaddexp(0.0, pv[0])
    if op == "max_const":
        return np.maximum(pv[0], const)
    if op == "min_const":
        return np.minimum(pv[0], const)
    if op == "gate_ge":
        return (pv[0] >= const).astype(np.float64)
    if op == "gate_lt":
        return (pv[0] < const).astype(np.float64)
    if op == "matmul":
        return pv[0] @ pv[1]
    if op == "transpose":
        return pv[0].T
    if op == "sum":
        axis, keepdims = const
        return np.sum(pv[0], axis=axis, keepdims=keepdims)
    if op == "take_col":
        return pv[0][:, const : const + 1]
    if op == "pad_col":
        j, n = const
        out = np.zeros((pv[0].shape[0], n))
        out[:, j : j + 1] = pv[0]
        return out
    raise ConfigError(f"unknown operation {op!r}")


class Tape:
    """Append-only record of a differentiable computation.

    `check_finite=True` validates every node value as it is computed and
    raises `NumericError` with the offending node index. Hot loops may switch
    it off and re-run a failing tape with checking on to localize a fault.
    """

    def __init__(self, check_finite=True):
        self.nodes = []
        self.inputs = {}
        self.root = None
        self.check_finite = check_finite

    # -- construction -----------------------------------------------------
    def _append(self, op, parents, value, const=None, input_id=None):
        if self.check_finite and value is not None and not np.all(np.isfinite(value)):
            bad = np.argwhere(~np.isfinite(np.atleast_1d(value)))
            raise NumericError(
                f"non-finite value in op {op!r} at node {len(self.nodes)}",
                node_index=len(self.nodes),
                point_index=int(bad[0][0]) if bad.size else None,
            )
        node = DiffNode(self, len(self.nodes), op, parents, value, const, input_id)
        self.nodes.append(node)
        return node

    def _node(self, op, parents, const=None):
        pv = [p.value for p in parents]
        with np.errstate(all="ignore"):
            value = _compute(op, pv, const)
        return self._append(op, tuple(parents), value, const)

    def constant(self, x):
        return self._append("constant", (), _as_value(x))

    def input(self, input_id, value=None):
        if input_id in self.inputs:
            raise ConfigError(f"duplicate input id {input_id!r}")
        node = self._append(
            "input", (), None if value is None else _as_value(value), input_id=input_id
        )
        self.inputs[input_id] = node
        return node

    def set_root(self, node):
        self.root = node
        return node

    # -- primitives ---------------------------------------------------------
    def add(self, p, q):
        return self._node("add", (p, q))

    def mul(self, p, q):
        return self._node("mul", (p, q))

    def neg(self, p):
        return self._node("neg", (p,))

    def recip(self, p):
        return self._node("recip", (p,))

    def pow_const(self, p, exponent):
        return self._node("pow_const", (p,), float(exponent))

    def exp(self, p):
        return self._node("exp", (p,))

    def log(self, p):
        return self._node("log", (p,))

    def tanh(self, p):
        return self._node("tanh", (p,))

    def softplus(self, p):
        return self._node("softplus", (p,))

    def max_const(self, p, bound):
        return self._node("max_const", (p,), float(bound))

    def min_const(self, p, bound):
        return self._node("min_const", (p,), float(bound))

    def gate_ge(self, p, bound):
        return self._node("gate_ge", (p,), float(bound))

    def gate_lt(self, p, bound):
        return self._node("gate_lt", (p,), float(bound))

    def matmul(self, p, q):
        return self._node("matmul", (p, q))

    def transpose(self, p):
        return self._node("transpose", (p,))

    def sum(self, p, axis=None, keepdims=False):
        # vjp broadcasting is only valid for full sums, leading-axis sums,
        # or kept dimensions; other shapes are never needed here.
        if axis not in (None, 0) and not keepdims:
            raise ConfigError("sum over a trailing axis requires keepdims=True")
        return self._node("sum", (p,), (axis, keepdims))

    def mean(self, p):
        n = int(np.prod(np.shape(p.value))) or 1
        return self.mul(self.sum(p), self.constant(1.0 / n))

    def take_col(self, p, j):
        return self._node("take_col", (p,), int(j))

    def pad_col(self, p, j, n):
        return self._node("pad_col", (p,), (int(j), int(n)))


# -- free-function spelling of the unary primitives --------------------------


def tanh(p):
    return p.tape.tanh(p)


def softplus(p):
    return p.tape.softplus(p)


def exp(p):
    return p.tape.exp(p)


def log(p):
    return p.tape.log(p)


def recip(p):
    return p.tape.recip(p)


def pow_const(p, exponent):
    return p.tape.pow_const(p, exponent)


def max_const(p, bound):
    return p.tape.max_const(p, bound)


def min_const(p, bound):
    return p.tape.min_const(p, bound)


# -- backward rules -----------------------------------------------------------
#
# Each op has two mirrored rules: a graph rule that appends adjoint nodes
# (differentiable, used for input derivatives so they can be differentiated
# again and reached by the parameter gradient) and a value rule on plain
# arrays (used for the final, outermost gradient). test_autodiff asserts the
# two agree on random composite tapes.


def _unbroadcast_graph(node, shape):
    tape = node.tape
    cur = node
    if cur.value.shape == shape:
        return cur
    if shape == ():
        return tape.sum(cur)
    while cur.value.ndim > len(shape):
        cur = tape.sum(cur, axis=0)
    for i, s in enumerate(shape):
        if s == 1 and cur.value.shape[i] != 1:
            cur = tape.sum(cur, axis=i, keepdims=True)
    return cur


def _unbroadcast_value(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    while g.ndim > len(shape):
        g = np.sum(g, axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = np.sum(g, axis=i, keepdims=True)
    return g


def _sigmoid_graph(p):
    # sigmoid(x) = 0.5 + 0.5*tanh(x/2); stable for all x, built from tape ops
    tape = p.tape
    half = tape.constant(0.5)
    return tape.add(half, tape.mul(half, tape.tanh(tape.mul(p, half))))


def _ones_graph(tape, ref):
    return tape.constant(np.ones_like(ref.value))


def _vjp_graph(node, dy):
    """Adjoint contributions (as nodes) to each parent of `node`."""
    t = node.tape
    op = node.op
    p = node.parents
    if op == "add":
        return (
            _unbroadcast_graph(dy, p[0].value.shape),
            _unbroadcast_graph(dy, p[1].value.shape),
        )
    if op == "mul":
        return (
            _unbroadcast_graph(t.mul(dy, p[1]), p[0].value.shape),
            _unbroadcast_graph(t.mul(dy, p[0]), p[1].value.shape),
        )
    if op == "neg":
        return (t.neg(dy),)
    if op == "recip":
        y2 = t.mul(node, node)
        return (t.neg(t.mul(dy, y2)),)
    if op == "pow_const":
        k = node.const
        return (t.mul(dy, t.mul(t.constant(k), t.pow_const(p[0], k - 1.0))),)
    if op == "exp":
        return (t.mul(dy, node),)
    if op == "log":
        return (t.mul(dy, t.recip(p[0])),)
    if op == "tanh":
        one = t.constant(1.0)
        return (t.mul(dy, t.add(one, t.neg(t.mul(node, node)))),)
    if op == "softplus":
        return (t.mul(dy, _sigmoid_graph(p[0])),)
    if op == "max_const":
        return (t.mul(dy, t.gate_ge(p[0], node.const)),)
    if op == "min_const":
        return (t.mul(dy, t.gate_lt(p[0], node.const)),)
    if op in ("gate_ge", "gate_lt"):
        return (None,)
    if op == "matmul":
        return (
            t.matmul(dy, t.transpose(p[1])),
            t.matmul(t.transpose(p[0]), dy),
        )
    if op == "transpose":
        return (t.transpose(dy),)
    if op == "sum":
        return (t.mul(dy, _ones_graph(t, p[0])),)
    if op == "take_col":
        return (t.pad_col(dy, node.const, p[0].value.shape[1]),)
    if op == "pad_col":
        return (t.take_col(dy, node.const[0]),)
    raise ConfigError(f"no backward rule for op {op!r}")


def _vjp_value_rule(node, g):
    op = node.op
    p = node.parents
    if op == "add":
        return (
            _unbroadcast_value(g, p[0].value.shape),
            _unbroadcast_value(g, p[1].value.shape),
        )
    if op == "mul":
        return (
            _unbroadcast_value(g * p[1].value, p[0].value.shape),
            _unbroadcast_value(g * p[0].value, p[1].value.shape),
        )
    if op == "neg":
        return (-g,)
    if op == "recip":
        return (-g * node.value * node.value,)
    if op == "pow_const":
        k = node.const
        return (g * k * p[0].value ** (k - 1.0),)
    if op == "exp":
        return (g * node.value,)
    if op == "log":
        return (g / p[0].value,)
    if op == "tanh":
        return (g * (1.0 - node.value * node.value),)
    if op == "softplus":
        x = p[0].value
        return (g * (0.5 + 0.5 * np.tanh(0.5 * x)),)
    if op == "max_const":
        return (g * (p[0].value >= node.const),)
    if op == "min_const":
        return (g * (p[0].value < node.const),)
    if op in ("gate_ge", "gate_lt"):
        return (None,)
    if op == "matmul":
        return (g @ p[1].value.T, p[0].value.T @ g)
    if op == "transpose":
        return (g.T,)
    if op == "sum":
        return (g * np.ones_like(p[0].value),)
    if op == "take_col":
        out = np.zeros_like(p[0].value)
        out[:, node.const : node.const + 1] = g
        return (out,)
    if op == "pad_col":
        return (g[:, node.const[0] : node.const[0] + 1],)
    raise ConfigError(f"no backward rule for op {op!r}")


_VJP_VALUE = {
    op: _vjp_value_rule
    for op in (
        "add", "mul", "neg", "recip", "pow_const", "exp", "log", "tanh",
        "softplus", "max_const", "min_const", "gate_ge", "gate_lt",
        "matmul", "transpose", "sum", "take_col", "pad_col",
    )
}


def grad_nodes(root, wrt, seed=None):
    """Reverse sweep from `root`, recording the adjoint computation as new
    nodes on the tape so the result is differentiable again.

    `wrt` is a sequence of leaf nodes; the return list is aligned with it.
    Contributions are accumulated in fixed creation order, so the result is
    deterministic.
    """
    tape = root.tape
    if seed is None:
        seed = tape.constant(np.ones_like(root.value))
    adjoint = {root.idx: seed}
    for idx in range(root.idx, -1, -1):
        g = adjoint.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.op in _LEAF_OPS:
            adjoint[idx] = g  # keep leaf adjoints for collection below
            continue
        for parent, contrib in zip(node.parents, _vjp_graph(node, g)):
            if contrib is None:
                continue
            prev = adjoint.get(parent.idx)
            adjoint[parent.idx] = contrib if prev is None else tape.add(prev, contrib)
    out = []
    for w in wrt:
        g = adjoint.get(w.idx)
        if g is None:
            g = tape.constant(np.zeros_like(w.value))
        out.append(g)
    return out


def backward_values(root, wrt):
    """Plain-array reverse sweep (records nothing). Used for the outermost
    gradient, where no further differentiation is needed."""
    tape = root.tape
    adjoint = {root.idx: np.ones_like(root.value)}
    for idx in range(root.idx, -1, -1):
        g = adjoint.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.op in _LEAF_OPS:
            continue
        del adjoint[idx]
        for parent, contrib in zip(node.parents, _vjp_value_rule(node, g)):
            if contrib is None:
                continue
            prev = adjoint.get(parent.idx)
            adjoint[parent.idx] = contrib if prev is None else prev + contrib
    return [adjoint.get(w.idx, np.zeros_like(w.value)) for w in wrt]


# -- spec surface --------------------------------------------------------------


def forward(tape, input_values=None):
    """Replay the tape: rebind the given inputs, recompute every node in
    creation order, return the root value. Bitwise deterministic."""
    if not tape.nodes:
        raise ConfigError("cannot replay an empty tape")
    input_values = input_values or {}
    for input_id, value in input_values.items():
        if input_id not in tape.inputs:
            raise ConfigError(f"unknown input id {input_id!r}")
        tape.inputs[input_id].value = _as_value(value)
    for node in tape.nodes:
        if node.op == "input":
            if node.value is None:
                raise ConfigError(f"input {node.input_id!r} is unbound")
            continue
        if node.op == "constant":
            continue
        with np.errstate(all="ignore"):
            value = _compute(node.op, [p.value for p in node.parents], node.const)
        if tape.check_finite and not np.all(np.isfinite(value)):
            bad = np.argwhere(~np.isfinite(np.atleast_1d(value)))
            raise NumericError(
                f"non-finite value in op {node.op!r} at node {node.idx}",
                node_index=node.idx,
                point_index=int(bad[0][0]) if bad.size else None,
            )
        node.value = value
    root = tape.root if tape.root is not None else tape.nodes[-1]
    return root.value


def gradient(tape, wrt):
    """Exact reverse-mode partials of the tape root w.r.t. the requested
    input ids. Returns {input_id: value}; unrequested inputs are omitted."""
    root = tape.root if tape.root is not None else tape.nodes[-1]
    ids = list(wrt)
    leaves = []
    for input_id in ids:
        if input_id not in tape.inputs:
            raise ConfigError(f"unknown input id {input_id!r}")
        leaves.append(tape.inputs[input_id])
    nodes = grad_nodes(root, leaves)
    out = {}
    for input_id, node in zip(ids, nodes):
        if not np.all(np.isfinite(node.value)):
            raise NumericError(
                f"non-finite adjoint for input {input_id!r}", node_index=node.idx
            )
        out[input_id] = node.value
    return out


def second_partial(tape, i, j):
    """Exact second partial of the root w.r.t. inputs i and j, obtained by
    differentiating the recorded first-order backward pass."""
    root = tape.root if tape.root is not None else tape.nodes[-1]
    for input_id in (i, j):
        if input_id not in tape.inputs:
            raise ConfigError(f"unknown input id {input_id!r}")
    first = grad_nodes(root, [tape.inputs[i]])[0]
    second = grad_nodes(first, [tape.inputs[j]])[0]
    if not np.all(np.isfinite(second.value)):
        raise NumericError(
            f"non-finite second partial d2/d{i}d{j}", node_index=second.idx
        )
    return second.value


def param_gradient(loss_tape, params):
    """Gradient of the scalar loss at the tape root w.r.t. every parameter,
    flattened in canonical order: layer by layer, weights row-major, then the
    layer's biases."""
    root = loss_tape.root if loss_tape.root is not None else loss_tape.nodes[-1]
    if np.shape(root.value) not in ((), (1,), (1, 1)):
        raise ConfigError("param_gradient requires a scalar loss root")
    ids = params.param_ids() if hasattr(params, "param_ids") else list(params)
    arrays = params.param_arrays() if hasattr(params, "param_arrays") else None
    leaves = []
    for k, pid in enumerate(ids):
        if pid not in loss_tape.inputs:
            raise ConfigError(f"parameter leaf {pid!r} not present on the tape")
        leaf = loss_tape.inputs[pid]
        if arrays is not None and not (
            leaf.value is arrays[k] or np.array_equal(leaf.value, arrays[k])
        ):
            raise ConfigError(
                f"tape leaf {pid!r} is bound to different values than the "
                "given parameter object"
            )
        leaves.append(leaf)
    grads = backward_values(root, leaves)
    flat = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])
    if not np.all(np.isfinite(flat)):
        bad = int(np.argwhere(~np.isfinite(flat))[0][0])
        raise NumericError(
            f"non-finite parameter gradient at component {bad}", point_index=bad
        )
    return flat
