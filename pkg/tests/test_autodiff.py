"""Engine correctness: every primitive against central finite differences,
second derivatives against second-order differences, replay determinism, and
the parameter gradient against a brute-force perturbation oracle."""

import math

import numpy as np
import pytest

from abhpinn.autodiff import (
    Tape,
    backward_values,
    forward,
    grad_nodes,
    gradient,
    param_gradient,
    second_partial,
)
from abhpinn.errors import ConfigError, NumericError

# (name, tape builder, plain evaluator, safe input range)
PRIMITIVES = [
    ("add", lambda t, x: t.add(x, t.constant(0.7)), lambda v: v + 0.7, (-2, 2)),
    ("mul", lambda t, x: t.mul(x, x), lambda v: v * v, (-2, 2)),
    ("neg", lambda t, x: t.neg(x), lambda v: -v, (-2, 2)),
    ("recip", lambda t, x: t.recip(x), lambda v: 1.0 / v, (0.2, 2)),
    ("pow_const", lambda t, x: t.pow_const(x, 1.7), lambda v: v**1.7, (0.2, 2)),
    ("exp", lambda t, x: t.exp(x), np.exp, (-2, 2)),
    ("log", lambda t, x: t.log(x), np.log, (0.2, 2)),
    ("tanh", lambda t, x: t.tanh(x), np.tanh, (-2, 2)),
    ("softplus", lambda t, x: t.softplus(x), lambda v: np.logaddexp(0, v), (-2, 2)),
    ("max_const", lambda t, x: t.max_const(x, 0.3), lambda v: np.maximum(v, 0.3), (0.5, 2)),
    ("min_const", lambda t, x: t.min_const(x, 0.3), lambda v: np.minimum(v, 0.3), (0.5, 2)),
]


def central_diff(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def second_diff(f, x, h=1e-3):
    return (f(x + h) - 2 * f(x) + f(x - h)) / (h * h)


@pytest.mark.parametrize("name,build,plain,rng_range", PRIMITIVES)
def test_primitive_first_partials_match_central_differences(name, build, plain, rng_range):
    rng = np.random.default_rng(7)
    xs = rng.uniform(*rng_range, size=100)
    tape = Tape()
    x = tape.input("x", xs)
    y = build(tape, x)
    tape.set_root(y)
    got = gradient(tape, ["x"])["x"]
    want = central_diff(plain, xs)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-8)) < 1e-6


@pytest.mark.parametrize("name,build,plain,rng_range", PRIMITIVES)
def test_primitive_second_partials_match_second_differences(name, build, plain, rng_range):
    rng = np.random.default_rng(8)
    xs = rng.uniform(*rng_range, size=100)
    tape = Tape()
    x = tape.input("x", xs)
    y = build(tape, x)
    tape.set_root(y)
    got = second_partial(tape, "x", "x")
    want = second_diff(plain, xs)
    scale = np.maximum(np.abs(want), 1e-4)
    assert np.max(np.abs(got - want) / scale) < 1e-4


def test_trivial_values():
    tape = Tape()
    x = tape.input("x", 0.0)
    y = tape.tanh(x)
    tape.set_root(y)
    assert y.value == 0.0
    assert gradient(tape, ["x"])["x"] == 1.0

    tape = Tape()
    x = tape.input("x", 0.0)
    tape.set_root(tape.softplus(x))
    assert math.isclose(float(tape.root.value), math.log(2.0), rel_tol=1e-15)

    tape = Tape()
    x = tape.input("x", 2.0)
    y = tape.input("y", 3.0)
    tape.set_root(x * y)
    assert float(tape.root.value) == 6.0


def test_cubic_derivatives():
    tape = Tape()
    x = tape.input("x", 2.0)
    tape.set_root(tape.pow_const(x, 3.0))
    assert math.isclose(gradient(tape, ["x"])["x"], 12.0, rel_tol=1e-12)
    assert math.isclose(float(second_partial(tape, "x", "x")), 12.0, rel_tol=1e-12)


def test_linear_term_partial():
    # d/da of (w*z + r*a - c) is r
    tape = Tape()
    a = tape.input("a", 1.3)
    z = tape.input("z", 1.0)
    expr = 0.7 * z + 0.25 * a - 0.4
    tape.set_root(expr)
    assert math.isclose(gradient(tape, ["a"])["a"], 0.25, rel_tol=1e-15)


def test_mixed_second_partial_hand_value():
    # f = x * y^2 at (1, 3): d2f/dxdy = 2y = 6
    tape = Tape()
    x = tape.input("x", 1.0)
    y = tape.input("y", 3.0)
    tape.set_root(x * (y * y))
    assert math.isclose(float(second_partial(tape, "x", "y")), 6.0, rel_tol=1e-12)


def test_second_partial_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(20):
        xv, yv = rng.uniform(0.3, 1.5, size=2)
        tape = Tape()
        x = tape.input("x", xv)
        y = tape.input("y", yv)
        f = tape.tanh(x * y) + tape.exp(x) * tape.log(y)
        tape.set_root(f)
        dxy = float(second_partial(tape, "x", "y"))
        dyx = float(second_partial(tape, "y", "x"))
        assert abs(dxy - dyx) < 1e-12


def test_odd_function_second_derivative_zero_at_origin():
    tape = Tape()
    x = tape.input("x", 0.0)
    tape.set_root(tape.tanh(x))
    assert abs(float(second_partial(tape, "x", "x"))) < 1e-15


def test_kink_uses_right_hand_derivative():
    tape = Tape()
    x = tape.input("x", 0.3)
    tape.set_root(tape.max_const(x, 0.3))
    assert gradient(tape, ["x"])["x"] == 1.0  # right derivative of max at kink

    tape = Tape()
    x = tape.input("x", 0.3)
    tape.set_root(tape.min_const(x, 0.3))
    assert gradient(tape, ["x"])["x"] == 0.0  # right derivative of min at kink


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(11)
    xs = rng.uniform(-2, 2, size=50)
    tape = Tape()
    x = tape.input("x", xs)
    y = tape.softplus(tape.tanh(x * x) + tape.exp(0.3 * x))
    tape.set_root(y)
    first = forward(tape, {"x": xs}).copy()
    second = forward(tape, {"x": xs}).copy()
    assert np.array_equal(first, second)
    # derivative nodes replay identically as well
    grad_nodes(y, [x])
    third = forward(tape, {"x": xs}).copy()
    assert np.array_equal(first, third)


def test_unbound_input_is_a_configuration_error():
    tape = Tape()
    tape.input("x")
    tape.constant(1.0)
    with pytest.raises(ConfigError):
        forward(tape, {})


def test_unknown_input_id_rejected():
    tape = Tape()
    tape.input("x", 1.0)
    tape.set_root(tape.tanh(tape.inputs["x"]))
    with pytest.raises(ConfigError):
        forward(tape, {"nope": 1.0})
    with pytest.raises(ConfigError):
        gradient(tape, ["nope"])


def test_nonfinite_value_carries_node_index():
    tape = Tape()
    x = tape.input("x", -1.0)
    with pytest.raises(NumericError) as err:
        tape.log(x)
    assert err.value.node_index == 1

    # replay path reports the same index
    tape = Tape()
    x = tape.input("x", 1.0)
    y = tape.log(x)
    tape.set_root(y)
    with pytest.raises(NumericError) as err:
        forward(tape, {"x": -2.0})
    assert err.value.node_index == y.idx


def test_graph_and_value_backward_agree_on_composite_tape():
    rng = np.random.default_rng(21)
    xs = rng.uniform(0.2, 1.5, size=(40, 1))
    ys = rng.uniform(0.2, 1.5, size=(40, 1))
    tape = Tape()
    x = tape.input("x", xs)
    y = tape.input("y", ys)
    f = tape.softplus(x * y) - tape.log(y) * tape.tanh(x) + tape.recip(x + y)
    loss = tape.mean(tape.pow_const(f, 2.0))
    tape.set_root(loss)
    graph = [n.value for n in grad_nodes(loss, [x, y])]
    vals = backward_values(loss, [x, y])
    for g_node, g_val in zip(graph, vals):
        assert np.allclose(g_node, g_val, rtol=1e-13, atol=0)


class _FlatParams:
    """Minimal params object for param_gradient: two leaves w, b."""

    def param_ids(self):
        return ["w", "b"]


def test_param_gradient_canonical_order_and_values():
    w0 = np.array([[0.3, -0.2], [0.1, 0.5]])
    b0 = np.array([0.05, -0.4])
    xs = np.array([[0.7, -0.3], [0.2, 0.9], [1.1, 0.4]])

    def loss_value(w, b):
        h = np.tanh(xs @ w.T + b)
        return float(np.mean(np.sum(h, axis=1) ** 2))

    tape = Tape()
    w = tape.input("w", w0)
    b = tape.input("b", b0)
    x = tape.constant(xs)
    h = tape.tanh(tape.add(tape.matmul(x, tape.transpose(w)), b))
    s = tape.sum(h, axis=1, keepdims=True)
    tape.set_root(tape.mean(tape.pow_const(s, 2.0)))
    flat = param_gradient(tape, _FlatParams())
    assert flat.shape == (6,)

    # brute-force oracle: central differences over every component
    h_step = 1e-6
    expected = []
    for arr, shape in ((w0, (2, 2)), (b0, (2,))):
        for idx in np.ndindex(*shape):
            bump = np.zeros_like(arr)
            bump[idx] = h_step
            if arr is w0:
                hi = loss_value(w0 + bump, b0)
                lo = loss_value(w0 - bump, b0)
            else:
                hi = loss_value(w0, b0 + bump)
                lo = loss_value(w0, b0 - bump)
            expected.append((hi - lo) / (2 * h_step))
    expected = np.array(expected)
    assert np.max(np.abs(flat - expected) / np.maximum(np.abs(expected), 1e-8)) < 1e-6


def test_param_gradient_trivial_cases():
    # loss = sum of squares at zero parameters -> zero gradient
    tape = Tape()
    w = tape.input("w", np.zeros(4))
    tape.set_root(tape.sum(tape.pow_const(w, 2.0)))

    class P:
        def param_ids(self):
            return ["w"]

    assert np.array_equal(param_gradient(tape, P()), np.zeros(4))

    # loss = w for a single scalar parameter -> gradient [1]
    tape = Tape()
    w = tape.input("w", np.array([2.5]))
    tape.set_root(tape.sum(w))
    assert np.array_equal(param_gradient(tape, P()), np.ones(1))


def test_param_gradient_requires_scalar_root():
    tape = Tape()
    w = tape.input("w", np.array([1.0, 2.0]))
    tape.set_root(tape.pow_const(w, 2.0))

    class P:
        def param_ids(self):
            return ["w"]

    with pytest.raises(ConfigError):
        param_gradient(tape, P())


def test_node_recomputability_invariant():
    # a node's stored value equals its operation applied to parent values
    rng = np.random.default_rng(2)
    xs = rng.uniform(0.5, 1.5, size=8)
    tape = Tape()
    x = tape.input("x", xs)
    y = tape.softplus(tape.mul(x, tape.tanh(x)))
    tape.set_root(y)
    from abhpinn.autodiff import _compute

    for node in tape.nodes:
        if node.op in ("constant", "input"):
            continue
        recomputed = _compute(node.op, [p.value for p in node.parents], node.const)
        assert np.array_equal(recomputed, node.value)


def test_local_partials_reported():
    tape = Tape()
    x = tape.input("x", np.array([0.4]))
    y = tape.tanh(x)
    parts = y.local_partials()
    assert len(parts) == 1
    assert np.allclose(parts[0], 1.0 - np.tanh(0.4) ** 2)
