"""Network construction, evaluation, input scaling, and the bit-exact
checkpoint format."""

import math

import numpy as np
import pytest

from abhpinn.autodiff import Tape, grad_nodes
from abhpinn.errors import ConfigError, DomainError, FormatError
from abhpinn.net import (
    DEFAULT_LAYER_SIZES,
    InputScaler,
    deserialize,
    eval_density,
    eval_value,
    init,
    mlp_values,
    serialize,
)


def test_init_is_deterministic_in_seed():
    p1 = init(42, DEFAULT_LAYER_SIZES, "identity")
    p2 = init(42, DEFAULT_LAYER_SIZES, "identity")
    for w1, w2 in zip(p1.weights, p2.weights):
        assert np.array_equal(w1, w2)
    p3 = init(43, DEFAULT_LAYER_SIZES, "identity")
    assert not np.array_equal(p1.weights[0], p3.weights[0])


def test_init_shapes_for_default_architecture():
    p = init(0, DEFAULT_LAYER_SIZES, "identity")
    shapes = [w.shape for w in p.weights]
    assert shapes == [(128, 3), (128, 128), (128, 128), (1, 128)]
    assert [len(b) for b in p.biases] == [128, 128, 128, 1]


def test_init_biases_are_exactly_zero():
    p = init(7, (3, 16, 1), "identity")
    for b in p.biases:
        assert np.all(b == 0.0)


def test_init_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        init(0, (2, 8, 1), "identity")
    with pytest.raises(ConfigError):
        init(0, (3, 8, 2), "identity")
    with pytest.raises(ConfigError):
        init(0, (3, 8, 1), "relu6")


def test_scaler_endpoints_exact(model, scaler):
    assert scaler.scale(model.a_min, 0) == -1.0
    assert scaler.scale(model.a_max, 0) == 1.0
    assert scaler.scale(model.z_min, 1) == -1.0
    assert scaler.scale(model.z_max, 1) == 1.0
    assert scaler.scale(0.0, 2) == -1.0
    assert scaler.scale(model.horizon, 2) == 1.0
    # strictly increasing
    xs = np.linspace(model.a_min, model.a_max, 50)
    s = scaler.scale(xs, 0)
    assert np.all(np.diff(s) > 0)
    assert np.allclose(scaler.unscale(s, 0), xs, rtol=0, atol=1e-12)


def test_zero_network_outputs_zero(model, scaler):
    p = init(0, (3, 8, 1), "identity")
    for w in p.weights:
        w[:] = 0.0
    out = eval_value(p, scaler, [0.0, 2.5, 5.0], [0.5, 1.0, 1.5], [0.0, 5.0, 10.0])
    assert np.all(out.value == 0.0)


def test_value_finite_on_full_grid(model, scaler):
    p = init(3, (3, 32, 1), "identity")
    a, z, t = np.meshgrid(
        np.linspace(0, 5, 11), np.linspace(0.5, 1.5, 11), np.linspace(0, 10, 11)
    )
    out = eval_value(p, scaler, a.ravel(), z.ravel(), t.ravel())
    assert np.all(np.isfinite(out.value))


def test_eval_rejects_out_of_domain(model, scaler):
    p = init(3, (3, 8, 1), "identity")
    with pytest.raises(DomainError):
        eval_value(p, scaler, [5.5], [1.0], [1.0])
    with pytest.raises(DomainError):
        eval_value(p, scaler, [1.0], [0.4], [1.0])
    with pytest.raises(DomainError):
        eval_value(p, scaler, [1.0], [1.0], [10.4])


def test_value_derivative_matches_finite_difference(model, scaler):
    p = init(9, DEFAULT_LAYER_SIZES, "identity")
    rng = np.random.default_rng(4)
    a = rng.uniform(0.2, 4.8, 20)
    z = rng.uniform(0.55, 1.45, 20)
    t = rng.uniform(0.2, 9.8, 20)
    out = eval_value(p, scaler, a, z, t)
    va = grad_nodes(out, [out.tape.inputs["a"]])[0].value[:, 0]
    h = 1e-5
    fd = (mlp_values(p, scaler, a + h, z, t) - mlp_values(p, scaler, a - h, z, t)) / (2 * h)
    assert np.max(np.abs(va - fd) / np.maximum(np.abs(fd), 1e-10)) < 1e-5


def test_density_strictly_positive(model, scaler):
    p = init(17, (3, 16, 1), "softplus")
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 5, 1000)
    z = rng.uniform(0.5, 1.5, 1000)
    t = rng.uniform(0, 10, 1000)
    out = eval_density(p, scaler, a, z, t)
    assert np.all(out.value > 0.0)


def test_zero_density_network_is_log_two(model, scaler):
    p = init(0, (3, 8, 1), "softplus")
    for w in p.weights:
        w[:] = 0.0
    out = eval_density(p, scaler, [1.0], [1.0], [1.0])
    assert math.isclose(float(out.value[0, 0]), math.log(2.0), rel_tol=1e-15)


def test_density_positive_even_for_very_negative_preactivation(model, scaler):
    p = init(0, (3, 8, 1), "softplus")
    for w in p.weights:
        w[:] = 0.0
    p.biases[-1][:] = -40.0
    out = eval_density(p, scaler, [1.0], [1.0], [1.0])
    got = float(out.value[0, 0])
    assert got > 0.0
    assert math.isclose(got, math.exp(-40.0), rel_tol=1e-10)


def test_head_mismatch_rejected(scaler):
    v = init(0, (3, 8, 1), "identity")
    g = init(0, (3, 8, 1), "softplus")
    with pytest.raises(ConfigError):
        eval_value(g, scaler, [1.0], [1.0], [1.0])
    with pytest.raises(ConfigError):
        eval_density(v, scaler, [1.0], [1.0], [1.0])


def test_tape_path_matches_plain_forward(model, scaler):
    p = init(23, (3, 32, 32, 1), "softplus")
    rng = np.random.default_rng(10)
    a = rng.uniform(0, 5, 64)
    z = rng.uniform(0.5, 1.5, 64)
    t = rng.uniform(0, 10, 64)
    out = eval_density(p, scaler, a, z, t)
    fast = mlp_values(p, scaler, a, z, t)
    assert np.allclose(out.value[:, 0], fast, rtol=1e-14, atol=0)


def test_serialize_round_trip_bitwise():
    p = init(33, (3, 16, 8, 1), "softplus")
    q = deserialize(serialize(p))
    assert q.layer_sizes == p.layer_sizes
    assert q.output_head == p.output_head
    for w1, w2 in zip(p.weights, q.weights):
        assert np.array_equal(w1, w2)
    for b1, b2 in zip(p.biases, q.biases):
        assert np.array_equal(b1, b2)


def test_deserialize_rejects_bad_magic():
    blob = serialize(init(1, (3, 4, 1), "identity"))
    with pytest.raises(FormatError):
        deserialize(b"NOTMAGIC" + blob[8:])


def test_deserialize_rejects_truncation_and_padding():
    blob = serialize(init(1, (3, 4, 1), "identity"))
    with pytest.raises(FormatError):
        deserialize(blob[:-8])
    with pytest.raises(FormatError):
        deserialize(blob + b"\x00" * 8)
    with pytest.raises(FormatError):
        deserialize(blob[:10])


def test_flatten_round_trip():
    p = init(5, (3, 8, 4, 1), "identity")
    flat = p.flatten()
    assert flat.size == p.n_params()
    q = p.with_flat(flat * 2.0)
    assert np.array_equal(q.weights[0], p.weights[0] * 2.0)
    assert np.array_equal(q.flatten(), flat * 2.0)
    with pytest.raises(ConfigError):
        p.with_flat(flat[:-1])


def test_param_ids_canonical_order():
    p = init(5, (3, 8, 1), "identity")
    assert p.param_ids() == ["W0", "b0", "W1", "b1"]
