"""Closed-form primitives: hand-computed values, inverse identities, price
monotonicity, and quadrature-based aggregation."""

import math

import numpy as np
import pytest

from abhpinn.economy import (
    ModelParams,
    aggregate_capital,
    initial_density,
    initial_value_guess,
    marginal_utility,
    optimal_consumption,
    prices_from_capital,
    savings_drift,
    utility,
)
from abhpinn.errors import ConfigError, EquilibriumError
from abhpinn.sampler import build_mesh


def test_crra_hand_values(model):
    assert utility(1.0, model) == -1.0
    assert utility(2.0, model) == -0.5
    assert marginal_utility(1.0, model) == 1.0
    assert marginal_utility(2.0, model) == 0.25


def test_utility_rejects_consumption_below_floor(model):
    with pytest.raises(ValueError):
        utility(1e-9, model)
    with pytest.raises(ValueError):
        marginal_utility(-0.5, model)


def test_log_utility_limit():
    model = ModelParams(gamma=1.0).check()
    assert utility(1.0, model) == 0.0
    assert math.isclose(utility(2.0, model), math.log(2.0), rel_tol=1e-15)
    assert marginal_utility(2.0, model) == 0.5


def test_marginal_utility_matches_derivative(model):
    cs = np.linspace(0.1, 5.0, 50)
    h = 1e-6
    fd = (utility(cs + h, model) - utility(cs - h, model)) / (2 * h)
    assert np.max(np.abs(marginal_utility(cs, model) - fd)) < 1e-8


def test_marginal_utility_strictly_decreasing(model):
    cs = np.linspace(0.1, 5.0, 100)
    assert np.all(np.diff(marginal_utility(cs, model)) < 0)


def test_optimal_consumption_hand_values(model):
    assert optimal_consumption(1.0, model) == 1.0
    assert optimal_consumption(4.0, model) == 0.5
    assert optimal_consumption(0.25, model) == 2.0


def test_optimal_consumption_inverts_marginal_utility(model):
    xs = np.linspace(model.consumption_floor, 4.0, 50)
    back = marginal_utility(optimal_consumption(xs, model), model)
    assert np.max(np.abs(back - xs)) < 1e-10


def test_optimal_consumption_total_below_floor(model):
    # the clamp keeps the negative power finite
    assert optimal_consumption(0.0, model) == model.consumption_floor ** -0.5
    assert optimal_consumption(-3.0, model) == model.consumption_floor ** -0.5


def test_savings_drift(model):
    prices = prices_from_capital(1.0, model)
    assert savings_drift(1.0, 1.0, 0.95, prices) == pytest.approx(0.0, abs=1e-15)
    assert savings_drift(0.0, 1.0, 0.2, prices) == pytest.approx(0.5, rel=1e-15)
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 5, 20)
    z = rng.uniform(0.5, 1.5, 20)
    c = prices.w * z + prices.r * a
    assert np.max(np.abs(savings_drift(a, z, c, prices))) == 0.0


def test_prices_at_unit_capital_exact(model):
    prices = prices_from_capital(1.0, model)
    assert prices.r == 0.25
    assert prices.w == 0.7


def test_prices_at_reported_capital_level(model):
    # 0.3 * 2.46^(-0.7) - 0.05 computed independently through exp/log
    expected_r = 0.3 * math.exp(-0.7 * math.log(2.46)) - 0.05
    prices = prices_from_capital(2.46, model)
    assert math.isclose(prices.r, expected_r, rel_tol=1e-14)
    assert math.isclose(prices.r, 0.1097595, abs_tol=1e-6)
    assert math.isclose(prices.w, 0.7 * math.exp(0.3 * math.log(2.46)), rel_tol=1e-14)
    assert math.isclose(prices.w, 0.9170, abs_tol=5e-4)


def test_zero_interest_capital_level(model):
    K_zero = (model.alpha / model.delta) ** (1.0 / (1.0 - model.alpha))
    assert math.isclose(K_zero, 6.0 ** (1.0 / 0.7), rel_tol=1e-14)
    assert abs(prices_from_capital(K_zero, model).r) < 1e-12


def test_prices_reject_nonpositive_capital(model):
    with pytest.raises(EquilibriumError):
        prices_from_capital(0.0, model)
    with pytest.raises(EquilibriumError):
        prices_from_capital(-1.0, model)


def test_price_monotonicity(model):
    Ks = np.linspace(0.1, 10.0, 100)
    prices = prices_from_capital(Ks, model)
    assert np.all(np.diff(prices.r) < 0)
    assert np.all(np.diff(prices.w) > 0)


def test_aggregate_capital_uniform_density(model):
    mesh = build_mesh(model, 101, 101)
    K = aggregate_capital(lambda a, z, t: np.full(a.shape, 0.2), mesh, 0.0)
    assert math.isclose(K, 2.5, rel_tol=1e-12)


def test_aggregate_capital_narrow_gaussian(model):
    mesh = build_mesh(model, 201, 51)
    sd = 0.05

    def density(a, z, t):
        return np.exp(-0.5 * ((a - 1.0) / sd) ** 2)

    K = aggregate_capital(density, mesh, 0.0)
    assert abs(K - 1.0) < 0.01


def test_aggregate_capital_scale_invariant(model):
    mesh = build_mesh(model, 101, 101)

    def density(a, z, t):
        return np.exp(-0.3 * a) * z

    K1 = aggregate_capital(density, mesh, 0.0)
    K3 = aggregate_capital(lambda a, z, t: 3.0 * density(a, z, t), mesh, 0.0)
    assert math.isclose(K1, K3, rel_tol=1e-14)


def test_aggregate_capital_stays_in_box(model):
    mesh = build_mesh(model, 51, 51)
    rng = np.random.default_rng(8)
    for _ in range(10):
        coef = rng.uniform(0.1, 2.0, 3)

        def density(a, z, t, coef=coef):
            return coef[0] + coef[1] * np.cos(a) ** 2 + coef[2] * z

        K = aggregate_capital(density, mesh, 0.0)
        assert model.a_min <= K <= model.a_max


def test_aggregate_capital_degenerate_density(model):
    mesh = build_mesh(model, 21, 21)
    with pytest.raises(EquilibriumError):
        aggregate_capital(lambda a, z, t: np.zeros(a.shape), mesh, 0.0)


def test_initial_value_guess_hand_values():
    assert math.isclose(initial_value_guess(0.0, 0.5), math.log(1.25), rel_tol=1e-15)
    assert math.isclose(initial_value_guess(1.0, 1.0), math.log(3.0), rel_tol=1e-15)
    a = np.linspace(0, 5, 50)
    vals = initial_value_guess(a, 1.0)
    assert np.all(np.diff(vals) > 0)


def test_initial_density_unit_mass(model):
    mesh = build_mesh(model, 201, 201)
    a, z, w = mesh.flat()
    mass = float(np.sum(w * initial_density(a, z, model)))
    assert abs(mass - 1.0) < 1e-6


def test_initial_density_peak_and_symmetry(model):
    assert initial_density(1.0, 1.0, model) > initial_density(2.0, 1.0, model)
    assert initial_density(1.3, 0.7, model) == initial_density(1.3, 1.3, model)
    # benchmark value used by the density IC loss example
    assert math.isclose(
        float(initial_density(1.0, 1.0, model)), 1.994711, abs_tol=1e-5
    )


def test_model_validation_collects_problems():
    bad = ModelParams(gamma=-1.0, alpha=1.5, a_min=5.0, a_max=5.0)
    problems = bad.validate()
    assert len(problems) >= 3
    with pytest.raises(ConfigError) as err:
        bad.check()
    assert len(err.value.problems) >= 3


def test_general_drift_hooks():
    model = ModelParams(mu_z_fn=lambda z: -0.5 * (z - 1.0),
                        sigma_z_fn=lambda z: 0.1 * z).check()
    assert model.mu_z(1.2) == pytest.approx(-0.1)
    assert model.sigma_z_of(1.2) == pytest.approx(0.12)
    default = ModelParams()
    assert default.mu_z(1.2) == 0.0
    assert default.sigma_z_of(1.2) == default.sigma_z
