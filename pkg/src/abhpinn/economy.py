"""Closed-form economic primitives of the heterogeneous-agent economy.

Households have CRRA preferences over consumption and accumulate wealth
subject to labor income w*z, capital income r*a, and a borrowing limit at
a_min. Productivity z follows a reflected diffusion. A representative firm
with Cobb-Douglas technology Y = K^alpha (labor normalized to one) prices
capital and labor competitively:

    r = alpha * K^(alpha-1) - delta        w = (1 - alpha) * K^alpha

Aggregate capital is the wealth-weighted mass of the population density,
computed here by trapezoid quadrature against the *self-normalized* density
so early-training mass drift does not leak into prices.

Most functions are polymorphic: they accept plain floats/arrays or autodiff
nodes, since the expressions are built from overloaded arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .autodiff import DiffNode
from .errors import ConfigError, EquilibriumError

_MASS_FLOOR = 1e-8


@dataclass
class ModelParams:
    """All economic constants. Defaults are the benchmark calibration."""

    gamma: float = 2.0
    rho: float = 0.05
    sigma_z: float = 0.02
    alpha: float = 0.3
    delta: float = 0.05
    a_min: float = 0.0
    a_max: float = 5.0
    z_min: float = 0.5
    z_max: float = 1.5
    horizon: float = 10.0
    ic_wealth_mean: float = 1.0
    ic_wealth_sd: float = 0.2
    consumption_floor: float = 1e-6
    # General drift/volatility of the productivity diffusion. None means the
    # benchmark constants (zero drift, sigma_z). Custom callables must be
    # built from overloaded arithmetic so they work on tape nodes too.
    mu_z_fn: object = field(default=None, repr=False)
    sigma_z_fn: object = field(default=None, repr=False)

    def validate(self):
        problems = []
        if not self.gamma > 0:
            problems.append(f"gamma must be > 0, got {self.gamma}")
        if self.rho < 0:
            problems.append(f"rho must be >= 0, got {self.rho}")
        if self.sigma_z < 0:
            problems.append(f"sigma_z must be >= 0, got {self.sigma_z}")
        if not 0 < self.alpha < 1:
            problems.append(f"alpha must be in (0, 1), got {self.alpha}")
        if self.delta < 0:
            problems.append(f"delta must be >= 0, got {self.delta}")
        if not self.a_min < self.a_max:
            problems.append(f"need a_min < a_max, got [{self.a_min}, {self.a_max}]")
        if not self.z_min < self.z_max:
            problems.append(f"need z_min < z_max, got [{self.z_min}, {self.z_max}]")
        if not self.horizon > 0:
            problems.append(f"horizon must be > 0, got {self.horizon}")
        if not self.consumption_floor > 0:
            problems.append(
                f"consumption_floor must be > 0, got {self.consumption_floor}"
            )
        if self.ic_wealth_sd <= 0:
            problems.append(f"ic_wealth_sd must be > 0, got {self.ic_wealth_sd}")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError("invalid model parameters", problems)
        return self

    def mu_z(self, z):
        if self.mu_z_fn is None:
            return 0.0
        return self.mu_z_fn(z)

    def sigma_z_of(self, z):
        if self.sigma_z_fn is None:
            return self.sigma_z
        return self.sigma_z_fn(z)


@dataclass
class Prices:
    """Factor prices implied by an aggregate capital stock."""

    r: float
    w: float
    K: float


def utility(c, model):
    """CRRA utility u(c) = c^(1-gamma)/(1-gamma); log utility at gamma = 1.

    Plain numeric inputs are contract-checked against the consumption floor;
    tape nodes are accepted unchecked (the loss construction clamps first).
    """
    if not isinstance(c, DiffNode):
        c = np.asarray(c, dtype=np.float64)
        if np.any(c < model.consumption_floor):
            raise ValueError("consumption below the floor; clamp before calling")
    if model.gamma == 1.0:
        return c.tape.log(c) if isinstance(c, DiffNode) else np.log(c)
    return c ** (1.0 - model.gamma) * (1.0 / (1.0 - model.gamma))


def marginal_utility(c, model):
    """u'(c) = c^(-gamma)."""
    if not isinstance(c, DiffNode):
        c = np.asarray(c, dtype=np.float64)
        if np.any(c < model.consumption_floor):
            raise ValueError("consumption below the floor; clamp before calling")
    return c ** (-model.gamma)


def optimal_consumption(v_a, model):
    """Invert the first-order condition: c* = max(v_a, floor)^(-1/gamma).

    Total by construction: clamping v_a away from zero keeps the negative
    power finite, so this never raises.
    """
    floor = model.consumption_floor
    if isinstance(v_a, DiffNode):
        return v_a.tape.max_const(v_a, floor) ** (-1.0 / model.gamma)
    return np.maximum(np.asarray(v_a, dtype=np.float64), floor) ** (-1.0 / model.gamma)


def savings_drift(a, z, c, prices):
    """Wealth drift mu_a = w z + r a - c under consumption c."""
    return prices.w * z + prices.r * a - c


def prices_from_capital(K, model):
    """Competitive factor prices from the capital stock (labor = 1)."""
    K_arr = np.asarray(K, dtype=np.float64)
    if np.any(K_arr <= 0.0):
        raise EquilibriumError(f"non-positive aggregate capital K={K}")
    r = model.alpha * K_arr ** (model.alpha - 1.0) - model.delta
    w = (1.0 - model.alpha) * K_arr ** model.alpha
    if K_arr.ndim == 0:
        return Prices(r=float(r), w=float(w), K=float(K_arr))
    return Prices(r=r, w=w, K=K_arr)


def aggregate_capital(density_eval, mesh, t, min_mass=_MASS_FLOOR):
    """Trapezoid estimate of the mean wealth E[a] under the density at time t.

    The density is normalized by its own quadrature mass, so any uniform
    rescaling of the evaluator leaves K unchanged.
    """
    a_flat, z_flat, w_flat = mesh.flat()
    g = np.asarray(density_eval(a_flat, z_flat, t), dtype=np.float64)
    mass = float(np.sum(w_flat * g))
    if not np.isfinite(mass) or mass < min_mass:
        raise EquilibriumError(f"degenerate density: quadrature mass {mass}")
    return float(np.sum(w_flat * a_flat * g) / mass)


def initial_value_guess(a, z):
    """Heuristic anchor for the value function at t = 0: log(1 + a + z^2).

    Smooth, strictly increasing in both states, and singularity-free on the
    domain (the argument is at least 1 + z_min^2 > 1).
    """
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.log(1.0 + a + z * z)


def _norm_cdf(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def initial_density(a, z, model):
    """Population density at t = 0: Gaussian in wealth (mean ic_wealth_mean,
    sd ic_wealth_sd) truncated to [a_min, a_max], uniform in productivity,
    jointly normalized to unit mass on the box."""
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    mu, sd = model.ic_wealth_mean, model.ic_wealth_sd
    trunc_mass = float(
        _norm_cdf((model.a_max - mu) / sd) - _norm_cdf((model.a_min - mu) / sd)
    )
    pdf_a = np.exp(-0.5 * ((a - mu) / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))
    pdf_z = 1.0 / (model.z_max - model.z_min)
    return pdf_a / trunc_mass * pdf_z * np.ones_like(z)
