"""Every training loss term, assembled as differentiable tape nodes.

Value-network side (drives the optimal-control residual):
  * hjb_residual_loss — squared residual of
        rho*v - u(c*) - v_a*mu_a* - v_z*mu_z - 0.5*sigma_z^2*v_zz - v_t
    at interior points, with c* recovered from v_a via the first-order
    condition and mu_a* = w z + r a - c*.
  * ic_loss_value — anchors v(.,.,0) to the heuristic log(1 + a + z^2).
  * bc_losses_value — state-constraint slope at a_min (v_a = u'(w z + r a_min),
    the zero-savings consumption), and flat Neumann slopes at a_max and both
    z faces.
  * phys_loss_value — hinge penalties for monotonicity (v_a >= 0) and
    concavity (v_aa <= 0) in wealth.

Density-network side (drives the population-flow residual):
  * kf_residual_loss — squared residual of
        g_t + d/da[mu_a* g] + d/dz[mu_z g] - 0.5 * d2/dz2[sigma_z^2 g]
    with the value network frozen: its parameters enter as tape constants, so
    no gradient block for them exists at all.
  * ic_loss_density — anchors g(.,.,0) to the initial population density.
  * mass_loss — squared deviation of the quadrature mass from one, averaged
    over a set of time nodes.

`total_loss` forms the weighted combination and reports raw terms alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tape, grad_nodes
from .economy import initial_density, initial_value_guess, optimal_consumption, utility
from .errors import ConfigError
from .net import apply_mlp, register_constants, register_params

TERM_ORDER = ("hjb_pde", "ic_v", "bc", "phys", "kf_pde", "ic_g", "mass", "g_flux")


@dataclass
class LossWeights:
    """Nonnegative weights on each loss term. Initial-condition and mass
    terms carry weight 1.0; everything else 0.1. The bc weight is shared
    across the four value-function faces."""

    hjb_pde: float = 0.1
    kf_pde: float = 0.1
    ic_v: float = 1.0
    ic_g: float = 1.0
    bc: float = 0.1
    mass: float = 1.0
    phys: float = 0.1
    g_flux: float = 0.0

    def validate(self):
        return [
            f"loss weight {f.name} must be >= 0, got {getattr(self, f.name)}"
            for f in fields(self)
            if getattr(self, f.name) < 0
        ]

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError("invalid loss weights", problems)
        return self


@dataclass
class LossBreakdown:
    """Raw (unweighted) per-term values plus the weighted total. Terms not
    evaluated in a given phase are None."""

    hjb_pde: float = None
    ic_v: float = None
    bc: float = None
    phys: float = None
    kf_pde: float = None
    ic_g: float = None
    mass: float = None
    g_flux: float = None
    total: float = 0.0

    def merged_with(self, other):
        out = LossBreakdown(total=self.total + other.total)
        for name in TERM_ORDER:
            mine, theirs = getattr(self, name), getattr(other, name)
            setattr(out, name, theirs if mine is None else mine)
        return out


def _col(x):
    return np.asarray(x, dtype=np.float64).reshape(-1, 1)


def _mean_sq(tape, node):
    return tape.mean(tape.pow_const(node, 2.0))


def _point_inputs(tape, prefix, a_vals, z_vals, t_vals=None):
    a = tape.input(f"{prefix}.a", _col(a_vals))
    z = tape.input(f"{prefix}.z", _col(z_vals))
    if t_vals is None:
        return a, z
    return a, z, tape.input(f"{prefix}.t", _col(t_vals))


def _price_consts(tape, prices_at, t_vals):
    r_vals, w_vals = prices_at(np.asarray(t_vals, dtype=np.float64))
    return tape.constant(_col(r_vals)), tape.constant(_col(w_vals)), r_vals, w_vals


def _diffusion_sq(model, z_node):
    sig = model.sigma_z_of(z_node)
    return sig * sig if hasattr(sig, "tape") else float(sig) ** 2


# -- value-network terms ---------------------------------------------------


def _hjb_terms(tape, value_params, layers, scaler, model, prices_at, batch,
               want_phys):
    if len(batch.interior[0]) == 0:
        raise ConfigError("interior batch is empty")
    a, z, t = _point_inputs(tape, "hjb", *batch.interior)
    r, w, _, _ = _price_consts(tape, prices_at, batch.interior[2])
    v = apply_mlp(tape, value_params, layers, scaler, a, z, t)
    va, vz, vt = grad_nodes(v, [a, z, t])
    vzz = grad_nodes(vz, [z])[0]
    c_star = optimal_consumption(va, model)
    mu_a = w * z + r * a - c_star
    resid = model.rho * v - utility(c_star, model) - va * mu_a - vt \
        - 0.5 * _diffusion_sq(model, z) * vzz
    if model.mu_z_fn is not None:
        resid = resid - vz * model.mu_z(z)
    hjb = _mean_sq(tape, resid)
    phys = None
    if want_phys:
        vaa = grad_nodes(va, [a])[0]
        phys = tape.add(
            _mean_sq(tape, tape.min_const(va, 0.0)),
            _mean_sq(tape, tape.max_const(vaa, 0.0)),
        )
    return hjb, phys


def hjb_residual_loss(value_params, scaler, model, prices_at, batch, tape=None):
    """Mean squared residual of the optimal-control PDE over interior points."""
    tape = tape if tape is not None else Tape()
    layers = register_params(tape, value_params)
    hjb, _ = _hjb_terms(tape, value_params, layers, scaler, model, prices_at,
                        batch, want_phys=False)
    tape.set_root(hjb)
    return hjb


def _ic_value_term(tape, value_params, layers, scaler, batch):
    a_vals, z_vals = batch.initial_time
    if len(a_vals) == 0:
        raise ConfigError("initial-time batch is empty")
    a = tape.constant(_col(a_vals))
    z = tape.constant(_col(z_vals))
    t0 = tape.constant(np.zeros((len(a_vals), 1)))
    v = apply_mlp(tape, value_params, layers, scaler, a, z, t0)
    target = tape.constant(_col(initial_value_guess(a_vals, z_vals)))
    return _mean_sq(tape, v - target)


def ic_loss_value(value_params, scaler, model, batch, tape=None):
    """Mean squared gap between v(a,z,0) and the heuristic initial value."""
    tape = tape if tape is not None else Tape()
    layers = register_params(tape, value_params)
    term = _ic_value_term(tape, value_params, layers, scaler, batch)
    tape.set_root(term)
    return term


def _bc_terms(tape, value_params, layers, scaler, model, prices_at, batch):
    for name in ("boundary_a_min", "boundary_a_max", "boundary_z_min",
                 "boundary_z_max"):
        if len(getattr(batch, name)[0]) == 0:
            raise ConfigError(f"{name} batch is empty")

    def slope(face, tag, wrt_index):
        a, z, t = _point_inputs(tape, tag, *face)
        v = apply_mlp(tape, value_params, layers, scaler, a, z, t)
        return grad_nodes(v, [(a, z, t)[wrt_index]])[0]

    # borrowing constraint: v_a equals u'(consumption with zero savings)
    a_vals, z_vals, t_vals = batch.boundary_a_min
    va_low = slope(batch.boundary_a_min, "bc_amin", 0)
    r_vals, w_vals = prices_at(np.asarray(t_vals, dtype=np.float64))
    c_border = np.maximum(w_vals * z_vals + r_vals * a_vals,
                          model.consumption_floor)
    target = tape.constant(_col(c_border ** (-model.gamma)))
    l_a_min = _mean_sq(tape, va_low - target)

    l_a_max = _mean_sq(tape, slope(batch.boundary_a_max, "bc_amax", 0))
    l_z_min = _mean_sq(tape, slope(batch.boundary_z_min, "bc_zmin", 1))
    l_z_max = _mean_sq(tape, slope(batch.boundary_z_max, "bc_zmax", 1))
    return l_a_min, l_a_max, l_z_min, l_z_max


def bc_losses_value(value_params, scaler, model, prices_at, batch, tape=None):
    """The four face penalties (a_min slope target, flat a_max, flat z faces)."""
    tape = tape if tape is not None else Tape()
    layers = register_params(tape, value_params)
    terms = _bc_terms(tape, value_params, layers, scaler, model, prices_at, batch)
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    tape.set_root(total)
    return terms


def phys_loss_value(value_params, scaler, model, prices_at, batch, tape=None):
    """Shape penalties: squared negative part of v_a plus squared positive
    part of v_aa, averaged over interior points."""
    tape = tape if tape is not None else Tape()
    layers = register_params(tape, value_params)
    a, z, t = _point_inputs(tape, "phys", *batch.interior)
    v = apply_mlp(tape, value_params, layers, scaler, a, z, t)
    va = grad_nodes(v, [a])[0]
    vaa = grad_nodes(va, [a])[0]
    term = tape.add(
        _mean_sq(tape, tape.min_const(va, 0.0)),
        _mean_sq(tape, tape.max_const(vaa, 0.0)),
    )
    tape.set_root(term)
    return term


# -- density-network terms ---------------------------------------------------


def _kf_term(tape, density_params, g_layers, value_params, scaler, model,
             prices_at, batch, mu_a_override=None):
    if len(batch.interior[0]) == 0:
        raise ConfigError("interior batch is empty")
    a, z, t = _point_inputs(tape, "kf", *batch.interior)
    g = apply_mlp(tape, density_params, g_layers, scaler, a, z, t)
    if mu_a_override is not None:
        mu_a = mu_a_override(a, z, t)
    else:
        r, w, _, _ = _price_consts(tape, prices_at, batch.interior[2])
        v_layers = register_constants(tape, value_params)
        v = apply_mlp(tape, value_params, v_layers, scaler, a, z, t)
        va = grad_nodes(v, [a])[0]
        mu_a = w * z + r * a - optimal_consumption(va, model)
    gt = grad_nodes(g, [t])[0]
    flux_a = grad_nodes(mu_a * g, [a])[0]
    diffused = _diffusion_sq(model, z) * g
    dz = grad_nodes(diffused, [z])[0]
    dzz = grad_nodes(dz, [z])[0]
    resid = gt + flux_a - 0.5 * dzz
    if model.mu_z_fn is not None:
        resid = resid + grad_nodes(model.mu_z(z) * g, [z])[0]
    return _mean_sq(tape, resid)


def kf_residual_loss(density_params, value_params, scaler, model, prices_at,
                     batch, tape=None, mu_a_override=None):
    """Mean squared residual of the population-flow PDE. The value network is
    a frozen coefficient field: its parameters are tape constants, so the
    density gradient contains no block for them."""
    tape = tape if tape is not None else Tape()
    g_layers = register_params(tape, density_params)
    term = _kf_term(tape, density_params, g_layers, value_params, scaler,
                    model, prices_at, batch, mu_a_override)
    tape.set_root(term)
    return term


def _ic_density_term(tape, density_params, g_layers, scaler, model, batch):
    a_vals, z_vals = batch.initial_time
    if len(a_vals) == 0:
        raise ConfigError("initial-time batch is empty")
    a = tape.constant(_col(a_vals))
    z = tape.constant(_col(z_vals))
    t0 = tape.constant(np.zeros((len(a_vals), 1)))
    g = apply_mlp(tape, density_params, g_layers, scaler, a, z, t0)
    target = tape.constant(_col(initial_density(a_vals, z_vals, model)))
    return _mean_sq(tape, g - target)


def ic_loss_density(density_params, scaler, model, batch, tape=None):
    """Mean squared gap between g(a,z,0) and the initial population density."""
    tape = tape if tape is not None else Tape()
    g_layers = register_params(tape, density_params)
    term = _ic_density_term(tape, density_params, g_layers, scaler, model, batch)
    tape.set_root(term)
    return term


def _mass_term(tape, density_params, g_layers, scaler, mesh, t_nodes):
    t_nodes = np.asarray(t_nodes, dtype=np.float64).ravel()
    if t_nodes.size == 0:
        raise ConfigError("mass loss needs at least one time node")
    a_flat, z_flat, w_flat = mesh.flat()
    m = a_flat.size
    n_t = t_nodes.size
    a = tape.constant(_col(np.tile(a_flat, n_t)))
    z = tape.constant(_col(np.tile(z_flat, n_t)))
    t = tape.constant(_col(np.repeat(t_nodes, m)))
    g = apply_mlp(tape, density_params, g_layers, scaler, a, z, t)
    # block weight matrix: column j integrates the j-th time slice
    blocks = np.zeros((m * n_t, n_t))
    for j in range(n_t):
        blocks[j * m : (j + 1) * m, j] = w_flat
    masses = tape.matmul(tape.transpose(g), tape.constant(blocks))  # (1, n_t)
    gap = masses - tape.constant(np.ones((1, n_t)))
    return _mean_sq(tape, gap)


def mass_loss(density_params, scaler, mesh, t_nodes, tape=None):
    """Mean over time nodes of the squared deviation of total mass from one."""
    tape = tape if tape is not None else Tape()
    g_layers = register_params(tape, density_params)
    term = _mass_term(tape, density_params, g_layers, scaler, mesh, t_nodes)
    tape.set_root(term)
    return term


def _flux_term(tape, density_params, g_layers, value_params, scaler, model,
               prices_at, batch):
    """Optional zero-flux penalty for the density at the four faces: wealth
    flux mu_a*g on the a faces, probability flux mu_z*g - 0.5*d/dz(sigma^2 g)
    on the z faces."""
    v_layers = register_constants(tape, value_params)

    def wealth_flux(face, tag):
        a, z, t = _point_inputs(tape, tag, *face)
        r, w, _, _ = _price_consts(tape, prices_at, face[2])
        g = apply_mlp(tape, density_params, g_layers, scaler, a, z, t)
        v = apply_mlp(tape, value_params, v_layers, scaler, a, z, t)
        va = grad_nodes(v, [a])[0]
        mu_a = w * z + r * a - optimal_consumption(va, model)
        return _mean_sq(tape, mu_a * g)

    def z_flux(face, tag):
        a, z, t = _point_inputs(tape, tag, *face)
        g = apply_mlp(tape, density_params, g_layers, scaler, a, z, t)
        diffused = _diffusion_sq(model, z) * g
        flux = tape.neg(tape.mul(tape.constant(0.5), grad_nodes(diffused, [z])[0]))
        if model.mu_z_fn is not None:
            flux = flux + model.mu_z(z) * g
        return _mean_sq(tape, flux)

    total = wealth_flux(batch.boundary_a_min, "flux_amin")
    total = tape.add(total, wealth_flux(batch.boundary_a_max, "flux_amax"))
    total = tape.add(total, z_flux(batch.boundary_z_min, "flux_zmin"))
    total = tape.add(total, z_flux(batch.boundary_z_max, "flux_zmax"))
    return total


# -- combination ---------------------------------------------------------------


def total_loss(terms, weights, tape=None):
    """Weighted sum of the given term nodes plus a raw-term breakdown."""
    if not terms:
        raise ConfigError("no loss terms supplied")
    weights.check()
    tape = tape if tape is not None else next(iter(terms.values())).tape
    total = None
    breakdown = LossBreakdown()
    for name, node in terms.items():
        if not hasattr(breakdown, name):
            raise ConfigError(f"unknown loss term {name!r}")
        weight = getattr(weights, name)
        setattr(breakdown, name, float(np.squeeze(node.value)))
        piece = tape.mul(tape.constant(weight), node)
        total = piece if total is None else tape.add(total, piece)
    breakdown.total = float(np.squeeze(total.value))
    tape.set_root(total)
    return total, breakdown


# -- combined objectives (one tape per network update) -------------------------


def build_value_objective(value_params, scaler, model, prices_at, batch,
                          weights, check_finite=True):
    """Everything the value-network update needs on one tape: weighted total
    node (tape root), raw breakdown, and the tape itself."""
    tape = Tape(check_finite=check_finite)
    layers = register_params(tape, value_params)
    hjb, phys = _hjb_terms(tape, value_params, layers, scaler, model,
                           prices_at, batch, want_phys=True)
    ic_v = _ic_value_term(tape, value_params, layers, scaler, batch)
    bc_terms = _bc_terms(tape, value_params, layers, scaler, model, prices_at,
                         batch)
    bc = bc_terms[0]
    for term in bc_terms[1:]:
        bc = tape.add(bc, term)
    total, breakdown = total_loss(
        {"hjb_pde": hjb, "ic_v": ic_v, "bc": bc, "phys": phys}, weights, tape
    )
    return tape, total, breakdown


def build_density_objective(density_params, value_params, scaler, model,
                            prices_at, batch, mesh, mass_t_nodes, weights,
                            check_finite=True, zero_flux=False):
    """Everything the density-network update needs on one tape. The value
    network appears only as constants (frozen-field contract)."""
    tape = Tape(check_finite=check_finite)
    g_layers = register_params(tape, density_params)
    kf = _kf_term(tape, density_params, g_layers, value_params, scaler, model,
                  prices_at, batch)
    ic_g = _ic_density_term(tape, density_params, g_layers, scaler, model, batch)
    mass = _mass_term(tape, density_params, g_layers, scaler, mesh, mass_t_nodes)
    terms = {"kf_pde": kf, "ic_g": ic_g, "mass": mass}
    if zero_flux:
        terms["g_flux"] = _flux_term(tape, density_params, g_layers,
                                     value_params, scaler, model, prices_at,
                                     batch)
    total, breakdown = total_loss(terms, weights, tape)
    return tape, total, breakdown
