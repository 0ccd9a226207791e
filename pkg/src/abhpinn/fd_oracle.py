"""Independent grid-based finite-difference solver for the same economy.

This is the verification oracle for the mesh-free solver: an implicit
upwind scheme on a fixed (a, z, t) grid, solving the same finite-horizon
problem and exposing the same observables (value, consumption, density,
capital and price paths).

Scheme summary:
  * Wealth drift is upwinded: candidate savings are computed from forward and
    backward differences of v; the forward difference is used where its
    implied savings are positive, the backward one where its savings are
    negative, and the zero-drift consumption c = w z + r a otherwise. The
    borrowing constraint enters through the backward difference at a_min,
    which is pinned to u'(w z + r a_min) so the constrained node consumes its
    income exactly. At a_max the forward candidate is disabled, so drift at
    the top boundary can never point out of the domain.
  * Productivity diffusion uses central differences with reflecting
    (zero-flux) ends.
  * Time stepping is implicit (unconditionally stable): each backward step
    solves a sparse linear system whose generator rows sum to zero.
  * The density is transported by the transpose of the same discrete
    generator, which conserves the plain-sum mass identically and keeps g
    nonnegative (M-matrix inverse). Renormalization only mops up
    floating-point drift; the raw per-step drift is recorded so tests can
    assert it stays below 1e-10.
  * The terminal value for the backward sweep comes from a stationary solve
    at terminal prices (implicit iteration with a large pseudo-step); the
    mesh-free solver imposes no terminal condition, so comparisons exclude
    the terminal layer.
  * The outer loop fixes the capital path: prices from the current path,
    backward value sweep, forward density sweep, re-measured capital, damped
    update, until the path stops moving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .economy import (
    initial_density,
    marginal_utility,
    optimal_consumption,
    prices_from_capital,
    utility,
)
from .errors import ConfigError, OracleError
from .net import mlp_values


@dataclass
class FdGrid:
    """Uniform tensor grid over the state box and the time horizon.

    n_z == 1 is allowed as a degenerate single-productivity column (the
    scheme then reduces to the one-dimensional consumption-saving problem).
    """

    n_a: int = 101
    n_z: int = 21
    n_t: int = 101

    def validate(self):
        problems = []
        if self.n_a < 3:
            problems.append(f"n_a must be >= 3, got {self.n_a}")
        if self.n_z < 3 and self.n_z != 1:
            problems.append(f"n_z must be >= 3 (or exactly 1), got {self.n_z}")
        if self.n_t < 3:
            problems.append(f"n_t must be >= 3, got {self.n_t}")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError("invalid finite-difference grid", problems)
        return self

    def axes(self, model):
        a = np.linspace(model.a_min, model.a_max, self.n_a)
        z = (
            np.linspace(model.z_min, model.z_max, self.n_z)
            if self.n_z > 1
            else np.array([0.5 * (model.z_min + model.z_max)])
        )
        t = np.linspace(0.0, model.horizon, self.n_t)
        return a, z, t

    def spacings(self, model):
        a, z, t = self.axes(model)
        da = a[1] - a[0]
        dz = z[1] - z[0] if self.n_z > 1 else 1.0
        dt = t[1] - t[0]
        return da, dz, dt


@dataclass
class FdSolution:
    """Solution arrays indexed (time, wealth, productivity) plus paths."""

    a_nodes: np.ndarray
    z_nodes: np.ndarray
    t_nodes: np.ndarray
    v: np.ndarray
    g: np.ndarray
    c: np.ndarray
    K_path: np.ndarray
    r_path: np.ndarray
    w_path: np.ndarray
    mass_drift: np.ndarray = None      # raw per-step conservation defect
    outer_residuals: list = field(default_factory=list)

    def cell_measure(self):
        da = self.a_nodes[1] - self.a_nodes[0]
        dz = self.z_nodes[1] - self.z_nodes[0] if len(self.z_nodes) > 1 else 1.0
        return da * dz


def upwind_policy(v_slice, model, r, w, a_nodes, z_nodes):
    """Upwind consumption choice from one value slice v(a, z).

    Returns (c, drift, If, Ib, I0): consumption, the implied savings drift,
    and the forward/backward/stalled selector masks. The masks are mutually
    exclusive and the drift sign agrees with the selected direction by
    construction.
    """
    c, drift, _, _, If, Ib, I0 = _upwind(v_slice, model, r, w, a_nodes, z_nodes)
    return c, drift, If, Ib, I0


def _upwind(v_slice, model, r, w, a_nodes, z_nodes):
    """Core upwind selection. r, w are scalars (one time level)."""
    n_a, n_z = v_slice.shape
    da = a_nodes[1] - a_nodes[0]
    income = w * z_nodes[None, :] + r * a_nodes[:, None]

    dvF = np.empty_like(v_slice)
    dvF[:-1, :] = (v_slice[1:, :] - v_slice[:-1, :]) / da
    dvF[-1, :] = 1.0  # never selected; masked below
    dvB = np.empty_like(v_slice)
    dvB[1:, :] = (v_slice[1:, :] - v_slice[:-1, :]) / da
    # state constraint: backward slope at a_min prices zero savings
    dvB[0, :] = marginal_utility(
        np.maximum(income[0, :], model.consumption_floor), model
    )

    cF = optimal_consumption(dvF, model)
    cB = optimal_consumption(dvB, model)
    sF = income - cF
    sB = income - cB
    If = sF > 0.0
    If[-1, :] = False  # reflecting top: no outward drift
    Ib = (sB < 0.0) & ~If
    I0 = ~If & ~Ib
    c = np.where(If, cF, np.where(Ib, cB, income))
    drift = income - c
    return c, drift, sF, sB, If, Ib, I0


def _generator(model, grid, sF, sB, If, Ib, z_nodes, da, dz):
    """Sparse generator A with rows summing to zero: upwinded wealth drift
    plus reflected productivity drift/diffusion. Flattening is a-major
    (index = i * n_z + j)."""
    n_a, n_z = sF.shape
    n = n_a * n_z
    up_a = np.where(If, sF, 0.0) / da          # coefficient on (i+1, j)
    dn_a = -np.where(Ib, sB, 0.0) / da         # coefficient on (i-1, j)
    diag = -(up_a + dn_a)

    rows, cols, vals = [], [], []
    idx = np.arange(n).reshape(n_a, n_z)

    def put(r_idx, c_idx, v):
        rows.append(r_idx.ravel())
        cols.append(c_idx.ravel())
        vals.append(v.ravel())

    put(idx[:-1, :], idx[1:, :], up_a[:-1, :])
    put(idx[1:, :], idx[:-1, :], dn_a[1:, :])

    if n_z > 1:
        sig2 = np.asarray(model.sigma_z_of(z_nodes), dtype=np.float64) ** 2
        sig2 = np.broadcast_to(sig2, z_nodes.shape)
        s = sig2 / (2.0 * dz * dz)                       # per z column
        mu_z = np.broadcast_to(
            np.asarray(model.mu_z(z_nodes), dtype=np.float64), z_nodes.shape
        )
        up_z = np.maximum(mu_z, 0.0) / dz + s
        dn_z = -np.minimum(mu_z, 0.0) / dz + s
        # reflecting ends: drop the outward leg, keep rows summing to zero
        up_z_mat = np.broadcast_to(up_z, (n_a, n_z)).copy()
        dn_z_mat = np.broadcast_to(dn_z, (n_a, n_z)).copy()
        up_z_mat[:, -1] = 0.0
        dn_z_mat[:, 0] = 0.0
        diag = diag - (up_z_mat + dn_z_mat)
        put(idx[:, :-1], idx[:, 1:], up_z_mat[:, :-1])
        put(idx[:, 1:], idx[:, :-1], dn_z_mat[:, 1:])

    put(idx, idx, diag)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return A


def _implicit_value_step(v_next, model, grid, r, w, a_nodes, z_nodes, da, dz,
                         dt):
    """One implicit backward step: policy and generator from v_next
    (explicit), value at the earlier time from a sparse solve (implicit)."""
    c, drift, sF, sB, If, Ib, I0 = _upwind(v_next, model, r, w, a_nodes, z_nodes)
    A = _generator(model, grid, sF, sB, If, Ib, z_nodes, da, dz)
    n = v_next.size
    B = sp.identity(n, format="csr") * (1.0 / dt + model.rho) - A
    rhs = utility(np.maximum(c, model.consumption_floor), model).ravel() \
        + v_next.ravel() / dt
    try:
        v_new = spla.spsolve(B.tocsc(), rhs)
    except Exception as err:  # singular matrix or factorization breakdown
        raise OracleError(f"implicit value solve failed: {err}") from err
    if not np.all(np.isfinite(v_new)):
        raise OracleError("non-finite value from implicit solve")
    return v_new.reshape(v_next.shape), c, A


def stationary_value(model, grid, r, w, v_init=None, pseudo_dt=100.0,
                     tol=1e-8, max_iter=2000):
    """Stationary (time-independent) value at fixed prices via implicit
    iteration with a large pseudo time step."""
    a_nodes, z_nodes, _ = grid.axes(model)
    da, dz, _ = grid.spacings(model)
    if v_init is None:
        income = w * z_nodes[None, :] + r * a_nodes[:, None]
        v = utility(np.maximum(income, model.consumption_floor), model) / model.rho
    else:
        v = v_init.copy()
    for _ in range(max_iter):
        v_new, _, _ = _implicit_value_step(
            v, model, grid, r, w, a_nodes, z_nodes, da, dz, pseudo_dt
        )
        gap = float(np.max(np.abs(v_new - v)))
        v = v_new
        if gap < tol:
            return v
    raise OracleError(
        f"stationary value iteration did not reach {tol} in {max_iter} steps"
    )


def hjb_backward_sweep(model, grid, r_path, w_path, v_terminal):
    """Backward-in-time implicit sweep. Returns value and consumption arrays
    over (time, a, z) and the per-step generators for the density transport."""
    a_nodes, z_nodes, t_nodes = grid.axes(model)
    da, dz, dt = grid.spacings(model)
    n_t = grid.n_t
    v = np.empty((n_t, grid.n_a, grid.n_z))
    c = np.empty_like(v)
    v[-1] = v_terminal
    # terminal consumption: the stationary policy at terminal prices
    c[-1] = _upwind(v_terminal, model, r_path[-1], w_path[-1], a_nodes, z_nodes)[0]
    generators = [None] * (n_t - 1)
    for n in range(n_t - 2, -1, -1):
        try:
            v[n], c[n], generators[n] = _implicit_value_step(
                v[n + 1], model, grid, r_path[n], w_path[n],
                a_nodes, z_nodes, da, dz, dt,
            )
        except OracleError as err:
            raise OracleError(
                f"backward sweep failed at time index {n}: {err}", time_index=n
            ) from err
    return v, c, generators


def kf_forward_sweep(model, grid, generators, g_initial):
    """Forward transport of the density by the transposed generators.

    Returns the density over (time, a, z) and the raw per-step mass drift
    before renormalization.
    """
    a_nodes, z_nodes, _ = grid.axes(model)
    da, dz, dt = grid.spacings(model)
    measure = da * dz
    n_t = grid.n_t
    g = np.empty((n_t, grid.n_a, grid.n_z))
    g0 = np.asarray(g_initial, dtype=np.float64)
    if np.any(g0 < 0):
        raise OracleError("initial density has negative entries")
    g[0] = g0 / (np.sum(g0) * measure)
    drift = np.zeros(n_t - 1)
    n = grid.n_a * grid.n_z
    eye = sp.identity(n, format="csr")
    for step in range(n_t - 1):
        B = (eye - dt * generators[step].T).tocsc()
        try:
            g_next = spla.spsolve(B, g[step].ravel())
        except Exception as err:
            raise OracleError(
                f"density transport failed at time index {step}: {err}",
                time_index=step,
            ) from err
        if float(np.min(g_next)) < -1e-10 / measure:
            raise OracleError(
                f"negative density beyond tolerance at time index {step}",
                time_index=step,
            )
        g_next = np.maximum(g_next, 0.0)
        mass = float(np.sum(g_next) * measure)
        drift[step] = abs(mass - 1.0)
        if drift[step] > 1e-12:
            g_next = g_next / mass
        g[step + 1] = g_next.reshape(grid.n_a, grid.n_z)
    return g, drift


def _measure_capital(g, a_nodes, measure):
    return np.einsum("tij,i->t", g, a_nodes) * measure


def solve_transition(model, grid, g_initial=None, max_outer=200, tol=1e-5,
                     damping=0.5, warm_K_path=None):
    """Outer fixed point on the capital path.

    Each pass: prices from the path, stationary terminal value at terminal
    prices, backward value sweep, forward density sweep, re-measured capital,
    damped update. Stops when the maximum relative change of the path falls
    below tol; raises OracleError with the residual history otherwise.
    """
    model.check()
    grid.check()
    a_nodes, z_nodes, t_nodes = grid.axes(model)
    da, dz, _ = grid.spacings(model)
    measure = da * dz
    if g_initial is None:
        g_initial = initial_density(
            a_nodes[:, None], z_nodes[None, :] * np.ones((grid.n_a, grid.n_z)),
            model,
        )
    g_initial = g_initial / (np.sum(g_initial) * measure)
    K0 = float(np.sum(g_initial * a_nodes[:, None]) * measure)
    K_path = (
        np.asarray(warm_K_path, dtype=np.float64).copy()
        if warm_K_path is not None
        else np.full(grid.n_t, K0)
    )
    residuals = []
    v_term = None
    for outer in range(max_outer):
        prices = prices_from_capital(K_path, model)
        r_path, w_path = prices.r, prices.w
        v_term = stationary_value(
            model, grid, float(r_path[-1]), float(w_path[-1]), v_init=v_term
        )
        v, c, generators = hjb_backward_sweep(model, grid, r_path, w_path, v_term)
        g, mass_drift = kf_forward_sweep(model, grid, generators, g_initial)
        K_meas = _measure_capital(g, a_nodes, measure)
        K_next = K_path + damping * (K_meas - K_path)
        change = float(np.max(np.abs(K_next - K_path) / np.maximum(K_path, 1e-12)))
        residuals.append(change)
        if change < tol:
            # return the path the final sweeps actually used, so v, c, g and
            # the prices are mutually consistent
            return FdSolution(
                a_nodes=a_nodes, z_nodes=z_nodes, t_nodes=t_nodes,
                v=v, g=g, c=c,
                K_path=K_path, r_path=r_path, w_path=w_path,
                mass_drift=mass_drift, outer_residuals=residuals,
            )
        K_path = K_next
    raise OracleError(
        f"capital path did not converge within {max_outer} passes "
        f"(last change {residuals[-1]:.3e})",
        residual_history=residuals,
    )


# -- comparison against the mesh-free solution ---------------------------------


def _pinn_fields_on_slice(value_params, density_params, scaler, model,
                          a_nodes, z_nodes, t):
    """Value, consumption and raw density from the networks on one (a, z)
    grid slice. Consumption needs dv/da, taken with a centered difference on
    the evaluation grid (the networks are smooth; the step is the grid's)."""
    from .autodiff import Tape, grad_nodes
    from .losses import _col
    from .net import apply_mlp, register_constants

    aa, zz = np.meshgrid(a_nodes, z_nodes, indexing="ij")
    a_flat, z_flat = aa.ravel(), zz.ravel()
    t_flat = np.full(a_flat.shape, float(t))

    tape = Tape()
    a_node = tape.input("a", _col(a_flat))
    z_node = tape.constant(_col(z_flat))
    t_node = tape.constant(_col(t_flat))
    layers = register_constants(tape, value_params)
    v_node = apply_mlp(tape, value_params, layers, scaler, a_node, z_node, t_node)
    va = grad_nodes(v_node, [a_node])[0]
    v = v_node.value[:, 0].reshape(aa.shape)
    c = optimal_consumption(va.value[:, 0], model).reshape(aa.shape)
    g = mlp_values(density_params, scaler, a_flat, z_flat, t_flat).reshape(aa.shape)
    return v, c, g


def _rel_l2(x, y):
    denom = float(np.sqrt(np.sum(y * y)))
    if denom == 0.0:
        return float(np.sqrt(np.sum((x - y) ** 2)))
    return float(np.sqrt(np.sum((x - y) ** 2)) / denom)


def compare(value_params, density_params, scaler, model, fd, t_ceiling=None):
    """Error report of the mesh-free solution against the oracle on the
    oracle's grid, restricted to t <= t_ceiling (default 0.8 * horizon, the
    layer unaffected by the missing terminal condition)."""
    if t_ceiling is None:
        t_ceiling = 0.8 * model.horizon
    sel = fd.t_nodes <= t_ceiling + 1e-12
    measure = fd.cell_measure()

    v_err_num = v_err_den = 0.0
    c_err_num = c_err_den = 0.0
    g_err_num = g_err_den = 0.0
    for k in np.nonzero(sel)[0]:
        v_p, c_p, g_p = _pinn_fields_on_slice(
            value_params, density_params, scaler, model,
            fd.a_nodes, fd.z_nodes, fd.t_nodes[k],
        )
        mass_p = float(np.sum(g_p) * measure)
        if mass_p > 0:
            g_p = g_p / mass_p
        v_err_num += float(np.sum((v_p - fd.v[k]) ** 2))
        v_err_den += float(np.sum(fd.v[k] ** 2))
        c_err_num += float(np.sum((c_p - fd.c[k]) ** 2))
        c_err_den += float(np.sum(fd.c[k] ** 2))
        g_err_num += float(np.sum((g_p - fd.g[k]) ** 2))
        g_err_den += float(np.sum(fd.g[k] ** 2))

    def ratio(num, den):
        return float(np.sqrt(num) / np.sqrt(den)) if den > 0 else float(np.sqrt(num))

    report = {
        "t_ceiling": float(t_ceiling),
        "rel_l2_v": ratio(v_err_num, v_err_den),
        "rel_l2_c": ratio(c_err_num, c_err_den),
        "rel_l2_g": ratio(g_err_num, g_err_den),
    }
    return report


def compare_paths(eq_path, fd, t_ceiling=None, model_horizon=None):
    """Absolute and relative discrepancies of the capital and interest-rate
    paths on the trainer's time nodes, restricted to t <= t_ceiling."""
    if t_ceiling is None:
        t_ceiling = 0.8 * (model_horizon if model_horizon else fd.t_nodes[-1])
    nodes = eq_path.t_nodes[eq_path.t_nodes <= t_ceiling + 1e-12]
    K_fd = np.interp(nodes, fd.t_nodes, fd.K_path)
    r_fd = np.interp(nodes, fd.t_nodes, fd.r_path)
    K_p = np.interp(nodes, eq_path.t_nodes, eq_path.K_path)
    r_p = np.interp(nodes, eq_path.t_nodes, eq_path.r_path)
    return {
        "K_abs_max": float(np.max(np.abs(K_p - K_fd))),
        "K_abs_mean": float(np.mean(np.abs(K_p - K_fd))),
        "K_rel_max": float(np.max(np.abs(K_p - K_fd) / np.abs(K_fd))),
        "r_abs_max": float(np.max(np.abs(r_p - r_fd))),
        "r_abs_mean": float(np.mean(np.abs(r_p - r_fd))),
    }
