"""Two-phase training loop with equilibrium price feedback.

Phase one (pretraining) trains only the value network against its PDE,
initial-condition, boundary and shape losses, holding prices fixed at the
level implied by the initial population density. Phase two alternates one
value-network step and one density-network step per iteration, and every few
steps re-measures aggregate capital from the density network and relaxes the
price path toward it. Both networks step with Adam first and plain SGD after
a fixed switch point; gradients are norm-clipped throughout.

Determinism contract: a (seed, config) pair fixes the whole trajectory
bitwise. One RNG stream owned by the state draws exactly one batch per step,
so a shorter run is a prefix of a longer one, and save/resume reproduces an
uninterrupted run exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import net
from .economy import aggregate_capital, initial_density, prices_from_capital
from .errors import ConfigError, FormatError, NumericError
from .autodiff import param_gradient
from .losses import (
    LossBreakdown,
    LossWeights,
    build_density_objective,
    build_value_objective,
)
from .sampler import build_mesh, sample_batch

STATE_MAGIC = b"ABHSTAT1"
STATE_VERSION = 1


@dataclass
class TrainConfig:
    """Schedule, optimizer, sampling, and equilibrium-update settings."""

    total_steps: int = 25000
    pretrain_steps: int = 2500
    adam_steps: int = 7500
    adam_lr: float = 1e-3
    sgd_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    equilibrium_update_every: int = 5
    price_damping: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    time_grid: int = 11
    n_interior: int = 100
    grid_per_dim: int = 11
    # resolution of the in-loop quadrature mesh for the mass penalty and
    # capital aggregation; artifact emission uses the full 101x101 mesh.
    # 21 nodes put the trapezoid bias orders of magnitude below the mass
    # tolerance while keeping the per-step cost single-core friendly.
    quad_nodes: int = 21
    checkpoint_every: int = 1000
    layer_sizes: tuple = (3, 128, 128, 128, 1)
    # Collocation points are drawn continuously from the box by default.
    # Lattice draws (continuous_sampling=False) never place points between
    # the 11 nodes per axis, so the shape penalties cannot see the boundary-
    # layer overshoot that forms between nodes near the borrowing constraint;
    # measured off-lattice monotonicity violations were ~5% under lattice
    # sampling versus ~0.01% under continuous sampling.
    continuous_sampling: bool = True
    density_zero_flux: bool = False
    skip_pretrain: bool = False

    def validate(self):
        problems = []
        if not (0 <= self.pretrain_steps <= self.adam_steps <= self.total_steps):
            problems.append(
                "need pretrain_steps <= adam_steps <= total_steps, got "
                f"{self.pretrain_steps}/{self.adam_steps}/{self.total_steps}"
            )
        for name in ("adam_lr", "sgd_lr", "clip_norm"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.price_damping <= 1:
            problems.append(f"price_damping must be in (0, 1], got {self.price_damping}")
        if self.equilibrium_update_every < 1:
            problems.append("equilibrium_update_every must be >= 1")
        if self.time_grid < 2:
            problems.append("time_grid must be >= 2")
        if self.n_interior < 1:
            problems.append("n_interior must be >= 1")
        if self.grid_per_dim < 2:
            problems.append("grid_per_dim must be >= 2")
        if self.quad_nodes < 2:
            problems.append("quad_nodes must be >= 2")
        if self.checkpoint_every < 1:
            problems.append("checkpoint_every must be >= 1")
        problems.extend(self.weights.validate())
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise ConfigError("invalid training configuration", problems)
        return self


@dataclass
class OptimizerState:
    """Adam moments (or nothing, for SGD) plus the per-optimizer step count."""

    kind: str
    first_moment: np.ndarray = None
    second_moment: np.ndarray = None
    step_count: int = 0

    @classmethod
    def adam(cls, n_params):
        return cls("adam", np.zeros(n_params), np.zeros(n_params), 0)

    @classmethod
    def sgd(cls):
        return cls("sgd", None, None, 0)


def adam_step(flat_params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update on a flat parameter vector."""
    if state.kind != "adam":
        raise ConfigError("adam_step called with a non-adam optimizer state")
    if flat_params.shape != grads.shape or flat_params.shape != state.first_moment.shape:
        raise ConfigError("parameter/gradient/moment shapes disagree")
    if not np.all(np.isfinite(grads)):
        bad = int(np.argwhere(~np.isfinite(grads))[0][0])
        raise NumericError(
            f"non-finite gradient component {bad}; step rejected", point_index=bad
        )
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grads
    v = beta2 * state.second_moment + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = flat_params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, OptimizerState("adam", m, v, t)


def sgd_step(flat_params, grads, lr):
    """Plain gradient descent on a flat parameter vector."""
    if flat_params.shape != grads.shape:
        raise ConfigError("parameter/gradient shapes disagree")
    if not np.all(np.isfinite(grads)):
        bad = int(np.argwhere(~np.isfinite(grads))[0][0])
        raise NumericError(
            f"non-finite gradient component {bad}; step rejected", point_index=bad
        )
    return flat_params - lr * grads


def clip_gradients(grads, max_norm):
    """Scale the gradient vector down to the given L2 norm if it exceeds it."""
    if max_norm <= 0:
        raise ConfigError(f"clip norm must be > 0, got {max_norm}")
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


@dataclass
class EquilibriumPath:
    """Time profiles of capital, prices and output on a fixed node grid,
    with linear interpolation between nodes."""

    t_nodes: np.ndarray
    K_path: np.ndarray
    r_path: np.ndarray
    w_path: np.ndarray
    Y_path: np.ndarray

    def prices_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (
            np.interp(t, self.t_nodes, self.r_path),
            np.interp(t, self.t_nodes, self.w_path),
        )

    @classmethod
    def flat(cls, model, K0, n_nodes):
        t_nodes = np.linspace(0.0, model.horizon, n_nodes)
        K_path = np.full(n_nodes, float(K0))
        prices = prices_from_capital(K_path, model)
        return cls(t_nodes, K_path, prices.r, prices.w, K_path**model.alpha)


def compute_equilibrium_path(density_eval, mesh, t_nodes, model, prev=None,
                             damping=1.0):
    """Measure K(t) from the density by quadrature, relax toward it with the
    given damping (damping=1 reproduces the undamped update), and reprice."""
    t_nodes = np.asarray(t_nodes, dtype=np.float64)
    K_meas = np.array(
        [aggregate_capital(density_eval, mesh, t) for t in t_nodes]
    )
    if prev is None:
        K_new = K_meas
    else:
        if prev.t_nodes.shape != t_nodes.shape or not np.allclose(
            prev.t_nodes, t_nodes
        ):
            raise ConfigError("equilibrium path time grid changed between updates")
        K_new = (1.0 - damping) * prev.K_path + damping * K_meas
    prices = prices_from_capital(K_new, model)
    return EquilibriumPath(t_nodes, K_new, prices.r, prices.w,
                           K_new**model.alpha)


@dataclass
class TrainState:
    """Everything needed to continue (or reproduce) a run from a given step."""

    value_params: net.MlpParams
    density_params: net.MlpParams
    scaler: net.InputScaler
    opt_v: OptimizerState
    opt_g: OptimizerState
    step: int
    eq_path: EquilibriumPath
    rng: np.random.Generator
    history: list
    config: TrainConfig
    model: object


def density_evaluator(params, scaler):
    """Fast plain-numpy density evaluator for quadrature (no derivatives)."""

    def evaluate(a, z, t):
        a = np.asarray(a, dtype=np.float64)
        tt = np.full(a.shape, float(t)) if np.ndim(t) == 0 else t
        return net.mlp_values(params, scaler, a, z, tt)

    return evaluate


def init_state(model, config):
    """Fresh networks, flat price path at the capital stock implied by the
    initial density, and a seeded RNG stream."""
    model.check()
    config.check()
    scaler = net.InputScaler.from_bounds(
        model.a_min, model.a_max, model.z_min, model.z_max, model.horizon
    )
    value_params = net.init(config.seed, config.layer_sizes, "identity")
    density_params = net.init(config.seed + 1, config.layer_sizes, "softplus")
    mesh = build_mesh(model, config.quad_nodes, config.quad_nodes)
    K0 = aggregate_capital(lambda a, z, t: initial_density(a, z, model), mesh, 0.0)
    eq_path = EquilibriumPath.flat(model, K0, config.time_grid)
    return TrainState(
        value_params=value_params,
        density_params=density_params,
        scaler=scaler,
        opt_v=OptimizerState.adam(value_params.n_params()),
        opt_g=OptimizerState.adam(density_params.n_params()),
        step=0,
        eq_path=eq_path,
        rng=np.random.default_rng(config.seed + 2),
        history=[],
        config=config,
        model=model,
    )


def _locate_numeric_fault(build, step):
    """Re-run a failing objective with per-node checking to name the fault."""
    try:
        build(check_finite=True)
    except NumericError as err:
        raise NumericError(
            f"non-finite loss at step {step}: {err}",
            node_index=err.node_index,
            point_index=err.point_index,
        ) from err
    raise NumericError(f"non-finite loss at step {step} (gradient stage)")


def _apply_update(flat, grads, opt, config, step):
    """Clip, then Adam or SGD depending on where the step sits in the
    schedule; the optimizer switches kinds at adam_steps exactly."""
    grads = clip_gradients(grads, config.clip_norm)
    if step < config.adam_steps:
        if opt.kind != "adam":
            raise ConfigError("optimizer regressed from sgd to adam")
        return adam_step(
            flat, grads, opt, config.adam_lr,
            config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
    if opt.kind != "sgd":
        opt = OptimizerState.sgd()
    return sgd_step(flat, grads, config.sgd_lr), opt


def _value_update(state, model, config, batch, prices_at):
    def build(check_finite=False):
        return build_value_objective(
            state.value_params, state.scaler, model, prices_at, batch,
            config.weights, check_finite=check_finite,
        )

    tape, total, breakdown = build()
    if not np.isfinite(breakdown.total):
        _locate_numeric_fault(build, state.step)
    grads = param_gradient(tape, state.value_params)
    flat, state.opt_v = _apply_update(
        state.value_params.flatten(), grads, state.opt_v, config, state.step
    )
    state.value_params = state.value_params.with_flat(flat)
    return breakdown


def _density_update(state, model, config, batch, prices_at, mesh, mass_t_nodes):
    def build(check_finite=False):
        return build_density_objective(
            state.density_params, state.value_params, state.scaler, model,
            prices_at, batch, mesh, mass_t_nodes, config.weights,
            check_finite=check_finite, zero_flux=config.density_zero_flux,
        )

    tape, total, breakdown = build()
    if not np.isfinite(breakdown.total):
        _locate_numeric_fault(build, state.step)
    grads = param_gradient(tape, state.density_params)
    flat, state.opt_g = _apply_update(
        state.density_params.flatten(), grads, state.opt_g, config, state.step
    )
    state.density_params = state.density_params.with_flat(flat)
    return breakdown


def _checkpoint_path(checkpoint_dir, step):
    return os.path.join(checkpoint_dir, f"state_{step:06d}.bin")


def _maybe_checkpoint(state, checkpoint_dir, force=False):
    if checkpoint_dir is None:
        return
    config = state.config
    if force or state.step % config.checkpoint_every == 0:
        os.makedirs(checkpoint_dir, exist_ok=True)
        save_state(_checkpoint_path(checkpoint_dir, state.step), state)


def _emergency_checkpoint(state, checkpoint_dir):
    if checkpoint_dir is None:
        return
    os.makedirs(checkpoint_dir, exist_ok=True)
    save_state(os.path.join(checkpoint_dir, "state_aborted.bin"), state)


def pretrain(state, checkpoint_dir=None, progress=None):
    """Phase one: value-network updates only, prices frozen at the initial
    path. The density network and its optimizer are untouched."""
    model, config = state.model, state.config
    stop = config.pretrain_steps if not config.skip_pretrain else 0
    try:
        while state.step < min(stop, config.total_steps):
            batch = sample_batch(
                state.rng, model, config.n_interior, config.grid_per_dim,
                config.continuous_sampling,
            )
            breakdown = _value_update(state, model, config, batch,
                                      state.eq_path.prices_at)
            state.history.append(breakdown)
            state.step += 1
            _maybe_checkpoint(state, checkpoint_dir)
            if progress is not None:
                progress(state)
    except NumericError:
        _emergency_checkpoint(state, checkpoint_dir)
        raise
    return state


def train(state, checkpoint_dir=None, progress=None):
    """Phase two: joint updates with periodic equilibrium refreshes.

    Per step: draw a batch, update the value network, then update the density
    network against the freshly updated (frozen) value field; every
    equilibrium_update_every steps re-measure capital and relax prices.
    """
    model, config = state.model, state.config
    mesh = build_mesh(model, config.quad_nodes, config.quad_nodes)
    mass_t_nodes = np.linspace(0.0, model.horizon, config.time_grid)
    try:
        while state.step < config.total_steps:
            batch = sample_batch(
                state.rng, model, config.n_interior, config.grid_per_dim,
                config.continuous_sampling,
            )
            bd_v = _value_update(state, model, config, batch,
                                 state.eq_path.prices_at)
            bd_g = _density_update(state, model, config, batch,
                                   state.eq_path.prices_at, mesh, mass_t_nodes)
            state.history.append(bd_v.merged_with(bd_g))
            state.step += 1
            if state.step % config.equilibrium_update_every == 0:
                state.eq_path = compute_equilibrium_path(
                    density_evaluator(state.density_params, state.scaler),
                    mesh, state.eq_path.t_nodes, model,
                    prev=state.eq_path, damping=config.price_damping,
                )
            _maybe_checkpoint(state, checkpoint_dir)
            if progress is not None:
                progress(state)
    except NumericError:
        _emergency_checkpoint(state, checkpoint_dir)
        raise
    _maybe_checkpoint(state, checkpoint_dir, force=True)
    return state


def run(state, checkpoint_dir=None, progress=None):
    """Pretrain (unless skipped) then train to total_steps."""
    pretrain(state, checkpoint_dir, progress)
    return train(state, checkpoint_dir, progress)


# -- state serialization -------------------------------------------------------


def _pack_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return struct.pack("<Q", arr.size) + arr.tobytes()


def _unpack_array(blob, off):
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if off + 8 * n > len(blob):
        raise FormatError("state file truncated inside an array")
    arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
    return arr, off + 8 * n


def _pack_blob(b):
    return struct.pack("<Q", len(b)) + b


def _unpack_blob(blob, off):
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if off + n > len(blob):
        raise FormatError("state file truncated inside a blob")
    return blob[off : off + n], off + n


def _history_to_array(history):
    rows = np.full((len(history), len(LossBreakdown.__dataclass_fields__)), np.nan)
    names = list(LossBreakdown.__dataclass_fields__)
    for i, bd in enumerate(history):
        for j, name in enumerate(names):
            val = getattr(bd, name)
            if val is not None:
                rows[i, j] = val
    return rows


def _history_from_array(rows):
    names = list(LossBreakdown.__dataclass_fields__)
    history = []
    for row in rows.reshape(-1, len(names)):
        bd = LossBreakdown()
        for j, name in enumerate(names):
            setattr(bd, name, None if np.isnan(row[j]) else float(row[j]))
        bd.total = bd.total if bd.total is not None else 0.0
        history.append(bd)
    return history


def _opt_meta(opt):
    return {"kind": opt.kind, "step_count": opt.step_count}


def save_state(path, state):
    """Atomic (write-temp, rename) binary dump of the full training state."""
    from .cli import config_to_dict  # local import to avoid a cycle

    meta = {
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "opt_v": _opt_meta(state.opt_v),
        "opt_g": _opt_meta(state.opt_g),
        "config": config_to_dict(state.model, state.config),
    }
    out = bytearray()
    out += STATE_MAGIC
    out += struct.pack("<I", STATE_VERSION)
    out += struct.pack("<Q", state.step)
    out += _pack_blob(json.dumps(meta, sort_keys=True).encode("utf-8"))
    for arr in (state.eq_path.t_nodes, state.eq_path.K_path, state.eq_path.r_path,
                state.eq_path.w_path, state.eq_path.Y_path):
        out += _pack_array(arr)
    out += _pack_blob(net.serialize(state.value_params))
    out += _pack_blob(net.serialize(state.density_params))
    for opt in (state.opt_v, state.opt_g):
        if opt.kind == "adam":
            out += _pack_array(opt.first_moment)
            out += _pack_array(opt.second_moment)
        else:
            out += _pack_array(np.empty(0))
            out += _pack_array(np.empty(0))
    out += _pack_array(_history_to_array(state.history).ravel())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
    os.replace(tmp, path)


def load_state(path):
    """Inverse of save_state; FormatError on any malformation."""
    from .cli import config_from_dict  # local import to avoid a cycle

    if not os.path.exists(path):
        raise FileNotFoundError(f"no training state at {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(STATE_MAGIC) + 12 or blob[: len(STATE_MAGIC)] != STATE_MAGIC:
        raise FormatError("bad state-file magic")
    off = len(STATE_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != STATE_VERSION:
        raise FormatError(f"unsupported state version {version}")
    (step,) = struct.unpack_from("<Q", blob, off)
    off += 8
    meta_blob, off = _unpack_blob(blob, off)
    try:
        meta = json.loads(meta_blob.decode("utf-8"))
    except json.JSONDecodeError as err:
        raise FormatError(f"corrupt state metadata: {err}") from err
    arrays = []
    for _ in range(5):
        arr, off = _unpack_array(blob, off)
        arrays.append(arr)
    value_blob, off = _unpack_blob(blob, off)
    density_blob, off = _unpack_blob(blob, off)
    moments = []
    for _ in range(4):
        arr, off = _unpack_array(blob, off)
        moments.append(arr)
    history_flat, off = _unpack_array(blob, off)
    if off != len(blob):
        raise FormatError("trailing bytes in state file")

    model, config = config_from_dict(meta["config"])
    value_params = net.deserialize(value_blob)
    density_params = net.deserialize(density_blob)

    def rebuild_opt(tag, m, v):
        info = meta[tag]
        if info["kind"] == "adam":
            return OptimizerState("adam", m, v, int(info["step_count"]))
        return OptimizerState("sgd", None, None, int(info["step_count"]))

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    scaler = net.InputScaler.from_bounds(
        model.a_min, model.a_max, model.z_min, model.z_max, model.horizon
    )
    eq_path = EquilibriumPath(*arrays)
    return TrainState(
        value_params=value_params,
        density_params=density_params,
        scaler=scaler,
        opt_v=rebuild_opt("opt_v", moments[0], moments[1]),
        opt_g=rebuild_opt("opt_g", moments[2], moments[3]),
        step=int(step),
        eq_path=eq_path,
        rng=rng,
        history=_history_from_array(history_flat),
        config=config,
        model=model,
    )
