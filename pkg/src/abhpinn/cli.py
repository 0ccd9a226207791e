"""Run orchestration: configuration, subcommands, and artifact emission.

Subcommands:
  solve    train both networks end to end; emit checkpoints, loss history,
           time paths, and function slices at t = 1, 2, 5, 9
  fd       run the finite-difference oracle; emit the same CSV schema plus a
           reusable solution archive
  compare  error report of a trained checkpoint against an oracle archive
  emit     re-export time paths and slices from an existing checkpoint

Configuration is a flat JSON object whose keys match the model, training,
loss-weight (w_*) and fd_* field names; command-line flags override file
values and every override is logged. Exit codes: 0 success, 2 configuration
error, 3 numeric error, 4 oracle non-convergence.

CSV schemas (locale-independent, fixed column order):
  losses.csv      step, hjb_pde, ic_v, bc, phys, kf_pde, ic_g, mass, total
  timepaths.csv   t, K, Y, r, w
  slice_t{T}.csv  a, z, v, c, g
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import fd_oracle, net, trainer
from .economy import ModelParams, optimal_consumption
from .errors import AbhError, ConfigError, NumericError, OracleError
from .losses import LossBreakdown, LossWeights
from .sampler import build_mesh
from .trainer import TrainConfig

log = logging.getLogger("abhpinn")

SLICE_TIMES = (1.0, 2.0, 5.0, 9.0)
LOSS_COLUMNS = ("hjb_pde", "ic_v", "bc", "phys", "kf_pde", "ic_g", "mass")

_MODEL_FIELDS = (
    "gamma", "rho", "sigma_z", "alpha", "delta", "a_min", "a_max",
    "z_min", "z_max", "horizon", "ic_wealth_mean", "ic_wealth_sd",
    "consumption_floor",
)
_TRAIN_FIELDS = (
    "total_steps", "pretrain_steps", "adam_steps", "adam_lr", "sgd_lr",
    "adam_beta1", "adam_beta2", "adam_eps", "clip_norm",
    "equilibrium_update_every", "price_damping", "seed", "time_grid",
    "n_interior", "grid_per_dim", "quad_nodes", "checkpoint_every",
    "layer_sizes", "continuous_sampling", "density_zero_flux", "skip_pretrain",
)
_WEIGHT_FIELDS = ("hjb_pde", "kf_pde", "ic_v", "ic_g", "bc", "mass", "phys",
                  "g_flux")
_FD_FIELDS = {"fd_n_a": "n_a", "fd_n_z": "n_z", "fd_n_t": "n_t"}
_FD_CONTROLS = ("fd_max_outer", "fd_tol", "fd_damping")
_BOOL_FIELDS = {"continuous_sampling", "density_zero_flux", "skip_pretrain"}
_INT_FIELDS = {
    "total_steps", "pretrain_steps", "adam_steps", "seed", "time_grid",
    "n_interior", "grid_per_dim", "quad_nodes", "checkpoint_every",
    "equilibrium_update_every", "fd_n_a", "fd_n_z", "fd_n_t", "fd_max_outer",
}


@dataclasses.dataclass
class RunConfig:
    """Fully validated run description."""

    command: str
    model: ModelParams
    train: TrainConfig
    fd_grid: fd_oracle.FdGrid
    fd_max_outer: int = 200
    fd_tol: float = 1e-5
    fd_damping: float = 0.5
    out_dir: str = "out"
    resume: str = None
    state_path: str = None
    fd_path: str = None
    raw: dict = dataclasses.field(default_factory=dict)


def config_to_dict(model, train):
    """Flat config dict (the JSON file schema) from live objects."""
    out = {}
    for name in _MODEL_FIELDS:
        out[name] = getattr(model, name)
    for name in _TRAIN_FIELDS:
        value = getattr(train, name)
        out[name] = list(value) if name == "layer_sizes" else value
    for name in _WEIGHT_FIELDS:
        out[f"w_{name}"] = getattr(train.weights, name)
    return out


def config_from_dict(flat):
    """(ModelParams, TrainConfig) from a flat config dict; unknown keys and
    type errors are collected and reported together."""
    problems = []
    known = set(_MODEL_FIELDS) | set(_TRAIN_FIELDS) | set(_FD_FIELDS) | set(
        _FD_CONTROLS
    ) | {f"w_{w}" for w in _WEIGHT_FIELDS}
    for key in flat:
        if key not in known:
            problems.append(f"unknown config key {key!r}")

    def coerce(key, value):
        if key in _BOOL_FIELDS:
            if not isinstance(value, bool):
                raise TypeError(f"{key} must be a boolean, got {value!r}")
            return value
        if key == "layer_sizes":
            if not isinstance(value, (list, tuple)) or not all(
                isinstance(s, int) and not isinstance(s, bool) for s in value
            ):
                raise TypeError(f"layer_sizes must be a list of ints, got {value!r}")
            return tuple(value)
        if key in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError(f"{key} must be an integer, got {value!r}")
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{key} must be a number, got {value!r}")
        return float(value)

    model_kwargs, train_kwargs, weight_kwargs = {}, {}, {}
    for key, value in flat.items():
        if key not in known:
            continue
        try:
            coerced = coerce(key, value)
        except TypeError as err:
            problems.append(str(err))
            continue
        if key in _MODEL_FIELDS:
            model_kwargs[key] = coerced
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = coerced
        elif key.startswith("w_") and key[2:] in _WEIGHT_FIELDS:
            weight_kwargs[key[2:]] = coerced
    # constraint checks still run on whatever coerced cleanly, so unknown
    # keys, type errors, and range violations are all reported together
    model = ModelParams(**model_kwargs)
    train = TrainConfig(weights=LossWeights(**weight_kwargs), **train_kwargs)
    problems.extend(model.validate())
    problems.extend(train.validate())
    if problems:
        raise ConfigError("invalid configuration", problems)
    return model, train


def _fd_from_dict(flat):
    kwargs = {}
    problems = []
    for key, attr in _FD_FIELDS.items():
        if key in flat:
            value = flat[key]
            if isinstance(value, bool) or not isinstance(value, int):
                problems.append(f"{key} must be an integer, got {value!r}")
            else:
                kwargs[attr] = value
    grid = fd_oracle.FdGrid(**kwargs)
    problems.extend(grid.validate())
    controls = {
        "fd_max_outer": int(flat.get("fd_max_outer", 200)),
        "fd_tol": float(flat.get("fd_tol", 1e-5)),
        "fd_damping": float(flat.get("fd_damping", 0.5)),
    }
    if controls["fd_max_outer"] < 1:
        problems.append("fd_max_outer must be >= 1")
    if not controls["fd_tol"] > 0:
        problems.append("fd_tol must be > 0")
    if not 0 < controls["fd_damping"] <= 1:
        problems.append("fd_damping must be in (0, 1]")
    if problems:
        raise ConfigError("invalid fd configuration", problems)
    return grid, controls


def parse_config(argv):
    """Build a RunConfig from CLI arguments plus an optional JSON file.

    Precedence: defaults < file < flags. Every effective override is logged.
    """
    parser = argparse.ArgumentParser(
        prog="abhpinn",
        description="Mesh-free solver for the heterogeneous-agent economy "
                    "with a finite-difference oracle",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("solve", "train the two networks and emit artifacts"),
        ("fd", "run the finite-difference oracle"),
        ("compare", "compare a trained state against an oracle archive"),
        ("emit", "re-export artifacts from an existing training state"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", metavar="PATH", help="flat JSON config file")
        p.add_argument("--out", metavar="DIR", default="out", help="output directory")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--steps", type=int, metavar="N", help="override total_steps")
        p.add_argument("--resume", metavar="PATH", help="training state to resume")
        if name in ("compare", "emit"):
            p.add_argument("--state", metavar="PATH", required=True,
                           help="training state file")
        if name == "compare":
            p.add_argument("--fd", metavar="PATH", required=True,
                           help="oracle solution archive (.npz)")
    args = parser.parse_args(argv)

    flat = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                flat = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in sorted(flat.items()):
            log.info("config file sets %s = %r", key, value)

    if args.seed is not None:
        if "seed" in flat:
            log.info("flag overrides file value: seed = %d", args.seed)
        flat["seed"] = args.seed
    if args.steps is not None:
        if "total_steps" in flat:
            log.info("flag overrides file value: total_steps = %d", args.steps)
        flat["total_steps"] = args.steps

    model, train = config_from_dict(flat)
    grid, controls = _fd_from_dict(flat)
    return RunConfig(
        command=args.command,
        model=model,
        train=train,
        fd_grid=grid,
        fd_max_outer=controls["fd_max_outer"],
        fd_tol=controls["fd_tol"],
        fd_damping=controls["fd_damping"],
        out_dir=args.out,
        resume=args.resume,
        state_path=getattr(args, "state", None),
        fd_path=getattr(args, "fd", None),
        raw=flat,
    )


# -- artifact writers ------------------------------------------------------


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def write_losses_csv(path, history, extra_columns=()):
    columns = LOSS_COLUMNS + tuple(extra_columns)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step," + ",".join(columns) + ",total\n")
        for step, bd in enumerate(history):
            cells = [str(step)]
            cells += [_fmt(getattr(bd, name)) for name in columns]
            cells.append(_fmt(bd.total))
            fh.write(",".join(cells) + "\n")


def write_timepaths_csv(path, t, K, r, w, alpha):
    K = np.asarray(K, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,K,Y,r,w\n")
        for k in range(len(t)):
            row = (t[k], K[k], K[k] ** alpha, r[k], w[k])
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _write_slice_csv(path, a_grid, z_grid, v, c, g):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("a,z,v,c,g\n")
        for row in zip(
            a_grid.ravel(), z_grid.ravel(), v.ravel(), c.ravel(), g.ravel()
        ):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _pinn_slice_fields(state, a_nodes, z_nodes, t):
    v, c, g = fd_oracle._pinn_fields_on_slice(
        state.value_params, state.density_params, state.scaler, state.model,
        a_nodes, z_nodes, t,
    )
    return v, c, g


def write_pinn_slices(out_dir, state, n_mesh=101):
    mesh = build_mesh(state.model, n_mesh, n_mesh)
    aa, zz = np.meshgrid(mesh.a_nodes, mesh.z_nodes, indexing="ij")
    written = []
    for t in SLICE_TIMES:
        if t > state.model.horizon:
            continue
        v, c, g = _pinn_slice_fields(state, mesh.a_nodes, mesh.z_nodes, t)
        path = os.path.join(out_dir, f"slice_t{t:g}.csv")
        _write_slice_csv(path, aa, zz, v, c, g)
        written.append(path)
    return written


def write_fd_slices(out_dir, fd):
    aa, zz = np.meshgrid(fd.a_nodes, fd.z_nodes, indexing="ij")
    written = []
    for t in SLICE_TIMES:
        if t > fd.t_nodes[-1]:
            continue
        k = int(np.argmin(np.abs(fd.t_nodes - t)))
        path = os.path.join(out_dir, f"slice_t{t:g}.csv")
        _write_slice_csv(path, aa, zz, fd.v[k], fd.c[k], fd.g[k])
        written.append(path)
    return written


def write_manifest(out_dir, run_config, artifacts, events=None):
    canon = json.dumps(run_config.raw, sort_keys=True).encode("utf-8")
    manifest = {
        "command": run_config.command,
        "seed": run_config.train.seed,
        "config": run_config.raw,
        "config_sha256": hashlib.sha256(canon).hexdigest(),
        "format_versions": {
            "net_checkpoint": net.MAGIC.decode("ascii"),
            "train_state": trainer.STATE_VERSION,
        },
        "artifacts": sorted(os.path.basename(a) for a in artifacts),
        "events": events or {},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def save_fd_solution(path, fd):
    np.savez(
        path,
        a_nodes=fd.a_nodes, z_nodes=fd.z_nodes, t_nodes=fd.t_nodes,
        v=fd.v, g=fd.g, c=fd.c,
        K_path=fd.K_path, r_path=fd.r_path, w_path=fd.w_path,
        mass_drift=fd.mass_drift,
        outer_residuals=np.asarray(fd.outer_residuals),
    )


def load_fd_solution(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no oracle archive at {path}")
    with np.load(path) as data:
        return fd_oracle.FdSolution(
            a_nodes=data["a_nodes"], z_nodes=data["z_nodes"],
            t_nodes=data["t_nodes"], v=data["v"], g=data["g"], c=data["c"],
            K_path=data["K_path"], r_path=data["r_path"], w_path=data["w_path"],
            mass_drift=data["mass_drift"],
            outer_residuals=list(data["outer_residuals"]),
        )


# -- commands ----------------------------------------------------------------


def _progress_logger(every=500):
    def progress(state):
        if state.step % every == 0:
            bd = state.history[-1]
            log.info(
                "step %d: total %.6g, K(T) %.4f",
                state.step, bd.total, state.eq_path.K_path[-1],
            )

    return progress


def cmd_solve(run_config):
    os.makedirs(run_config.out_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_config.out_dir, "checkpoints")
    if run_config.resume:
        state = trainer.load_state(run_config.resume)
        # the run being resumed must be the same run: everything except the
        # step budget has to match, otherwise determinism claims are void
        saved = config_to_dict(state.model, state.config)
        requested = config_to_dict(run_config.model, run_config.train)
        mism = [
            f"{key}: saved {saved[key]!r} vs requested {requested[key]!r}"
            for key in saved
            if key != "total_steps" and saved[key] != requested[key]
        ]
        if mism:
            raise ConfigError("resume configuration mismatch", mism)
        state.config.total_steps = run_config.train.total_steps
        log.info("resumed from %s at step %d", run_config.resume, state.step)
    else:
        state = trainer.init_state(run_config.model, run_config.train)
    state = trainer.run(state, checkpoint_dir=ckpt_dir,
                        progress=_progress_logger())
    artifacts = []
    losses_path = os.path.join(run_config.out_dir, "losses.csv")
    extra = ("g_flux",) if run_config.train.density_zero_flux else ()
    write_losses_csv(losses_path, state.history, extra)
    artifacts.append(losses_path)
    paths_path = os.path.join(run_config.out_dir, "timepaths.csv")
    write_timepaths_csv(
        paths_path, state.eq_path.t_nodes, state.eq_path.K_path,
        state.eq_path.r_path, state.eq_path.w_path, run_config.model.alpha,
    )
    artifacts.append(paths_path)
    for name, params in (
        ("value_net.ckpt", state.value_params),
        ("density_net.ckpt", state.density_params),
    ):
        path = os.path.join(run_config.out_dir, name)
        net.save_params(path, params)
        artifacts.append(path)
    artifacts += write_pinn_slices(run_config.out_dir, state)
    events = {
        "pretrain_end_step": run_config.train.pretrain_steps,
        "optimizer_switch_step": run_config.train.adam_steps,
        "final_step": state.step,
        "final_K_T": float(state.eq_path.K_path[-1]),
        "final_r_T": float(state.eq_path.r_path[-1]),
    }
    write_manifest(run_config.out_dir, run_config, artifacts, events)
    log.info("solve finished: K(T) = %.4f, r(T) = %.4f",
             state.eq_path.K_path[-1], state.eq_path.r_path[-1])
    return 0


def cmd_fd(run_config):
    os.makedirs(run_config.out_dir, exist_ok=True)
    fd = fd_oracle.solve_transition(
        run_config.model, run_config.fd_grid,
        max_outer=run_config.fd_max_outer, tol=run_config.fd_tol,
        damping=run_config.fd_damping,
    )
    artifacts = []
    paths_path = os.path.join(run_config.out_dir, "timepaths.csv")
    write_timepaths_csv(paths_path, fd.t_nodes, fd.K_path, fd.r_path,
                        fd.w_path, run_config.model.alpha)
    artifacts.append(paths_path)
    artifacts += write_fd_slices(run_config.out_dir, fd)
    npz_path = os.path.join(run_config.out_dir, "fd_solution.npz")
    save_fd_solution(npz_path, fd)
    artifacts.append(npz_path)
    write_manifest(run_config.out_dir, run_config, artifacts,
                   {"outer_iterations": len(fd.outer_residuals)})
    log.info("oracle finished in %d outer passes: K(T) = %.4f",
             len(fd.outer_residuals), fd.K_path[-1])
    return 0


def cmd_compare(run_config):
    os.makedirs(run_config.out_dir, exist_ok=True)
    if not os.path.exists(run_config.state_path):
        raise FileNotFoundError(f"no training state at {run_config.state_path}")
    state = trainer.load_state(run_config.state_path)
    fd = load_fd_solution(run_config.fd_path)
    report = fd_oracle.compare(
        state.value_params, state.density_params, state.scaler, state.model, fd
    )
    report.update(fd_oracle.compare_paths(state.eq_path, fd,
                                          model_horizon=state.model.horizon))
    report["verdicts"] = {
        "c_rel_l2_below_20pct": bool(report["rel_l2_c"] < 0.20),
        "K_rel_max_below_15pct": bool(report["K_rel_max"] < 0.15),
    }
    path = os.path.join(run_config.out_dir, "compare_report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(run_config.out_dir, run_config, [path])
    log.info("comparison written to %s", path)
    return 0


def cmd_emit(run_config):
    os.makedirs(run_config.out_dir, exist_ok=True)
    if not os.path.exists(run_config.state_path):
        raise FileNotFoundError(f"no training state at {run_config.state_path}")
    state = trainer.load_state(run_config.state_path)
    artifacts = []
    paths_path = os.path.join(run_config.out_dir, "timepaths.csv")
    write_timepaths_csv(
        paths_path, state.eq_path.t_nodes, state.eq_path.K_path,
        state.eq_path.r_path, state.eq_path.w_path, state.model.alpha,
    )
    artifacts.append(paths_path)
    artifacts += write_pinn_slices(run_config.out_dir, state)
    write_manifest(run_config.out_dir, run_config, artifacts,
                   {"source_step": state.step})
    return 0


_COMMANDS = {"solve": cmd_solve, "fd": cmd_fd, "compare": cmd_compare,
             "emit": cmd_emit}


def run(run_config):
    return _COMMANDS[run_config.command](run_config)


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        run_config = parse_config(argv if argv is not None else sys.argv[1:])
        code = run(run_config)
    except ConfigError as err:
        for problem in err.problems:
            log.error("configuration: %s", problem)
        code = 2
    except FileNotFoundError as err:
        log.error("%s", err)
        code = 2
    except NumericError as err:
        log.error("numeric failure: %s", err)
        code = 3
    except OracleError as err:
        log.error("oracle failure: %s", err)
        code = 4
    except AbhError as err:
        log.error("%s", err)
        code = 3
    return code


if __name__ == "__main__":
    sys.exit(main())
