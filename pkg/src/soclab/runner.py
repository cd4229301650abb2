"""Training loops, experiment configuration, and run persistence.

A run is: build the problem and the policy, then iterate (simulate a batch
under the sampling control v, evaluate the selected loss, Adam-update the
control parameters and, for the learned-matrices loss, the matrix parameters
in the same step), recording metrics every `eval_cadence` iterations and
checkpoints every `checkpoint_every` plus at the end.

Determinism: every random draw comes from a named RngStreams stream indexed by
the iteration (or evaluation) number, so skipping a failed step consumes only
that step's streams and a rerun with the same seed — including one with
injected failures at fixed steps — reproduces metrics.csv bitwise. Wall-clock
time is reported only in summary.json for the same reason.
"""

from __future__ import annotations

import configparser
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tape
from .errors import (
    ConfigError,
    ContractError,
    DegenerateWeightsError,
    RunAbortedError,
    SimulationDivergedError,
)
from .ground_truth import make_ground_truth, save_ground_truth_cache
from .losses import (
    adjoint_matching_field,
    loss_adjoint,
    loss_cross_entropy,
    loss_log_variance,
    loss_moment,
    loss_socm,
    loss_socm_with_field,
    loss_variance,
)
from .metrics import (
    CSV_COLUMNS,
    MetricsRecord,
    alpha_normalized_std,
    control_l2_error,
    control_objective,
    ema_update,
    format_header,
    format_row,
    grad_norm_sq,
    stl_objective,
)
from .nets import (
    Adam,
    ClosedFormPolicy,
    CompositePolicy,
    GatedMatrices,
    IdentityMatrices,
    NeuralPolicy,
    load_checkpoint,
    save_checkpoint,
)
from .problem import make_setting
from .rng import RngStreams
from .sim import dump_states, importance_weight, rollout, sample_increments
from .warmstart import (
    GaussianSplinePath,
    gaussian_control,
    load_warmstart,
    rgsoc_train,
)

__all__ = [
    "RunConfig",
    "load_config",
    "train",
    "eval_checkpoint",
    "build_ground_truth_cache",
    "LOSS_NAMES",
]

LOSS_NAMES = ("socm", "socm_id", "socm_adjoint", "cross_entropy",
              "variance", "log_variance", "moment", "adjoint")
V_MODES = ("current", "zero", "warm_start")

# Test hook: callable iteration -> bool; True makes that training step fail
# with a simulated divergence. Used to verify skip-determinism.
FAULT_INJECTOR = None

MAX_CONSECUTIVE_FAILURES = 50


@dataclass
class RunConfig:
    """Everything a training run needs; file + CLI land here."""

    setting: str = "quadratic_ou_easy"
    dim: int | None = None
    problem_seed: int = 0
    loss: str = "socm"
    seed: int = 0
    iterations: int = 1000
    batch: int | None = None       # None: setting default
    steps: int | None = None       # None: setting default
    lr_control: float = 1e-4
    lr_matrices: float = 1e-2
    warm_start: str = "none"       # none | gaussian | path to a spline checkpoint
    warm_start_iters: int = 2000
    v_mode: str = "current"        # sampling control: current | zero | warm_start
    eval_cadence: int = 10
    eval_batches: int = 10
    width: int = 128
    hidden: int = 3
    output_dir: str = "run_output"
    checkpoint_every: int = 1000
    dump_trajectories: bool = False


_SCHEMA = {
    "problem": {
        "setting": ("setting", str),
        "dim": ("dim", int),
        "problem_seed": ("problem_seed", int),
    },
    "training": {
        "loss": ("loss", str),
        "seed": ("seed", int),
        "iterations": ("iterations", int),
        "batch": ("batch", int),
        "steps": ("steps", int),
        "lr_control": ("lr_control", float),
        "lr_matrices": ("lr_matrices", float),
        "warm_start": ("warm_start", str),
        "warm_start_iters": ("warm_start_iters", int),
        "v_mode": ("v_mode", str),
        "eval_cadence": ("eval_cadence", int),
        "eval_batches": ("eval_batches", int),
        "width": ("width", int),
        "hidden": ("hidden", int),
    },
    "output": {
        "directory": ("output_dir", str),
        "checkpoint_every": ("checkpoint_every", int),
        "dump_trajectories": ("dump_trajectories", bool),
    },
}

_BOOL_STATES = {"1": True, "yes": True, "true": True, "on": True,
                "0": False, "no": False, "false": False, "off": False}


def _convert(section: str, key: str, raw: str, target_type):
    if target_type is bool:
        state = _BOOL_STATES.get(raw.strip().lower())
        if state is None:
            raise ConfigError(f"[{section}] {key}: not a boolean: {raw!r}")
        return state
    try:
        return target_type(raw)
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from None


def validate_config(config: RunConfig) -> RunConfig:
    if config.loss not in LOSS_NAMES:
        raise ConfigError(
            f"unknown loss {config.loss!r}; valid losses: {', '.join(LOSS_NAMES)}")
    if config.v_mode not in V_MODES:
        raise ConfigError(
            f"unknown v_mode {config.v_mode!r}; valid modes: {', '.join(V_MODES)}")
    if config.loss == "adjoint" and config.v_mode != "current":
        raise ConfigError("the adjoint loss differentiates through the rollout "
                          "and requires v_mode=current")
    if config.v_mode == "warm_start" and config.warm_start == "none":
        raise ConfigError("v_mode=warm_start requires a warm start")
    if config.iterations < 0:
        raise ConfigError("iterations must be >= 0")
    for name in ("batch", "steps"):
        value = getattr(config, name)
        if value is not None and value < 1:
            raise ConfigError(f"{name} must be >= 1")
    if config.eval_cadence < 1 or config.eval_batches < 1:
        raise ConfigError("eval_cadence and eval_batches must be >= 1")
    if config.lr_control <= 0 or config.lr_matrices <= 0:
        raise ConfigError("learning rates must be positive")
    if config.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    return config


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse an INI run configuration ([problem] / [training] / [output]).

    Unknown sections or keys are rejected; parse errors carry the line number
    (configparser includes it in the message). `overrides` (already typed, by
    RunConfig field name) take precedence over file values.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except configparser.Error as err:
        raise ConfigError(f"config parse error: {err}") from None

    kwargs = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; expected "
                f"{', '.join(_SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            field_name, target_type = _SCHEMA[section][key]
            kwargs[field_name] = _convert(section, key, raw, target_type)

    if overrides:
        for field_name, value in overrides.items():
            if value is not None:
                kwargs[field_name] = value

    config = RunConfig(**kwargs)
    validate_config(config)
    # fill batch/steps defaults from the setting registry so the resolved
    # config is explicit in summary.json
    _, defaults = make_setting(config.setting, seed=config.problem_seed,
                               dim=config.dim)
    if config.batch is None:
        config.batch = int(defaults["batch"])
    if config.steps is None:
        config.steps = int(defaults["steps"])
    return config


def _zero_control(x, t):
    return np.zeros_like(np.asarray(x, dtype=float))


def _build_warm_start(spec, config: RunConfig, streams: RngStreams):
    """Returns (base control fn or None, spline path or None)."""
    if config.warm_start == "none":
        return None, None
    if config.warm_start == "gaussian":
        path, _history = rgsoc_train(
            spec, iters=config.warm_start_iters,
            rng=streams.generator("warm_start"))
    else:
        path = load_warmstart(config.warm_start)
        if path.dim != spec.dim:
            raise ConfigError(
                f"warm-start checkpoint dimension {path.dim} != setting "
                f"dimension {spec.dim}")
    return (lambda x, t: gaussian_control(spec, path, x, t)), path


def _detached_loss(config: RunConfig, spec, policy, matrices, y0, traj):
    name = config.loss
    if name == "socm" or name == "socm_id":
        return loss_socm(spec, policy, matrices, traj)
    if name == "socm_adjoint":
        fld = adjoint_matching_field(spec, traj)
        return loss_socm_with_field(spec, policy, fld, traj)
    if name == "cross_entropy":
        return loss_cross_entropy(spec, policy, traj)
    if name == "variance":
        return loss_variance(spec, policy, traj)
    if name == "log_variance":
        return loss_log_variance(spec, policy, traj)
    if name == "moment":
        return loss_moment(spec, policy, y0, traj)
    raise ConfigError(f"unknown loss {name!r}")


def _spline_arch(path: GaussianSplinePath) -> dict:
    return {"knots": path.knots, "horizon": path.horizon}


def _spline_group(path: GaussianSplinePath) -> dict:
    return {"mu_knots": path.mu_knots, "gamma_offsets": path.gamma_offsets,
            "sigma0": path.sigma0}


def _save_run_checkpoint(file_path, config: RunConfig, spec, policy, matrices,
                         y0, warm_path, iteration: int):
    architecture = {
        "kind": "policy",
        "setting": config.setting,
        "dim": spec.dim,
        "problem_seed": config.problem_seed,
        "width": config.width,
        "hidden": config.hidden,
        "loss": config.loss,
        "iteration": iteration,
        "composite": warm_path is not None,
    }
    control_params = (policy.residual.params
                      if isinstance(policy, CompositePolicy) else policy.params)
    groups = {"control": control_params}
    if matrices is not None and matrices.params:
        groups["matrices"] = matrices.params
    if y0 is not None:
        groups["extra"] = {"y0": y0["y0"]}
    if warm_path is not None:
        architecture["warmstart"] = _spline_arch(warm_path)
        groups["warmstart"] = _spline_group(warm_path)
    save_checkpoint(file_path, architecture, groups)


def _rebuild_policy(spec, architecture: dict, groups: dict):
    policy = NeuralPolicy(spec.dim, width=int(architecture["width"]),
                          hidden=int(architecture["hidden"]),
                          rng=np.random.default_rng(0))
    stored = groups.get("control", {})
    if set(stored) != set(policy.params):
        raise ContractError(
            "checkpoint control parameters do not match the architecture")
    for key, value in stored.items():
        policy.params[key][...] = value
    if architecture.get("composite"):
        meta = architecture["warmstart"]
        g = groups["warmstart"]
        path = GaussianSplinePath(horizon=float(meta["horizon"]),
                                  mu_knots=g["mu_knots"],
                                  gamma_offsets=g["gamma_offsets"],
                                  sigma0=g["sigma0"]).validate()
        return CompositePolicy(lambda x, t: gaussian_control(spec, path, x, t),
                               policy)
    return policy


def _evaluate(spec, config: RunConfig, policy, gt, streams: RngStreams,
              iteration: int, m: int, steps: int, ema: float | None):
    """One metrics evaluation: L2 error averaged over eval_batches fresh
    batches (EMA-updated), objective and weight dispersion on one batch."""
    l2 = float("nan")
    if gt is not None:
        values = []
        for j in range(config.eval_batches):
            gen = streams.generator("eval_l2", iteration * config.eval_batches + j)
            values.append(control_l2_error(spec, policy, gt, m, steps, gen))
        l2 = float(np.mean(values))
        ema = ema_update(ema, l2)

    gen = streams.generator("eval_obj", iteration)
    x0 = spec.initial_law.sample(m, spec.dim, gen)
    increments = sample_increments(m, steps, spec.dim, spec.horizon, gen)
    traj = rollout(spec, policy, increments, x0=x0)
    obj_mean, obj_std = control_objective(spec, traj)
    stl_mean, stl_std = stl_objective(spec, traj)
    try:
        weights = importance_weight(spec, traj)
        alpha_std = alpha_normalized_std(weights.values)
    except DegenerateWeightsError:
        alpha_std = float("inf")
    return l2, ema, obj_mean, obj_std, stl_mean, stl_std, alpha_std


def train(config: RunConfig) -> dict:
    """Run the training loop; writes metrics.csv, summary.json, checkpoints
    into config.output_dir and returns the summary dictionary."""
    t_start = time.time()
    validate_config(config)
    spec, defaults = make_setting(config.setting, seed=config.problem_seed,
                                  dim=config.dim)
    m = int(config.batch if config.batch is not None else defaults["batch"])
    steps = int(config.steps if config.steps is not None else defaults["steps"])
    d = spec.dim

    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "run.log")
    streams = RngStreams(config.seed)

    try:
        gt = make_ground_truth(spec)
    except ConfigError:
        gt = None  # no closed-form reference (e.g. the mixture sampler)

    warm_fn, warm_path = _build_warm_start(spec, config, streams)

    policy = NeuralPolicy(d, width=config.width, hidden=config.hidden,
                          rng=streams.generator("policy_init"))
    if warm_fn is not None:
        policy = CompositePolicy(warm_fn, policy)

    matrices = None
    if config.loss == "socm":
        matrices = GatedMatrices(d, rng=streams.generator("matrices_init"))
    elif config.loss == "socm_id":
        matrices = IdentityMatrices(d)

    y0 = {"y0": np.zeros(1)} if config.loss == "moment" else None

    theta_params = dict(policy.params)
    if y0 is not None:
        theta_params["y0"] = y0["y0"]
    opt_theta = Adam(theta_params, lr=config.lr_control)
    opt_omega = (Adam(matrices.params, lr=config.lr_matrices)
                 if config.loss == "socm" else None)

    if config.v_mode == "zero":
        v_policy = ClosedFormPolicy(_zero_control)
    elif config.v_mode == "warm_start":
        v_policy = ClosedFormPolicy(warm_fn)
    else:
        v_policy = policy

    ema = None
    last_record = None
    consecutive_failures = 0
    skipped = 0
    aborted = False
    log_lines: list[str] = []

    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics_file = open(metrics_path, "w", encoding="utf-8", newline="\n")
    metrics_file.write(format_header() + "\n")
    metrics_file.flush()

    def _checkpoint(name: str, iteration: int):
        _save_run_checkpoint(os.path.join(out_dir, name), config, spec, policy,
                             matrices, y0, warm_path, iteration)

    try:
        for n in range(config.iterations):
            gen_init = streams.generator("init", n)
            gen_inc = streams.generator("increments", n)
            try:
                if FAULT_INJECTOR is not None and FAULT_INJECTOR(n):
                    raise SimulationDivergedError(n, 0)
                x0 = spec.initial_law.sample(m, d, gen_init)
                increments = sample_increments(m, steps, d, spec.horizon, gen_inc)
                if config.loss == "adjoint":
                    tape = Tape()
                    pvars = policy.param_vars(tape)
                    traj = rollout(spec, policy, increments, detach=False,
                                   x0=x0, tape=tape, pvars=pvars)
                    lv = loss_adjoint(spec, policy, traj, pvars)
                else:
                    traj = rollout(spec, v_policy, increments, x0=x0)
                    lv = _detached_loss(config, spec, policy, matrices, y0, traj)
            except (SimulationDivergedError, DegenerateWeightsError) as err:
                skipped += 1
                consecutive_failures += 1
                log_lines.append(
                    f"iteration {n}: step skipped "
                    f"({type(err).__name__}: {err})")
                if consecutive_failures >= MAX_CONSECUTIVE_FAILURES:
                    aborted = True
                    log_lines.append(
                        f"aborting: {consecutive_failures} consecutive failures")
                    break
                continue
            consecutive_failures = 0

            theta_grads = dict(lv.grads.get("control", {}))
            if y0 is not None:
                theta_grads["y0"] = lv.grads["y0"]["y0"]
            opt_theta.step(theta_grads)
            if opt_omega is not None:
                opt_omega.step(lv.grads["matrices"])

            if n % config.eval_cadence == 0:
                (l2, ema, obj_mean, obj_std, stl_mean, stl_std,
                 alpha_std) = _evaluate(spec, config, policy, gt, streams, n,
                                        m, steps, ema)
                record = MetricsRecord(
                    iteration=n,
                    loss_value=lv.value,
                    grad_norm_sq=grad_norm_sq(lv.grads.get("control", {})),
                    l2_error=l2,
                    l2_error_ema=ema if ema is not None else float("nan"),
                    control_objective_mean=obj_mean,
                    control_objective_std=obj_std,
                    stl_objective_mean=stl_mean,
                    stl_objective_std=stl_std,
                    alpha_normalized_std=alpha_std,
                    n_saturated=lv.n_saturated,
                    wall_clock=time.time() - t_start,
                )
                metrics_file.write(format_row(record) + "\n")
                metrics_file.flush()
                last_record = record

            if (n + 1) % config.checkpoint_every == 0:
                _checkpoint(f"checkpoint_{n + 1:06d}.npz", n + 1)
    finally:
        metrics_file.close()

    _checkpoint("checkpoint_final.npz", config.iterations)

    if config.dump_trajectories:
        gen = streams.generator("dump")
        x0 = spec.initial_law.sample(m, d, gen)
        increments = sample_increments(m, steps, d, spec.horizon, gen)
        traj = rollout(spec, policy, increments, x0=x0)
        dump_states(traj, os.path.join(out_dir, "trajectories.csv"))

    if log_lines:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")

    summary = {
        "config": asdict(config) | {"batch": m, "steps": steps},
        "dim": d,
        "loss": config.loss,
        "iterations_run": config.iterations,
        "skipped_steps": skipped,
        "aborted": aborted,
        "final": asdict(last_record) if last_record is not None else None,
        "wall_clock_seconds": time.time() - t_start,
        "rng": {
            "seed": config.seed,
            "law": "numpy PCG64; stream (name, index) spawned as "
                   "SeedSequence(seed, spawn_key=(crc32(name), index))",
        },
        "metrics_columns": list(CSV_COLUMNS),
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if aborted:
        raise RunAbortedError(
            f"run aborted after {MAX_CONSECUTIVE_FAILURES} consecutive "
            f"failed steps; partial outputs in {out_dir}")
    return summary


def eval_checkpoint(checkpoint_path, setting: str | None = None,
                    seed: int = 0, batch: int | None = None,
                    steps: int | None = None) -> dict:
    """Recompute all metrics for a saved policy on fresh evaluation batches."""
    architecture, groups = load_checkpoint(checkpoint_path)
    if architecture.get("kind") != "policy":
        raise ConfigError(
            f"checkpoint {checkpoint_path} holds {architecture.get('kind')!r}, "
            "not a policy")
    setting = setting or architecture["setting"]
    spec, defaults = make_setting(setting,
                                  seed=int(architecture.get("problem_seed", 0)),
                                  dim=int(architecture["dim"]))
    m = int(batch if batch is not None else defaults["batch"])
    n_steps = int(steps if steps is not None else defaults["steps"])
    policy = _rebuild_policy(spec, architecture, groups)
    try:
        gt = make_ground_truth(spec)
    except ConfigError:
        gt = None
    streams = RngStreams(seed)

    result = {"checkpoint": str(checkpoint_path), "setting": setting,
              "dim": spec.dim, "iteration": int(architecture.get("iteration", -1)),
              "batch": m, "steps": n_steps, "seed": seed}
    if gt is not None:
        values = [control_l2_error(spec, policy, gt, m, n_steps,
                                   streams.generator("eval_l2", j))
                  for j in range(10)]
        result["l2_error"] = float(np.mean(values))
    gen = streams.generator("eval_obj")
    x0 = spec.initial_law.sample(m, spec.dim, gen)
    increments = sample_increments(m, n_steps, spec.dim, spec.horizon, gen)
    traj = rollout(spec, policy, increments, x0=x0)
    obj_mean, obj_std = control_objective(spec, traj)
    stl_mean, stl_std = stl_objective(spec, traj)
    result["control_objective_mean"] = obj_mean
    result["control_objective_std"] = obj_std
    result["stl_objective_mean"] = stl_mean
    result["stl_objective_std"] = stl_std
    try:
        weights = importance_weight(spec, traj)
        result["alpha_normalized_std"] = alpha_normalized_std(weights.values)
        result["n_saturated"] = int(weights.n_saturated)
    except DegenerateWeightsError:
        result["alpha_normalized_std"] = float("inf")
        result["n_saturated"] = int(traj.states.shape[0])
    return result


def build_ground_truth_cache(setting: str, cache_dir, dim: int | None = None,
                             problem_seed: int = 0) -> str:
    """Precompute and store the ground-truth tables for a setting."""
    spec, _ = make_setting(setting, seed=problem_seed, dim=dim)
    gt = make_ground_truth(spec)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"{setting}.npz")
    save_ground_truth_cache(path, spec, gt)
    return path
