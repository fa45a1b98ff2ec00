"""``dmm``: train score models, sample from them, run the oracle suites.

Run configurations are JSON documents::

    {
      "schema_version": 1,
      "engine": {"kind": "finite" | "ou" | "gbm" | "jump", ...},
      "target": {"name": "...", "params": {...}},
      "train": {"epochs": ..., "batch": ..., "T": ..., ...},
      "grid": {"kappa": 0.01} or {"steps": 400},
      "output": {"dir": "runs/demo", "n": 2048, "snapshots": [0.0, 4.0]}
    }

Unknown keys anywhere are rejected. Exit codes: 0 success, 1 verification
failure, 2 configuration or usage error, 3 numeric abort, 4 checkpoint and
config hash mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .datasets import TargetSpec, energy_distance, histogram_tv, sample_target
from .diffusion import DiffusionError, GbmSpec
from .finite_state import DiscreteSpace
from .jump import JumpError, TorusJumpSpec
from .plotting import snapshot_svg
from .training import (
    FiniteStateEngine,
    GbmEngine,
    InferenceError,
    JumpEngine,
    OuEngine,
    ScoreModel,
    Snapshots,
    TimeGrid,
    TrainConfig,
    TrainingError,
    infer,
    train,
)
from .verification import SUITES, run_suite

log = logging.getLogger("dmm")

SCHEMA_VERSION = 1
SECTIONS = ("schema_version", "engine", "target", "train", "grid", "output")
ENGINE_KEYS = {
    "finite": {"dims", "states_per_dim", "masked"},
    "ou": set(),
    "gbm": {"sigma", "prior_scale"},
    "jump": {"sigma", "rate", "grid", "modes", "fourier_modes", "n_kernel"},
}
TARGET_KEYS = {"name", "params"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
GRID_KEYS = {"kappa", "steps"}
OUTPUT_KEYS = {"dir", "n", "snapshots"}
DEFAULT_N = 2048
REFERENCE_N = 200_000
ENERGY_REFERENCE_N = 10_000

EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC, EXIT_HASH = 1, 2, 3, 4
NUMERIC_ERRORS = (TrainingError, InferenceError, DiffusionError, JumpError, FloatingPointError)


class ConfigError(ValueError):
    pass


class HashMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _reject_unknown(section, allowed, name):
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(extra)}")


def validate_config(cfg):
    """Check structure and value ranges; returns ``cfg`` unchanged."""
    _reject_unknown(cfg, SECTIONS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    for name in ("engine", "target", "train"):
        if name not in cfg:
            raise ConfigError(f"missing section {name!r}")
    engine = cfg["engine"]
    if not isinstance(engine, dict) or engine.get("kind") not in ENGINE_KEYS:
        raise ConfigError(f"engine.kind must be one of {sorted(ENGINE_KEYS)}")
    _reject_unknown(engine, ENGINE_KEYS[engine["kind"]] | {"kind"}, "engine")
    _reject_unknown(cfg["target"], TARGET_KEYS, "target")
    _reject_unknown(cfg["train"], TRAIN_KEYS, "train")
    _reject_unknown(cfg.get("grid", {}), GRID_KEYS, "grid")
    _reject_unknown(cfg.get("output", {}), OUTPUT_KEYS, "output")
    if len(cfg.get("grid", {})) > 1:
        raise ConfigError("grid takes either 'kappa' or 'steps', not both")
    try:
        TargetSpec(cfg["target"].get("name"), cfg["target"].get("params", {}))
        TrainConfig(**cfg["train"])
        build_engine(cfg)
        make_grid(cfg)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(str(err)) from err
    n = cfg.get("output", {}).get("n", DEFAULT_N)
    if not isinstance(n, int) or n < 0:
        raise ConfigError("output.n must be a nonnegative integer")
    return cfg


def load_config(path, seed=None):
    """Read and validate ``path``; ``seed`` overrides ``train.seed``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if seed is not None:
        cfg.setdefault("train", {})["seed"] = int(seed)
    return validate_config(cfg)


def _finite_dataset(space, target):
    probs = np.asarray(target.params["probs"], dtype=np.float64)
    free = DiscreteSpace(space.dims, space.states_per_dim)
    if probs.size != free.size or (probs < 0).any() or probs.sum() <= 0:
        raise ConfigError(f"target.params.probs needs {free.size} nonnegative entries")
    if not space.masked:
        return lambda n, rng: sample_target(target, n, rng)
    # data states avoid the null symbol 0, so shift each coordinate by one
    return lambda n, rng: space.encode(free.decode(sample_target(target, n, rng)) + 1)


def build_engine(cfg):
    e, T = cfg["engine"], float(cfg["train"].get("T", TrainConfig.T))
    target = TargetSpec(cfg["target"]["name"], cfg["target"].get("params", {}))
    kind = e["kind"]
    if kind == "finite":
        if target.name != "finite-random":
            raise ConfigError("the finite engine needs the 'finite-random' target")
        space = DiscreteSpace(int(e.get("dims", 2)), int(e.get("states_per_dim", 3)), bool(e.get("masked", False)))
        return FiniteStateEngine(space, _finite_dataset(space, target), T)
    if target.name == "finite-random":
        raise ConfigError("the 'finite-random' target needs the finite engine")
    if kind == "jump":
        if not target.on_torus:
            raise ConfigError("the jump engine needs a torus target")
        spec = TorusJumpSpec(
            **{k: e[k] for k in ("sigma", "rate", "grid", "modes") if k in e},
        )
        dataset = lambda n, rng: sample_target(target, n, rng)
        return JumpEngine(spec, dataset, T, int(e.get("fourier_modes", 16)), int(e.get("n_kernel", 4)))
    dim = 1 if target.name == "gmm1d-abs" else 2
    dataset = lambda n, rng: sample_target(target, n, rng)
    if kind == "ou":
        return OuEngine(dataset, T, dim=dim)
    spec = GbmSpec(e.get("sigma", np.eye(dim).tolist()))
    if spec.dim != dim:
        raise ConfigError(f"engine.sigma is {spec.dim}x{spec.dim} but the target is {dim}-dimensional")
    return GbmEngine(spec, dataset, T, float(e.get("prior_scale", np.sqrt(2.0))))


def make_grid(cfg, kappa=None, steps=None):
    T = float(cfg["train"].get("T", TrainConfig.T))
    grid = dict(cfg.get("grid", {}))
    if kappa is not None:
        grid = {"kappa": kappa}
    if steps is not None:
        grid = {"steps": steps}
    if "steps" in grid:
        return TimeGrid(T, int(grid["steps"]))
    return TimeGrid.from_step(T, float(grid.get("kappa", 0.01)))


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def git_hash():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def write_manifest(path, cfg, seed, command, metrics, artifacts):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": nn.config_hash(cfg),
        "seed": seed,
        "git_hash": git_hash(),
        "metrics": metrics,
        "artifacts": sorted(artifacts),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_loss_csv(path, history):
    lines = ["epoch,loss"] + [f"{i + 1},{v:.17g}" for i, v in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")


def snapshot_rows(engine, states):
    """Sample rows as a 2-D array; finite-state indices become coordinates."""
    if isinstance(engine, FiniteStateEngine):
        return engine.space.decode(np.asarray(states, dtype=np.int64)).reshape(len(states), -1)
    return np.asarray(states, dtype=np.float64).reshape(len(states), -1)


def write_samples_csv(path, engine, T, snaps, dim):
    """Columns ``sample_id,t,x_1..x_d`` with ``t`` the forward time of each snapshot."""
    header = ",".join(["sample_id", "t"] + [f"x_{k + 1}" for k in range(dim)])
    lines = [header]
    integer = isinstance(engine, FiniteStateEngine)
    for tau, states in zip(snaps.times, snaps.states):
        t = f"{max(T - tau, 0.0):.17g}"
        for i, row in enumerate(snapshot_rows(engine, states)):
            cells = [str(int(v)) for v in row] if integer else [f"{v:.17g}" for v in row]
            lines.append(",".join([str(i), t, *cells]))
    Path(path).write_text("\n".join(lines) + "\n")


def sample_metrics(engine, cfg, final, seed):
    """Distance of the final samples to the target, against a seeded reference draw."""
    target = TargetSpec(cfg["target"]["name"], cfg["target"].get("params", {}))
    rng = np.random.default_rng([seed, 2])
    if isinstance(engine, FiniteStateEngine):
        probs = np.asarray(target.params["probs"], dtype=np.float64)
        probs = probs / probs.sum()
        free = DiscreteSpace(engine.space.dims, engine.space.states_per_dim)
        coords = engine.space.decode(np.asarray(final, dtype=np.int64))
        if engine.space.masked:
            unmasked = (coords > 0).all(axis=1)
            coords = coords[unmasked] - 1
        counts = np.bincount(free.encode(coords), minlength=free.size) if len(coords) else np.zeros(free.size)
        freq = counts / max(counts.sum(), 1)
        out = {"tv_to_target": 0.5 * float(np.abs(freq - probs).sum())}
        if engine.space.masked:
            out["fully_unmasked_rate"] = float(unmasked.mean())
        return out
    if isinstance(engine, JumpEngine):
        ref = sample_target(target, REFERENCE_N, rng)
        return {"histogram_tv": float(histogram_tv(final, ref))}
    ref = sample_target(target, ENERGY_REFERENCE_N, rng)
    out = {"energy_distance": float(energy_distance(final.reshape(len(final), -1), ref.reshape(len(ref), -1)))}
    if isinstance(engine, GbmEngine):
        out["positivity_rate"] = float((final > 0).all(axis=1).mean())
    return out


def _snapshot_kind(engine):
    if isinstance(engine, FiniteStateEngine):
        return "discrete"
    return "torus" if isinstance(engine, JumpEngine) else "continuous"


def parse_snapshots(text, T):
    if text is None:
        return None
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"--snapshots must be comma-separated times in [0, {T}]") from err


def snapshot_steps(times, grid):
    """Backward step index for each requested backward time (``0`` is the prior draw)."""
    if times is None:
        times = [grid.T * k / 4 for k in range(5)]
    steps = []
    for tau in times:
        if not 0.0 <= tau <= grid.T * (1 + 1e-12):
            raise ConfigError(f"snapshot time {tau} outside [0, {grid.T}]")
        steps.append(int(round(tau / grid.kappa)))
    return sorted(set(steps))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config, args.seed)
    engine = build_engine(cfg)
    tc = TrainConfig(**cfg["train"])
    out = Path(args.out or cfg.get("output", {}).get("dir", "runs/train"))
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.dmmk"
    init = None
    if args.checkpoint:
        mlp0, init, _ = nn.load_checkpoint(args.checkpoint)
        if mlp0.sizes != engine.network(tc.hidden, tc.layers).sizes:
            raise ConfigError(f"{args.checkpoint}: network sizes do not match the config")

    def save(epoch, model):
        nn.save_checkpoint(ckpt, model.mlp, model.params, config=cfg, extra={"epoch": epoch})
        log.info("epoch %d: checkpoint written to %s", epoch, ckpt)

    start = time.perf_counter()
    model, history = train(tc, engine, checkpoint=save, init=init)
    elapsed = time.perf_counter() - start
    write_loss_csv(out / "loss.csv", history)
    tail = history[-max(1, len(history) // 10) :] if history else []
    metrics = {
        "epochs": tc.epochs,
        "final_loss": float(history[-1]) if history else None,
        "tail_mean_loss": float(np.mean(tail)) if tail else None,
        "train_seconds": round(elapsed, 3),
    }
    write_manifest(out / "manifest.json", cfg, tc.seed, "train", metrics, ["checkpoint.dmmk", "loss.csv"])
    print(f"train: {tc.epochs} epochs in {elapsed:.1f} s; artifacts in {out}")
    return 0


def _checked_config(args):
    """Config for sampling; its hash must match the one stored with the checkpoint."""
    mlp, params, sidecar = nn.load_checkpoint(args.checkpoint)
    if "config" not in sidecar:
        raise ConfigError(f"{args.checkpoint}: sidecar with the training config is missing")
    stored = sidecar.get("config_hash")
    if nn.config_hash(sidecar["config"]) != stored:
        raise HashMismatch(f"{args.checkpoint}: sidecar config does not match its recorded hash")
    if args.config:
        cfg = load_config(args.config, args.seed)
        if nn.config_hash(cfg) != stored:
            raise HashMismatch(
                f"config hash {nn.config_hash(cfg)[:12]} does not match checkpoint hash {stored[:12]}"
            )
    else:
        cfg = validate_config(sidecar["config"])
    return cfg, ScoreModel(mlp, params)


def cmd_sample(args):
    cfg, model = _checked_config(args)
    engine = build_engine(cfg)
    if model.mlp.sizes != engine.network(cfg["train"].get("hidden", 128), cfg["train"].get("layers", 5)).sizes:
        raise HashMismatch("checkpoint network does not match the config")
    grid = make_grid(cfg, args.kappa, args.steps)
    output = cfg.get("output", {})
    n = output.get("n", DEFAULT_N) if args.n is None else args.n
    if n < 0:
        raise ConfigError("--n must be nonnegative")
    times = parse_snapshots(args.snapshots, grid.T)
    steps = snapshot_steps(times if times is not None else output.get("snapshots"), grid)
    seed = int(cfg["train"].get("seed", 0)) if args.seed is None else int(args.seed)
    out = Path(args.out or output.get("dir", "runs/sample"))
    out.mkdir(parents=True, exist_ok=True)
    dim = engine.space.dims if isinstance(engine, FiniteStateEngine) else getattr(engine, "dim", 2)
    artifacts = ["samples.csv"]
    metrics = {"n": n, "steps": grid.steps, "kappa": grid.kappa}
    if n == 0:
        write_samples_csv(out / "samples.csv", engine, grid.T, Snapshots(np.zeros(0), []), dim)
    else:
        start = time.perf_counter()
        snaps = infer(grid, engine, engine.score(model), n=n, rng=np.random.default_rng([seed, 1]), record=steps)
        metrics["sample_seconds"] = round(time.perf_counter() - start, 3)
        write_samples_csv(out / "samples.csv", engine, grid.T, snaps, dim)
        kind = _snapshot_kind(engine)
        n_states = engine.space.size if kind == "discrete" else None
        for step, tau, states in zip(sorted(steps), snaps.times, snaps.states):
            name = f"snapshot_step{step:06d}.svg"
            title = f"{engine.name}: t = {max(grid.T - tau, 0.0):.4g}"
            snapshot_svg(out / name, states, title, kind=kind, n_states=n_states)
            artifacts.append(name)
        if grid.steps in steps:
            metrics.update(sample_metrics(engine, cfg, snaps.states[-1], seed))
    write_manifest(out / "manifest.json", cfg, seed, "sample", metrics, artifacts)
    summary = ", ".join(f"{k}={v}" for k, v in metrics.items())
    print(f"sample: {summary}")
    return 0


def cmd_verify(args):
    if args.suite != "all" and args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; choose from {', '.join(sorted(SUITES))} or all", file=sys.stderr)
        return EXIT_CONFIG
    report = run_suite(args.suite, seed=0 if args.seed is None else int(args.seed))
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    for check in report["checks"]:
        if not check["passed"]:
            print(f"FAILED: {check['name']} = {check['value']:.3g} > {check['tolerance']:.3g}", file=sys.stderr)
    return 0 if report["passed"] else EXIT_VERIFY


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="dmm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a score model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.add_argument("--checkpoint", help="warm-start from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="run backward inference from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="must hash to the checkpoint's config")
    p.add_argument("--seed", type=int, help="sampling seed (default: train.seed)")
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.add_argument("--n", type=int, help="number of samples (default: output.n)")
    p.add_argument("--snapshots", help="comma-separated backward times in [0, T]")
    step = p.add_mutually_exclusive_group()
    step.add_argument("--kappa", type=float, help="step size (overrides grid)")
    step.add_argument("--steps", type=int, help="number of steps (overrides grid)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verify", help="run an oracle suite and print a JSON report")
    p.add_argument("suite", help=f"one of {', '.join(sorted(SUITES))} or all")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_verify)
    return parser


def _thread_limit():
    value = os.environ.get("DMM_THREADS")
    if not value:
        return contextlib.nullcontext()
    return threadpool_limits(limits=int(value))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, nn.CheckpointError, OSError) as err:
        print(f"dmm: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatch as err:
        print(f"dmm: hash mismatch: {err}", file=sys.stderr)
        return EXIT_HASH
    except NUMERIC_ERRORS as err:
        print(f"dmm: numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
