"""Command-line entry point: ``latentpomdp <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--out-dir`` and ``--config`` (a flat
``key = value`` experiment file; see :class:`~latentpomdp.harness.ExperimentConfig`).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .env import Mode, collect_random, read_states, read_trajectories, write_states, write_trajectories
from .harness import ExperimentConfig, load_experiment
from .inference import Kind
from .latent_model import load_model, save_model
from .rcpi import DegenerateRollouts, evaluate_policy, load_policy, rcpi_train, save_policy
from .trainer import TrainingError, fit, train_report

log = logging.getLogger("latentpomdp")


def _mode(text: str) -> Mode:
    return Mode(text.upper())


def _out(args, name: str) -> Path:
    path = Path(args.out) if getattr(args, "out", None) else Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    return load_experiment(args.config) if args.config else ExperimentConfig()


def _states_path(data: Path) -> Path:
    return data.with_name(data.name + ".states.csv")


def cmd_collect(args, cfg):
    mode = _mode(args.mode)
    episodes = args.episodes or cfg.episodes
    eps = collect_random(episodes, mode, cfg.t_max, np.random.default_rng(args.seed))
    path = _out(args, "trajectories.txt")
    write_trajectories(path, eps, mode, cfg.t_max)
    write_states(_states_path(path), eps)
    print(f"wrote {len(eps)} trajectories ({sum(e.success for e in eps)} successful) to {path}")
    return 0


def cmd_train_repr(args, cfg):
    records, mode, _ = read_trajectories(args.data)
    data = [w.concat(t) for w, t in records]
    n = args.latent_dim or cfg.latent_dims[0]
    res = fit(data, cfg.train_config(n, args.seed))
    path = _out(args, "model.txt")
    save_model(path, res.model)
    if args.latents_out:
        write_latents(args.latents_out, res.latents)
    print(train_report(res.loss_curve))
    print(f"wrote {mode.value} model with n={n} to {path}")
    return 0


def write_latents(path, latents) -> None:
    """One line per step: ``episode,step,z1..zn``."""
    n = latents[0].shape[1]
    lines = [",".join(["episode", "step"] + [f"z{i + 1}" for i in range(n)])]
    for q, Z in enumerate(latents):
        lines += [",".join([str(q), str(t)] + [format(float(v), ".17g") for v in z]) for t, z in enumerate(Z)]
    Path(path).write_text("\n".join(lines) + "\n")


def _model_and_mode(args):
    model = load_model(args.model, ExperimentConfig().norm) if args.model else None
    if model is not None:
        mode = Mode.PO if model.m == 1 else Mode.FO
        if args.mode and _mode(args.mode) is not mode:
            raise SystemExit(f"model has m={model.m}, which does not match --mode {args.mode}")
        return model, mode
    return None, _mode(args.mode or "PO")


def cmd_train_policy(args, cfg):
    strategy = cfg.strategy(args.strategy)
    model, mode = _model_and_mode(args)
    if strategy.needs_model and model is None:
        raise SystemExit(f"strategy {args.strategy} needs --model")
    res = rcpi_train(model, strategy, mode, cfg.rollout_config(), np.random.default_rng(args.seed))
    path = _out(args, "policy.txt")
    save_policy(path, res.policy)
    for it, score in enumerate(res.curve, 1):
        print(f"iteration {it}: success {score:.3f}")
    print(f"wrote policy to {path}")
    return 0


def cmd_evaluate(args, cfg):
    strategy = cfg.strategy(args.strategy)
    model, mode = _model_and_mode(args)
    if strategy.needs_model and model is None:
        raise SystemExit(f"strategy {args.strategy} needs --model")
    policy = load_policy(args.policy)
    rate = evaluate_policy(policy, model, strategy, mode, args.episodes, cfg.t_max,
                           np.random.default_rng(args.seed))
    print(f"success rate over {args.episodes} episodes: {rate:.4f}")
    return 0


def cmd_export_latent(args, cfg):
    model = load_model(args.model, cfg.norm)
    records, mode, _ = read_trajectories(args.data)
    states = read_states(_states_path(Path(args.data)))
    if len(states) != len(records):
        raise SystemExit("states file does not match the trajectory file")
    dataset = [(w, t, s) for (w, t), s in zip(records, states)]
    path = _out(args, harness.LATENT_FILE)
    try:
        lines = harness.export_latent(model, dataset, path, cfg.export_refine_steps)
    except ValueError as exc:
        raise SystemExit(str(exc))
    r2_z, r2_x = harness.speed_separation(path)
    print(f"wrote {lines} rows to {path}; R2 (z1,z2)->v {r2_z:.3f}, x->v {r2_x:.3f}")
    return 0


def _print_rows(rows):
    print(harness.format_table(rows), end="")
    for r in rows:
        if r.failed:
            print(f"FAILED {r.label}: {r.error}")


def cmd_reproduce_table(args, cfg):
    rows = harness.reproduce_table(harness.table_specs(cfg), harness.Pipeline(cfg), harness._selected(cfg))
    path = _out(args, harness.TABLE_FILE)
    harness.write_table_csv(path, rows)
    _print_rows(rows)
    print(f"wrote {path}")
    return 1 if any(r.failed for r in rows) else 0


def cmd_run_all(args, cfg):
    if args.seed is not None:  # master seed: consecutive run seeds from it
        cfg.seeds = [args.seed + k for k in range(len(cfg.seeds))]
    res = harness.run_all(cfg, args.out_dir, args.spec)
    _print_rows(res.rows)
    print(f"latent export: R2 (z1,z2)->v {res.export_r2[0]:.3f}, x->v {res.export_r2[1]:.3f}")
    print(f"results in {res.directory}")
    return 0 if res.ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="default 0; run-all: the config seeds")
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", help="key = value experiment file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latentpomdp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    strategies = [k.value for k in Kind]

    s = sub.add_parser("collect", parents=[common], help="random-policy trajectories")
    s.add_argument("--mode", default="PO", help="FO or PO")
    s.add_argument("--episodes", type=int, help="number of trajectories (default from config)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("train-repr", parents=[common], help="fit decoder, dynamics and latents")
    s.add_argument("--data", required=True)
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--out")
    s.add_argument("--latents-out", help="CSV of the fitted latents (warmup steps first)")
    s.set_defaults(func=cmd_train_repr)

    s = sub.add_parser("train-policy", parents=[common], help="RCPI over a representation")
    s.add_argument("--model")
    s.add_argument("--strategy", choices=strategies, default="flat")
    s.add_argument("--mode", help="FO or PO (inferred from the model when given)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_policy)

    s = sub.add_parser("evaluate", parents=[common], help="success rate of a policy")
    s.add_argument("--policy", required=True)
    s.add_argument("--model")
    s.add_argument("--strategy", choices=strategies, default="flat")
    s.add_argument("--mode")
    s.add_argument("--episodes", type=int, default=1000)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-latent", parents=[common], help="2-D latents with true position/speed")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="trajectory file written by collect")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_latent)

    s = sub.add_parser("reproduce-table", parents=[common], help="the result table")
    s.add_argument("--out")
    s.set_defaults(func=cmd_reproduce_table)

    s = sub.add_parser("run-all", parents=[common], help="table + latent export in a fresh directory")
    s.add_argument("--spec", help="document copied verbatim into the result directory")
    s.set_defaults(func=cmd_run_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.func is not cmd_run_all:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except (DegenerateRollouts, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
