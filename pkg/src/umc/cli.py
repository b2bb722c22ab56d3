"""Command-line entry point: ``umc {train,eval,sweep,gradcheck,ablate}``.

Exit status is 0 on success, 1 when an invariant or numerical check fails
and 2 for I/O or configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import ablation, gradcheck
from .config import ConfigError, RunConfig, load_config, load_settings
from .damage import SCENARIOS
from .env import EnvConfig, TrajectoryLog
from .evaluate import (DEFAULT_SETTINGS, InvariantViolation, format_table, run_scenario, setting_limits,
                       sweep_checkpoint, write_report, write_text_atomic)
from .nn import NonFiniteError
from .policy import load_checkpoint
from .train import train

EXIT_OK, EXIT_INVARIANT, EXIT_IO = 0, 1, 2
PARADIGM_NAMES = {"stage": "stage_based", "curriculum": "curriculum_based", "one-stage": "one_stage"}


def _run_config(args) -> RunConfig:
    run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    t = run.train
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "paradigm", None):
        kw["paradigm"] = PARADIGM_NAMES[args.paradigm]
    if getattr(args, "model", None):
        kw["model"] = replace(t.model, variant=args.model)
    if getattr(args, "stage1_iters", None) is not None:
        kw["stage1_iters"] = args.stage1_iters
    if getattr(args, "stage2_iters", None) is not None:
        kw["stage2_iters"] = args.stage2_iters
    if getattr(args, "envs", None) is not None:
        kw["ppo"] = replace(t.ppo, n_envs=args.envs)
    try:
        return replace(run, train=replace(t, **kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _run_config(args).train
    out = Path(args.out)
    prefix = out.stem + "."
    result = train(cfg, out.parent, prefix=prefix, final_name=out.name)
    for name, path in result.checkpoints.items():
        print(f"{name}: {path}")
    print(f"curve: {out.parent / (prefix + 'training_curve.csv')}")
    print(f"seconds: {result.seconds:.1f}")
    return EXIT_OK


def _settings(args):
    return load_settings(args.settings) if args.settings else DEFAULT_SETTINGS


def cmd_eval(args) -> int:
    actor, _, meta = load_checkpoint(args.ckpt)
    scenarios = list(SCENARIOS) if args.scenario == "all" else [int(args.scenario)]
    settings = _settings(args)
    result = sweep_checkpoint(args.ckpt, settings, args.envs, model=args.model or Path(args.ckpt).stem,
                              scenarios=scenarios)
    rows = result.rows() if len(scenarios) > 1 else result.cells + result.averages[:1]
    write_report(rows, args.out)
    print(format_table({r.model: r for r in result.averages[-1:]}))
    if args.trajectory:
        _write_trajectory(args, actor, meta, scenarios[0], settings[0])
    return EXIT_OK


def _write_trajectory(args, actor, meta, scenario_id, setting) -> None:
    """One extra single-env rollout of the first cell, recorded step by step."""
    train_cfg = meta.get("config", {})
    env_cfg = EnvConfig.from_dict(train_cfg["env"]) if "env" in train_cfg else EnvConfig()
    mask_value = float(train_cfg.get("mask_value", 0.0))
    dmg = train_cfg.get("damage", {})
    limits = setting_limits(env_cfg, setting, dmg.get("limit_fraction", 0.3), dmg.get("rom_fraction", 0.3))
    log = TrajectoryLog(env_cfg.n_joints)
    run_scenario(actor, scenario_id, setting, 1, env_cfg, mask_value, limits, trajectory=log)
    log.write(args.trajectory)
    print(f"trajectory: {args.trajectory}")


def cmd_sweep(args) -> int:
    out = Path(args.out)
    settings = _settings(args)
    tables = {}
    for ckpt in [args.ckpt, *(args.compare or [])]:
        name = Path(ckpt).stem
        result = sweep_checkpoint(ckpt, settings, args.envs, model=name)
        write_report(result.rows(), out / f"{name}_sweep.csv")
        write_report(result.rows(), out / f"{name}_sweep.json")
        tables[name] = result.overall
        per_scenario = {f"S{r.scenario}": r for r in result.averages[:-1]}
        per_scenario["avg"] = result.overall
        write_text_atomic(out / f"{name}_table.txt", format_table(per_scenario) + "\n")
    text = format_table(tables)
    write_text_atomic(out / "table.txt", text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed)
    ok = True
    for name, err in results.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max relative error {err:.3e}")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_ablate(args) -> int:
    cfg = _run_config(args).train
    settings = load_settings(args.settings) if args.settings else DEFAULT_SETTINGS[:1]
    table = ablation.run_ablation(args.knob, cfg, args.out, settings, args.eval_envs)
    print(format_table(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umc", description="Masked-attention fault-tolerant locomotion toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def budget(sp):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--stage1-iters", type=int)
        sp.add_argument("--stage2-iters", type=int)
        sp.add_argument("--envs", type=int, help="parallel training envs")
        sp.add_argument("--model", choices=("transformer", "mlp"))

    t = sub.add_parser("train", help="train a policy")
    budget(t)
    t.add_argument("--paradigm", choices=sorted(PARADIGM_NAMES))
    t.add_argument("--out", required=True, help="final checkpoint path (.npz)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one or all scenarios")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenario", default="all", choices=[*map(str, SCENARIOS), "all"])
    e.add_argument("--settings", help="inference settings file")
    e.add_argument("--envs", type=int, default=256)
    e.add_argument("--model", help="label used in the report (default: checkpoint name)")
    e.add_argument("--trajectory", help="also write a per-step CSV of one episode here")
    e.add_argument("--out", required=True, help="report path (.csv or .json)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="8 scenarios x inference settings plus averaged tables")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--compare", action="append", help="extra checkpoint swept for a side-by-side table")
    s.add_argument("--settings")
    s.add_argument("--envs", type=int, default=256)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and sweep the variants of one knob")
    budget(a)
    a.add_argument("--knob", required=True, choices=ablation.KNOBS)
    a.add_argument("--settings", help="inference settings file (default: the first setting)")
    a.add_argument("--eval-envs", type=int, default=256)
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvariantViolation, NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
