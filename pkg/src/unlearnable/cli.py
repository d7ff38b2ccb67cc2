"""Command-line entry point: ``unln <command> [--config PATH] [--seed N] [--out DIR] [--scale desk|full]``."""

import argparse
import os
import sys

from threadpoolctl import threadpool_limits

from . import attacks, data, pipeline, poisons
from .config import ExperimentConfig, load_config
from .errors import ConfigError, UnlearnableError
from .models import save_checkpoint

COMMANDS = ("gen-data", "gen-poison", "probe", "train", "attack", "dfr", "run", "report")


def _parser():
    ap = argparse.ArgumentParser(prog="unln", description="Unlearnable-data toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", help="output directory")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories holding summary.json")
            continue
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--scale", choices=("desk", "full"), help="overrides the config scale")
    return ap


def _config(args):
    raw = b""
    if args.config:
        if not os.path.isfile(args.config):
            raise ConfigError(f"--config: no such file {args.config}")
        with open(args.config, "rb") as fh:
            raw = fh.read()
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scale is not None:
        cfg.scale = args.scale
    if args.out is not None:
        cfg.output = args.out
    return cfg.validate(), raw


def _poisoned(cfg, train, test, arts=None):
    """Clean split, poisoned train set (or the clean one) and perturbations."""
    surrogate = None
    if cfg.poison.variant == "adversarial":
        surrogate = pipeline.train_victim(cfg, train, test).model
    perts = pipeline.make_poison(cfg, train, surrogate)
    return (train if perts is None else poisons.apply_poison(train, perts)), perts


def cmd_gen_data(cfg, arts):
    train, test = pipeline.load_data(cfg)
    data.save_dataset(train, arts.path("train.unln"))
    data.save_dataset(test, arts.path("test.unln"))


def cmd_gen_poison(cfg, arts):
    train, test = pipeline.load_data(cfg)
    poisoned, perts = _poisoned(cfg, train, test)
    if perts is None:
        raise ConfigError("poison.variant is 'none'; nothing to generate")
    poisons.save_perturbations(perts, arts.path("perturbations.unlp"))
    data.save_dataset(poisoned, arts.path("poisoned.unln"))


def cmd_probe(cfg, arts):
    train, test = pipeline.load_data(cfg)
    poisoned, perts = _poisoned(cfg, train, test)
    for r in pipeline.run_probes(cfg, train, None if perts is None else poisoned, arts):
        print(f"{r.target:<14} {r.poison:<18} {r.train_acc:.4f}")


def cmd_train(cfg, arts):
    train, test = pipeline.load_data(cfg)
    poisoned, _ = _poisoned(cfg, train, test)
    run = pipeline.train_victim(cfg, poisoned, test)
    save_checkpoint(run.model, arts.path("victim.ckpt"))
    attacks.write_metrics_csv([("none", pipeline.poison_name(cfg), r) for r in run.history], arts.path("metrics.csv"))
    print(f"test accuracy {run.test_acc:.4f}")


def cmd_attack(cfg, arts):
    if cfg.attack.name == "none":
        raise ConfigError("attack.name is 'none'; set it to ortho-proj, adv-train or class-avg-sub")
    train, test = pipeline.load_data(cfg)
    poisoned, _ = _poisoned(cfg, train, test)
    result = pipeline.run_attack(cfg, poisoned, test, arts)
    save_checkpoint(result.model, arts.path("attack.ckpt"))
    attacks.write_metrics_csv([(result.name, pipeline.poison_name(cfg), r) for r in result.history],
                              arts.path("metrics.csv"))
    print(f"{result.name} test accuracy {result.test_acc:.4f}")


def cmd_dfr(cfg, arts):
    train, test = pipeline.load_data(cfg)
    poisoned, _ = _poisoned(cfg, train, test)
    run = pipeline.train_victim(cfg, poisoned, test, save_checkpoints=True)
    sweep, b_acc, _ = pipeline.run_dfr(cfg, train, test, run.extras["checkpoints"], arts)
    print(f"max DFR accuracy {sweep.max_acc:.4f} at epoch {sweep.argmax_epoch}; random-init {b_acc:.4f}")


def cmd_run(cfg, raw):
    run_dir, fresh = pipeline.run_experiment(cfg, cfg.output, raw)
    print(("completed " if fresh else "already complete, not rerun: ") + run_dir)


def cmd_report(args):
    rows = pipeline.report_rows(args.runs, warn=lambda m: print(m, file=sys.stderr))
    table = pipeline.format_table(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        pipeline.write_report_csv(rows, os.path.join(args.out, "report.csv"))
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(table)
    sys.stdout.write(table)


STAGES = {"gen-data": cmd_gen_data, "gen-poison": cmd_gen_poison, "probe": cmd_probe, "train": cmd_train,
          "attack": cmd_attack, "dfr": cmd_dfr}


def _threads():
    value = os.environ.get("UNLN_THREADS")
    if value is None:
        return None
    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"UNLN_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            if args.command == "report":
                cmd_report(args)
                return 0
            cfg, raw = _config(args)
            if args.command == "run":
                cmd_run(cfg, raw)
            else:
                STAGES[args.command](cfg, pipeline.Artifacts(cfg.output))
        return 0
    except UnlearnableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
