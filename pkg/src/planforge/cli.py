"""Command-line entry point: gen, train, eval, score, replay.

Exit codes: 0 success, 1 bad input files, 2 configuration or usage error,
3 numerical failure during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, config_from_dict, load_config
from .evaluate import GREEDY, RANDOM, evaluate_policy, load_evaluation, save_evaluation
from .marl import NumericalError
from .phantom import PhantomError, dose as forward_dose, load_case
from .plan_eval import DVHFormatError, evaluate_dose, score_dvh_csv
from .rollout import EnvSpec, PolicySnapshot
from .train import LockedError, Trainer, cases_for, load_policy, lock_dir, make_cases, read_telemetry, write_cases
from . import report

log = logging.getLogger("planforge")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "workers", None) is not None:
        overrides["train.workers"] = args.workers
    if getattr(args, "processes", None) is not None:
        overrides["train.processes"] = args.processes
    if getattr(args, "episodes", None) is not None:
        overrides["train.episodes"] = args.episodes
    if getattr(args, "cases", None) is not None:
        overrides["cases_dir"] = str(args.cases)
    return load_config(args.config, overrides)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    raise UsageError("no output directory: pass --out or set out_dir in the config")


# -- commands --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.train is not None:
        cfg.phantom.n_train = args.train
    if args.test is not None:
        cfg.phantom.n_test = args.test
    if args.seed is not None:
        cfg.phantom.case_seed = args.seed
    if cfg.phantom.n_train < 1:
        raise ConfigError("training requires at least one case (--train >= 1)")
    if cfg.phantom.n_test < 0:
        raise ConfigError("--test must be >= 0")
    out = _out_dir(args)
    with lock_dir(out):
        for split in ("train", "test"):
            paths = write_cases(make_cases(cfg, split), out / split)
            print(f"{split}: {len(paths)} cases -> {out / split}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args, cfg)
    torch.set_num_threads(cfg.train.torch_threads)
    with lock_dir(out):
        trainer = Trainer(cfg, out)
        if args.checkpoint is not None:
            trainer.resume(args.checkpoint)
            print(f"resumed at round {trainer.next_round}")
        try:
            policy = trainer.train()
        except NumericalError as exc:
            print(f"numerical failure: {exc}; last good checkpoint kept in {trainer.ckpt_dir}",
                  file=sys.stderr)
            return EXIT_NUMERICAL
        report.training_curves(read_telemetry(trainer.telemetry_path), out / "report")
        print(f"policy -> {policy}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    nets, cfg = load_policy(args.checkpoint)
    if args.config is not None:
        cfg = _config(args)
    elif args.cases is not None:
        cfg.cases_dir = str(args.cases)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    cases = cases_for(cfg, "test")
    if not cases:
        raise UsageError("no test cases configured")
    env = EnvSpec(cfg.registry(), cfg.solver_options(), cfg.train.episode_length)
    seed = cfg.seed if args.seed is None else args.seed
    with lock_dir(out):
        results = evaluate_policy(PolicySnapshot.of(nets.agents), env, cases, args.count, seed)
        save_evaluation(results, out)
        (out / "config.json").write_text(cfg.to_json())
        summary = _render_eval(results, cases, cfg, out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _render_eval(results, cases, cfg: RunConfig, out: Path) -> dict:
    summary = report.eval_report(results[GREEDY], results[RANDOM], cases, out)
    tuned = [cfg.registry().names[i] for i in cfg.registry().tuned]
    report.episode_trace(results[GREEDY][0], tuned, out)
    return summary


def cmd_score(args) -> int:
    if args.dvh is not None:
        breakdown = score_dvh_csv(Path(args.dvh).read_text(), args.prescription)
    elif args.case is not None and args.fluence is not None:
        case = load_case(args.case)
        f = Path(args.fluence)
        fluence = np.load(f) if f.suffix == ".npy" else np.loadtxt(f, delimiter=",", ndmin=1)
        breakdown = evaluate_dose(forward_dose(case.influence, fluence.ravel()), case)
    else:
        raise UsageError("score needs --dvh FILE, or --case FILE with --fluence FILE")
    text = breakdown.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"# total {breakdown.total:.6g} of {breakdown.max_total:.6g} "
          f"({100 * breakdown.relative:.2f}%)", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-render every report of a run directory from its persisted files."""
    if args.out is None:
        raise UsageError("replay needs --out RUN_DIR")
    run = Path(args.out)
    done = False
    if (run / "telemetry.csv").exists():
        report.training_curves(read_telemetry(run / "telemetry.csv"), run / "report")
        print(f"training curves -> {run / 'report'}")
        done = True
    for ev in sorted({p.parent.parent.parent for p in run.glob("**/greedy/records/*.json")}):
        cfg = config_from_dict(json.loads((ev / "config.json").read_text()))
        cases = cases_for(cfg, "test")
        _render_eval(load_evaluation(ev, cases), cases, cfg, ev)
        print(f"evaluation report -> {ev}")
        done = True
    if not done:
        raise FileNotFoundError(f"nothing to replay under {run}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="planforge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, help="run configuration JSON")
        p.add_argument("--out", type=Path, help="output directory")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen", help="generate training and test phantoms")
    common(p)
    p.add_argument("--train", type=int, help="number of training cases")
    p.add_argument("--test", type=int, help="number of test cases")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the agents")
    common(p)
    p.add_argument("--workers", type=int, help="episode slots per collection round")
    p.add_argument("--processes", type=int, help="OS processes executing the slots")
    p.add_argument("--episodes", type=int, help="number of collection rounds")
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    p.add_argument("--cases", type=Path, help="directory written by gen")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the random baseline")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--cases", type=Path, help="directory written by gen")
    p.add_argument("--count", type=int, help="episodes per policy (default: one per test case)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("score", help="score a DVH CSV or a case plus fluence")
    p.add_argument("--dvh", type=Path)
    p.add_argument("--case", type=Path)
    p.add_argument("--fluence", type=Path)
    p.add_argument("--prescription", type=float, default=60.0)
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("replay", help="re-render reports from a run directory")
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_replay)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DVHFormatError, PhantomError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
