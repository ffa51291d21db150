"""Command-line front door: train, distill, fine-tune, evaluate, export.

Every run writes into an output directory: a config snapshot, metric CSVs,
rendered figures, checkpoints and a manifest pinning seeds and content
hashes. Exit codes: 0 success, 1 contract/usage error, 2 numeric divergence.
The output directory falls back to $AHC_OUT_DIR when --out is not given.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import distill as distillmod
from . import evalproto, finetune as ftmod, metricsio, plots
from . import ppo as ppomod
from .config import Config, load_config, save_config
from .errors import ContractError, NumericError
from .metricsio import CsvLogger, manifest_checkpoint, write_manifest
from .nn.params import checkpoint_hash


class Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _out_dir(args, default_name: str) -> str:
    out = args.out or os.environ.get("AHC_OUT_DIR")
    if not out:
        out = os.path.join("runs", default_name)
    os.makedirs(out, exist_ok=True)
    return out


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    return cfg


def _resolve_checkpoint(path: str) -> str:
    """Accept a checkpoint stem, a manifest file, or a run directory."""
    if os.path.isdir(path):
        m = os.path.join(path, metricsio.MANIFEST_NAME)
        if os.path.exists(m):
            return manifest_checkpoint(m)
        raise ContractError(f"no manifest found in directory {path!r}")
    if path.endswith(".ini"):
        return manifest_checkpoint(path)
    if not os.path.exists(path + ".manifest"):
        raise ContractError(f"missing checkpoint file: {path + '.manifest'!r}")
    return path


def _snapshot_config(cfg: Config, out: str) -> str:
    path = os.path.join(out, "config.ini")
    save_config(cfg, path)
    return path


def _progress_printer(every: int = 10):
    def log(row):
        if int(row["iteration"]) % every == 0 or row["iteration"] == 1:
            parts = [f"it {int(row['iteration']):5d}"]
            for k in ("mean_episode_return", "distill_loss", "cos_sim",
                      "return_walk", "return_recover", "mean_progress"):
                if k in row:
                    parts.append(f"{k}={row[k]:.3f}")
            print("  ".join(parts), flush=True)
    return log


# ---- subcommands ---------------------------------------------------------------


def cmd_train_specialist(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, f"specialist-{args.task}-seed{args.seed}")
    cfg_path = _snapshot_config(cfg, out)
    iterations = args.iterations or 300
    logger = CsvLogger(os.path.join(out, "training.csv"))

    def log(row):
        logger.append(row)
        _progress_printer()(row)

    trainer = ppomod.train_specialist(args.task, cfg, args.seed, iterations,
                                      out_dir=out, n_envs=args.envs, log_fn=log)
    stem = os.path.join(out, f"{args.task}_specialist")
    trainer.save(stem)
    plots.plot_training_curves(trainer.metrics_rows,
                               os.path.join(out, "training.png"),
                               title=f"{args.task} specialist")
    write_manifest(out, "train-specialist", args.seed, cfg_path,
                   {"checkpoint": stem, "disc_checkpoint": stem + "_disc",
                    "metrics": os.path.join(out, "training.csv"),
                    "figure": os.path.join(out, "training.png")},
                   {"checkpoint": checkpoint_hash(stem)},
                   extra={"task": args.task, "iterations": iterations})
    print(f"wrote {out}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, f"distill-seed{args.seed}")
    cfg_path = _snapshot_config(cfg, out)
    iterations = args.iterations or 200
    teachers = {
        "walking": distillmod.load_specialist(_resolve_checkpoint(args.walking_teacher),
                                              "walking"),
        "recovery": distillmod.load_specialist(_resolve_checkpoint(args.recovery_teacher),
                                               "recovery"),
    }
    logger = CsvLogger(os.path.join(out, "distill.csv"))

    def log(row):
        logger.append(row)
        _progress_printer()(row)

    trainer = distillmod.run_dagger(teachers, cfg, args.seed, iterations,
                                    out_dir=out, n_envs=args.envs, log_fn=log)
    stem = os.path.join(out, "student")
    plots.plot_distill_curves(trainer.metrics_rows, os.path.join(out, "distill.png"))
    write_manifest(out, "distill", args.seed, cfg_path,
                   {"checkpoint": stem,
                    "metrics": os.path.join(out, "distill.csv"),
                    "figure": os.path.join(out, "distill.png")},
                   {"checkpoint": checkpoint_hash(stem)},
                   extra={"iterations": iterations})
    print(f"wrote {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, f"finetune-{args.arm}-seed{args.seed}")
    cfg_path = _snapshot_config(cfg, out)
    iterations = args.iterations or 500
    student = _resolve_checkpoint(args.student) if args.student else None
    logger = CsvLogger(os.path.join(out, "finetune.csv"))

    def log(row):
        logger.append(row)
        _progress_printer()(row)

    coord = ftmod.finetune(cfg, args.seed, iterations, arm=args.arm,
                           student_stem=student, out_dir=out,
                           n_envs_per_task=args.envs, log_fn=log)
    stem = os.path.join(out, f"finetuned_{args.arm}")
    plots.plot_finetune_curves(coord.metrics_rows, os.path.join(out, "finetune.png"),
                               title=f"fine-tuning [{args.arm}]")
    write_manifest(out, "finetune", args.seed, cfg_path,
                   {"checkpoint": stem,
                    "metrics": os.path.join(out, "finetune.csv"),
                    "figure": os.path.join(out, "finetune.png")},
                   {"checkpoint": checkpoint_hash(stem)},
                   extra={"arm": args.arm, "iterations": iterations})
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, f"eval-{args.task}-{args.terrain}-seed{args.seed}")
    cfg_path = _snapshot_config(cfg, out)
    stem = _resolve_checkpoint(args.checkpoint)
    policy = evalproto.load_policy(stem)
    proto = evalproto.EvalProtocol(
        task=args.task, terrain=args.terrain, level=args.level,
        trials=args.trials or cfg.eval.trials,
        multi_behavior=not args.specialist)
    metrics, _ = evalproto.run_eval(policy, proto, cfg, args.seed)
    metricsio.write_rows(os.path.join(out, "trials.csv"), metrics.trials)
    summary = {"task": args.task, "terrain": args.terrain,
               "level": "band" if args.level is None else args.level,
               "trials": proto.trials, "seed": args.seed,
               "success_rate": metrics.success_rate,
               "mean_distance": metrics.mean_distance}
    metricsio.write_rows(os.path.join(out, "metrics.csv"), [summary])
    plots.plot_eval_report(metrics.trials, os.path.join(out, "eval.png"),
                           title=f"{args.task} on {args.terrain}")
    write_manifest(out, "eval", args.seed, cfg_path,
                   {"checkpoint": stem,
                    "metrics": os.path.join(out, "metrics.csv"),
                    "trials": os.path.join(out, "trials.csv"),
                    "figure": os.path.join(out, "eval.png")},
                   {"checkpoint": checkpoint_hash(stem)}, extra=summary)
    print(f"succ {metrics.success_rate:.3f}  dist {metrics.mean_distance:.3f}  -> {out}")
    return 0


def cmd_export_metrics(args) -> int:
    run = args.run
    rendered = []
    for name, plot_fn in (("training.csv", plots.plot_training_curves),
                          ("distill.csv", plots.plot_distill_curves),
                          ("finetune.csv", plots.plot_finetune_curves)):
        path = os.path.join(run, name)
        if os.path.exists(path):
            rows = metricsio.read_rows(path)
            png = path.replace(".csv", ".png")
            if plot_fn is plots.plot_training_curves:
                plot_fn(rows, png, title=name)
            else:
                plot_fn(rows, png)
            rendered.append(png)
    trials = os.path.join(run, "trials.csv")
    if os.path.exists(trials):
        rows = metricsio.read_rows(trials)
        png = os.path.join(run, "eval.png")
        plots.plot_eval_report(rows, png)
        rendered.append(png)
    if not rendered:
        raise ContractError(f"no exportable CSVs found under {run!r}")
    for p in rendered:
        print(p)
    return 0


def build_parser() -> Parser:
    p = Parser(prog="bipedrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="INI config path")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None,
                        help="output dir (default $AHC_OUT_DIR or ./runs/...)")
        sp.add_argument("--iterations", type=int, default=None)
        sp.add_argument("--envs", type=int, default=None)

    sp = sub.add_parser("train-specialist", help="stage-1 behavior specialist")
    sp.add_argument("--task", required=True, choices=["recovery", "walking"])
    common(sp)
    sp.set_defaults(fn=cmd_train_specialist)

    sp = sub.add_parser("distill", help="distill the two specialists into the student")
    sp.add_argument("--walking-teacher", required=True,
                    help="walking specialist checkpoint stem / manifest / run dir")
    sp.add_argument("--recovery-teacher", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("finetune", help="stage-2 multi-task fine-tuning")
    sp.add_argument("--arm", default="bc_pc", choices=list(ftmod.ARMS))
    sp.add_argument("--student", default=None,
                    help="distilled checkpoint stem / manifest / run dir")
    common(sp)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="run an evaluation protocol")
    sp.add_argument("--task", required=True, choices=["locomotion", "recovery"])
    sp.add_argument("--terrain", default="flat",
                    choices=["flat", "slope", "hurdle", "discrete"])
    sp.add_argument("--level", type=float, default=None,
                    help="terrain level 0-9 (default: paper-style feature band)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--specialist", action="store_true",
                    help="single-behavior protocol: falls terminate trials")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export-metrics", help="re-render figures from a run dir")
    sp.add_argument("--run", required=True)
    sp.set_defaults(fn=cmd_export_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
