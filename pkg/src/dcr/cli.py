"""Command-line entry point: ``dcr <subcommand> [--config F] [--seed S] [--out DIR] [--dataset PATH]``.

Exit codes: 0 success, 2 argument/config errors, 3 integrity errors.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .ablation import VARIANTS, ArgumentError, ablation_runner
from .ada import action_names, train_ada
from .afd import train_afd
from .datagen import DatasetFormatError, DatasetManifest, IntegrityError, generate_dataset, load_dataset, save_dataset
from .evaluation import action_distribution, topk_confidence_curve
from .pipeline import (RunConfig, SchemaError, StageError, agent_checkpoint, build_general_encoders,
                       evaluate_predictions, expert_checkpoint, load_checkpoint, load_run_config, make_episodes,
                       prepare_data, restore_agent, restore_experts, run_sequential, save_checkpoint, write_csv)

EXIT_ARGS = 2
EXIT_INTEGRITY = 3
DATASET_FILE = "dataset.bin"


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.dataset is not None:
        cfg = replace(cfg, dataset=args.dataset)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> None:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.data_seed
    dataset = generate_dataset(DatasetManifest(seed=seed), cfg.num_samples)
    path = _out(cfg) / DATASET_FILE
    save_dataset(dataset, path)
    print(f"wrote {len(dataset.samples)} samples to {path}")


def cmd_train_afd(args) -> None:
    cfg = _config(args)
    splits, out = prepare_data(cfg), _out(cfg)
    seed = cfg.seeds[0]
    bundle = train_afd(splits.train, splits.valid, splits.manifest, replace(cfg.afd, seed=seed)).freeze()
    digest = save_checkpoint(expert_checkpoint(bundle), out / f"seed{seed}_afd.ckpt")
    write_csv(out / f"seed{seed}_afd_history.csv", bundle.history)
    print(f"afd checkpoint seed{seed}_afd.ckpt hash={digest} best_epoch={bundle.best_epoch}")


def cmd_train_ada(args) -> None:
    cfg = _config(args)
    splits, out = prepare_data(cfg), _out(cfg)
    seed = cfg.seeds[0]
    bundle = restore_experts(load_checkpoint(args.experts or out / f"seed{seed}_afd.ckpt", stage="afd"), splits.manifest)
    general = build_general_encoders(splits, cfg, seed)
    mode = cfg.ada.action_space_mode
    ep = {s: make_episodes(bundle, general, getattr(splits, s), mode) for s in ("train", "valid")}
    agent = train_ada(ep["train"], ep["valid"], replace(cfg.ada, seed=seed), cfg.afd.d, bundle.model.parameters())
    digest = save_checkpoint(agent_checkpoint(agent), out / f"seed{seed}_ada.ckpt")
    write_csv(out / f"seed{seed}_ada_history.csv", agent.history)
    print(f"ada checkpoint seed{seed}_ada.ckpt hash={digest} best_epoch={agent.best_epoch}")


def cmd_run(args) -> None:
    result = run_sequential(_config(args))
    for row in result.summary["mean"]:
        print(f"{row['model']:>16s}  acc {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    splits, out = prepare_data(cfg), _out(cfg)
    seed = cfg.seeds[0]
    bundle = restore_experts(load_checkpoint(args.experts or out / f"seed{seed}_afd.ckpt", stage="afd"), splits.manifest)
    experts = bundle.predict(splits.test)
    rows = [evaluate_predictions(f"path_{m}", experts[m].argmax(-1), splits) for m in ("M", "T", "A", "V")]
    agent_path = Path(args.agent) if args.agent else out / f"seed{seed}_ada.ckpt"
    if agent_path.exists():
        agent = restore_agent(load_checkpoint(agent_path, stage="ada"), cfg.afd.d)
        mode = agent.config.action_space_mode
        episodes = make_episodes(bundle, build_general_encoders(splits, cfg, seed), splits.test, mode)
        actions, preds = agent.predict(episodes)
        rows.insert(0, evaluate_predictions("dcr", preds, splits))
        dist = action_distribution(actions.tolist(), splits.test.conflict, len(action_names(mode)))
        write_csv(out / "eval_actions.csv", [
            {"subset": k, **({f"freq_{a}": f for a, f in zip(action_names(mode), v)} if v else {})}
            for k, v in dist.items()
        ])
    thresholds = [round(0.05 * i, 2) for i in range(21)]
    k = min(2, splits.manifest.num_classes - 1)
    curve = {m: topk_confidence_curve(experts[m].numpy(), k, thresholds) for m in ("M", "T", "A", "V")}
    write_csv(out / "eval_topk.csv", [{"threshold": t, **{f"ratio_{m}": curve[m][i] for m in curve}}
                                      for i, t in enumerate(thresholds)])
    write_csv(out / "eval_metrics.csv", rows)
    for r in rows:
        print(f"{r['model']:>10s}  acc {r['accuracy']:.4f}  wf1 {r['weighted_f1']:.4f}  severe {r['acc_severe']}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    result = ablation_runner(cfg, args.variants, out_dir=_out(cfg))
    for row in result.table:
        print(f"{row['variant']:>16s}  acc {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--seed", type=int, help="single seed (overrides the config's seed list)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset file written by 'generate'")

    p = argparse.ArgumentParser(prog="dcr", description="Dual-path conflict-resolving emotion recognition")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset").set_defaults(fn=cmd_generate)
    sub.add_parser("train-afd", parents=[common], help="stage 1: train the experts").set_defaults(fn=cmd_train_afd)
    s = sub.add_parser("train-ada", parents=[common], help="stage 2: train the agent over frozen experts")
    s.add_argument("--experts", help="afd checkpoint (default: <out>/seed<S>_afd.ckpt)")
    s.set_defaults(fn=cmd_train_ada)
    sub.add_parser("run", parents=[common], help="both stages for every seed").set_defaults(fn=cmd_run)
    s = sub.add_parser("eval", parents=[common], help="metrics and analyses from checkpoints")
    s.add_argument("--experts", help="afd checkpoint")
    s.add_argument("--agent", help="ada checkpoint (optional)")
    s.set_defaults(fn=cmd_eval)
    s = sub.add_parser("ablate", parents=[common], help="run ablation variants")
    s.add_argument("--variants", nargs="+", default=["full", "afd_only", "ada_only", "neither"],
                   help=f"any of: {', '.join(VARIANTS)}")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.fn(args)
    except (IntegrityError, DatasetFormatError, StageError, SchemaError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ArgumentError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
