"""Command-line surface: world/corpus generation, training, evaluation,
latent export, and the ablation grid. Reports are written as JSON plus CSV,
with a matplotlib figure rendered alongside each tabular output."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from .autodiff import load_params
from .config import ConfigError, config_to_dict, load_config, write_manifest
from .corpus import build_vocab, generate_ndh_sample, generate_vln_sample, write_samples
from .metrics import MetricReport, aggregate_runs
from .trainer import (
    EpisodeRunner,
    build_model_config,
    collect_latents,
    evaluate_policy,
    load_corpus_set,
    load_world_set,
    run_ablation_fixed_paths,
    train,
)
from .model import NavModel
from .world import HouseSpec, generate_house

REPORT_COLUMNS = ["task", "fold", "count", "pl", "ne", "sr", "spl", "cls", "progress"]


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


# -- asset builders (shared by the CLI and tests) --------------------------------


def build_world_dir(out_dir, train_houses: int, unseen_houses: int, nodes: int,
                    rooms: int, seed: int, feature_dim: int = 12,
                    house_mix: float = 0.6, force: bool = False) -> dict:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "val_unseen").mkdir(parents=True, exist_ok=True)
    folds = {"train": [], "val_seen": [], "val_unseen": []}
    for hid in range(train_houses + unseen_houses):
        spec = HouseSpec(nodes=nodes, rooms=rooms, seed=_derived_seed(seed, hid),
                         house_id=hid, feature_seed=seed, feature_dim=feature_dim,
                         house_mix=house_mix)
        house = generate_house(spec)
        sub = "train" if hid < train_houses else "val_unseen"
        house.save(out / sub / f"house_{hid:03d}.json")
        folds[sub].append(hid)
    folds["val_seen"] = list(folds["train"])
    (out / "folds.json").write_text(json.dumps(folds, sort_keys=True) + "\n")
    return folds


def build_corpus_dir(out_dir, worlds_dir, train_per_house: int = 10,
                     val_per_house: int = 5, error_rate: float = 0.3,
                     seed: int = 0, min_count: int = 5,
                     noise_rate: float = 0.05, vln_hops: tuple[int, int] = (1, 3),
                     ndh_hops: tuple[int, int] = (3, 9), force: bool = False) -> dict:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    worlds = load_world_set(worlds_dir)

    def make(house_ids, per_house, fold_tag):
        tagged = []
        for hid in house_ids:
            house = worlds.houses[hid]
            for task_tag, task in ((0, "vln"), (1, "ndh")):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, hid, fold_tag, task_tag]))
                for _ in range(per_house):
                    if task == "vln":
                        sample = generate_vln_sample(house, rng, noise_rate=noise_rate,
                                                     min_hops=vln_hops[0],
                                                     max_hops=vln_hops[1])
                    else:
                        sample = generate_ndh_sample(house, rng, error_rate=error_rate,
                                                     noise_rate=noise_rate,
                                                     min_hops=ndh_hops[0],
                                                     max_hops=ndh_hops[1])
                    tagged.append((task, sample))
        return tagged

    fold_samples = {
        "train": make(worlds.folds["train"], train_per_house, 0),
        "val_seen": make(worlds.folds["val_seen"], val_per_house, 1),
        "val_unseen": make(worlds.folds["val_unseen"], val_per_house, 2),
    }
    from .corpus import sample_token_stream

    per_task_vocabs = [
        build_vocab((sample_token_stream(t, s) for t, s in fold_samples["train"]
                     if t == task), min_count)
        for task in ("vln", "ndh")
    ]
    vocab = per_task_vocabs[0].union(per_task_vocabs[1])
    (out / "vocab.json").write_text(vocab.to_json() + "\n")
    counts = {}
    for fold, tagged in fold_samples.items():
        write_samples(out / f"{fold}.jsonl", tagged, vocab)
        counts[fold] = {task: sum(1 for t, _ in tagged if t == task)
                        for task in ("vln", "ndh")}
    meta = {"seed": seed, "error_rate": error_rate, "noise_rate": noise_rate,
            "min_count": min_count, "counts": counts, "vocab_size": len(vocab),
            "vln_hops": list(vln_hops), "ndh_hops": list(ndh_hops)}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta


# -- report writers ------------------------------------------------------------------


def report_rows(reports: dict[str, MetricReport]) -> list[dict]:
    rows = []
    for task in sorted(reports):
        report = reports[task]
        for fold in sorted(report.folds):
            row = {"task": task, "fold": fold, "count": report.counts.get(fold, "")}
            row.update({k: report.folds[fold].get(k, "") for k in REPORT_COLUMNS[3:]})
            rows.append(row)
        if report.gap:
            row = {"task": task, "fold": "gap", "count": ""}
            row.update({k: report.gap.get(k, "") for k in REPORT_COLUMNS[3:]})
            rows.append(row)
    return rows


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_reports(out_dir: Path, reports: dict[str, MetricReport],
                  stem: str = "report") -> None:
    payload = {task: r.to_dict() for task, r in sorted(reports.items())}
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    write_csv(out_dir / f"{stem}.csv", REPORT_COLUMNS, report_rows(reports))
    plots.metrics_figure(reports, out_dir / f"{stem}.png")


# -- commands ---------------------------------------------------------------------------


def cmd_generate_worlds(args) -> int:
    folds = build_world_dir(args.out, args.train_houses, args.unseen_houses,
                            args.nodes, args.rooms, args.seed,
                            feature_dim=args.feature_dim, house_mix=args.house_mix,
                            force=args.force)
    print(json.dumps({"out": str(args.out), "folds": folds}))
    return 0


def cmd_generate_corpus(args) -> int:
    meta = build_corpus_dir(args.out, args.worlds, train_per_house=args.train_per_house,
                            val_per_house=args.val_per_house,
                            error_rate=args.error_rate, seed=args.seed,
                            min_count=args.min_count, noise_rate=args.noise_rate,
                            vln_hops=(args.vln_min_hops, args.vln_max_hops),
                            ndh_hops=(args.ndh_min_hops, args.ndh_max_hops),
                            force=args.force)
    print(json.dumps({"out": str(args.out), "meta": meta}))
    return 0


def _load_cfg(args):
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.dry_run:
        print(json.dumps({"status": "config ok", "config": config_to_dict(cfg)}))
        return 0
    results = train(cfg, resume_dir=args.resume)
    out = Path(cfg.out_dir)
    for result in results:
        plots.curves_figure(result.train_log, out / f"curves_seed{result.seed}.png")
    summary = {}
    for task in results[0].final_reports:
        summary[task] = aggregate_runs([r.final_reports[task] for r in results])
    write_reports(out, summary, stem="summary")
    manifest_path = write_manifest(out, cfg)
    print(json.dumps({"out": str(out), "seeds": [r.seed for r in results],
                      "manifest": str(manifest_path)}))
    return 0


def _restore_runner(cfg, checkpoint):
    worlds = load_world_set(cfg.worlds_dir)
    corpus = load_corpus_set(cfg.corpus_dir)
    model = NavModel(build_model_config(cfg, worlds, corpus.vocab),
                     np.random.default_rng(0))
    model.params.load_state(load_params(checkpoint))
    runner = EpisodeRunner(model, corpus.vocab, worlds.houses,
                           worlds.train_labels(), cfg)
    return runner, worlds, corpus


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    runner, _, corpus = _restore_runner(cfg, args.checkpoint)
    folds = args.folds.split(",")
    tasks = (["vln", "ndh"] if cfg.task_mode == "multi" else [cfg.task_mode])
    episodes, reports = evaluate_policy(
        runner, corpus, folds, tasks, max_episodes=args.max_episodes,
        policy=args.policy, rng=np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.jsonl", "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep, sort_keys=True) + "\n")
    write_reports(out, reports)
    print(json.dumps({"out": str(out),
                      "folds": {t: r.folds for t, r in sorted(reports.items())}}))
    return 0


def cmd_dump_latents(args) -> int:
    cfg = _load_cfg(args)
    runner, _, corpus = _restore_runner(cfg, args.checkpoint)
    rows = collect_latents(runner, corpus.folds[args.fold],
                           max_episodes=args.max_episodes)
    if not rows:
        raise ValueError(f"no latents collected from fold {args.fold!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = len(rows[0]["z"])
    columns = ["house_id", "label", "episode", "step", "pred"] + \
        [f"z{i}" for i in range(width)]
    with open(out / "latents.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row["house_id"], row["label"], row["episode"],
                             row["step"], row["pred"]] + [repr(v) for v in row["z"]])
    plots.latents_figure(np.stack([r["z"] for r in rows]),
                         [r["house_id"] for r in rows], out / "latents.png")
    print(json.dumps({"out": str(out), "rows": len(rows), "width": width}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.fixed_fractions:
        fractions = [float(x) for x in args.fixed_fractions.split(",")]
        rows = run_ablation_fixed_paths(replace(cfg, out_dir=str(out / "fixed")),
                                        fractions, total=args.fixed_total or None)
        write_csv(out / "ablation.csv",
                  ["fraction", "train_size", "progress_val_seen", "progress_val_unseen"],
                  rows)
        (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        plots.gap_figure([{"cell": f"vln={r['fraction']:.0%}",
                           "gap": r["progress_val_seen"] - r["progress_val_unseen"]}
                          for r in rows], out / "gaps.png")
        print(json.dumps({"out": str(out), "rows": rows}))
        return 0

    tasks = args.tasks.split(",")
    env_modes = args.env_modes.split(",")
    all_rows = []
    gap_rows = []
    results_payload = {}
    for task_mode in tasks:
        for env_mode in env_modes:
            cell = f"{task_mode}-{env_mode}"
            sub = replace(cfg, task_mode=task_mode, env_mode=env_mode,
                          out_dir=str(out / cell))
            results = train(sub)
            reports = {}
            for task in results[0].final_reports:
                reports[task] = aggregate_runs([r.final_reports[task] for r in results])
            results_payload[cell] = {t: r.to_dict() for t, r in reports.items()}
            for row in report_rows(reports):
                all_rows.append({"cell": cell, **row})
            for task, report in reports.items():
                key = "progress" if task == "ndh" else "sr"
                if key in report.gap:
                    gap_rows.append({"cell": f"{cell}:{task}", "gap": report.gap[key]})
    write_csv(out / "ablation.csv", ["cell"] + REPORT_COLUMNS, all_rows)
    (out / "ablation.json").write_text(
        json.dumps(results_payload, indent=1, sort_keys=True) + "\n")
    plots.gap_figure(gap_rows, out / "gaps.png")
    print(json.dumps({"out": str(out), "cells": sorted(results_payload)}))
    return 0


# -- argument parsing -----------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multinav",
        description="Multitask language-grounded navigation on synthetic worlds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-worlds", help="write house files split into folds")
    p.add_argument("--out", required=True)
    p.add_argument("--train-houses", type=int, default=8)
    p.add_argument("--unseen-houses", type=int, default=3)
    p.add_argument("--nodes", type=int, default=24)
    p.add_argument("--rooms", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=12)
    p.add_argument("--house-mix", type=float, default=0.6)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate_worlds)

    p = sub.add_parser("generate-corpus", help="write task samples over the worlds")
    p.add_argument("--worlds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-house", type=int, default=10)
    p.add_argument("--val-per-house", type=int, default=5)
    p.add_argument("--error-rate", type=float, default=0.3)
    p.add_argument("--noise-rate", type=float, default=0.05)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--vln-min-hops", type=int, default=1)
    p.add_argument("--vln-max-hops", type=int, default=3)
    p.add_argument("--ndh-min-hops", type=int, default=3)
    p.add_argument("--ndh-max-hops", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate_corpus)

    p = sub.add_parser("train", help="train the configured cell, one run per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--resume", default=None,
                   help="run directory holding checkpoints to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy-decode a checkpoint on folds")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", default="val_seen,val_unseen")
    p.add_argument("--policy", choices=["greedy", "random", "shortest"],
                   default="greedy")
    p.add_argument("--max-episodes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-latents", help="export per-step trajectory latents")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", default="train")
    p.add_argument("--max-episodes", type=int, default=0)
    p.set_defaults(func=cmd_dump_latents)

    p = sub.add_parser("ablate", help="run a task-mode x env-mode grid, or the "
                                      "fixed-total-paths mixture ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--tasks", default="vln,multi")
    p.add_argument("--env-modes", default="plain,agnostic")
    p.add_argument("--fixed-fractions", default=None,
                   help="comma list of instruction-task fractions; switches to the "
                        "constant-size mixture ablation")
    p.add_argument("--fixed-total", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
