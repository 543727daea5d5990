"""Episode rollouts and the multitask training loop.

Each batch mixes teacher-forced episodes (behavior cloning) with episodes
sampled from the current policy (REINFORCE with a batch-mean baseline).
Dialog-task supervision picks the navigator's demonstration when it ended
in the goal room and the oracle's otherwise. The environment classifier
runs per step on the trajectory latent, behind gradient reversal in
agnostic mode, directly in aware mode, and not at all in plain mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tape, load_params, save_params
from .corpus import (
    Vocab,
    fixed_total_mixture,
    interleaved_batches,
    pool_stream,
    read_samples,
    serialize_dialog,
)
from .metrics import MetricReport, aggregate, episode_metrics
from .model import ModelConfig, NavModel
from .rewards import (
    POINT,
    ROOM,
    EpisodeTrace,
    RewardConfig,
    StepRecord,
    assign_rewards,
    bc_loss_value,
    env_loss,
    estimate_baseline,
    navigation_loss,
)
from .world import AgentPose, House, navigable_directions, observe_panorama, step

TASK_MODES = ("vln", "ndh", "multi")
ENV_MODES = ("plain", "agnostic", "aware")
ROLLOUT_MODES = ("teacher", "sample", "greedy")
DIALOG_VARIANTS = ("t0", "t0_a", "t0_a_q", "full_history")
FOLDS = ("train", "val_seen", "val_unseen")

MODEL_OVERRIDE_KEYS = ("word_dim", "lang_hidden", "lang_layers", "traj_hidden",
                       "traj_layers", "attn_dim", "classifier_hidden",
                       "share_language_encoder")


class ConfigError(ValueError):
    """Invalid training configuration; message lists the offending keys."""


class TrainingDiverged(RuntimeError):
    pass


class InvalidPath(ValueError):
    pass


@dataclass
class TrainConfig:
    worlds_dir: str = ""
    corpus_dir: str = ""
    out_dir: str = ""
    steps: int = 200
    batch_size: int = 4
    clone_fraction: float = 0.5
    grl_lambda: float = 1.3
    learning_rate: float = 0.1
    optimizer: str = "sgd"
    grad_clip: float = 5.0
    max_episode_len: int = 10
    task_mode: str = "multi"
    env_mode: str = "plain"
    dialog_variant: str = "full_history"
    seeds: list[int] = field(default_factory=lambda: [0])
    mix_ratio: float = 0.5
    gamma: float = 0.95
    success_radius: float = 3.0
    ndh_reward: str = ROOM
    eval_interval: int = 0  # 0 means evaluate only after the final step
    eval_max_episodes: int = 0  # 0 means the whole fold
    model: dict = field(default_factory=dict)

    def validate(self) -> None:
        bad: list[str] = []
        if self.task_mode not in TASK_MODES:
            bad.append(f"task_mode={self.task_mode!r} (expected one of {TASK_MODES})")
        if self.env_mode not in ENV_MODES:
            bad.append(f"env_mode={self.env_mode!r} (expected one of {ENV_MODES})")
        if self.dialog_variant not in DIALOG_VARIANTS:
            bad.append(f"dialog_variant={self.dialog_variant!r}")
        if self.optimizer != "sgd":
            bad.append(f"optimizer={self.optimizer!r} (only 'sgd' is supported)")
        if self.ndh_reward not in (POINT, ROOM):
            bad.append(f"ndh_reward={self.ndh_reward!r}")
        if not 0.0 <= self.clone_fraction <= 1.0:
            bad.append(f"clone_fraction={self.clone_fraction}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            bad.append(f"mix_ratio={self.mix_ratio}")
        if not 0.0 <= self.gamma <= 1.0:
            bad.append(f"gamma={self.gamma}")
        if self.success_radius <= 0:
            bad.append(f"success_radius={self.success_radius}")
        if self.steps < 1:
            bad.append(f"steps={self.steps}")
        if self.batch_size < 1:
            bad.append(f"batch_size={self.batch_size}")
        if self.max_episode_len < 1:
            bad.append(f"max_episode_len={self.max_episode_len}")
        if self.learning_rate <= 0:
            bad.append(f"learning_rate={self.learning_rate}")
        if self.grl_lambda < 0:
            bad.append(f"grl_lambda={self.grl_lambda}")
        if self.env_mode == "agnostic" and self.grl_lambda == 0:
            bad.append("env_mode='agnostic' requires grl_lambda > 0")
        if not self.seeds:
            bad.append("seeds=[] (need at least one seed)")
        unknown = sorted(set(self.model) - set(MODEL_OVERRIDE_KEYS))
        if unknown:
            bad.append(f"model overrides {unknown} (allowed: {sorted(MODEL_OVERRIDE_KEYS)})")
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))


# -- run assets -------------------------------------------------------------------


@dataclass
class WorldSet:
    houses: dict[int, House]
    folds: dict[str, list[int]]

    def train_labels(self) -> dict[int, int]:
        return {hid: i for i, hid in enumerate(sorted(self.folds["train"]))}

    @property
    def feature_dim(self) -> int:
        return next(iter(self.houses.values())).feature_dim


@dataclass
class CorpusSet:
    folds: dict[str, list[tuple[str, object]]]
    vocab: Vocab

    def pool(self, fold: str, task: str | None = None) -> list[tuple[str, object]]:
        if fold not in self.folds:
            raise ValueError(f"unknown fold {fold!r}; have {sorted(self.folds)}")
        samples = self.folds[fold]
        if task is None or task == "multi":
            return list(samples)
        return [(t, s) for t, s in samples if t == task]


def load_world_set(worlds_dir) -> WorldSet:
    root = Path(worlds_dir)
    folds_file = root / "folds.json"
    if not folds_file.exists():
        raise FileNotFoundError(f"missing {folds_file}")
    folds = json.loads(folds_file.read_text())
    houses: dict[int, House] = {}
    for sub in ("train", "val_unseen"):
        for path in sorted((root / sub).glob("house_*.json")):
            house = House.load(path)
            houses[house.house_id] = house
    missing = [hid for ids in folds.values() for hid in ids if hid not in houses]
    if missing:
        raise FileNotFoundError(f"folds reference missing houses {sorted(set(missing))}")
    return WorldSet(houses=houses, folds=folds)


def load_corpus_set(corpus_dir) -> CorpusSet:
    root = Path(corpus_dir)
    vocab_file = root / "vocab.json"
    if not vocab_file.exists():
        raise FileNotFoundError(f"missing {vocab_file}")
    vocab = Vocab.from_json(vocab_file.read_text())
    folds = {}
    for fold in FOLDS:
        path = root / f"{fold}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"missing corpus fold {path}")
        folds[fold] = read_samples(path)
    return CorpusSet(folds=folds, vocab=vocab)


# -- supervision ---------------------------------------------------------------------


def mixed_supervision_target(sample, house: House) -> tuple[str, list[int]]:
    """Navigator's path when it ended in the goal room, else the oracle's."""
    if house.room_of(sample.navigator_path[-1]) == sample.goal_room:
        return "navigator", list(sample.navigator_path)
    return "oracle", list(sample.oracle_path)


# -- rollouts ------------------------------------------------------------------------


class EpisodeRunner:
    """Binds a model to worlds, vocabulary, and reward settings."""

    def __init__(self, model: NavModel, vocab: Vocab, houses: dict[int, House],
                 house_labels: dict[int, int], cfg: TrainConfig):
        self.model = model
        self.vocab = vocab
        self.houses = houses
        self.house_labels = house_labels
        self.cfg = cfg

    def reward_config(self, task: str) -> RewardConfig:
        mode = POINT if task == "vln" else self.cfg.ndh_reward
        return RewardConfig(gamma=self.cfg.gamma,
                            success_radius=self.cfg.success_radius, mode=mode)

    def goal_of(self, task: str, sample):
        if task == "vln":
            return sample.goal_node
        if self.cfg.ndh_reward == ROOM:
            return sample.goal_room
        # point-mode ablation: the exact goal location is the object's node,
        # the goal room's medoid, not whichever room node the demo entered at
        return self.houses[sample.house_id].room_medoid(sample.goal_room)

    def teacher_path(self, task: str, sample, house: House) -> list[int]:
        path = (list(sample.path) if task == "vln"
                else mixed_supervision_target(sample, house)[1])
        if path[0] != sample.start.node:
            raise InvalidPath(f"ground-truth path starts at {path[0]}, "
                              f"episode starts at {sample.start.node}")
        for u, v in zip(path, path[1:]):
            if v not in house.adj[u]:
                raise InvalidPath(f"ground-truth path uses missing edge {u}-{v}")
        return path

    def tokens_of(self, task: str, sample) -> list[str]:
        return sample.tokens if task == "vln" else serialize_dialog(
            sample, self.cfg.dialog_variant)

    def run(self, tape: Tape, task: str, sample, mode: str,
            rng: np.random.Generator | None = None,
            env_mode: str = "plain") -> EpisodeTrace:
        if mode not in ROLLOUT_MODES:
            raise ValueError(f"unknown rollout mode {mode!r}")
        house = self.houses[sample.house_id]
        ids = self.vocab.encode(self.tokens_of(task, sample))
        enc = self.model.encode_language(tape, ids, task)
        pose = AgentPose(sample.start.node, sample.start.heading)
        state = self.model.initial_state(tape)
        plan = None
        if mode == "teacher":
            path = self.teacher_path(task, sample, house)
            plan = path[1:] + [None]
        label = self.house_labels.get(house.house_id)
        classify = env_mode in ("agnostic", "aware") and label is not None

        trace = EpisodeTrace(task=task, house_id=house.house_id,
                             goal=self.goal_of(task, sample),
                             start_node=pose.node_id, visited=[pose.node_id],
                             cloned=(mode == "teacher"))
        while True:
            pan = observe_panorama(house, pose)
            options = navigable_directions(house, pose)
            _, pan_t, state = self.model.encode_panorama_step(tape, state, pan)
            dist = self.model.predict_action(tape, state, enc, pan_t, options)
            env_logp = None
            if classify:
                _, env_logp = self.model.classify_environment(
                    tape, state, reverse=(env_mode == "agnostic"),
                    lam=self.cfg.grl_lambda)
            if mode == "teacher":
                target = plan[len(trace.steps)]
                idx = next(i for i, o in enumerate(options) if o.target == target)
            elif mode == "greedy":
                idx = int(np.argmax(dist.probs.data))
                target = options[idx].target
            else:
                if not np.isfinite(dist.probs.data).all():
                    raise TrainingDiverged(
                        f"non-finite action distribution at node {pose.node_id} "
                        f"in house {house.house_id}")
                p = dist.probs.data / dist.probs.data.sum()
                idx = int(rng.choice(len(options), p=p))
                target = options[idx].target
            trace.steps.append(StepRecord(
                node=pose.node_id, action_index=idx, target=target,
                log_prob=tape.pick(dist.log_probs, idx), z=state.h_top,
                env_log_probs=env_logp))
            if target is None:
                break
            pose = step(house, pose, target)
            trace.visited.append(pose.node_id)
            moves = len(trace.visited) - 1
            if mode != "teacher" and moves >= self.cfg.max_episode_len:
                trace.truncated = True
                trace.steps.append(StepRecord(node=pose.node_id, action_index=-1,
                                              target=None, log_prob=None))
                break
        assign_rewards(house, trace, self.reward_config(task))
        return trace


# -- optimization --------------------------------------------------------------------


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def sgd_update(model: NavModel, grads: dict[str, np.ndarray], lr: float,
               clip: float) -> float:
    norm = global_norm(grads)
    scale = 1.0 if norm <= clip or norm == 0.0 else clip / norm
    for name, p in model.params.items():
        p.data = p.data - lr * scale * grads[name]
    return norm


def train_step(runner: EpisodeRunner, batch: Sequence[tuple[str, object]],
               cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One interleaved batch: rollouts, combined loss, one SGD update."""
    if not batch:
        raise ValueError("empty batch")
    tape = Tape()
    traces = []
    for task, sample in batch:
        cloned = bool(rng.random() < cfg.clone_fraction)
        trace = runner.run(tape, task, sample, "teacher" if cloned else "sample",
                           rng=rng, env_mode=cfg.env_mode)
        trace.cloned = cloned
        traces.append(trace)

    has_sampled = any(s.log_prob is not None for t in traces if not t.cloned
                      for s in t.steps)
    baseline = estimate_baseline(traces) if has_sampled else 0.0
    loss = navigation_loss(tape, traces, baseline)
    stats = {"l_nav": float(loss.data), "l_env": None, "env_acc": None,
             "bc_loss": bc_loss_value(traces), "baseline": baseline}

    if cfg.env_mode != "plain":
        scored = [(s.env_log_probs, runner.house_labels[t.house_id])
                  for t in traces for s in t.steps if s.env_log_probs is not None]
        if scored:
            e_loss = env_loss(tape, scored)
            stats["l_env"] = float(e_loss.data)
            hits = [int(np.argmax(lp.data) == label) for lp, label in scored]
            stats["env_acc"] = sum(hits) / len(hits)
            loss = tape.add(loss, e_loss)

    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"non-finite loss at batch of {len(batch)}: {stats}")
    grads = tape.backward(loss, dict(runner.model.params.items()))
    stats["grad_norm"] = sgd_update(runner.model, grads, cfg.learning_rate,
                                    cfg.grad_clip)
    return stats


# -- evaluation -----------------------------------------------------------------------


def reference_of(task: str, sample) -> list[int]:
    return list(sample.path) if task == "vln" else list(sample.oracle_path)


def evaluate_policy(runner: EpisodeRunner, corpus: CorpusSet, folds: Sequence[str],
                    tasks: Sequence[str], max_episodes: int = 0,
                    policy: str = "greedy",
                    rng: np.random.Generator | None = None):
    """Greedy-decode rollouts per fold and task; returns (episode rows, reports).

    policy 'shortest' follows the reference path (teacher forcing) and
    'random' samples uniform actions, for baseline comparisons.
    """
    episodes = []
    reports: dict[str, MetricReport] = {}
    rows_by_task: dict[str, list[dict]] = {t: [] for t in tasks}
    tags_by_task: dict[str, list[str]] = {t: [] for t in tasks}
    for fold in folds:
        for task in tasks:
            pool = corpus.pool(fold, task)
            if max_episodes:
                pool = pool[:max_episodes]
            if not pool:
                raise ValueError(f"fold {fold!r} has no {task} episodes")
            for i, (tk, sample) in enumerate(pool):
                tape = Tape()
                if policy == "shortest":
                    trace = runner.run(tape, tk, sample, "teacher")
                elif policy == "random":
                    trace = _random_walk_trace(runner, tk, sample, rng)
                else:
                    trace = runner.run(tape, tk, sample, "greedy")
                house = runner.houses[sample.house_id]
                goal_room = sample.goal_room if tk == "ndh" else None
                row = episode_metrics(house, trace.visited, reference_of(tk, sample),
                                      runner.cfg.success_radius, goal_room)
                rows_by_task[task].append(row)
                tags_by_task[task].append(fold)
                episodes.append({"fold": fold, "task": tk, "house_id": sample.house_id,
                                 "index": i, "predicted": trace.visited,
                                 "reference": reference_of(tk, sample),
                                 "metrics": row})
    for task in tasks:
        reports[task] = aggregate(rows_by_task[task], tags_by_task[task])
    return episodes, reports


def _random_walk_trace(runner: EpisodeRunner, task: str, sample,
                       rng: np.random.Generator) -> EpisodeTrace:
    house = runner.houses[sample.house_id]
    pose = AgentPose(sample.start.node, sample.start.heading)
    trace = EpisodeTrace(task=task, house_id=house.house_id,
                         goal=runner.goal_of(task, sample),
                         start_node=pose.node_id, visited=[pose.node_id])
    for _ in range(runner.cfg.max_episode_len):
        options = navigable_directions(house, pose)
        choice = options[int(rng.integers(0, len(options)))]
        trace.steps.append(StepRecord(node=pose.node_id, action_index=0,
                                      target=choice.target, log_prob=None))
        if choice.target is None:
            break
        pose = step(house, pose, choice.target)
        trace.visited.append(pose.node_id)
    return trace


def collect_latents(runner: EpisodeRunner, tagged_samples: Sequence[tuple[str, object]],
                    max_episodes: int = 0):
    """Greedy rollouts recording the trajectory latent and classifier argmax."""
    pool = tagged_samples[:max_episodes] if max_episodes else tagged_samples
    rows = []
    for i, (task, sample) in enumerate(pool):
        tape = Tape()
        trace = runner.run(tape, task, sample, "greedy", env_mode="aware")
        label = runner.house_labels.get(trace.house_id)
        for step_idx, s in enumerate(trace.steps):
            if s.z is None:
                continue
            pred = int(np.argmax(s.env_log_probs.data)) if s.env_log_probs is not None else None
            rows.append({"house_id": trace.house_id, "label": label, "episode": i,
                         "step": step_idx, "pred": pred, "z": s.z.data.copy()})
    return rows


# -- the training loop -------------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    metric_records: list[dict]
    final_reports: dict[str, MetricReport]
    checkpoint_path: str
    train_log: list[dict]
    model: NavModel


def build_model_config(cfg: TrainConfig, worlds: WorldSet, vocab: Vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), num_houses=len(worlds.folds["train"]),
                       view_dim=worlds.feature_dim + 4, **cfg.model)


def make_batch_stream(cfg: TrainConfig, corpus: CorpusSet,
                      rng: np.random.Generator,
                      fixed_pool: Sequence[tuple[str, object]] | None = None
                      ) -> Iterator[list[tuple[str, object]]]:
    if fixed_pool is not None:
        stream = pool_stream(list(fixed_pool), rng)
        while True:
            yield [next(stream) for _ in range(cfg.batch_size)]
    if cfg.task_mode == "multi":
        vln = pool_stream([s for _, s in corpus.pool("train", "vln")], rng)
        ndh = pool_stream([s for _, s in corpus.pool("train", "ndh")], rng)
        yield from interleaved_batches(vln, ndh, cfg.batch_size, cfg.mix_ratio, rng)
    stream = pool_stream(corpus.pool("train", cfg.task_mode), rng)
    while True:
        yield [next(stream) for _ in range(cfg.batch_size)]


def eval_tasks(cfg: TrainConfig) -> list[str]:
    return ["vln", "ndh"] if cfg.task_mode == "multi" else [cfg.task_mode]


def _train_single(cfg: TrainConfig, worlds: WorldSet, corpus: CorpusSet, seed: int,
                  fixed_pool=None, resume_dir: str | None = None) -> RunResult:
    model = NavModel(build_model_config(cfg, worlds, corpus.vocab),
                     np.random.default_rng(np.random.SeedSequence([seed, 1])))
    batch_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    rollout_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    runner = EpisodeRunner(model, corpus.vocab, worlds.houses,
                           worlds.train_labels(), cfg)
    start_step = 0
    if resume_dir is not None:
        ckpt = Path(resume_dir) / f"checkpoint_seed{seed}.txt"
        meta = json.loads((Path(resume_dir) / f"state_seed{seed}.json").read_text())
        model.params.load_state(load_params(ckpt))
        start_step = meta["step"]

    stream = make_batch_stream(cfg, corpus, batch_rng, fixed_pool)
    tasks = eval_tasks(cfg)
    records: list[dict] = []
    train_log: list[dict] = []

    def run_eval(at_step: int) -> dict[str, MetricReport]:
        _, reports = evaluate_policy(runner, corpus, ["val_seen", "val_unseen"],
                                     tasks, max_episodes=cfg.eval_max_episodes)
        for task, report in reports.items():
            for fold in report.folds:
                records.append({"step": at_step, "seed": seed, "task": task,
                                "fold": fold, "count": report.counts[fold],
                                "metrics": report.folds[fold], "gap": report.gap})
        return reports

    reports = {}
    for step_i in range(start_step + 1, cfg.steps + 1):
        stats = train_step(runner, next(stream), cfg, rollout_rng)
        train_log.append({"step": step_i, **stats})
        if cfg.eval_interval and step_i % cfg.eval_interval == 0 and step_i < cfg.steps:
            run_eval(step_i)
    reports = run_eval(cfg.steps)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / f"checkpoint_seed{seed}.txt"
    save_params(model.params, ckpt_path)
    (out / f"state_seed{seed}.json").write_text(
        json.dumps({"seed": seed, "step": cfg.steps}, sort_keys=True) + "\n")
    with open(out / f"metrics_seed{seed}.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / f"train_log_seed{seed}.jsonl", "w") as fh:
        for rec in train_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return RunResult(seed=seed, metric_records=records, final_reports=reports,
                     checkpoint_path=str(ckpt_path), train_log=train_log, model=model)


def train(cfg: TrainConfig, fixed_pool=None, resume_dir: str | None = None,
          worlds: WorldSet | None = None,
          corpus: CorpusSet | None = None) -> list[RunResult]:
    """Run the configured cell once per seed; returns one result per run."""
    cfg.validate()
    worlds = worlds or load_world_set(cfg.worlds_dir)
    corpus = corpus or load_corpus_set(cfg.corpus_dir)
    return [_train_single(cfg, worlds, corpus, seed, fixed_pool, resume_dir)
            for seed in cfg.seeds]


def run_ablation_fixed_paths(cfg: TrainConfig, fractions: Sequence[float],
                             total: int | None = None,
                             worlds: WorldSet | None = None,
                             corpus: CorpusSet | None = None) -> list[dict]:
    """Constant-size training sets with varying instruction-task share."""
    cfg.validate()
    worlds = worlds or load_world_set(cfg.worlds_dir)
    corpus = corpus or load_corpus_set(cfg.corpus_dir)
    ndh_pool = [s for t, s in corpus.pool("train", "ndh")]
    vln_pool = [s for t, s in corpus.pool("train", "vln")]
    total = total or len(ndh_pool)
    rows = []
    for frac in fractions:
        pool = fixed_total_mixture(ndh_pool, vln_pool, total, frac,
                                   rng=np.random.default_rng(
                                       np.random.SeedSequence([int(frac * 1000), 17])))
        sub_cfg = replace(cfg, task_mode="multi",
                          out_dir=str(Path(cfg.out_dir) / f"fixed_{int(frac * 100):03d}"))
        results = train(sub_cfg, fixed_pool=pool, worlds=worlds, corpus=corpus)
        row = {"fraction": frac, "train_size": len(pool)}
        for fold in ("val_seen", "val_unseen"):
            vals = [r.final_reports["ndh"].folds[fold]["progress"] for r in results]
            row[f"progress_{fold}"] = sum(vals) / len(vals)
        rows.append(row)
    return rows
