"""Reward shaping, discounted returns, and the training losses.

Point mode measures distance to an exact goal node; room mode measures the
minimum distance to any node of the goal room. Per-step rewards are the
decrease in that distance; the terminal step is rewarded 1 exactly when the
final distance is within the success radius. The navigation loss mixes a
REINFORCE term over policy-sampled steps (advantage-weighted negative log
probability against a batch-mean baseline) with behavior cloning over
teacher-forced steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .autodiff import Tape, Tensor
from .world import House

POINT = "point"
ROOM = "room"


@dataclass
class RewardConfig:
    gamma: float = 0.95
    success_radius: float = 3.0
    mode: str = POINT

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.success_radius <= 0:
            raise ValueError(f"success radius must be positive, got {self.success_radius}")
        if self.mode not in (POINT, ROOM):
            raise ValueError(f"mode must be {POINT!r} or {ROOM!r}, got {self.mode!r}")


@dataclass
class StepRecord:
    """One action in an episode; the tape nodes make it loss-ready."""

    node: int
    action_index: int
    target: int | None
    log_prob: Tensor | None  # None only on a forced terminal after truncation
    z: Tensor | None = None
    env_log_probs: Tensor | None = None
    reward: float = 0.0
    ret: float = 0.0


@dataclass
class EpisodeTrace:
    task: str
    house_id: int
    goal: int | str
    start_node: int
    steps: list[StepRecord] = field(default_factory=list)
    visited: list[int] = field(default_factory=list)
    cloned: bool = False
    truncated: bool = False

    @property
    def final_node(self) -> int:
        return self.visited[-1]


def goal_distance(house: House, node: int, cfg: RewardConfig, goal) -> float:
    if cfg.mode == POINT:
        return house.distance(node, goal)
    return house.room_distance(node, goal)


def immediate_reward(house: House, node_t: int, node_next: int | None,
                     cfg: RewardConfig, goal) -> float:
    """Distance decrease for a move; success indicator when node_next is None."""
    d_t = goal_distance(house, node_t, cfg, goal)
    if node_next is None:
        return 1.0 if d_t <= cfg.success_radius else 0.0
    return d_t - goal_distance(house, node_next, cfg, goal)


def rewards_for_path(house: House, visited: Sequence[int], cfg: RewardConfig,
                     goal) -> list[float]:
    """Per-step rewards for a visited-node chain ending in a terminal step.

    Length is len(visited): one reward per move plus the terminal indicator.
    """
    out = [immediate_reward(house, u, v, cfg, goal)
           for u, v in zip(visited, visited[1:])]
    out.append(immediate_reward(house, visited[-1], None, cfg, goal))
    return out


def discounted_return(rewards: Sequence[float], gamma: float) -> list[float]:
    """R_t = sum_{t'>=t} gamma^(t'-t) r_t', computed as a backward recursion."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def assign_rewards(house: House, trace: EpisodeTrace, cfg: RewardConfig) -> None:
    rewards = rewards_for_path(house, trace.visited, cfg, trace.goal)
    returns = discounted_return(rewards, cfg.gamma)
    if len(rewards) != len(trace.steps):
        raise ValueError("trace steps do not match its visited chain")
    for step, r, ret in zip(trace.steps, rewards, returns):
        step.reward = r
        step.ret = ret


def estimate_baseline(traces: Sequence[EpisodeTrace]) -> float:
    """Batch mean of per-step returns over policy-sampled steps."""
    returns = [s.ret for t in traces if not t.cloned
               for s in t.steps if s.log_prob is not None]
    if not returns:
        raise ValueError("no sampled steps to estimate a baseline from")
    return sum(returns) / len(returns)


def navigation_loss(tape: Tape, traces: Sequence[EpisodeTrace], baseline: float) -> Tensor:
    """REINFORCE with baseline over sampled steps plus behavior cloning."""
    rl_terms = []
    bc_terms = []
    for trace in traces:
        for step in trace.steps:
            if step.log_prob is None:
                continue
            if trace.cloned:
                bc_terms.append(tape.scale(step.log_prob, -1.0))
            else:
                rl_terms.append(tape.scale(step.log_prob, -(step.ret - baseline)))
    if not rl_terms and not bc_terms:
        raise ValueError("batch contains neither sampled nor cloned steps")
    parts = []
    if rl_terms:
        parts.append(tape.scale(tape.add_n(rl_terms), 1.0 / len(rl_terms)))
    if bc_terms:
        parts.append(tape.scale(tape.add_n(bc_terms), 1.0 / len(bc_terms)))
    return parts[0] if len(parts) == 1 else tape.add(parts[0], parts[1])


def bc_loss_value(traces: Sequence[EpisodeTrace]) -> float | None:
    """Mean -log pi(a*|s) per cloned step, for logging."""
    vals = [-float(s.log_prob.data) for t in traces if t.cloned
            for s in t.steps if s.log_prob is not None]
    if not vals:
        return None
    return sum(vals) / len(vals)


def env_loss(tape: Tape, scored_steps: Sequence[tuple[Tensor, int]]) -> Tensor:
    """Mean negative log likelihood of the true house over classified steps."""
    if not scored_steps:
        raise ValueError("no classified steps for the environment loss")
    terms = []
    for log_probs, label in scored_steps:
        if not 0 <= label < log_probs.shape[0]:
            raise ValueError(f"house label {label} outside {log_probs.shape[0]} classes")
        terms.append(tape.scale(tape.pick(log_probs, label), -1.0))
    return tape.scale(tape.add_n(terms), 1.0 / len(terms))
