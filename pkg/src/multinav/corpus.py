"""Synthetic language for the two navigation tasks, plus samplers.

Instruction-following samples pair a short path with templated step-by-step
clauses ("turn left to the mirror in the pantry"). Dialog samples pair a
longer route toward a goal room with a target-object announcement and Q/A
turns whose answers reveal successive route segments, so richer dialog
variants carry strictly more route information. All generation is a pure
function of (house, rng seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .world import HEADING_STEP, House, wrap_angle

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"
PAD_ID = 0
OOV_ID = 1

MIN_TOKEN_COUNT = 5

LANDMARK_WORDS = [
    "lamp", "sofa", "piano", "fern", "mirror", "clock", "vase", "rug",
    "bench", "chair", "shelf", "stool", "painting", "candle", "basket",
    "statue", "table", "plant", "radio", "globe", "ladder", "chest",
    "curtain", "banner",
]
CATEGORY_WORDS = [
    "kitchen", "library", "garage", "studio", "pantry", "attic",
    "cellar", "lounge", "office", "nursery", "hallway", "workshop",
]
OBJECT_WORDS = [
    "stove", "atlas", "toolbox", "easel", "jars", "trunk",
    "barrel", "couch", "desk", "crib", "coatrack", "lathe",
]
ADJECTIVES = ["red", "old", "small", "tall", "round"]
VERBS = ["walk", "go", "head"]
QUESTIONS = [
    ["where", "do", "i", "go", "next"],
    ["which", "way", "now"],
    ["should", "i", "keep", "going"],
]

DIALOG_VARIANTS = ("t0", "t0_a", "t0_a_q", "full_history")


def landmark_word(lm: int) -> str:
    base = LANDMARK_WORDS[lm % len(LANDMARK_WORDS)]
    return base if lm < len(LANDMARK_WORDS) else f"{base}{lm // len(LANDMARK_WORDS)}"


def category_word(cat: int) -> str:
    return CATEGORY_WORDS[cat]


def object_word(cat: int) -> str:
    return OBJECT_WORDS[cat]


# -- vocabulary -----------------------------------------------------------------


class Vocab:
    """Token/id map with PAD and a single OOV id for everything rare."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = [PAD_TOKEN, OOV_TOKEN] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, OOV_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def union(self, other: "Vocab") -> "Vocab":
        merged = list(dict.fromkeys(self.id_to_token[2:] + other.id_to_token[2:]))
        return Vocab(merged)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token[2:]})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text)["tokens"])


def build_vocab(sequences: Iterable[Sequence[str]], min_count: int = MIN_TOKEN_COUNT) -> Vocab:
    counts: dict[str, int] = {}
    for seq in sequences:
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(t for t, c in counts.items() if c >= min_count)
    return Vocab(kept)


# -- samples --------------------------------------------------------------------


@dataclass(frozen=True)
class StartPose:
    node: int
    heading: float


@dataclass
class VlnSample:
    tokens: list[str]
    house_id: int
    start: StartPose
    path: list[int]
    goal_node: int


@dataclass
class NdhSample:
    target_tokens: list[str]
    turns: list[tuple[list[str], list[str]]]
    house_id: int
    start: StartPose
    navigator_path: list[int]
    oracle_path: list[int]
    goal_room: str


def direction_bucket(dphi: float) -> str:
    if abs(dphi) <= math.pi / 4:
        return "straight"
    if dphi > 3 * math.pi / 4 or dphi < -3 * math.pi / 4:
        return "around"
    return "left" if dphi > 0 else "right"


def render_route(house: House, path: Sequence[int], start_heading: float,
                 rng: np.random.Generator, noise_rate: float = 0.05,
                 closing_clause: bool = True) -> list[str]:
    """Step-by-step clauses for an edge path; one movement clause per edge."""
    tokens: list[str] = []
    heading = start_heading
    for idx, (u, v) in enumerate(zip(path, path[1:])):
        edge = house.edge(u, v)
        bucket = direction_bucket(wrap_angle(edge.heading - heading))
        if idx > 0:
            tokens.append("then")
        if bucket == "straight":
            tokens += [str(rng.choice(VERBS)), "straight"]
        else:
            tokens += ["turn", bucket]
        tokens += ["to", "the"]
        if rng.random() < noise_rate:
            tokens.append(str(rng.choice(ADJECTIVES)))
        tokens.append(landmark_word(house.nodes[v].landmark))
        cat = house.room_categories[house.nodes[v].room]
        tokens += ["in", "the", category_word(cat)]
        heading = edge.heading
    if closing_clause and len(path) > 1:
        tokens += ["and", "stop", "by", "the", landmark_word(house.nodes[path[-1]].landmark)]
    return tokens


def _sample_heading(rng: np.random.Generator) -> float:
    return float(rng.integers(0, 12)) * HEADING_STEP


def generate_vln_sample(house: House, rng: np.random.Generator,
                        min_hops: int = 1, max_hops: int = 3,
                        noise_rate: float = 0.05) -> VlnSample:
    ids = house.node_ids()
    if len(ids) < 2:
        raise ValueError("house too small for instruction samples")
    start = int(rng.choice(ids))
    candidates = [v for v in ids
                  if v != start and min_hops <= house.hop_distance(start, v) <= max_hops]
    if not candidates:
        candidates = [v for v in ids if v != start]
    goal = int(rng.choice(candidates))
    path = house.shortest_path(start, goal)
    heading = _sample_heading(rng)
    tokens = render_route(house, path, heading, rng, noise_rate)
    return VlnSample(tokens=tokens, house_id=house.house_id,
                     start=StartPose(start, heading), path=path, goal_node=goal)


def generate_ndh_sample(house: House, rng: np.random.Generator,
                        error_rate: float = 0.3, min_hops: int = 3, max_hops: int = 9,
                        max_turns: int = 3, noise_rate: float = 0.05) -> NdhSample:
    if len(house.rooms) < 2:
        raise ValueError("house needs at least two rooms for dialog samples")
    ids = house.node_ids()
    start = int(rng.choice(ids))
    start_room = house.room_of(start)

    def room_hops(label):
        return min(house.hop_distance(start, v) for v in house.rooms[label])

    other = [label for label in sorted(house.rooms) if label != start_room]
    in_range = [label for label in other if min_hops <= room_hops(label) <= max_hops]
    goal_room = str(rng.choice(in_range)) if in_range else max(other, key=room_hops)

    members = sorted(house.rooms[goal_room])
    oracle_target = min(members, key=lambda v: (house.distance(start, v), v))
    oracle_path = house.shortest_path(start, oracle_target)

    if rng.random() >= error_rate:
        nav_target = int(rng.choice(members))
    else:
        wrong = [v for v in ids if house.room_of(v) != goal_room and v != start]
        nav_target = int(rng.choice(wrong)) if wrong else start
    navigator_path = house.shortest_path(start, nav_target)

    heading = _sample_heading(rng)
    cat = house.room_categories[goal_room]
    target_tokens = ["find", "the", object_word(cat)]

    n_edges = len(oracle_path) - 1
    n_turns = int(rng.integers(1, max_turns + 1))
    n_turns = max(1, min(n_turns, max(n_edges, 1)))
    bounds = [round(i * n_edges / n_turns) for i in range(n_turns + 1)]
    turns = []
    seg_heading = heading
    for j in range(n_turns):
        seg = oracle_path[bounds[j]:bounds[j + 1] + 1]
        question = list(QUESTIONS[int(rng.integers(0, len(QUESTIONS)))])
        answer = render_route(house, seg, seg_heading, rng, noise_rate,
                              closing_clause=(j == n_turns - 1))
        if len(seg) > 1:
            seg_heading = house.edge(seg[-2], seg[-1]).heading
        if not answer:
            answer = ["you", "are", "there"]
        turns.append((question, answer))

    return NdhSample(target_tokens=target_tokens, turns=turns, house_id=house.house_id,
                     start=StartPose(start, heading), navigator_path=navigator_path,
                     oracle_path=oracle_path, goal_room=goal_room)


def serialize_dialog(sample: NdhSample, variant: str) -> list[str]:
    """Token stream exposing progressively more of the dialog history."""
    if variant not in DIALOG_VARIANTS:
        raise ValueError(f"unknown dialog variant {variant!r}")
    q_last, a_last = sample.turns[-1]
    if variant == "t0":
        return list(sample.target_tokens)
    if variant == "t0_a":
        return list(sample.target_tokens) + list(a_last)
    if variant == "t0_a_q":
        return list(sample.target_tokens) + list(q_last) + list(a_last)
    out = list(sample.target_tokens)
    for q, a in sample.turns:
        out += list(q) + list(a)
    return out


# -- sampling -------------------------------------------------------------------


def pool_stream(pool: Sequence, rng: np.random.Generator) -> Iterator:
    """Endless stream over a pool, reshuffled each epoch."""
    if not pool:
        raise ValueError("empty sample pool")
    while True:
        for i in rng.permutation(len(pool)):
            yield pool[int(i)]


def interleaved_batches(vln_stream: Iterator, ndh_stream: Iterator,
                        batch_size: int, ratio: float,
                        rng: np.random.Generator) -> Iterator[list[tuple[str, object]]]:
    """Mixed mini-batches; each slot is VLN with probability `ratio`."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mix ratio must be in [0, 1], got {ratio}")
    while True:
        batch = []
        for _ in range(batch_size):
            if rng.random() < ratio:
                batch.append(("vln", next(vln_stream)))
            else:
                batch.append(("ndh", next(ndh_stream)))
        yield batch


def fixed_total_mixture(ndh_pool: Sequence, vln_pool: Sequence, total: int,
                        vln_fraction: float,
                        rng: np.random.Generator | None = None) -> list[tuple[str, object]]:
    """Exactly `total` samples, floor(fraction*total) of them VLN, no duplicates."""
    if not 0.0 <= vln_fraction <= 1.0:
        raise ValueError(f"vln fraction must be in [0, 1], got {vln_fraction}")
    n_vln = int(vln_fraction * total)
    n_ndh = total - n_vln
    if n_vln > len(vln_pool) or n_ndh > len(ndh_pool):
        raise ValueError(f"pools too small: need {n_vln} vln / {n_ndh} ndh, "
                         f"have {len(vln_pool)} / {len(ndh_pool)}")
    if rng is None:
        vln_idx = range(n_vln)
        ndh_idx = range(n_ndh)
    else:
        vln_idx = rng.permutation(len(vln_pool))[:n_vln]
        ndh_idx = rng.permutation(len(ndh_pool))[:n_ndh]
    out = [("vln", vln_pool[int(i)]) for i in vln_idx]
    out += [("ndh", ndh_pool[int(i)]) for i in ndh_idx]
    return out


# -- records --------------------------------------------------------------------


def sample_to_record(task: str, sample) -> dict:
    if task == "vln":
        return {"task": "vln", "house_id": sample.house_id,
                "start_node": sample.start.node, "start_heading": sample.start.heading,
                "path": sample.path, "goal_node": sample.goal_node,
                "tokens": sample.tokens}
    if task == "ndh":
        return {"task": "ndh", "house_id": sample.house_id,
                "start_node": sample.start.node, "start_heading": sample.start.heading,
                "goal_room": sample.goal_room, "target_tokens": sample.target_tokens,
                "turns": [[list(q), list(a)] for q, a in sample.turns],
                "navigator_path": sample.navigator_path,
                "oracle_path": sample.oracle_path}
    raise ValueError(f"unknown task {task!r}")


def record_to_sample(record: dict) -> tuple[str, object]:
    start = StartPose(record["start_node"], record["start_heading"])
    if record["task"] == "vln":
        return "vln", VlnSample(tokens=record["tokens"], house_id=record["house_id"],
                                start=start, path=record["path"],
                                goal_node=record["goal_node"])
    if record["task"] == "ndh":
        return "ndh", NdhSample(target_tokens=record["target_tokens"],
                                turns=[(q, a) for q, a in record["turns"]],
                                house_id=record["house_id"], start=start,
                                navigator_path=record["navigator_path"],
                                oracle_path=record["oracle_path"],
                                goal_room=record["goal_room"])
    raise ValueError(f"unknown task {record['task']!r}")


def write_samples(path, tagged_samples: Sequence[tuple[str, object]],
                  vocab: Vocab | None = None) -> None:
    """One JSON record per line; token ids included when a vocab is given."""
    with open(path, "w") as fh:
        for task, sample in tagged_samples:
            record = sample_to_record(task, sample)
            if vocab is not None:
                toks = (sample.tokens if task == "vln"
                        else serialize_dialog(sample, "full_history"))
                record["token_ids"] = vocab.encode(toks)
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_samples(path) -> list[tuple[str, object]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(record_to_sample(json.loads(line)))
    return out


def sample_token_stream(task: str, sample) -> list[str]:
    return sample.tokens if task == "vln" else serialize_dialog(sample, "full_history")
