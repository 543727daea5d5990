"""Procedural house graphs: rooms, panoramic view features, distances.

A house is an undirected navigation graph. Nodes carry 3-d positions, a
room assignment, a landmark index (distinct within two hops, which keeps
synthetic instructions unambiguous), and 36 synthetic view-feature rows
(3 elevations x 12 headings at 30-degree intervals). Each view row mixes
a structural component shared across houses with a house-specific
fingerprint, so a classifier has an environment signal to exploit.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

NUM_HEADINGS = 12
NUM_ELEVATIONS = 3
NUM_VIEWS = NUM_HEADINGS * NUM_ELEVATIONS
HEADING_STEP = 2.0 * math.pi / NUM_HEADINGS
ELEVATIONS = (-math.pi / 6.0, 0.0, math.pi / 6.0)
NUM_CATEGORIES = 12
DESC_DIM = 14

# seed-sequence tags keeping the derived random streams independent
_TAG_STRUCT, _TAG_CAT, _TAG_LM, _TAG_PROJ, _TAG_HBIAS, _TAG_HNOISE = range(101, 107)


class InfeasibleSpec(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class IllegalAction(ValueError):
    pass


class EmptyRoom(ValueError):
    pass


@dataclass(frozen=True)
class HouseSpec:
    """Generation parameters; a house is a pure function of these."""

    nodes: int
    rooms: int
    seed: int
    house_id: int = 0
    feature_seed: int = 0
    feature_dim: int = 12
    house_mix: float = 0.6
    split_level_prob: float = 0.3
    allow_single_node: bool = False


@dataclass
class NavNode:
    node_id: int
    position: np.ndarray
    room: str
    landmark: int


@dataclass(frozen=True)
class Edge:
    heading: float
    elevation: float
    length: float


@dataclass(frozen=True)
class AgentPose:
    node_id: int
    heading: float = 0.0
    elevation: float = 0.0


@dataclass(frozen=True)
class DirectionOption:
    """A navigable direction; target None is the always-available STOP."""

    target: int | None
    feature: np.ndarray


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def nearest_view_index(heading: float, elevation: float) -> int:
    h = int(round(heading / HEADING_STEP)) % NUM_HEADINGS
    if elevation > math.pi / 12.0:
        e = 2
    elif elevation < -math.pi / 12.0:
        e = 0
    else:
        e = 1
    return e * NUM_HEADINGS + h


def view_angles(index: int) -> tuple[float, float]:
    return (index % NUM_HEADINGS) * HEADING_STEP, ELEVATIONS[index // NUM_HEADINGS]


def _seeded(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


class House:
    def __init__(self, house_id: int, nodes: list[NavNode],
                 edges: list[tuple[int, int]], room_categories: dict[str, int],
                 feature_seed: int = 0, feature_dim: int = 12, house_mix: float = 0.6,
                 spec: HouseSpec | None = None):
        self.house_id = house_id
        self.nodes: dict[int, NavNode] = {n.node_id: n for n in nodes}
        self.room_categories = dict(room_categories)
        self.feature_seed = feature_seed
        self.feature_dim = feature_dim
        self.house_mix = house_mix
        self.spec = spec
        self.rooms: dict[str, list[int]] = {label: [] for label in room_categories}
        for n in nodes:
            if n.room not in self.rooms:
                raise ValueError(f"node {n.node_id} references unknown room {n.room!r}")
            self.rooms[n.room].append(n.node_id)
        self.adj: dict[int, dict[int, Edge]] = {n.node_id: {} for n in nodes}
        self._edge_list = [(min(u, v), max(u, v)) for u, v in edges]
        for u, v in edges:
            self._add_edge(u, v)
        self._dist_cache: dict[int, dict[int, float]] = {}
        self._pred_cache: dict[int, dict[int, int]] = {}
        self._hop_cache: dict[int, dict[int, int]] = {}
        self._view_cache: dict[int, np.ndarray] = {}

    def _add_edge(self, u: int, v: int) -> None:
        pu, pv = self.nodes[u].position, self.nodes[v].position
        delta = pv - pu
        length = float(np.linalg.norm(delta))
        if length == 0.0:
            raise ValueError(f"zero-length edge {u}-{v}")
        flat = math.hypot(delta[0], delta[1])
        raw_elev = math.atan2(delta[2], flat) if flat > 0 else 0.0
        if raw_elev > math.pi / 12.0:
            elev = math.pi / 6.0
        elif raw_elev < -math.pi / 12.0:
            elev = -math.pi / 6.0
        else:
            elev = 0.0
        heading = math.atan2(delta[1], delta[0])
        self.adj[u][v] = Edge(heading=heading, elevation=elev, length=length)
        self.adj[v][u] = Edge(heading=wrap_angle(heading + math.pi), elevation=-elev,
                              length=length)

    # -- queries ------------------------------------------------------------

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def neighbors(self, u: int) -> list[int]:
        self._require(u)
        return sorted(self.adj[u])

    def room_of(self, u: int) -> str:
        self._require(u)
        return self.nodes[u].room

    def edge(self, u: int, v: int) -> Edge:
        self._require(u)
        if v not in self.adj[u]:
            raise UnknownNode(f"no edge {u}-{v}")
        return self.adj[u][v]

    def _require(self, u: int) -> None:
        if u not in self.nodes:
            raise UnknownNode(f"node {u} not in house {self.house_id}")

    def is_connected(self) -> bool:
        ids = self.node_ids()
        if not ids:
            return True
        seen = {ids[0]}
        frontier = [ids[0]]
        while frontier:
            nxt = frontier.pop()
            for v in self.adj[nxt]:
                if v not in seen:
                    seen.add(v)
                    frontier.append(v)
        return len(seen) == len(ids)

    def distance(self, a: int, b: int) -> float:
        """Geodesic distance along edges weighted by Euclidean length."""
        self._require(a)
        self._require(b)
        if a not in self._dist_cache:
            self._dist_cache[a] = self._dijkstra(a)
        d = self._dist_cache[a].get(b)
        if d is None:
            raise UnknownNode(f"no path from {a} to {b}")
        return d

    def _dijkstra(self, source: int) -> dict[int, float]:
        dist = {source: 0.0}
        pred: dict[int, int] = {}
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, math.inf):
                continue
            for v in sorted(self.adj[u]):
                nd = d + self.adj[u][v].length
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    pred[v] = u
                    heapq.heappush(heap, (nd, v))
        self._pred_cache[source] = pred
        return dist

    def shortest_path(self, a: int, b: int) -> list[int]:
        """Geodesic node sequence from a to b, deterministic tie-breaking."""
        self.distance(a, b)
        pred = self._pred_cache[a]
        path = [b]
        while path[-1] != a:
            path.append(pred[path[-1]])
        return path[::-1]

    def hop_distance(self, a: int, b: int) -> int:
        self._require(a)
        self._require(b)
        if a not in self._hop_cache:
            hops = {a: 0}
            frontier = [a]
            while frontier:
                nxt = []
                for u in frontier:
                    for v in self.adj[u]:
                        if v not in hops:
                            hops[v] = hops[u] + 1
                            nxt.append(v)
                frontier = nxt
            self._hop_cache[a] = hops
        return self._hop_cache[a][b]

    def room_distance(self, a: int, room: str) -> float:
        """Minimum geodesic distance from a to any node of the room."""
        members = self.rooms.get(room)
        if not members:
            raise EmptyRoom(f"room {room!r} is empty or unknown")
        return min(self.distance(a, v) for v in members)

    def room_medoid(self, room: str) -> int:
        """Most central room node; where the room's object is considered to sit."""
        members = self.rooms.get(room)
        if not members:
            raise EmptyRoom(f"room {room!r} is empty or unknown")
        return min(sorted(members),
                   key=lambda v: sum(self.distance(v, w) for w in members))

    # -- observations ---------------------------------------------------------

    def view_features(self, u: int) -> np.ndarray:
        """(36, feature_dim) synthetic per-view features, deterministic."""
        self._require(u)
        cached = self._view_cache.get(u)
        if cached is not None:
            return cached
        f = self.feature_dim
        proj = _seeded(self.feature_seed, _TAG_PROJ).normal(size=(DESC_DIM, f)) / math.sqrt(DESC_DIM)
        desc = np.zeros((NUM_VIEWS, DESC_DIM))
        own_cat = self._cat_vec(self.room_categories[self.nodes[u].room])
        desc[:, 0:6] += 0.5 * own_cat
        for v in sorted(self.adj[u]):
            edge = self.adj[u][v]
            vi = nearest_view_index(edge.heading, edge.elevation)
            desc[vi, 0:6] += self._cat_vec(self.room_categories[self.nodes[v].room])
            desc[vi, 6:12] += self._lm_vec(self.nodes[v].landmark)
            desc[vi, 12] += 1.0
            desc[vi, 13] += edge.length / 5.0
        struct = desc @ proj
        bias = _seeded(self.feature_seed, _TAG_HBIAS, self.house_id).normal(size=f)
        feats = np.empty((NUM_VIEWS, f))
        for vi in range(NUM_VIEWS):
            noise = _seeded(self.feature_seed, _TAG_HNOISE, self.house_id, u, vi).normal(size=f)
            feats[vi] = struct[vi] + self.house_mix * (bias + 0.5 * noise)
        self._view_cache[u] = feats
        return feats

    def _cat_vec(self, cat: int) -> np.ndarray:
        return _seeded(self.feature_seed, _TAG_CAT, cat).normal(size=6)

    def _lm_vec(self, lm: int) -> np.ndarray:
        return _seeded(self.feature_seed, _TAG_LM, lm).normal(size=6)

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "house_id": self.house_id,
            "feature_seed": self.feature_seed,
            "feature_dim": self.feature_dim,
            "house_mix": self.house_mix,
            "nodes": [
                {"id": n.node_id, "pos": [float(c) for c in n.position],
                 "room": n.room, "landmark": n.landmark}
                for n in (self.nodes[i] for i in self.node_ids())
            ],
            "rooms": {label: {"category": self.room_categories[label],
                              "nodes": sorted(self.rooms[label])}
                      for label in sorted(self.rooms)},
            "edges": sorted(set(self._edge_list)),
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "House":
        payload = json.loads(text)
        nodes = [NavNode(node_id=n["id"], position=np.array(n["pos"], dtype=np.float64),
                         room=n["room"], landmark=n["landmark"])
                 for n in payload["nodes"]]
        cats = {label: info["category"] for label, info in payload["rooms"].items()}
        return cls(house_id=payload["house_id"], nodes=nodes,
                   edges=[tuple(e) for e in payload["edges"]], room_categories=cats,
                   feature_seed=payload["feature_seed"], feature_dim=payload["feature_dim"],
                   house_mix=payload["house_mix"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "House":
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- pose-level operations -----------------------------------------------------


def navigable_directions(house: House, pose: AgentPose) -> list[DirectionOption]:
    """One option per neighbor plus the STOP sentinel (zero placeholder feature).

    A direction feature is the view-feature row nearest the edge heading,
    concatenated with [sin dphi, cos dphi, sin theta, cos theta] where dphi is
    the edge heading relative to the agent's.
    """
    house._require(pose.node_id)
    feats = house.view_features(pose.node_id)
    options = []
    for v in house.neighbors(pose.node_id):
        edge = house.adj[pose.node_id][v]
        vi = nearest_view_index(edge.heading, edge.elevation)
        dphi = wrap_angle(edge.heading - pose.heading)
        suffix = np.array([math.sin(dphi), math.cos(dphi),
                           math.sin(edge.elevation), math.cos(edge.elevation)])
        options.append(DirectionOption(target=v,
                                       feature=np.concatenate([feats[vi], suffix])))
    options.append(DirectionOption(target=None,
                                   feature=np.zeros(house.feature_dim + 4)))
    return options


_VIEW_PHIS = np.array([view_angles(vi)[0] for vi in range(NUM_VIEWS)])
_VIEW_THETAS = np.array([view_angles(vi)[1] for vi in range(NUM_VIEWS)])


def observe_panorama(house: House, pose: AgentPose) -> np.ndarray:
    """(36, feature_dim + 4) panorama; headings relative to the agent's."""
    house._require(pose.node_id)
    feats = house.view_features(pose.node_id)
    dphi = _VIEW_PHIS - pose.heading
    suffix = np.stack([np.sin(dphi), np.cos(dphi),
                       np.sin(_VIEW_THETAS), np.cos(_VIEW_THETAS)], axis=1)
    return np.concatenate([feats, suffix], axis=1)


def step(house: House, pose: AgentPose, target: int | None) -> AgentPose | None:
    """Advance one action; STOP (target None) terminates, returning None."""
    house._require(pose.node_id)
    if target is None:
        return None
    if target not in house.adj[pose.node_id]:
        raise IllegalAction(f"no edge {pose.node_id}->{target} in house {house.house_id}")
    edge = house.adj[pose.node_id][target]
    return AgentPose(node_id=target, heading=edge.heading, elevation=edge.elevation)


def path_edge_lengths(house: House, path: list[int]) -> list[float]:
    return [house.edge(u, v).length for u, v in zip(path, path[1:])]


# -- generation ------------------------------------------------------------------


def _prim_mst(points: np.ndarray) -> list[tuple[int, int]]:
    n = len(points)
    if n <= 1:
        return []
    in_tree = [0]
    out = set(range(1, n))
    edges = []
    while out:
        best = None
        for u in in_tree:
            for v in out:
                d = float(np.linalg.norm(points[u] - points[v]))
                if best is None or d < best[0]:
                    best = (d, u, v)
        _, u, v = best
        edges.append((u, v))
        in_tree.append(v)
        out.remove(v)
    return edges


def _assign_landmarks(n_nodes: int, adj: dict[int, set[int]]) -> dict[int, int]:
    """Greedy coloring distinct within two hops."""
    landmark = {}
    for u in range(n_nodes):
        used = set()
        for v in adj[u]:
            if v in landmark:
                used.add(landmark[v])
            for w in adj[v]:
                if w in landmark:
                    used.add(landmark[w])
        lm = 0
        while lm in used:
            lm += 1
        landmark[u] = lm
    return landmark


def generate_house(spec: HouseSpec) -> House:
    """Connected rooms-and-doorways graph, pure function of the spec."""
    if spec.nodes == 1 and spec.rooms == 1 and spec.allow_single_node:
        node = NavNode(0, np.zeros(3), "r0", 0)
        return House(spec.house_id, [node], [], {"r0": 0}, spec.feature_seed,
                     spec.feature_dim, spec.house_mix, spec)
    if spec.nodes < 2:
        raise InfeasibleSpec(f"need at least 2 nodes, got {spec.nodes}")
    if spec.rooms < 1 or spec.rooms > spec.nodes:
        raise InfeasibleSpec(f"{spec.rooms} rooms infeasible for {spec.nodes} nodes")

    rng = _seeded(spec.seed, _TAG_STRUCT)
    n_rooms = spec.rooms
    counts = [spec.nodes // n_rooms] * n_rooms
    for i in range(spec.nodes - sum(counts)):
        counts[i] += 1

    cols = math.ceil(math.sqrt(n_rooms))
    centers = []
    for r in range(n_rooms):
        cx = (r % cols) * 7.0 + rng.uniform(-1.0, 1.0)
        cy = (r // cols) * 7.0 + rng.uniform(-1.0, 1.0)
        cz = rng.choice([0.0, 0.9, -0.9], p=[1.0 - spec.split_level_prob,
                                             spec.split_level_prob / 2,
                                             spec.split_level_prob / 2])
        centers.append(np.array([cx, cy, cz]))

    categories = rng.choice(NUM_CATEGORIES, size=n_rooms, replace=False)
    positions = np.zeros((spec.nodes, 3))
    room_of = {}
    rooms: dict[str, list[int]] = {}
    nid = 0
    for r in range(n_rooms):
        label = f"r{r}"
        rooms[label] = []
        for _ in range(counts[r]):
            for _attempt in range(80):
                pos = centers[r] + np.array([rng.uniform(-2.2, 2.2),
                                             rng.uniform(-2.2, 2.2), 0.0])
                if all(np.hypot(*(pos[:2] - positions[j][:2])) > 0.6
                       for j in range(nid)):
                    break
            positions[nid] = pos
            room_of[nid] = label
            rooms[label].append(nid)
            nid += 1

    edges: set[tuple[int, int]] = set()

    def add(u, v):
        if u != v:
            edges.add((min(u, v), max(u, v)))

    for label, members in rooms.items():
        pts = positions[members]
        for a, b in _prim_mst(pts):
            add(members[a], members[b])
        if len(members) >= 4:
            a, b = rng.choice(len(members), size=2, replace=False)
            add(members[int(a)], members[int(b)])

    order = list(rng.permutation(n_rooms))
    for i in range(1, n_rooms):
        a_room = rooms[f"r{order[i]}"]
        b_room = rooms[f"r{order[int(rng.integers(0, i))]}"]
        best = min(((float(np.linalg.norm(positions[u] - positions[v])), u, v)
                    for u in a_room for v in b_room), key=lambda t: t[0])
        add(best[1], best[2])
    for _ in range(max(1, n_rooms // 3)):
        if n_rooms >= 2 and rng.random() < 0.5:
            ra, rb = rng.choice(n_rooms, size=2, replace=False)
            best = min(((float(np.linalg.norm(positions[u] - positions[v])), u, v)
                        for u in rooms[f"r{ra}"] for v in rooms[f"r{rb}"]),
                       key=lambda t: t[0])
            add(best[1], best[2])

    adj_sets: dict[int, set[int]] = {i: set() for i in range(spec.nodes)}
    for u, v in edges:
        adj_sets[u].add(v)
        adj_sets[v].add(u)
    landmarks = _assign_landmarks(spec.nodes, adj_sets)

    nodes = [NavNode(i, positions[i], room_of[i], landmarks[i])
             for i in range(spec.nodes)]
    cats = {f"r{r}": int(categories[r]) for r in range(n_rooms)}
    house = House(spec.house_id, nodes, sorted(edges), cats, spec.feature_seed,
                  spec.feature_dim, spec.house_mix, spec)
    if not house.is_connected():
        raise AssertionError(f"generator produced a disconnected house (seed {spec.seed})")
    return house
