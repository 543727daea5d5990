import numpy as np
import pytest

from multinav.metrics import (
    MetricReport,
    aggregate,
    aggregate_runs,
    cls_score,
    episode_metrics,
    goal_progress,
    nav_error,
    path_length,
    spl,
    success,
)
from multinav.world import House, HouseSpec, NavNode, UnknownNode, generate_house

from tests.helpers import build_house, chain_house


@pytest.fixture(scope="module")
def house():
    return generate_house(HouseSpec(nodes=16, rooms=3, seed=91, house_id=0))


def test_path_length_cases():
    h = chain_house([0, 2, 4])
    assert path_length([1], h) == 0.0
    assert path_length([0, 1, 2], h) == pytest.approx(4.0)
    with pytest.raises(UnknownNode):
        path_length([0, 2], h)


def test_path_length_bounded_below_by_geodesic(house):
    rng = np.random.default_rng(0)
    for _ in range(50):
        node = int(rng.choice(house.node_ids()))
        walk = [node]
        for _ in range(6):
            node = int(rng.choice(house.neighbors(node)))
            walk.append(node)
        assert path_length(walk, house) >= house.distance(walk[0], walk[-1]) - 1e-9


def test_nav_error_cases():
    h = chain_house([0, 2, 4, 5])
    assert nav_error([0, 1], [3, 2, 1], h) == 0.0
    assert nav_error([0], [0, 1, 2, 3], h) == pytest.approx(5.0)
    assert nav_error([0, 1], [2, 3], h) == nav_error([2, 3], [0, 1], h)


def test_success_threshold_boundary():
    h = chain_house([0, 2.9, 100.0])
    assert success([0], [1], h, d_th=3.0) == 1          # 2.9 below threshold
    assert success([0], [1], h, d_th=2.9) == 1          # inclusive at the boundary
    assert success([0], [2], h, d_th=3.0) == 0


def test_spl_optimal_path_scores_one():
    h = chain_house([0, 2, 4])
    assert spl([0, 1, 2], [0, 1, 2], h, 3.0) == 1.0


def test_spl_hand_case_ten_over_twelve():
    # reference geodesic 10 m; predicted takes a 1 m spur twice before following it
    positions = [(0, 0, 0), (2, 0, 0), (4, 0, 0), (6, 0, 0), (8, 0, 0), (10, 0, 0),
                 (-1, 0, 0)]
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 6)]
    h = build_house(positions, edges)
    predicted = [0, 6, 0, 1, 2, 3, 4, 5]
    reference = [0, 1, 2, 3, 4, 5]
    assert path_length(predicted, h) == pytest.approx(12.0)
    assert spl(predicted, reference, h, d_th=3.0) == pytest.approx(10.0 / 12.0, abs=1e-4)


def test_spl_failure_zeroes():
    h = chain_house([0, 2, 4, 6, 8])
    assert spl([0], [4], h, d_th=3.0) == 0.0


def test_cls_perfect_conformity():
    h = chain_house([0, 2, 4])
    assert cls_score([0, 1, 2], [0, 1, 2], h, 3.0) == pytest.approx(1.0)


def test_cls_covering_but_double_length_is_half():
    h = chain_house([0, 2, 4])
    predicted = [0, 1, 2, 1, 2]  # covers the reference, twice the length
    assert path_length(predicted, h) == pytest.approx(8.0)
    assert cls_score(predicted, [0, 1, 2], h, 3.0) == pytest.approx(0.5, abs=1e-4)


def test_cls_in_unit_interval_fuzz(house):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        def walk():
            node = int(rng.choice(house.node_ids()))
            out = [node]
            for _ in range(int(rng.integers(0, 8))):
                node = int(rng.choice(house.neighbors(node)))
                out.append(node)
            return out

        v = cls_score(walk(), walk(), house, d_th=3.0)
        assert 0.0 <= v <= 1.0


def test_goal_progress_cases():
    h = chain_house([0, 5, 8], room_labels=["a", "a", "goal"])
    assert goal_progress([0, 1], "goal", h) == pytest.approx(5.0)  # 8 -> 3
    assert goal_progress([0], "goal", h) == 0.0
    assert goal_progress([0, 1, 2], "goal", h) == pytest.approx(8.0)  # ends inside


def test_reference_self_evaluation_identities(house):
    ids = house.node_ids()
    ref = house.shortest_path(ids[0], ids[-1])
    room = house.room_of(ref[-1])
    m = episode_metrics(house, ref, ref, d_th=3.0, goal_room=room)
    assert m["ne"] == 0.0
    assert m["sr"] == 1.0
    assert m["spl"] == 1.0
    assert m["cls"] == pytest.approx(1.0)
    assert m["progress"] == pytest.approx(house.room_distance(ref[0], room))


def test_spl_never_exceeds_success(house):
    rng = np.random.default_rng(2)
    for _ in range(500):
        def walk(max_steps):
            node = int(rng.choice(house.node_ids()))
            out = [node]
            for _ in range(int(rng.integers(0, max_steps))):
                node = int(rng.choice(house.neighbors(node)))
                out.append(node)
            return out

        m = episode_metrics(house, walk(8), walk(8), d_th=3.0)
        assert m["spl"] <= m["sr"] + 1e-12


def test_metrics_invariant_under_node_relabeling():
    h = generate_house(HouseSpec(nodes=10, rooms=2, seed=13, house_id=0))
    ids = h.node_ids()
    rng = np.random.default_rng(3)
    perm = {old: new for old, new in zip(ids, rng.permutation(ids))}
    nodes = [NavNode(perm[n.node_id], n.position.copy(), n.room, n.landmark)
             for n in h.nodes.values()]
    edges = [(perm[u], perm[v]) for u, v in h._edge_list]
    relabeled = House(0, nodes, edges, h.room_categories)

    pred = h.shortest_path(ids[0], ids[-1])
    ref = h.shortest_path(ids[1], ids[-1])
    a = episode_metrics(h, pred, ref, 3.0, goal_room=h.room_of(ref[-1]))
    b = episode_metrics(relabeled, [perm[x] for x in pred], [perm[x] for x in ref],
                        3.0, goal_room=h.room_of(ref[-1]))
    for key in a:
        assert a[key] == pytest.approx(b[key], rel=1e-12)


def test_oracle_beats_random_walk_progress(house):
    rng = np.random.default_rng(4)
    start = house.node_ids()[0]
    goal_room = sorted(house.rooms)[-1]
    target = min(house.rooms[goal_room], key=lambda v: house.distance(start, v))
    oracle = goal_progress(house.shortest_path(start, target), goal_room, house)
    walks = []
    for _ in range(100):
        node = start
        visited = [node]
        for _ in range(6):
            node = int(rng.choice(house.neighbors(node)))
            visited.append(node)
        walks.append(goal_progress(visited, goal_room, house))
    assert oracle >= np.mean(walks)


def test_aggregate_single_episode_passthrough():
    rows = [{"pl": 4.0, "ne": 1.0, "sr": 1.0, "spl": 0.9, "cls": 0.8}]
    report = aggregate(rows, ["val_seen"])
    assert report.folds["val_seen"]["sr"] == 100.0
    assert report.folds["val_seen"]["spl"] == pytest.approx(90.0)
    assert report.folds["val_seen"]["pl"] == 4.0
    assert report.counts["val_seen"] == 1


def test_aggregate_requires_matching_tags_and_rejects_empty():
    with pytest.raises(ValueError):
        aggregate([{"pl": 1.0}], ["a", "b"])
    with pytest.raises(ValueError):
        aggregate([], [])


def test_aggregate_gap_definition():
    rows = [{"sr": 0.5, "pl": 10.0}, {"sr": 0.3, "pl": 12.0}]
    report = aggregate(rows, ["val_seen", "val_unseen"])
    assert report.gap["sr"] == pytest.approx(20.0)
    assert report.gap["pl"] == pytest.approx(-2.0)


def test_aggregate_runs_mean_and_sample_sd():
    r1 = MetricReport(folds={"val_seen": {"sr": 40.0}}, counts={"val_seen": 5})
    r2 = MetricReport(folds={"val_seen": {"sr": 50.0}}, counts={"val_seen": 5})
    merged = aggregate_runs([r1, r2])
    assert merged.folds["val_seen"]["sr"] == pytest.approx(45.0)
    assert merged.sd["val_seen"]["sr"] == pytest.approx(7.07, abs=0.01)
    assert merged.seed_count == 2
