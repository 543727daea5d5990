"""Shared hand-built houses for tests."""

import numpy as np

from multinav.world import House, NavNode


def build_house(positions, edges, rooms=None, categories=None, house_id=0):
    """House from explicit (x, y, z) positions and an edge list.

    rooms maps node id -> room label; defaults to one room for everything.
    """
    rooms = rooms or {i: "r0" for i in range(len(positions))}
    labels = list(dict.fromkeys(rooms.values()))
    categories = categories or {label: i for i, label in enumerate(labels)}
    nodes = [NavNode(i, np.asarray(p, dtype=float), rooms[i], i)
             for i, p in enumerate(positions)]
    return House(house_id, nodes, edges, categories)


def chain_house(xs, room_labels=None, categories=None):
    """Straight chain of nodes at the given x coordinates."""
    rooms = {i: (room_labels[i] if room_labels else "r0") for i in range(len(xs))}
    return build_house([(float(x), 0.0, 0.0) for x in xs],
                       [(i, i + 1) for i in range(len(xs) - 1)],
                       rooms=rooms, categories=categories)
