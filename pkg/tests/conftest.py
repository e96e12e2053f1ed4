import math

import numpy as np
import pytest

from dualnav.actions import Action
from dualnav.memory import MemoryBank
from dualnav.runner import arrival_record
from dualnav.scorer import EDGE_DIM, NODE_DIM, TrajectoryGraph, build_features
from dualnav.world import (FEATURE_DIM, N_HEADINGS, DirectionSlot, Episode, Instruction, InstructionStyle,
                           Viewpoint, WorldGraph, bin_heading, generate_episodes, generate_world, heading_bin)


def hand_world(positions, edges, slot_tags=None, seed=0):
    """Build a world from 2-D positions and an undirected edge list.

    ``slot_tags`` maps (viewpoint, bin index) to a tag tuple; every other
    slot is empty.  Exits sit in the bin of their direction.
    """
    slot_tags = slot_tags or {}
    nbrs = {v: [] for v in positions}
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    vps = {}
    for n, (v, (x, y)) in enumerate(positions.items()):
        exits = {}
        for nb in nbrs[v]:
            bx, by = positions[nb]
            exits[heading_bin(math.atan2(by - y, bx - x))] = nb
        rng = np.random.default_rng([seed, n])
        slots = tuple(
            DirectionSlot(bin_heading(k), tuple(rng.normal(size=FEATURE_DIM)), tuple(slot_tags.get((v, k), ())),
                          exits.get(k))
            for k in range(N_HEADINGS)
        )
        vps[v] = Viewpoint(v, (float(x), float(y), 0.0), slots)
    return WorldGraph(vps, seed)


# bins: 0 = -180 deg, 3 = -90, 6 = 0 (east), 9 = +90 (north)
EAST, NORTH, WEST, SOUTH = 6, 9, 0, 3


@pytest.fixture
def line_world():
    """id_0 -- id_1 -- id_2 along the x axis, 4 m apart, with a sofa at id_2."""
    return hand_world(
        {"id_0": (0.0, 0.0), "id_1": (4.0, 0.0), "id_2": (8.0, 0.0)},
        [("id_0", "id_1"), ("id_1", "id_2")],
        {("id_0", EAST): ("door",), ("id_1", EAST): ("lamp",), ("id_2", NORTH): ("sofa",)},
    )


@pytest.fixture
def line_episode():
    return Episode("line-e0", Instruction("Walk toward the door, then head toward the lamp, and stop by the sofa.",
                                          InstructionStyle.FINE_GRAINED), "id_0", "id_2", ("id_0", "id_1", "id_2"))


@pytest.fixture
def cross_world():
    """A plus shape: centre id_0 with arms east (id_1), north (id_2), west (id_3), south (id_4)."""
    return hand_world(
        {"id_0": (0.0, 0.0), "id_1": (3.0, 0.0), "id_2": (0.0, 3.0), "id_3": (-3.0, 0.0), "id_4": (0.0, -3.0)},
        [("id_0", "id_1"), ("id_0", "id_2"), ("id_0", "id_3"), ("id_0", "id_4")],
        {("id_0", EAST): ("lamp",), ("id_0", NORTH): ("plant",), ("id_0", WEST): ("door",),
         ("id_0", SOUTH): ("sink",), ("id_0", 1): ("rug", "chair")},
    )


@pytest.fixture(scope="session")
def world3():
    return generate_world(3, 60)


@pytest.fixture(scope="session")
def episodes3(world3):
    return generate_episodes(world3, 20, 11, InstructionStyle.FINE_GRAINED, 4, 7)


def walk_bank(world, path):
    bank, heading = MemoryBank(), 0.0
    for t, v in enumerate(path):
        if t:
            heading = world.slot_toward(path[t - 1], v).heading
        bank.append(arrival_record(world, t, v, None if t == 0 else Action.move(v), heading))
    return bank


def separable_snapshots(world, n, seed, step_cap=40):
    """Trajectory graphs whose label is the revisit structure of the walk.

    Label 0: a simple path of 4-10 hops.  Label 1: one hop out, then
    oscillating between the same two viewpoints for the same length.
    """
    rng = np.random.default_rng(seed)
    ids = world.ids()
    graphs, labels = [], []
    while len(graphs) < n:
        looping = bool(rng.integers(2))
        length = int(rng.integers(4, 11))
        path = [ids[int(rng.integers(len(ids)))]]
        while len(path) <= length:
            if looping and len(path) >= 2:
                path.append(path[-2])
                continue
            opts = [v for v in world.neighbors(path[-1]) if v not in path]
            if not opts:
                break
            path.append(opts[int(rng.integers(len(opts)))])
        if len(path) <= length:
            continue  # dead end before the simple path was long enough
        graphs.append(build_features(walk_bank(world, path), world, step_cap))
        labels.append(int(looping))
    return graphs, np.array(labels)


@pytest.fixture(scope="session")
def separable_world():
    return generate_world(5, 40)


def random_graph(rng, max_nodes=8, node_dim=None, edge_dim=None):
    """A TrajectoryGraph with random features and random directed edges."""
    node_dim = node_dim or NODE_DIM
    edge_dim = edge_dim or EDGE_DIM
    n = int(rng.integers(1, max_nodes + 1))
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.4]
    src = np.array([p[0] for p in pairs], dtype=int)
    dst = np.array([p[1] for p in pairs], dtype=int)
    return TrajectoryGraph([f"id_{i}" for i in range(n)], rng.normal(size=(n, node_dim)), src, dst,
                           rng.normal(size=(len(pairs), edge_dim)))


def central_difference(f, params, eps=1e-6):
    """Numerical gradient of scalar ``f(params)`` for every array in ``params``."""
    out = {}
    for k, v in params.items():
        grad = np.zeros(v.shape)
        flat, gflat = v.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f(params)
            flat[i] = old - eps
            down = f(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[k] = grad
    return out


def relative_error(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8))


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary prints them all."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(name, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
