"""Synthetic topological worlds, episodes, observation and geodesics.

A world is a connected undirected graph of viewpoints laid out on a
30 m x 30 m floor plane.  Every viewpoint carries a panorama of twelve
heading slots; a slot may be navigable to one neighbouring viewpoint and
always carries a short list of scene tags plus a synthetic visual feature
derived from those tags.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np

N_HEADINGS = 12
FEATURE_DIM = 16
HEADING_STEP = 2.0 * math.pi / N_HEADINGS
WORLD_SCHEMA = "dualnav.world/1"
INSTRUCTION_TEMPLATE_VERSION = 1
SUCCESS_RADIUS = 3.0  # meters

DEFAULT_TAGS = (
    "sofa", "lamp", "door", "towel", "sink", "mirror", "bed", "pillow",
    "table", "chair", "plant", "painting", "window", "rug", "shelf",
    "bookcase", "fireplace", "stairs", "railing", "cabinet", "oven",
    "fridge", "counter", "stool", "bathtub", "toilet", "shower", "desk",
    "monitor", "piano", "clock", "vase", "curtain", "dresser", "wardrobe",
    "television", "fan", "bench", "column", "archway",
)

_TAG_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class WorldValidationError(ValueError):
    """A world or episode file violates a structural invariant."""


class InstructionStyle(str, enum.Enum):
    FINE_GRAINED = "fine"
    COARSE_GRAINED = "coarse"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def heading_bin(theta: float) -> int:
    return int(round((wrap_angle(theta) + math.pi) / HEADING_STEP)) % N_HEADINGS


def bin_heading(index: int) -> float:
    return -math.pi + index * HEADING_STEP


@dataclass(frozen=True)
class DirectionSlot:
    heading: float
    feature: tuple[float, ...]
    tags: tuple[str, ...]
    navigable_to: str | None = None
    elevation: float = 0.0

    def to_dict(self) -> dict:
        return {
            "heading": self.heading,
            "elevation": self.elevation,
            "feature": list(self.feature),
            "tags": list(self.tags),
            "navigable_to": self.navigable_to,
        }


@dataclass(frozen=True)
class Viewpoint:
    id: str
    position: tuple[float, float, float]
    slots: tuple[DirectionSlot, ...]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "position": list(self.position),
            "slots": [s.to_dict() for s in self.slots],
        }

    @property
    def tags(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for slot in self.slots:
            for tag in slot.tags:
                seen.setdefault(tag, None)
        return tuple(seen)


@dataclass(frozen=True, eq=False)
class WorldGraph:
    viewpoints: dict[str, Viewpoint]
    seed: int
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        _validate_world(self)

    # -- structure -----------------------------------------------------
    def ids(self) -> list[str]:
        return list(self.viewpoints)

    def position(self, vp: str) -> np.ndarray:
        return np.asarray(self.viewpoints[vp].position, dtype=float)

    def neighbors(self, vp: str) -> list[str]:
        return [s.navigable_to for s in self.viewpoints[vp].slots if s.navigable_to is not None]

    def slot_toward(self, vp: str, target: str) -> DirectionSlot:
        for slot in self.viewpoints[vp].slots:
            if slot.navigable_to == target:
                return slot
        raise KeyError(f"{target!r} is not adjacent to {vp!r}")

    def edge_length(self, a: str, b: str) -> float:
        return float(np.linalg.norm(self.position(a) - self.position(b)))

    def path_length(self, path: Sequence[str]) -> float:
        return float(sum(self.edge_length(a, b) for a, b in zip(path, path[1:])))

    def tag_vocab(self) -> list[str]:
        return sorted({t for vp in self.viewpoints.values() for t in vp.tags})

    def embedding(self, vp: str) -> np.ndarray:
        """Panorama-level visual embedding: mean of the slot features."""
        return np.mean([s.feature for s in self.viewpoints[vp].slots], axis=0)

    @cached_property
    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.viewpoints)
        for vid in self.viewpoints:
            for nb in self.neighbors(vid):
                g.add_edge(vid, nb, weight=self.edge_length(vid, nb))
        return g

    @cached_property
    def _sssp_cache(self) -> dict:
        return {}

    def _sssp(self, source: str):
        if source not in self._sssp_cache:
            self._sssp_cache[source] = nx.single_source_dijkstra(self.graph, source, weight="weight")
        return self._sssp_cache[source]

    def to_dict(self) -> dict:
        return {
            "schema": WORLD_SCHEMA,
            "seed": self.seed,
            "feature_dim": self.feature_dim,
            "viewpoints": [vp.to_dict() for vp in self.viewpoints.values()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldGraph":
        try:
            vps = {}
            for i, raw in enumerate(data["viewpoints"]):
                vid = str(raw["id"])
                if vid in vps:
                    raise WorldValidationError(f"viewpoint #{i}: duplicate id {vid!r}")
                slots = tuple(
                    DirectionSlot(
                        heading=float(s["heading"]),
                        elevation=float(s.get("elevation", 0.0)),
                        feature=tuple(float(x) for x in s["feature"]),
                        tags=tuple(str(t) for t in s["tags"]),
                        navigable_to=None if s.get("navigable_to") is None else str(s["navigable_to"]),
                    )
                    for s in raw["slots"]
                )
                pos = tuple(float(x) for x in raw["position"])
                if len(pos) != 3:
                    raise WorldValidationError(f"viewpoint {vid!r}: position must have 3 components")
                vps[vid] = Viewpoint(vid, pos, slots)  # type: ignore[arg-type]
            return cls(vps, int(data["seed"]), int(data.get("feature_dim", FEATURE_DIM)))
        except KeyError as exc:
            raise WorldValidationError(f"missing field {exc.args[0]!r}") from None


def _validate_world(world: WorldGraph) -> None:
    if len(world.viewpoints) < 1:
        raise WorldValidationError("world has no viewpoints")
    for vid, vp in world.viewpoints.items():
        if vp.id != vid:
            raise WorldValidationError(f"viewpoint key {vid!r} does not match id {vp.id!r}")
        if not all(math.isfinite(x) for x in vp.position):
            raise WorldValidationError(f"viewpoint {vid!r}: non-finite position")
        if len(vp.slots) != N_HEADINGS:
            raise WorldValidationError(f"viewpoint {vid!r}: expected {N_HEADINGS} slots, got {len(vp.slots)}")
        targets = set()
        for k, slot in enumerate(vp.slots):
            where = f"viewpoint {vid!r} slot {k}"
            if len(slot.feature) != world.feature_dim:
                raise WorldValidationError(f"{where}: feature dim {len(slot.feature)} != {world.feature_dim}")
            if not -math.pi <= slot.heading < math.pi:
                raise WorldValidationError(f"{where}: heading {slot.heading} outside [-pi, pi)")
            for tag in slot.tags:
                if not _TAG_RE.match(tag):
                    raise WorldValidationError(f"{where}: malformed tag {tag!r}")
            nb = slot.navigable_to
            if nb is None:
                continue
            if nb not in world.viewpoints:
                raise WorldValidationError(f"{where}: navigable_to {nb!r} is not a viewpoint in this world")
            if nb == vid:
                raise WorldValidationError(f"{where}: self loop")
            if nb in targets:
                raise WorldValidationError(f"{where}: second slot toward {nb!r}")
            targets.add(nb)
    for vid in world.viewpoints:
        for nb in world.neighbors(vid):
            if vid not in world.neighbors(nb):
                raise WorldValidationError(f"edge {vid!r} -> {nb!r} has no reverse slot")
    if not nx.is_connected(world.graph):
        comps = sorted(nx.connected_components(world.graph), key=len)
        raise WorldValidationError(f"world is disconnected; smallest component {sorted(comps[0])}")


# ----------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------

def _tag_vectors(seed: int, vocab: Sequence[str], dim: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    vecs = rng.normal(size=(len(vocab), dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return dict(zip(vocab, vecs))


def _try_edges(pos: np.ndarray, mean_degree: float) -> list[tuple[int, int]] | None:
    n = len(pos)
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    occupied: list[dict[int, int]] = [{} for _ in range(n)]
    edges: set[tuple[int, int]] = set()

    def bins(i, j):
        d = pos[j] - pos[i]
        return heading_bin(math.atan2(d[1], d[0])), heading_bin(math.atan2(-d[1], -d[0]))

    def add(i, j) -> bool:
        if i == j or (min(i, j), max(i, j)) in edges:
            return False
        bi, bj = bins(i, j)
        if bi in occupied[i] or bj in occupied[j]:
            return False
        occupied[i][bi] = j
        occupied[j][bj] = i
        edges.add((min(i, j), max(i, j)))
        return True

    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        for j in order[1:]:
            if add(i, int(j)) or (min(i, int(j)), max(i, int(j))) in edges:
                break
    budget = max(n - 1, int(round(n * mean_degree / 2.0)))
    iu, ju = np.triu_indices(n, 1)
    order = np.argsort(dist[iu, ju], kind="stable")
    for k in order:
        if len(edges) >= budget:
            break
        add(int(iu[k]), int(ju[k]))

    uf = list(range(n))

    def find(x):
        while uf[x] != x:
            uf[x] = uf[uf[x]]
            x = uf[x]
        return x

    for i, j in edges:
        uf[find(i)] = find(j)
    while len({find(i) for i in range(n)}) > 1:
        for k in order:
            i, j = int(iu[k]), int(ju[k])
            if find(i) != find(j) and add(i, j):
                uf[find(i)] = find(j)
                break
        else:
            return None
    return sorted(edges)


def generate_world(
    seed: int,
    n_viewpoints: int = 60,
    mean_degree: float = 3.0,
    tag_vocab: Sequence[str] = DEFAULT_TAGS,
    *,
    extent: float = 30.0,
    feature_dim: int = FEATURE_DIM,
    max_retries: int = 32,
) -> WorldGraph:
    """Sample a connected world deterministically from ``seed``."""
    if n_viewpoints < 2:
        raise ValueError(f"n_viewpoints must be >= 2, got {n_viewpoints}")
    if mean_degree < 1:
        raise ValueError(f"mean_degree must be >= 1, got {mean_degree}")
    vocab = list(dict.fromkeys(tag_vocab))
    if not vocab:
        raise ValueError("tag_vocab must be non-empty")
    bad = [t for t in vocab if not _TAG_RE.match(t)]
    if bad:
        raise ValueError(f"tags must be lowercase word tokens: {bad}")

    tag_vec = _tag_vectors(seed, vocab, feature_dim)
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, 0, attempt])
        pos = rng.uniform(0.0, extent, size=(n_viewpoints, 2))
        edges = _try_edges(pos, mean_degree)
        if edges is None:
            continue
        ids = [f"id_{i}" for i in range(n_viewpoints)]
        slot_target: list[dict[int, str]] = [{} for _ in range(n_viewpoints)]
        for i, j in edges:
            d = pos[j] - pos[i]
            slot_target[i][heading_bin(math.atan2(d[1], d[0]))] = ids[j]
            slot_target[j][heading_bin(math.atan2(-d[1], -d[0]))] = ids[i]
        vps = {}
        for i, vid in enumerate(ids):
            slots = []
            for b in range(N_HEADINGS):
                k = int(rng.integers(1, min(3, len(vocab)) + 1))
                picks = rng.choice(len(vocab), size=k, replace=False)
                tags = tuple(vocab[p] for p in picks)
                feat = np.mean([tag_vec[t] for t in tags], axis=0) + rng.normal(scale=0.1, size=feature_dim)
                slots.append(DirectionSlot(
                    heading=bin_heading(b),
                    feature=tuple(float(x) for x in feat),
                    tags=tags,
                    navigable_to=slot_target[i].get(b),
                ))
            vps[vid] = Viewpoint(vid, (float(pos[i, 0]), float(pos[i, 1]), 0.0), tuple(slots))
        return WorldGraph(vps, seed, feature_dim)
    raise WorldValidationError(
        f"seed {seed}: could not build a connected world with n={n_viewpoints}, "
        f"mean_degree={mean_degree} after {max_retries} retries"
    )


# ----------------------------------------------------------------------
# episodes
# ----------------------------------------------------------------------

_FINE_VERBS = ("Walk", "Head", "Go", "Move")
_CLAUSE_RE = re.compile(r"toward the (\w+)")
_FINE_GOAL_RE = re.compile(r"stop by the (\w+)")
_COARSE_RE = re.compile(r"^Bring me the (\w+)")


@dataclass(frozen=True)
class Instruction:
    text: str
    style: InstructionStyle

    @property
    def clause_tags(self) -> list[str]:
        """Landmark tags of the movement clauses, in order."""
        if self.style is InstructionStyle.COARSE_GRAINED:
            return []
        return _CLAUSE_RE.findall(self.text)

    @property
    def target_tag(self) -> str | None:
        pattern = _COARSE_RE if self.style is InstructionStyle.COARSE_GRAINED else _FINE_GOAL_RE
        m = pattern.search(self.text)
        return m.group(1) if m else None

    @property
    def tags(self) -> list[str]:
        out = self.clause_tags
        if self.target_tag is not None:
            out = out + [self.target_tag]
        return out

    def to_dict(self) -> dict:
        return {"text": self.text, "style": self.style.value}


@dataclass(frozen=True)
class Episode:
    id: str
    instruction: Instruction
    start: str
    goal: str
    gt_path: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "instruction": self.instruction.to_dict(),
            "start": self.start,
            "goal": self.goal,
            "gt_path": list(self.gt_path),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Episode":
        ins = data["instruction"]
        return cls(
            id=str(data["id"]),
            instruction=Instruction(str(ins["text"]), InstructionStyle(ins["style"])),
            start=str(data["start"]),
            goal=str(data["goal"]),
            gt_path=tuple(str(v) for v in data["gt_path"]),
        )


class NoEpisodeError(ValueError):
    pass


def local_tags(world: WorldGraph, vp: str) -> set[str]:
    """Tags seen in the non-navigable slots of ``vp``, minus any tag that is
    also visible through one of its exits: the objects that are *here*."""
    slots = world.viewpoints[vp].slots
    through = {t for s in slots if s.navigable_to is not None for t in s.tags}
    return {t for s in slots if s.navigable_to is None for t in s.tags} - through


def _goal_tag(world: WorldGraph, vp: str) -> str | None:
    counts: dict[str, int] = {}
    for v in world.viewpoints:
        for t in local_tags(world, v):
            counts[t] = counts.get(t, 0) + 1
    options = local_tags(world, vp)
    if not options:
        return None
    return min(options, key=lambda t: (counts[t], t))


def _segment_tag(world: WorldGraph, a: str, b: str, rng: np.random.Generator) -> str | None:
    """A tag on the slot a->b that no other navigable slot of ``a`` shows."""
    slot = world.slot_toward(a, b)
    others = {t for s in world.viewpoints[a].slots if s.navigable_to not in (None, b) for t in s.tags}
    unique = [t for t in slot.tags if t not in others]
    if not unique:
        return None
    return unique[int(rng.integers(len(unique)))]


def generate_episode(
    world: WorldGraph,
    seed: int,
    style: InstructionStyle | str = InstructionStyle.FINE_GRAINED,
    min_hops: int = 1,
    *,
    max_hops: int | None = None,
    episode_id: str | None = None,
    max_tries: int = 500,
) -> Episode:
    """Sample a start/goal pair and a template instruction for its shortest path."""
    style = InstructionStyle(style)
    ids = world.ids()
    rng = np.random.default_rng([world.seed, 2, seed])
    for _ in range(max_tries):
        start, goal = (ids[int(i)] for i in rng.choice(len(ids), size=2, replace=False))
        _, path = geodesic(world, start, goal)
        hops = len(path) - 1
        if hops < min_hops or (max_hops is not None and hops > max_hops):
            continue
        if style is InstructionStyle.FINE_GRAINED:
            clause_tags = [_segment_tag(world, a, b, rng) for a, b in zip(path, path[1:])]
            if any(t is None for t in clause_tags):
                continue
            goal_tag = _goal_tag(world, goal)
            if goal_tag is None:
                continue
            clauses = []
            for k, tag in enumerate(clause_tags):
                verb = _FINE_VERBS[int(rng.integers(len(_FINE_VERBS)))]
                clauses.append(f"{verb if k == 0 else verb.lower()} toward the {tag}")
            text = ", then ".join(clauses) + f", and stop by the {goal_tag}."
        else:
            goal_tag = _goal_tag(world, goal)
            if goal_tag is None:
                continue
            text = f"Bring me the {goal_tag}."
        return Episode(
            id=episode_id if episode_id is not None else f"w{world.seed}-e{seed}",
            instruction=Instruction(text, style),
            start=start,
            goal=goal,
            gt_path=tuple(path),
        )
    raise NoEpisodeError(f"no start/goal pair with >= {min_hops} hops found in world seed {world.seed}")


def generate_episodes(world: WorldGraph, n: int, seed: int, style=InstructionStyle.FINE_GRAINED,
                      min_hops: int = 1, max_hops: int | None = None) -> list[Episode]:
    return [
        generate_episode(world, seed * 1000 + k, style, min_hops, max_hops=max_hops,
                         episode_id=f"w{world.seed}-e{k}")
        for k in range(n)
    ]


# ----------------------------------------------------------------------
# observation and geodesics
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ObservedSlot:
    index: int
    heading: float  # relative to the agent heading
    elevation: float
    feature: tuple[float, ...]
    tags: tuple[str, ...]
    navigable_to: str | None


@dataclass(frozen=True)
class Observation:
    viewpoint: str
    agent_heading: float
    slots: tuple[ObservedSlot, ...]
    candidates: tuple[ObservedSlot, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(s for s in self.slots if s.navigable_to is not None))

    def candidate(self, target: str) -> ObservedSlot:
        for s in self.candidates:
            if s.navigable_to == target:
                return s
        raise KeyError(target)

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(t for s in self.slots for t in s.tags))


def observe(world: WorldGraph, vp: str, agent_heading: float = 0.0) -> Observation:
    if vp not in world.viewpoints:
        raise KeyError(f"unknown viewpoint {vp!r}")
    slots = tuple(
        ObservedSlot(
            index=i,
            heading=wrap_angle(s.heading - agent_heading),
            elevation=s.elevation,
            feature=s.feature,
            tags=s.tags,
            navigable_to=s.navigable_to,
        )
        for i, s in enumerate(world.viewpoints[vp].slots)
    )
    return Observation(vp, wrap_angle(agent_heading), slots)


def geodesic(world: WorldGraph, a: str, b: str) -> tuple[float, list[str]]:
    """Shortest path by Euclidean edge length."""
    for v in (a, b):
        if v not in world.viewpoints:
            raise KeyError(f"unknown viewpoint {v!r}")
    if a == b:
        return 0.0, [a]
    dist, paths = world._sssp(a)
    return float(dist[b]), list(paths[b])


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WorldValidationError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from None


def save_world(world: WorldGraph, path) -> None:
    _dump(world.to_dict(), path)


def load_world(path) -> WorldGraph:
    data = _read_json(path)
    try:
        return WorldGraph.from_dict(data)
    except WorldValidationError as exc:
        raise WorldValidationError(f"{path}: {exc}") from None


def save_episodes(episodes: Sequence[Episode], path) -> None:
    _dump([e.to_dict() for e in episodes], path)


def validate_episode(episode: Episode, world: WorldGraph) -> None:
    p = episode.gt_path
    where = f"episode {episode.id!r}"
    if not p or p[0] != episode.start or p[-1] != episode.goal:
        raise WorldValidationError(f"{where}: gt_path must run from start to goal")
    for v in p:
        if v not in world.viewpoints:
            raise WorldValidationError(f"{where}: gt_path references unknown viewpoint {v!r}")
    for a, b in zip(p, p[1:]):
        if b not in world.neighbors(a):
            raise WorldValidationError(f"{where}: gt_path step {a!r} -> {b!r} is not an edge")


def load_episodes(path, world: WorldGraph | None = None) -> list[Episode]:
    data = _read_json(path)
    if not isinstance(data, list):
        raise WorldValidationError(f"{path}: expected a JSON array of episodes")
    out = []
    for i, raw in enumerate(data):
        try:
            ep = Episode.from_dict(raw)
        except (KeyError, ValueError) as exc:
            raise WorldValidationError(f"{path}: episode #{i}: bad field {exc}") from None
        if world is not None:
            try:
                validate_episode(ep, world)
            except WorldValidationError as exc:
                raise WorldValidationError(f"{path}: {exc}") from None
        out.append(ep)
    return out
