"""The memory bank shared by the fast policy and the LLM navigator.

The bank holds the ordered step records of the current attempt and the
observed topological map derived from them: visited viewpoints, the
frontier of seen-but-unvisited neighbours, visit counters and the latest
memory entry per viewpoint.  Everything except the plan and the memory
overrides is a pure function of the record list, see :meth:`MemoryBank.replay`.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from .actions import Action, Mode, natural_key, verbalize_action


class EntryKind(str, enum.Enum):
    ORIENTED_VIEW = "oriented_view"
    SCENE_DESCRIPTION = "scene_description"


@dataclass(frozen=True)
class MemoryEntry:
    kind: EntryKind
    tags: tuple[str, ...] = ()
    feature: tuple[float, ...] | None = None
    text: str | None = None

    @classmethod
    def oriented_view(cls, tags, feature) -> "MemoryEntry":
        return cls(EntryKind.ORIENTED_VIEW, tuple(tags), tuple(float(x) for x in feature))

    @classmethod
    def scene_description(cls, text: str, tags=()) -> "MemoryEntry":
        return cls(EntryKind.SCENE_DESCRIPTION, tuple(tags), None, text)

    def render(self) -> str:
        if self.kind is EntryKind.SCENE_DESCRIPTION:
            return self.text or ""
        return ", ".join(self.tags) if self.tags else "nothing notable"

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value, "tags": list(self.tags)}
        if self.feature is not None:
            out["feature"] = list(self.feature)
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryEntry":
        feat = d.get("feature")
        return cls(EntryKind(d["kind"]), tuple(d.get("tags", ())),
                   None if feat is None else tuple(feat), d.get("text"))


@dataclass(frozen=True)
class StepRecord:
    t: int
    viewpoint: str
    action: Action | None
    mode: Mode
    memory_entry: MemoryEntry
    heading: float = 0.0
    neighbors: tuple[str, ...] = ()

    def __post_init__(self):
        expected = EntryKind.ORIENTED_VIEW if self.mode is Mode.RUNNER else EntryKind.SCENE_DESCRIPTION
        if self.memory_entry.kind is not expected:
            raise ValueError(f"{self.mode.value} records carry {expected.value} entries")

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "viewpoint": self.viewpoint,
            "action": None if self.action is None else str(self.action),
            "mode": self.mode.value,
            "heading": self.heading,
            "neighbors": list(self.neighbors),
            "memory_entry": self.memory_entry.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            t=int(d["t"]),
            viewpoint=d["viewpoint"],
            action=None if d["action"] is None else Action.parse(d["action"]),
            mode=Mode(d["mode"]),
            memory_entry=MemoryEntry.from_dict(d["memory_entry"]),
            heading=float(d.get("heading", 0.0)),
            neighbors=tuple(d.get("neighbors", ())),
        )


class PlanOrigin(str, enum.Enum):
    RUMINATOR = "ruminator"
    FORMULATION = "formulation"


@dataclass(frozen=True)
class Plan:
    t: int
    text: str
    origin: PlanOrigin


class OutOfOrderRecord(ValueError):
    pass


@dataclass
class MemoryBank:
    records: list[StepRecord] = field(default_factory=list)
    nodes: dict[str, None] = field(default_factory=dict)  # insertion-ordered set
    edges: set[tuple[str, str]] = field(default_factory=set)
    visit_count: dict[str, int] = field(default_factory=dict)
    last_visit: dict[str, int] = field(default_factory=dict)
    memory: dict[str, MemoryEntry] = field(default_factory=dict)
    plan: Plan | None = None

    def append(self, record: StepRecord) -> None:
        expected = self.records[-1].t + 1 if self.records else 0
        if record.t != expected:
            raise OutOfOrderRecord(f"expected record t={expected}, got t={record.t}")
        if (record.action is None) != (record.t == 0):
            raise ValueError("only the first record may lack an action")
        vp = record.viewpoint
        prev = self.records[-1].viewpoint if self.records else None
        self.records.append(record)
        self.nodes.setdefault(vp, None)
        self.visit_count[vp] = self.visit_count.get(vp, 0) + 1
        self.last_visit[vp] = record.t
        self.memory[vp] = record.memory_entry
        if prev is not None and prev != vp:
            self.edges.add(_edge(prev, vp))
        for nb in record.neighbors:
            self.nodes.setdefault(nb, None)
            self.visit_count.setdefault(nb, 0)
            self.edges.add(_edge(vp, nb))

    def set_memory(self, vp: str, entry: MemoryEntry) -> None:
        """Overwrite the newest memory of an already visited viewpoint."""
        if self.visit_count.get(vp, 0) < 1:
            raise KeyError(f"{vp!r} has not been visited")
        self.memory[vp] = entry

    def install_plan(self, plan: Plan) -> None:
        self.plan = plan

    def reset(self) -> None:
        self.records.clear()
        self.nodes.clear()
        self.edges.clear()
        self.visit_count.clear()
        self.last_visit.clear()
        self.memory.clear()
        self.plan = None

    # -- queries -------------------------------------------------------
    def __len__(self) -> int:
        return len(self.records)

    @property
    def t(self) -> int:
        return self.records[-1].t if self.records else -1

    @property
    def current(self) -> str | None:
        return self.records[-1].viewpoint if self.records else None

    def max_revisit(self) -> int:
        return max(self.visit_count.values(), default=0)

    def trajectory_len(self) -> int:
        return sum(1 for r in self.records if r.action is not None)

    def trajectory(self) -> list[str]:
        return [r.viewpoint for r in self.records]

    def visited(self) -> list[str]:
        return [v for v in self.nodes if self.visit_count[v] > 0]

    def frontier(self) -> list[str]:
        return [v for v in self.nodes if self.visit_count[v] == 0]

    def neighbors(self, vp: str) -> list[str]:
        out = [b if a == vp else a for a, b in self.edges if vp in (a, b)]
        return sorted(out, key=natural_key)

    def verbalize(self, world) -> tuple[str, str]:
        """Render the trajectory and map blocks of the navigator prompt."""
        if not self.records:
            raise ValueError("cannot verbalize an empty memory bank")
        first = self.records[0]
        parts = [f"You begin the navigation at {first.viewpoint} where you see "
                 f"{self.memory[first.viewpoint].render()}"]
        for prev, rec in zip(self.records, self.records[1:]):
            rel = world.slot_toward(prev.viewpoint, rec.viewpoint).heading - prev.heading
            parts.append(f"step {rec.t}: {verbalize_action(rel, rec.viewpoint)} "
                         f"where you see {self.memory[rec.viewpoint].render()}")
        trajectory_text = "; ".join(parts) + "."
        lines = [f"{v} is connected with {', '.join(self.neighbors(v))}" for v in self.visited()]
        map_text = "; ".join(lines) + "."
        return trajectory_text, map_text

    def copy(self) -> "MemoryBank":
        return MemoryBank(
            records=list(self.records), nodes=dict(self.nodes), edges=set(self.edges),
            visit_count=dict(self.visit_count), last_visit=dict(self.last_visit),
            memory=dict(self.memory), plan=self.plan,
        )

    # -- persistence ---------------------------------------------------
    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    @classmethod
    def replay(cls, records) -> "MemoryBank":
        bank = cls()
        for r in records:
            bank.append(r)
        return bank

    @classmethod
    def from_jsonl(cls, text: str) -> "MemoryBank":
        return cls.replay(StepRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip())


def _edge(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)
