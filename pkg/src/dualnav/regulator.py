"""Mode-switching controller.

Stage one checks three criteria on every fast-policy step, in the order
looping, scoring, ending.  Stage two runs once, right after a switch, and
asks the LLM whether to continue from the current viewpoint or to go back
to the start and try again.
"""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field, replace

import networkx as nx

from .actions import Action
from .llm import LlmClient, LlmParseError, LlmTransportError
from .memory import MemoryBank, Plan, PlanOrigin
from .ruminator import SYSTEM_PROMPT, build_prompts
from .scorer import TrajectoryScorer, build_features
from .world import Instruction, Observation, WorldGraph

log = logging.getLogger(__name__)

STUB_PLAN = "Continue toward the destination described in the instruction."


class SwitchReason(str, enum.Enum):
    LOOPING = "looping"
    SCORING = "scoring"
    ENDING = "ending"


@dataclass(frozen=True)
class RegulatorConfig:
    tau_r: int = 4
    tau_l: int = 20
    tau_g: float = 0.35
    step_cap: int = 40
    use_looping: bool = True
    use_scoring: bool = True
    use_ending: bool = True
    use_formulation: bool = True
    restart_teleport: bool = False
    ending_fallback: str = "accept"  # or "reject"

    def __post_init__(self):
        if isinstance(self.tau_r, bool) or not isinstance(self.tau_r, int) or self.tau_r < 1:
            raise ValueError(f"tau_r must be an integer >= 1, got {self.tau_r!r}")
        if isinstance(self.tau_l, bool) or not isinstance(self.tau_l, int) or self.tau_l < 1:
            raise ValueError(f"tau_l must be an integer >= 1, got {self.tau_l!r}")
        if not 0.0 < float(self.tau_g) < 1.0:
            raise ValueError(f"tau_g must lie in (0, 1), got {self.tau_g!r}")
        if self.step_cap < self.tau_l:
            raise ValueError(f"step_cap ({self.step_cap}) must be >= tau_l ({self.tau_l})")
        if self.ending_fallback not in ("accept", "reject"):
            raise ValueError(f"ending_fallback must be 'accept' or 'reject', got {self.ending_fallback!r}")

    def with_switches(self, **flags) -> "RegulatorConfig":
        return replace(self, **flags)

    @property
    def any_criterion(self) -> bool:
        return self.use_looping or self.use_scoring or self.use_ending


@dataclass(frozen=True)
class Decision:
    kind: str  # "proceed" | "switch" | "end"
    reason: SwitchReason | None = None
    score: float | None = None
    notes: dict = field(default_factory=dict, compare=False)

    @classmethod
    def proceed(cls, score=None, **notes) -> "Decision":
        return cls("proceed", None, score, notes)

    @classmethod
    def switch(cls, reason: SwitchReason, score=None, **notes) -> "Decision":
        return cls("switch", reason, score, notes)

    @classmethod
    def end(cls, score=None, **notes) -> "Decision":
        return cls("end", None, score, notes)


@dataclass(frozen=True)
class FormulationOutcome:
    kind: str  # "continue" | "restart"
    plan: Plan
    degraded: bool = False

    @property
    def restart(self) -> bool:
        return self.kind == "restart"


def looping_fires(config: RegulatorConfig, bank: MemoryBank) -> bool:
    return bank.max_revisit() > config.tau_r or bank.trajectory_len() > config.tau_l


def scoring_fires(config: RegulatorConfig, value: float) -> bool:
    return value > config.tau_g


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def parse_yes_no(reply: str) -> bool:
    m = _YES_NO_RE.search(reply)
    if m is None:
        raise ValueError(f"no yes/no in {reply!r}")
    return m.group(1).lower() == "yes"


def ending_prompt(instruction: Instruction, obs: Observation, world: WorldGraph) -> str:
    bundle = build_prompts(instruction, obs, MemoryBank(), world)
    return (f"[Ending] You are at {obs.viewpoint}.\n{bundle.instruction_block}\n{bundle.observation_block}\n"
            "Is this viewpoint the destination described by the instruction? Answer Yes or No.")


def check_ending(llm: LlmClient, instruction: Instruction, obs: Observation, world: WorldGraph,
                 fallback: str = "accept") -> tuple[bool, dict]:
    """Whether the proposed Stop is accepted, plus audit notes."""
    try:
        ok, retries = llm.ask("ending", SYSTEM_PROMPT, ending_prompt(instruction, obs, world), parse_yes_no,
                              {"viewpoint": obs.viewpoint})
        return ok, {"ending_retries": retries}
    except (LlmParseError, LlmTransportError) as exc:
        log.warning("ending check failed (%s); fallback=%s", exc, fallback)
        return fallback == "accept", {"ending_fallback": fallback, "ending_error": str(exc)}


def evaluate(config: RegulatorConfig, bank: MemoryBank, scorer: TrajectoryScorer | None, world: WorldGraph,
             runner_action: Action, llm: LlmClient | None, instruction: Instruction,
             obs: Observation) -> Decision:
    """Stage-one check for the fast policy's proposed action."""
    if config.use_looping and looping_fires(config, bank):
        return Decision.switch(SwitchReason.LOOPING)
    value = None
    if config.use_scoring and scorer is not None:
        value = scorer.score_graph(build_features(bank, world, config.step_cap))
        if scoring_fires(config, value):
            return Decision.switch(SwitchReason.SCORING, value)
    if not runner_action.is_stop:
        return Decision.proceed(value)
    if config.use_ending and llm is not None:
        ok, notes = check_ending(llm, instruction, obs, world, config.ending_fallback)
        if not ok:
            return Decision.switch(SwitchReason.ENDING, value, **notes)
        return Decision.end(value, **notes)
    return Decision.end(value)


_DECISION_RE = re.compile(r"DECISION:\s*(CONTINUE|RESTART)\b", re.IGNORECASE)
_PLAN_RE = re.compile(r"PLAN:\s*(.+)", re.IGNORECASE | re.DOTALL)


def parse_formulation(reply: str) -> tuple[str, str]:
    d = _DECISION_RE.search(reply)
    p = _PLAN_RE.search(reply)
    if d is None or p is None or not p.group(1).strip():
        raise ValueError(f"cannot parse formulation reply {reply!r}")
    return d.group(1).lower(), p.group(1).strip()


def formulation_prompt(instruction: Instruction, bank: MemoryBank, obs: Observation, world: WorldGraph) -> str:
    bundle = build_prompts(instruction, obs, bank, world)
    start = bank.records[0].viewpoint if bank.records else obs.viewpoint
    return (f"[Formulation] You are at {obs.viewpoint}; the navigation started at {start}.\n"
            f"{bundle.instruction_block}\n{bundle.observation_block}\n"
            f"{bundle.trajectory_block}\n{bundle.map_block}\n"
            "The navigation so far looks wrong. Decide whether to continue from here or to restart "
            "from the start viewpoint, and give a corrective plan. Reply exactly as:\n"
            "DECISION: CONTINUE or RESTART\nPLAN: <plan>")


def critical_formulation(llm: LlmClient, instruction: Instruction, bank: MemoryBank, obs: Observation,
                         world: WorldGraph) -> FormulationOutcome:
    """Stage-two decision.  The caller carries out a restart (retrace, reset)."""
    start = bank.records[0].viewpoint if bank.records else obs.viewpoint
    try:
        (kind, text), _ = llm.ask("formulation", SYSTEM_PROMPT, formulation_prompt(instruction, bank, obs, world),
                                  parse_formulation, {"viewpoint": obs.viewpoint, "start": start})
    except LlmParseError:
        log.warning("formulation: unparseable replies, continuing with a stub plan")
        return FormulationOutcome("continue", Plan(max(bank.t, 0), STUB_PLAN, PlanOrigin.FORMULATION), True)
    return FormulationOutcome(kind, Plan(max(bank.t, 0), text, PlanOrigin.FORMULATION))


def retrace_path(bank: MemoryBank, world: WorldGraph, start: str) -> list[str]:
    """Shortest walk from the current viewpoint back to ``start`` over edges
    whose both ends have been visited."""
    visited = {v for v, n in bank.visit_count.items() if n > 0}
    g = nx.Graph()
    g.add_nodes_from(visited)
    for a, b in bank.edges:
        if a in visited and b in visited:
            g.add_edge(a, b, weight=world.edge_length(a, b))
    cur = bank.current
    if cur is None or cur == start:
        return [start]
    return nx.shortest_path(g, cur, start, weight="weight")
