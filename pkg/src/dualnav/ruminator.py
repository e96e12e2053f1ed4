"""LLM navigator: prompt rendering and the perceive / plan / predict chain."""
from __future__ import annotations

import logging
import math
import re
import string
from dataclasses import dataclass, field

from .actions import Action, Mode, natural_key, verbalize_action
from .llm import LlmClient, LlmParseError
from .memory import MemoryBank, MemoryEntry, Plan, PlanOrigin, StepRecord
from .world import Instruction, Observation, ObservedSlot, WorldGraph, observe

__all__ = [
    "verbalize_action", "PromptBundle", "SceneDescription", "Pose", "RuminatorStep",
    "build_prompts", "perceive", "plan", "predict", "step_ruminator",
    "SYSTEM_PROMPT", "NO_PREVIOUS_PLAN",
]

log = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You are a navigation agent in an indoor environment. Viewpoints are named id_N. "
    "Follow the instruction using what you observe and what you remember."
)
NO_PREVIOUS_PLAN = "(no previous plan)"

_WORD_RE = re.compile(r"[A-Za-z_]+")
_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-Z])(?![A-Za-z])")


def _degrees(theta: float) -> str:
    return f"{round(math.degrees(theta)):+d}"


def _slot_line(s: ObservedSlot) -> str:
    where = f"img_{s.index} (heading {_degrees(s.heading)}"
    if s.navigable_to is not None:
        where += f", leads to {s.navigable_to}"
    seen = ", ".join(s.tags) if s.tags else "nothing notable"
    return f"{where}): {seen}"


def _sorted_candidates(cands) -> list[ObservedSlot]:
    return sorted(cands, key=lambda s: (s.heading, natural_key(s.navigable_to)))


@dataclass(frozen=True)
class PromptBundle:
    instruction_block: str
    observation_block: str
    trajectory_block: str
    map_block: str
    option_block: str
    options: tuple[tuple[str, Action], ...] = field(default=(), compare=False)

    def render(self) -> str:
        return "\n".join([self.instruction_block, self.observation_block, self.trajectory_block,
                          self.map_block, self.option_block]) + "\n"

    def option_targets(self) -> dict[str, str]:
        return {letter: str(a.target) if not a.is_stop else "stop" for letter, a in self.options}


def build_prompts(instruction: Instruction, obs: Observation, bank: MemoryBank, world: WorldGraph,
                  candidates=None) -> PromptBundle:
    """Render the five textual input blocks for the current state.

    The observation block lists every slot; options cover the navigable
    candidates only, sorted by relative heading then id, with a final stop.
    """
    cands = _sorted_candidates(obs.candidates if candidates is None else candidates)
    if len(cands) > len(string.ascii_uppercase) - 1:
        raise ValueError(f"too many candidates for letter options: {len(cands)}")
    obs_text = "; ".join(_slot_line(s) for s in obs.slots)
    if bank.records:
        traj_text, map_text = bank.verbalize(world)
    else:
        nbs = sorted((s.navigable_to for s in cands), key=natural_key)
        traj_text = f"You begin the navigation at {obs.viewpoint}."
        map_text = f"{obs.viewpoint} is connected with {', '.join(nbs)}."
    options = [(string.ascii_uppercase[i], Action.move(s.navigable_to)) for i, s in enumerate(cands)]
    options.append((string.ascii_uppercase[len(cands)], Action.stop()))
    rendered = []
    for (letter, action), s in zip(options, cands):
        rendered.append(f"{letter}. {verbalize_action(s.heading, action.target)}")
    rendered.append(f"{options[-1][0]}. stop")
    return PromptBundle(
        instruction_block=f"Instruction: {instruction.text}",
        observation_block=f"Observation: {obs_text}",
        trajectory_block=f"Trajectory: {traj_text}",
        map_block=f"Map: {map_text}",
        option_block="Option: " + "; ".join(rendered),
        options=tuple(options),
    )


@dataclass(frozen=True)
class SceneDescription:
    text: str
    referenced_tags: tuple[str, ...]

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("scene description must be non-empty")


def referenced_tags(text: str, vocab) -> tuple[str, ...]:
    """Tags from ``vocab`` mentioned in ``text``, in order of first mention."""
    vocab = set(vocab)
    words = (w.lower() for w in _WORD_RE.findall(text))
    return tuple(dict.fromkeys(w for w in words if w in vocab))


def _nonempty(reply: str) -> str:
    if not reply.strip():
        raise ValueError("empty reply")
    return reply


def perception_prompt(instruction: Instruction, obs: Observation) -> str:
    b = f"Observation: {'; '.join(_slot_line(s) for s in obs.slots)}"
    return (f"[Perception] You are at {obs.viewpoint}.\nInstruction: {instruction.text}\n{b}\n"
            "Describe the surroundings in detail, naming every object the instruction may refer to.")


def perceive(llm: LlmClient, instruction: Instruction, obs: Observation) -> SceneDescription:
    text, _ = llm.ask("perception", SYSTEM_PROMPT, perception_prompt(instruction, obs), _nonempty,
                      {"viewpoint": obs.viewpoint})
    return SceneDescription(text, referenced_tags(text, obs.tags))


def planning_prompt(instruction: Instruction, prev_plan: Plan | None, description: SceneDescription,
                    bundle: PromptBundle, viewpoint: str) -> str:
    prev = prev_plan.text if prev_plan is not None else NO_PREVIOUS_PLAN
    return (f"[Planning] You are at {viewpoint}.\n{bundle.instruction_block}\n"
            f"Previous plan: {prev}\nDescription: {description.text}\n"
            f"{bundle.trajectory_block}\n{bundle.map_block}\n"
            "Write the updated navigation plan.")


def plan(llm: LlmClient, instruction: Instruction, prev_plan: Plan | None, description: SceneDescription,
         bank: MemoryBank, world: WorldGraph, obs: Observation) -> Plan | None:
    """New plan from the LLM; keeps ``prev_plan`` when no reply is usable."""
    bundle = build_prompts(instruction, obs, bank, world)
    prompt = planning_prompt(instruction, prev_plan, description, bundle, obs.viewpoint)
    try:
        text, _ = llm.ask("planning", SYSTEM_PROMPT, prompt, _nonempty, {"viewpoint": obs.viewpoint})
    except LlmParseError:
        log.warning("planning: empty replies, keeping the previous plan")
        return prev_plan
    return Plan(max(bank.t, 0), text, PlanOrigin.RUMINATOR)


def prediction_prompt(bundle: PromptBundle, plan_: Plan | None, viewpoint: str, obs: Observation) -> str:
    nav = "; ".join(_slot_line(s) for s in _sorted_candidates(obs.candidates)) or "none"
    plan_text = plan_.text if plan_ is not None else NO_PREVIOUS_PLAN
    return (f"[Prediction] You are at {viewpoint}.\n{bundle.instruction_block}\nPlan: {plan_text}\n"
            f"Navigable: {nav}\n{bundle.option_block}\n"
            "Answer with the letter of one option.")


def parse_option(reply: str, letters) -> str:
    """First standalone capital letter that names an option."""
    for m in _LETTER_RE.finditer(reply):
        if m.group(1) in letters:
            return m.group(1)
    raise ValueError(f"no option letter in {reply!r}")


def predict(llm: LlmClient, instruction: Instruction, plan_: Plan | None, obs: Observation,
            bank: MemoryBank, world: WorldGraph) -> tuple[Action, bool]:
    """Chosen action and whether it came from the fallback path."""
    bundle = build_prompts(instruction, obs, bank, world)
    options = dict(bundle.options)
    prompt = prediction_prompt(bundle, plan_, obs.viewpoint, obs)
    try:
        letter, _ = llm.ask("prediction", SYSTEM_PROMPT, prompt, lambda r: parse_option(r, options),
                            {"viewpoint": obs.viewpoint, "options": bundle.option_targets()})
        return options[letter], False
    except LlmParseError:
        pass
    wanted = referenced_tags(plan_.text, world.tag_vocab()) if plan_ is not None else ()
    for tag in wanted:
        for s in _sorted_candidates(obs.candidates):
            if tag in s.tags:
                log.warning("prediction: degraded to plan tag %r", tag)
                return Action.move(s.navigable_to), True
    log.warning("prediction: degraded to the first option")
    return bundle.options[0][1], True


@dataclass(frozen=True)
class Pose:
    viewpoint: str
    heading: float
    arrived_by: Action | None = None


@dataclass(frozen=True)
class RuminatorStep:
    action: Action
    description: SceneDescription
    plan: Plan | None
    degraded: bool
    record: StepRecord | None  # None when an existing record was annotated


def step_ruminator(llm: LlmClient, instruction: Instruction, bank: MemoryBank, world: WorldGraph,
                   pose: Pose) -> RuminatorStep:
    """One perceive, plan, predict cycle at ``pose``.

    If the bank already ends at this viewpoint (the step on which control
    was handed over) the description replaces its memory entry; otherwise a
    new record is appended.
    """
    obs = observe(world, pose.viewpoint, pose.heading)
    desc = perceive(llm, instruction, obs)
    entry = MemoryEntry.scene_description(desc.text, desc.referenced_tags)
    record = None
    if bank.records and bank.current == pose.viewpoint:
        bank.set_memory(pose.viewpoint, entry)
    else:
        t = bank.t + 1
        record = StepRecord(t, pose.viewpoint, pose.arrived_by if t else None, Mode.RUMINATOR, entry,
                            pose.heading, tuple(world.neighbors(pose.viewpoint)))
        bank.append(record)
    new_plan = plan(llm, instruction, bank.plan, desc, bank, world, obs)
    if new_plan is not None:
        bank.install_plan(new_plan)
    action, degraded = predict(llm, instruction, bank.plan, obs, bank, world)
    return RuminatorStep(action, desc, bank.plan, degraded, record)
