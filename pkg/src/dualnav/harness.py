"""Episode orchestration, metrics, benchmark suites and ablations."""
from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .actions import Action, Mode
from .llm import LlmClient, LlmParseError, LlmTransportError, OracleTransport
from .memory import MemoryBank
from .regulator import RegulatorConfig, critical_formulation, evaluate, retrace_path
from .ruminator import Pose, step_ruminator
from .runner import HeuristicPolicy, Policy, arrival_record
from .scorer import TrajectoryScorer, collect_snapshots, train
from .world import (SUCCESS_RADIUS, Episode, InstructionStyle, WorldGraph, generate_episodes,
                    generate_world, geodesic, observe, validate_episode)

log = logging.getLogger(__name__)

LOG_SCHEMA = "dualnav.episode-log/1"
REPORT_SCHEMA = "dualnav.report/1"


class PolicyContractError(RuntimeError):
    pass


@dataclass
class EpisodeResult:
    episode_id: str
    start: str
    goal: str
    trajectory: list[str]
    actions: list[str]
    modes: list[str]  # one per action, stop included
    switch: dict | None
    restarts: int
    llm_calls: int
    ne: float
    success: bool
    tl: float
    shortest_path_length: float
    end_reason: str  # "stop" | "cap" | "error"
    failure: str | None = None
    teleports: list[int] = field(default_factory=list)  # trajectory indices reached without walking
    wall_time: dict[str, float] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list, repr=False)

    @property
    def n_moves(self) -> int:
        return sum(1 for a in self.actions if a != "stop")

    @property
    def spl(self) -> float:
        return spl_term(self.success, self.shortest_path_length, self.tl)

    def row(self) -> dict:
        """Log/report view: everything except wall times and events."""
        d = asdict(self)
        d.pop("wall_time")
        d.pop("events")
        return d

    @classmethod
    def from_row(cls, d: dict) -> "EpisodeResult":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_jsonl(self) -> str:
        lines = [dict(schema=LOG_SCHEMA, **e) for e in self.events]
        lines.append(dict(schema=LOG_SCHEMA, event="result", **self.row()))
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)


def spl_term(success: bool, shortest: float, taken: float) -> float:
    if not success:
        return 0.0
    denom = max(shortest, taken)
    return 1.0 if denom == 0 else shortest / denom


def trajectory_length(world: WorldGraph, trajectory: Sequence[str], teleports: Sequence[int] = ()) -> float:
    jumps = set(teleports)
    return float(sum(world.edge_length(a, b) for i, (a, b) in enumerate(zip(trajectory, trajectory[1:]), 1)
                     if i not in jumps))


def run_episode(world: WorldGraph, episode: Episode, runner_policy: Policy, regulator_config: RegulatorConfig,
                scorer: TrajectoryScorer | None = None, llm: LlmClient | None = None, *,
                shared_memory: bool = True) -> EpisodeResult:
    """Navigate one episode with the fast policy, handing over to the LLM
    navigator when the regulator flags trouble.

    ``llm=None`` disables the LLM entirely (fast policy alone).  With
    ``shared_memory=False`` the LLM navigator starts from an empty bank.
    """
    validate_episode(episode, world)
    cfg = regulator_config
    instruction = episode.instruction
    events: list[dict] = [{"event": "episode", "episode": episode.id, "start": episode.start,
                           "goal": episode.goal, "instruction": instruction.text,
                           "config": asdict(cfg), "shared_memory": shared_memory,
                           "llm": None if llm is None else llm.transport.name}]
    seen_tx = 0
    calls0 = 0
    if llm is not None:
        llm.begin_episode(world, episode)
        seen_tx, calls0 = len(llm.transcript), llm.calls

    def flush_llm():
        nonlocal seen_tx
        if llm is None:
            return
        for entry in llm.transcript[seen_tx:]:
            events.append({"event": "llm", **entry})
        seen_tx = len(llm.transcript)

    timers: dict[str, float] = defaultdict(float)
    bank = MemoryBank()
    rbank: MemoryBank | None = None
    vp, heading, arrived_by = episode.start, 0.0, None
    trajectory, actions, modes, teleports = [vp], [], [], []
    mode = Mode.RUNNER
    switch, restarts, failure, end_reason = None, 0, None, "cap"
    moves = 0

    def walk(target: str, m: Mode):
        nonlocal vp, heading, moves
        heading = world.slot_toward(vp, target).heading
        vp = target
        moves += 1
        trajectory.append(vp)
        actions.append(str(Action.move(target)))
        modes.append(m.value)

    try:
        while True:
            if mode is Mode.RUNNER:
                rec = arrival_record(world, bank.t + 1, vp, arrived_by, heading)
                bank.append(rec)
                events.append({"event": "record", **rec.to_dict()})
                if moves >= cfg.step_cap:
                    break
                obs = observe(world, vp, heading)
                t0 = time.perf_counter()
                action = runner_policy.decide(instruction, obs, bank)
                timers["runner"] += time.perf_counter() - t0
                if not action.is_stop and action.target not in {c.navigable_to for c in obs.candidates}:
                    raise PolicyContractError(f"policy moved to non-candidate {action.target!r} at {vp}")
                t0 = time.perf_counter()
                active = cfg if llm is not None else replace(cfg, use_looping=False, use_scoring=False,
                                                             use_ending=False)
                decision = evaluate(active, bank, scorer, world, action, llm, instruction, obs)
                timers["regulator"] += time.perf_counter() - t0
                flush_llm()
                events.append({"event": "decision", "t": bank.t, "proposed": str(action), "kind": decision.kind,
                               "reason": None if decision.reason is None else decision.reason.value,
                               "score": decision.score, **decision.notes})
                if decision.kind == "proceed":
                    walk(action.target, Mode.RUNNER)
                    arrived_by = action
                    continue
                if decision.kind == "end":
                    actions.append("stop")
                    modes.append(Mode.RUNNER.value)
                    end_reason = "stop"
                    break
                switch = {"reason": decision.reason.value, "t": bank.t, "viewpoint": vp}
                events.append({"event": "switch", **switch})
                mode = Mode.RUMINATOR
                rbank = bank if shared_memory else MemoryBank()
                if cfg.use_formulation:
                    t0 = time.perf_counter()
                    outcome = critical_formulation(llm, instruction, bank, obs, world)
                    timers["regulator"] += time.perf_counter() - t0
                    flush_llm()
                    events.append({"event": "formulation", "t": bank.t, "kind": outcome.kind,
                                   "plan": outcome.plan.text, "degraded": outcome.degraded})
                    if outcome.restart:
                        restarts += 1
                        if cfg.restart_teleport:
                            path = [vp, episode.start] if vp != episode.start else [vp]
                            if len(path) > 1:
                                trajectory.append(episode.start)
                                teleports.append(len(trajectory) - 1)
                                vp, heading = episode.start, 0.0
                        else:
                            path = retrace_path(bank, world, episode.start)
                            for nxt in path[1:]:
                                if moves >= cfg.step_cap:
                                    break
                                walk(nxt, Mode.RUMINATOR)
                        bank.reset()
                        rbank = bank if shared_memory else MemoryBank()
                        events.append({"event": "restart", "path": path, "reached": vp == episode.start,
                                       "max_revisit_after_reset": rbank.max_revisit(), "bank_len": len(rbank)})
                        arrived_by = None
                    rbank.install_plan(outcome.plan)
                continue

            if moves >= cfg.step_cap:
                break
            t0 = time.perf_counter()
            step = step_ruminator(llm, instruction, rbank, world, Pose(vp, heading, arrived_by))
            timers["ruminator"] += time.perf_counter() - t0
            flush_llm()
            if step.record is not None:
                events.append({"event": "record", **step.record.to_dict()})
            events.append({"event": "ruminator", "t": rbank.t, "action": str(step.action),
                           "plan": None if step.plan is None else step.plan.text, "degraded": step.degraded})
            if step.action.is_stop:
                actions.append("stop")
                modes.append(Mode.RUMINATOR.value)
                end_reason = "stop"
                break
            walk(step.action.target, Mode.RUMINATOR)
            arrived_by = step.action
    except (LlmTransportError, LlmParseError, PolicyContractError) as exc:
        flush_llm()
        failure = f"{type(exc).__name__}: {exc}"
        end_reason = "error"
        events.append({"event": "failure", "error": failure})
        log.error("episode %s aborted: %s", episode.id, failure)

    ne = geodesic(world, vp, episode.goal)[0]
    return EpisodeResult(
        episode_id=episode.id, start=episode.start, goal=episode.goal, trajectory=trajectory,
        actions=actions, modes=modes, switch=switch, restarts=restarts,
        llm_calls=0 if llm is None else llm.calls - calls0,
        ne=ne, success=failure is None and ne < SUCCESS_RADIUS,
        tl=trajectory_length(world, trajectory, teleports),
        shortest_path_length=geodesic(world, episode.start, episode.goal)[0],
        end_reason=end_reason, failure=failure, teleports=teleports, wall_time=dict(timers), events=events,
    )


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

@dataclass
class SuiteReport:
    label: str
    results: list[EpisodeResult]
    tl: float
    ne: float
    sr: float
    spl: float
    runner_step_fraction: float
    ruminator_step_fraction: float
    mean_llm_calls: float
    switch_rate: float

    def to_dict(self) -> dict:
        agg = {k: getattr(self, k) for k in ("tl", "ne", "sr", "spl", "runner_step_fraction",
                                             "ruminator_step_fraction", "mean_llm_calls", "switch_rate")}
        return {"schema": REPORT_SCHEMA, "label": self.label, "n_episodes": len(self.results), **agg,
                "episodes": [r.row() for r in self.results]}

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteReport":
        return metrics([EpisodeResult.from_row(r) for r in d["episodes"]], label=d["label"])


def metrics(results: Sequence[EpisodeResult], worlds=None, label: str = "") -> SuiteReport:
    """Aggregate TL, NE, SR, SPL and the mode accounting over episodes.

    ``worlds`` (episode id -> world) recomputes TL, NE and the shortest path
    length from the trajectories instead of trusting the stored values.
    """
    if not results:
        raise ValueError("metrics need at least one episode result")
    rows = list(results)
    if worlds is not None:
        fixed = []
        for r in rows:
            w = worlds[r.episode_id]
            ne = geodesic(w, r.trajectory[-1], r.goal)[0]
            fixed.append(replace(r, ne=ne, success=r.failure is None and ne < SUCCESS_RADIUS,
                                 tl=trajectory_length(w, r.trajectory, r.teleports),
                                 shortest_path_length=geodesic(w, r.start, r.goal)[0]))
        rows = fixed
    modes = [m for r in rows for m in r.modes]
    runner_frac = sum(m == Mode.RUNNER.value for m in modes) / len(modes) if modes else 1.0
    return SuiteReport(
        label=label,
        results=rows,
        tl=float(np.mean([r.tl for r in rows])),
        ne=float(np.mean([r.ne for r in rows])),
        sr=float(np.mean([r.success for r in rows])),
        spl=float(np.mean([r.spl for r in rows])),
        runner_step_fraction=runner_frac,
        ruminator_step_fraction=1.0 - runner_frac,
        mean_llm_calls=float(np.mean([r.llm_calls for r in rows])),
        switch_rate=float(np.mean([r.switch is not None for r in rows])),
    )


_COLUMNS = (("arm", "label", "{}"), ("n", None, "{}"), ("TL", "tl", "{:.2f}"), ("NE", "ne", "{:.2f}"),
            ("SR", "sr", "{:.3f}"), ("SPL", "spl", "{:.3f}"), ("runner", "runner_step_fraction", "{:.3f}"),
            ("calls", "mean_llm_calls", "{:.2f}"), ("switch", "switch_rate", "{:.3f}"))


def render_table(reports: Sequence[SuiteReport]) -> str:
    body = []
    for rep in reports:
        body.append([fmt.format(len(rep.results) if key is None else getattr(rep, key)) for _, key, fmt in _COLUMNS])
    header = [c[0] for c in _COLUMNS]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def save_reports(reports: Sequence[SuiteReport], path) -> None:
    Path(path).write_text(json.dumps({"schema": REPORT_SCHEMA, "reports": [r.to_dict() for r in reports]},
                                     indent=1) + "\n", encoding="utf-8")


def load_reports(path) -> list[SuiteReport]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ValueError(f"{path}: results file is empty")
    data = json.loads(text)
    items = data.get("reports", []) if isinstance(data, dict) and "reports" in data else [data]
    reports = [SuiteReport.from_dict(d) for d in items if d.get("episodes")]
    if not reports:
        raise ValueError(f"{path}: results file holds no episodes")
    return reports


# ----------------------------------------------------------------------
# suites and ablations
# ----------------------------------------------------------------------

SWITCHES = {
    "no-looping": {"use_looping": False},
    "no-scoring": {"use_scoring": False},
    "no-ending": {"use_ending": False},
    "no-formulation": {"use_formulation": False},
    "no-llm": {},
    "no-memory": {},
}


@dataclass(frozen=True)
class Arm:
    label: str
    config: RegulatorConfig
    use_llm: bool = True
    shared_memory: bool = True


def make_arm(spec: str, base: RegulatorConfig) -> Arm:
    """``"full"`` or switch names joined by ``+`` (e.g. ``no-looping+no-ending``)."""
    if spec in ("full", ""):
        return Arm("full", base)
    cfg, use_llm, shared = base, True, True
    for name in spec.split("+"):
        if name not in SWITCHES:
            raise ValueError(f"unknown switch {name!r}; choose from {', '.join(SWITCHES)}")
        cfg = replace(cfg, **SWITCHES[name])
        use_llm = use_llm and name != "no-llm"
        shared = shared and name != "no-memory"
    return Arm(spec, cfg, use_llm, shared)


@dataclass(frozen=True)
class SuiteConfig:
    n_worlds: int = 10
    episodes_per_world: int = 10
    n_viewpoints: int = 60
    world_seed: int = 1000
    episode_seed: int = 7
    min_hops: int = 4
    max_hops: int = 7
    style: str = InstructionStyle.FINE_GRAINED.value
    noise: float = 0.05
    trap_prob: float = 0.3
    premature_stop_prob: float = 0.1
    runner_seed: int = 0
    n_train_worlds: int = 4
    train_world_seed: int = 0
    train_episodes_per_world: int = 15
    scorer_seed: int = 0
    regulator: RegulatorConfig = field(default_factory=RegulatorConfig)

    def runner(self) -> HeuristicPolicy:
        return HeuristicPolicy(self.noise, self.trap_prob, self.premature_stop_prob, self.runner_seed)

    def eval_worlds(self) -> list[WorldGraph]:
        return [generate_world(self.world_seed + i, self.n_viewpoints) for i in range(self.n_worlds)]

    def train_worlds(self) -> list[WorldGraph]:
        return [generate_world(self.train_world_seed + i, self.n_viewpoints) for i in range(self.n_train_worlds)]

    def episodes_for(self, world: WorldGraph, n: int) -> list[Episode]:
        return generate_episodes(world, n, self.episode_seed + world.seed, InstructionStyle(self.style),
                                 self.min_hops, self.max_hops)


@dataclass
class Suite:
    config: SuiteConfig
    worlds: list[WorldGraph]
    episodes: list[list[Episode]]
    scorer: TrajectoryScorer | None
    policy: Policy | None = None  # defaults to the config's heuristic runner

    def pairs(self):
        for w, eps in zip(self.worlds, self.episodes):
            for ep in eps:
                yield w, ep


def train_suite_scorer(config: SuiteConfig, eval_worlds: Sequence[WorldGraph] = ()) -> TrajectoryScorer:
    worlds = config.train_worlds()
    episodes = [config.episodes_for(w, config.train_episodes_per_world) for w in worlds]
    snaps = collect_snapshots(worlds, episodes, config.runner(), config.regulator.step_cap, eval_worlds)
    return train(snaps, seed=config.scorer_seed)


def prepare_suite(config: SuiteConfig, scorer: TrajectoryScorer | None = None, train_scorer: bool = True) -> Suite:
    worlds = config.eval_worlds()
    episodes = [config.episodes_for(w, config.episodes_per_world) for w in worlds]
    if scorer is None and train_scorer:
        scorer = train_suite_scorer(config, worlds)
    return Suite(config, worlds, episodes, scorer)


def oracle_client() -> LlmClient:
    return LlmClient(OracleTransport())


def run_suite(suite: Suite, arm: Arm | str = "full", llm: LlmClient | None = None,
              llm_factory: Callable[[], LlmClient] = oracle_client, log_dir=None) -> SuiteReport:
    """Run every episode of ``suite`` under one arm.

    ``llm`` is shared across episodes when given (scripted transcripts rely
    on that); otherwise ``llm_factory`` builds one client per episode.
    """
    if isinstance(arm, str):
        arm = make_arm(arm, suite.config.regulator)
    policy = suite.policy if suite.policy is not None else suite.config.runner()
    results = []
    for world, ep in suite.pairs():
        client = None
        if arm.use_llm:
            client = llm if llm is not None else llm_factory()
        res = run_episode(world, ep, policy, arm.config, suite.scorer, client, shared_memory=arm.shared_memory)
        results.append(res)
        if log_dir is not None:
            out = Path(log_dir) / arm.label
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{ep.id}.jsonl").write_text(res.to_jsonl(), encoding="utf-8")
    return metrics(results, label=arm.label)


def ablate(suite: Suite, switches: Sequence[str], llm_factory: Callable[[], LlmClient] = oracle_client,
           log_dir=None, include_full: bool = True) -> list[SuiteReport]:
    """The full arm (unless excluded) followed by one arm per switch set."""
    specs = (["full"] if include_full else []) + [s for s in switches if s != "full"]
    return [run_suite(suite, make_arm(s, suite.config.regulator), llm_factory=llm_factory, log_dir=log_dir)
            for s in specs]
