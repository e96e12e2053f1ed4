"""Dual-process instruction-following navigation on synthetic topological worlds.

A fast policy (the runner) navigates by default; a regulator watches the
shared memory bank and hands control to an LLM navigator (the ruminator)
when the runner loops, looks off track, or stops in the wrong place.
"""
from .actions import Action, Mode, action_verb, verbalize_action
from .harness import (EpisodeResult, SuiteConfig, SuiteReport, ablate, make_arm, metrics, prepare_suite,
                      run_episode, run_suite)
from .llm import HttpTransport, LlmClient, OracleTransport, ScriptedTransport, make_client
from .memory import MemoryBank, MemoryEntry, StepRecord
from .regulator import Decision, RegulatorConfig, SwitchReason, critical_formulation, evaluate
from .ruminator import PromptBundle, build_prompts, step_ruminator
from .runner import BehaviorCloningPolicy, HeuristicPolicy, runner_rollout
from .scorer import TrajectoryScorer, build_features, collect_snapshots, pseudo_label
from .world import (Episode, Instruction, InstructionStyle, WorldGraph, generate_episodes, generate_world,
                    geodesic, load_world, observe, save_world)

__version__ = "0.1.0"

__all__ = [
    "Action", "Mode", "action_verb", "verbalize_action",
    "EpisodeResult", "SuiteConfig", "SuiteReport", "ablate", "make_arm", "metrics", "prepare_suite",
    "run_episode", "run_suite",
    "HttpTransport", "LlmClient", "OracleTransport", "ScriptedTransport", "make_client",
    "MemoryBank", "MemoryEntry", "StepRecord",
    "Decision", "RegulatorConfig", "SwitchReason", "critical_formulation", "evaluate",
    "PromptBundle", "build_prompts", "step_ruminator",
    "BehaviorCloningPolicy", "HeuristicPolicy", "runner_rollout",
    "TrajectoryScorer", "build_features", "collect_snapshots", "pseudo_label",
    "Episode", "Instruction", "InstructionStyle", "WorldGraph", "generate_episodes", "generate_world",
    "geodesic", "load_world", "observe", "save_world",
]
