"""Fast-thinking policies.

Two surrogates implement the :class:`Policy` protocol:

* :class:`HeuristicPolicy` follows instruction landmarks greedily and
  injects controllable failure modes (trap oscillation, premature stop,
  deviation followed by aimless wandering).
* :class:`BehaviorCloningPolicy` is a two-layer feed-forward candidate
  scorer trained by teacher forcing on ground-truth next hops.
"""
from __future__ import annotations

import logging
import math
import zlib
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._ckpt import read_checkpoint, write_checkpoint
from ._optim import Adam
from ._validation import check_finite_params, check_positive_float, check_positive_int, check_probability
from .actions import Action, Mode
from .memory import MemoryBank, MemoryEntry, StepRecord
from .world import Episode, Instruction, Observation, WorldGraph, observe

log = logging.getLogger(__name__)

RUNNER_SCHEMA = "dualnav.runner/1"


class Policy(Protocol):
    def decide(self, instruction: Instruction, obs: Observation, bank: MemoryBank) -> Action: ...


def decide(policy: Policy, instruction: Instruction, obs: Observation, bank: MemoryBank) -> Action:
    return policy.decide(instruction, obs, bank)


def faced_slot(obs: Observation):
    """The slot the agent is looking into (smallest relative heading)."""
    return min(obs.slots, key=lambda s: (abs(s.heading), s.index))


def arrival_record(world: WorldGraph, t: int, vp: str, action: Action | None, heading: float,
                   mode: Mode = Mode.RUNNER, entry: MemoryEntry | None = None) -> StepRecord:
    """Step record for arriving at ``vp``; runner arrivals store the oriented view."""
    if entry is None:
        slot = faced_slot(observe(world, vp, heading))
        entry = MemoryEntry.oriented_view(slot.tags, slot.feature)
    return StepRecord(t, vp, action, mode, entry, heading, tuple(world.neighbors(vp)))


def runner_rollout(world: WorldGraph, episode: Episode, policy: "Policy", step_cap: int = 40):
    """Run ``policy`` alone from the episode start, yielding the bank after every arrival.

    The same bank object is yielded each time; copy it to keep a snapshot.
    """
    bank = MemoryBank()
    vp, heading, action = episode.start, 0.0, None
    for t in range(step_cap + 1):
        bank.append(arrival_record(world, t, vp, action, heading))
        yield bank
        if t == step_cap:
            return
        action = policy.decide(episode.instruction, observe(world, vp, heading), bank)
        if action.is_stop:
            return
        heading = world.slot_toward(vp, action.target).heading
        vp = action.target


def _episode_key(instruction: Instruction, bank: MemoryBank) -> int:
    start = bank.records[0].viewpoint if bank.records else ""
    return zlib.crc32(f"{start}|{instruction.text}".encode())


def _local_tags(obs: Observation) -> set[str]:
    through = {t for s in obs.candidates for t in s.tags}
    return {t for s in obs.slots if s.navigable_to is None for t in s.tags} - through


class HeuristicPolicy(BaseEstimator):
    """Greedy landmark follower with seeded failure modes.

    Trap and premature-stop failures are drawn once per episode and strike
    at a seeded early step; deviation noise is drawn per decision.  Every draw
    is keyed on ``(seed, episode, t)`` so a decision is a pure function of
    its inputs.

    Parameters
    ----------
    noise : float
        Per-decision probability of stepping to a wrong candidate instead of
        the intended one; the policy then has lost the instruction and wanders.
    trap_prob : float
        Per-episode probability of stepping back to the previous viewpoint
        at one of the first ``TRAP_WINDOW`` decisions; once it has done so
        the policy oscillates between the pair.
    premature_stop_prob : float
        Per-episode probability of emitting Stop at one of the first
        ``STOP_WINDOW`` decisions, regardless of progress.
    seed : int
    """

    TRAP_WINDOW = 4
    STOP_WINDOW = 1

    def __init__(self, noise=0.0, trap_prob=0.0, premature_stop_prob=0.0, seed=0):
        self.noise = noise
        self.trap_prob = trap_prob
        self.premature_stop_prob = premature_stop_prob
        self.seed = seed
        self._validate()

    def _validate(self):
        check_probability(self.noise, "noise")
        check_probability(self.trap_prob, "trap_prob")
        check_probability(self.premature_stop_prob, "premature_stop_prob")

    def set_params(self, **params):
        super().set_params(**params)
        self._validate()
        return self

    def decide(self, instruction: Instruction, obs: Observation, bank: MemoryBank) -> Action:
        t = bank.trajectory_len()
        key = _episode_key(instruction, bank)
        u_trap, k_trap, u_stop, k_stop = np.random.default_rng([int(self.seed), key]).random(4)
        trap_at = 1 + int(k_trap * self.TRAP_WINDOW) if u_trap < self.trap_prob else None
        stop_at = int(k_stop * self.STOP_WINDOW) if u_stop < self.premature_stop_prob else None
        u_noise, u_pick = np.random.default_rng([int(self.seed), key, t]).random(2)
        cands = list(obs.candidates)
        if not cands:
            return Action.stop()
        targets = [c.navigable_to for c in cands]
        traj = bank.trajectory()
        prev = traj[-2] if len(traj) >= 2 else None

        trapped = trap_at is not None and t > trap_at
        if trapped and len(traj) >= 3 and traj[-1] == traj[-3] and prev in targets:
            return Action.move(prev)
        if t == stop_at:
            return Action.stop()
        if t == trap_at and prev in targets:
            return Action.move(prev)

        intended = self._intended(instruction, obs, t)
        if intended is None:
            return self._wander(cands, bank, prev, u_pick)
        if not intended.is_stop and u_noise < self.noise:
            others = [c for c in cands if c.navigable_to not in (intended.target, prev)]
            if others:
                return Action.move(others[int(u_pick * len(others))].navigable_to)
        return intended

    def _intended(self, instruction: Instruction, obs: Observation, t: int) -> Action | None:
        clauses = instruction.clause_tags
        if t < len(clauses):
            hits = [c for c in obs.candidates if clauses[t] in c.tags]
            if hits:
                return Action.move(hits[0].navigable_to)
        target = instruction.target_tag
        if target is not None and target in _local_tags(obs):
            return Action.stop()
        if target is not None:
            hits = [c for c in obs.candidates if target in c.tags]
            if hits:
                return Action.move(hits[0].navigable_to)
        return None

    @staticmethod
    def _wander(cands, bank: MemoryBank, prev, u: float) -> Action:
        # lost: uniform random walk, backtracking included
        return Action.move(cands[int(u * len(cands))].navigable_to)


def heuristic_policy(noise=0.0, trap_prob=0.0, premature_stop_prob=0.0, seed=0) -> HeuristicPolicy:
    return HeuristicPolicy(noise, trap_prob, premature_stop_prob, seed)


# ----------------------------------------------------------------------
# behaviour cloning
# ----------------------------------------------------------------------

class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"behaviour-cloning loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def instruction_embedding(instruction: Instruction, vocab: Sequence[str]) -> np.ndarray:
    present = set(instruction.tags)
    return np.array([1.0 if t in present else 0.0 for t in vocab])


def candidate_inputs(instruction: Instruction, obs: Observation, vocab: Sequence[str]) -> np.ndarray:
    """One row per candidate: instruction bag-of-tags, slot feature, sin/cos of relative heading."""
    emb = instruction_embedding(instruction, vocab)
    rows = [
        np.concatenate([emb, np.asarray(c.feature, dtype=float), [math.sin(c.heading), math.cos(c.heading)]])
        for c in obs.candidates
    ]
    if not rows:
        return np.zeros((0, len(vocab) + len(obs.slots[0].feature) + 2))
    return np.stack(rows)


class BCBatch:
    """Teacher-forcing states flattened into one candidate matrix.

    ``label[s]`` indexes into the candidates of state ``s``; the value
    ``n_candidates[s]`` denotes the Stop option.
    """

    def __init__(self, blocks: list[np.ndarray], labels: list[int]):
        self.n_states = len(blocks)
        self.n_candidates = np.array([len(b) for b in blocks], dtype=int)
        self.X = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, 0))
        self.segment = np.repeat(np.arange(self.n_states), self.n_candidates)
        self.labels = np.asarray(labels, dtype=int)


def teacher_forcing_states(episodes: Sequence[Episode], world: WorldGraph, vocab: Sequence[str]) -> BCBatch:
    blocks, labels = [], []
    for ep in episodes:
        heading = 0.0
        for k, vp in enumerate(ep.gt_path):
            obs = observe(world, vp, heading)
            blocks.append(candidate_inputs(ep.instruction, obs, vocab))
            if k + 1 < len(ep.gt_path):
                nxt = ep.gt_path[k + 1]
                targets = [c.navigable_to for c in obs.candidates]
                labels.append(targets.index(nxt))
                heading = world.slot_toward(vp, nxt).heading
            else:
                labels.append(len(obs.candidates))
    return BCBatch(blocks, labels)


def init_bc_params(n_inputs: int, hidden: int, scale: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(scale=scale, size=(n_inputs, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(scale=scale, size=hidden),
        "b2": np.zeros(()),
        "stop_bias": np.zeros(()),
    }


def candidate_scores(params: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    return np.tanh(X @ params["W1"] + params["b1"]) @ params["w2"] + params["b2"]


def bc_loss_and_grad(params: dict[str, np.ndarray], batch: BCBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over candidates-plus-stop, with its exact gradient."""
    S = batch.n_states
    H = np.tanh(batch.X @ params["W1"] + params["b1"])
    scores = H @ params["w2"] + params["b2"]
    stop = float(params["stop_bias"])

    seg_max = np.full(S, stop)
    np.maximum.at(seg_max, batch.segment, scores)
    e_c = np.exp(scores - seg_max[batch.segment])
    e_s = np.exp(stop - seg_max)
    Z = np.bincount(batch.segment, weights=e_c, minlength=S) + e_s
    p_c = e_c / Z[batch.segment]
    p_s = e_s / Z

    offsets = np.concatenate([[0], np.cumsum(batch.n_candidates)[:-1]])
    is_stop = batch.labels == batch.n_candidates
    chosen = np.where(is_stop, stop, 0.0)
    idx = offsets[~is_stop] + batch.labels[~is_stop]
    chosen[~is_stop] = scores[idx]
    loss = float(np.mean(np.log(Z) + seg_max - chosen))

    d_scores = p_c.copy()
    d_scores[idx] -= 1.0
    d_scores /= S
    d_stop = float(np.sum(p_s - is_stop) / S)

    dH = np.outer(d_scores, params["w2"]) * (1.0 - H * H)
    grads = {
        "W1": batch.X.T @ dH,
        "b1": dH.sum(axis=0),
        "w2": H.T @ d_scores,
        "b2": np.asarray(d_scores.sum()),
        "stop_bias": np.asarray(d_stop),
    }
    return loss, grads


class BehaviorCloningPolicy(BaseEstimator):
    """Two-layer candidate scorer trained by teacher forcing.

    ``fit`` takes episodes of one world and learns to reproduce the
    ground-truth next hop (or Stop at the goal).
    """

    def __init__(self, hidden=32, epochs=300, learning_rate=0.01, init_scale=0.1, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.init_scale = init_scale
        self.seed = seed

    def fit(self, episodes: Sequence[Episode], world: WorldGraph):
        check_positive_int(self.hidden, "hidden")
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_float(self.learning_rate, "learning_rate")
        if not episodes:
            raise ValueError("behaviour cloning needs at least one episode")
        self.vocab_ = world.tag_vocab()
        batch = teacher_forcing_states(episodes, world, self.vocab_)
        rng = np.random.default_rng(self.seed)
        params = init_bc_params(batch.X.shape[1], self.hidden, self.init_scale, rng)
        opt = Adam(params, lr=self.learning_rate)
        history = []
        for epoch in range(self.epochs):
            loss, grads = bc_loss_and_grad(params, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            history.append(loss)
            opt.step(params, grads)
        final, _ = bc_loss_and_grad(params, batch)
        if not np.isfinite(final):
            raise TrainingDivergedError(self.epochs)
        history.append(final)
        check_finite_params(params, "runner parameters")
        self.params_ = params
        self.loss_history_ = history
        return self

    def scores(self, instruction: Instruction, obs: Observation) -> tuple[np.ndarray, float]:
        check_is_fitted(self, "params_")
        X = candidate_inputs(instruction, obs, self.vocab_)
        return candidate_scores(self.params_, X), float(self.params_["stop_bias"])

    def decide(self, instruction: Instruction, obs: Observation, bank: MemoryBank) -> Action:
        scores, stop = self.scores(instruction, obs)
        if len(scores) == 0 or stop >= scores.max():
            return Action.stop()
        return Action.move(obs.candidates[int(np.argmax(scores))].navigable_to)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        write_checkpoint(path, RUNNER_SCHEMA, self.params_, vocab=list(self.vocab_),
                         hyper=self.get_params())

    @classmethod
    def load(cls, path) -> "BehaviorCloningPolicy":
        params, meta = read_checkpoint(path, RUNNER_SCHEMA)
        policy = cls(**meta.get("hyper", {}))
        policy.params_ = params
        policy.vocab_ = list(meta["vocab"])
        return policy


def train_bc(episodes: Sequence[Episode], world: WorldGraph, **hyper) -> dict[str, np.ndarray]:
    """Fit a :class:`BehaviorCloningPolicy` and return its parameters."""
    return BehaviorCloningPolicy(**hyper).fit(episodes, world).params_
