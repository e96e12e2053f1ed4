"""Learned trajectory scoring.

The memory bank is featurized into a :class:`TrajectoryGraph` whose nodes
are the visited and frontier viewpoints and whose directed edges are the
traversed hops plus the links to frontier nodes.  A two-layer edge-aware
graph attention network (:mod:`dualnav.gat`) maps the graph to the
probability that the episode is going wrong.  Training is
self-supervised: runner rollouts on held-out training worlds are labelled
after the fact by :func:`pseudo_label`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import GroupShuffleSplit
from sklearn.utils.validation import check_is_fitted

from . import gat
from ._ckpt import read_checkpoint, write_checkpoint
from ._optim import Adam
from ._validation import (
    check_binary_labels, check_finite_params, check_open_unit, check_positive_float, check_positive_int,
)
from .memory import MemoryBank
from .runner import Policy, runner_rollout
from .world import SUCCESS_RADIUS, Episode, WorldGraph, geodesic

log = logging.getLogger(__name__)

SCORER_SCHEMA = "dualnav.scorer/1"
NODE_DIM = 3 + 1 + 16
EDGE_DIM = 3 + 1 + 1
DEFAULT_STEP_CAP = 40
UNVISITED = -1.0


@dataclass
class TrajectoryGraph:
    node_ids: list[str]
    x: np.ndarray          # (N, 20) position | last visit | visual embedding
    src: np.ndarray        # (E,)
    dst: np.ndarray        # (E,)
    edge_attr: np.ndarray  # (E, 5) displacement | traversal order | frontier flag

    def to_dict(self) -> dict:
        return {
            "node_ids": self.node_ids,
            "x": self.x.tolist(),
            "src": self.src.tolist(),
            "dst": self.dst.tolist(),
            "edge_attr": self.edge_attr.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryGraph":
        return cls(
            list(d["node_ids"]),
            np.asarray(d["x"], dtype=float).reshape(-1, NODE_DIM),
            np.asarray(d["src"], dtype=int),
            np.asarray(d["dst"], dtype=int),
            np.asarray(d["edge_attr"], dtype=float).reshape(-1, EDGE_DIM),
        )

    def permute(self, order: Sequence[int]) -> "TrajectoryGraph":
        """Relabel nodes so that new node ``k`` is old node ``order[k]``."""
        order = np.asarray(order)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return TrajectoryGraph(
            [self.node_ids[i] for i in order], self.x[order], inverse[self.src], inverse[self.dst],
            self.edge_attr.copy(),
        )


def build_features(bank: MemoryBank, world: WorldGraph, step_cap: int = DEFAULT_STEP_CAP) -> TrajectoryGraph:
    if not bank.records:
        raise ValueError("cannot featurize an empty memory bank")
    node_ids = list(bank.nodes)
    index = {v: i for i, v in enumerate(node_ids)}
    origin = world.position(bank.records[0].viewpoint)
    pos = {v: world.position(v) - origin for v in node_ids}

    rows = []
    for v in node_ids:
        if bank.visit_count[v] > 0:
            last = bank.last_visit[v] / step_cap
            emb = world.embedding(v)
        else:
            last = UNVISITED
            seen_from = [u for u in bank.neighbors(v) if bank.visit_count.get(u, 0) > 0]
            emb = np.mean([world.slot_toward(u, v).feature for u in seen_from], axis=0)
        rows.append(np.concatenate([pos[v], [last], emb]))

    src, dst, attr = [], [], []
    for prev, rec in zip(bank.records, bank.records[1:]):
        if prev.viewpoint == rec.viewpoint:
            continue
        a, b = prev.viewpoint, rec.viewpoint
        src.append(index[a])
        dst.append(index[b])
        attr.append(np.concatenate([pos[b] - pos[a], [rec.t / step_cap, 0.0]]))
    for a, b in sorted(bank.edges):
        if bank.visit_count[a] > 0 and bank.visit_count[b] > 0:
            continue
        for u, v in ((a, b), (b, a)):
            src.append(index[u])
            dst.append(index[v])
            attr.append(np.concatenate([pos[v] - pos[u], [0.0, 1.0]]))
    return TrajectoryGraph(
        node_ids,
        np.asarray(rows, dtype=float).reshape(-1, NODE_DIM),
        np.asarray(src, dtype=int),
        np.asarray(dst, dtype=int),
        np.asarray(attr, dtype=float).reshape(-1, EDGE_DIM),
    )


class TrajectoryFeaturizer(TransformerMixin, BaseEstimator):
    """Transforms memory banks of one world into trajectory graphs."""

    def __init__(self, world=None, step_cap=DEFAULT_STEP_CAP):
        self.world = world
        self.step_cap = step_cap

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Iterable[MemoryBank]) -> list[TrajectoryGraph]:
        if self.world is None:
            raise ValueError("TrajectoryFeaturizer needs a world")
        return [build_features(bank, self.world, self.step_cap) for bank in X]


# ----------------------------------------------------------------------
# estimator
# ----------------------------------------------------------------------

def _scale_stats(mats: list[np.ndarray], dim: int) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.vstack([m.reshape(-1, dim) for m in mats]) if mats else np.zeros((0, dim))
    if len(stacked) == 0:
        return np.zeros(dim), np.ones(dim)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


class TrajectoryScorer(ClassifierMixin, BaseEstimator):
    """Binary trajectory classifier: 1 = navigation is going wrong.

    Node and edge features are standardized with statistics from the
    training split; the network is trained on binary cross-entropy with
    Adam and early stopping on the held-out split.
    """

    def __init__(self, hidden=32, max_epochs=200, learning_rate=0.01, patience=25,
                 validation_fraction=0.2, threshold=0.35, weight_decay=0.0, seed=0):
        self.hidden = hidden
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.weight_decay = weight_decay
        self.seed = seed

    def _check_hyper(self):
        check_positive_int(self.hidden, "hidden")
        check_positive_int(self.max_epochs, "max_epochs", minimum=0)
        check_positive_int(self.patience, "patience")
        check_positive_float(self.learning_rate, "learning_rate")
        check_open_unit(self.threshold, "threshold")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction!r}")

    def _split(self, y: np.ndarray, groups=None):
        n = len(y)
        if groups is not None:
            # snapshots of one episode stay on one side of the split
            if len(groups) != n:
                raise ValueError(f"{n} labels but {len(groups)} groups")
            if self.validation_fraction == 0:
                return np.arange(n), np.array([], dtype=int)
            splitter = GroupShuffleSplit(1, test_size=self.validation_fraction, random_state=self.seed)
            train, val = next(splitter.split(np.zeros(n), y, groups))
        else:
            idx = np.random.default_rng([self.seed, 7]).permutation(n)
            n_val = int(round(self.validation_fraction * n))
            if n_val == 0:
                return idx, np.array([], dtype=int)
            val, train = idx[:n_val], idx[n_val:]
        if len(np.unique(y[train])) < 2:
            raise ValueError("training split lost one of the labels; use more snapshots")
        return train, val

    def fit(self, X: Sequence[TrajectoryGraph], y, groups=None):
        """``groups`` (e.g. episode ids) keeps related snapshots out of the
        validation split used for early stopping."""
        self._check_hyper()
        y = check_binary_labels(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} graphs but {len(y)} labels")
        self.classes_ = np.array([0, 1])
        train, val = self._split(y, groups)
        self.node_scale_ = _scale_stats([X[i].x for i in train], NODE_DIM)
        self.edge_scale_ = _scale_stats([X[i].edge_attr for i in train], EDGE_DIM)
        tb = self._batch([X[i] for i in train])
        vb = self._batch([X[i] for i in val]) if len(val) else None
        y_tr, y_val = y[train], y[val]

        params = gat.init_params(NODE_DIM, EDGE_DIM, self.hidden, np.random.default_rng(self.seed))
        opt = Adam(params, lr=self.learning_rate, weight_decay=self.weight_decay)
        best = (np.inf, {k: v.copy() for k, v in params.items()}, 0)
        self.train_loss_, self.val_loss_ = [], []
        for epoch in range(self.max_epochs):
            loss, grads = gat.bce_loss_and_grad(params, tb, y_tr)
            if not np.isfinite(loss):
                raise FloatingPointError(f"scorer loss became non-finite at epoch {epoch}")
            opt.step(params, grads)
            self.train_loss_.append(loss)
            if vb is not None:
                vloss, _ = _loss_only(params, vb, y_val)
                self.val_loss_.append(vloss)
                if vloss < best[0] - 1e-6:
                    best = (vloss, {k: v.copy() for k, v in params.items()}, epoch)
                elif epoch - best[2] >= self.patience:
                    break
        if vb is not None:
            params = best[1]
        check_finite_params(params, "scorer parameters")
        self.params_ = params
        self.n_epochs_ = len(self.train_loss_)
        self.validation_auc_ = float("nan")
        if vb is not None and len(np.unique(y_val)) == 2:
            self.validation_auc_ = float(roc_auc_score(y_val, gat.sigmoid(gat.forward_logits(params, vb))))
        return self

    def _batch(self, graphs):
        return gat.make_batch(graphs, self.node_scale_, self.edge_scale_)

    def decision_function(self, X: Sequence[TrajectoryGraph]) -> np.ndarray:
        check_is_fitted(self, "params_")
        return gat.forward_logits(self.params_, self._batch(X))

    def predict_proba(self, X: Sequence[TrajectoryGraph]) -> np.ndarray:
        p = gat.sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X: Sequence[TrajectoryGraph]) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > self.threshold).astype(int)

    def score_graph(self, graph: TrajectoryGraph) -> float:
        return float(self.predict_proba([graph])[0, 1])

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        arrays = dict(self.params_)
        arrays["scale.node_mean"], arrays["scale.node_std"] = self.node_scale_
        arrays["scale.edge_mean"], arrays["scale.edge_std"] = self.edge_scale_
        write_checkpoint(path, SCORER_SCHEMA, arrays,
                         dims={"node": NODE_DIM, "edge": EDGE_DIM, "hidden": int(self.hidden)},
                         hyper=self.get_params(), validation_auc=self.validation_auc_)

    @classmethod
    def load(cls, path) -> "TrajectoryScorer":
        arrays, meta = read_checkpoint(path, SCORER_SCHEMA)
        dims = meta["dims"]
        est = cls(**meta.get("hyper", {}))
        est.node_scale_ = (arrays.pop("scale.node_mean"), arrays.pop("scale.node_std"))
        est.edge_scale_ = (arrays.pop("scale.edge_mean"), arrays.pop("scale.edge_std"))
        gat.check_shapes(arrays, dims["node"], dims["edge"])
        est.params_ = arrays
        est.classes_ = np.array([0, 1])
        est.validation_auc_ = meta.get("validation_auc", float("nan"))
        return est


def _loss_only(params, batch, labels):
    logits = gat.forward_logits(params, batch)
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits)), logits


def score(scorer: TrajectoryScorer, bank: MemoryBank, world: WorldGraph, step_cap: int = DEFAULT_STEP_CAP) -> float:
    return scorer.score_graph(build_features(bank, world, step_cap))


def train(snapshots: Sequence["LabeledSnapshot"], **hyper) -> TrajectoryScorer:
    return TrajectoryScorer(**hyper).fit([s.graph for s in snapshots], [s.label for s in snapshots],
                                         groups=[s.episode_id for s in snapshots])


# ----------------------------------------------------------------------
# self-supervised data
# ----------------------------------------------------------------------

def pseudo_label(trajectory: Sequence[str], gt_path: Sequence[str], success: bool) -> int:
    """0 (nominal) when the episode succeeded or every visited viewpoint lies
    on the ground-truth path; 1 otherwise."""
    if success or set(trajectory) <= set(gt_path):
        return 0
    return 1


@dataclass
class LabeledSnapshot:
    graph: TrajectoryGraph
    label: int
    episode_id: str
    t: int
    trajectory: list[str]
    gt_path: list[str]
    success: bool

    def to_dict(self) -> dict:
        return {
            "episode": self.episode_id, "t": self.t, "label": self.label, "success": self.success,
            "trajectory": self.trajectory, "gt_path": self.gt_path, "graph": self.graph.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledSnapshot":
        return cls(TrajectoryGraph.from_dict(d["graph"]), int(d["label"]), d["episode"], int(d["t"]),
                   list(d["trajectory"]), list(d["gt_path"]), bool(d["success"]))


def collect_snapshots(
    worlds: Sequence[WorldGraph],
    episodes: Sequence[Sequence[Episode]],
    policy: Policy,
    step_cap: int = DEFAULT_STEP_CAP,
    eval_worlds: Iterable[WorldGraph] = (),
) -> list[LabeledSnapshot]:
    """Roll the runner out alone and label one snapshot per timestep.

    ``episodes[i]`` belongs to ``worlds[i]``.  Passing ``eval_worlds``
    guards against leakage: any seed overlap raises.
    """
    leak = {w.seed for w in worlds} & {w.seed for w in eval_worlds}
    if leak:
        raise ValueError(f"training worlds overlap evaluation worlds: seeds {sorted(leak)}")
    out: list[LabeledSnapshot] = []
    for world, eps in zip(worlds, episodes, strict=True):
        for ep in eps:
            graphs, trajectories = [], []
            final = ep.start
            for bank in runner_rollout(world, ep, policy, step_cap):
                graphs.append(build_features(bank, world, step_cap))
                trajectories.append(bank.trajectory())
                final = bank.current
            success = geodesic(world, final, ep.goal)[0] < SUCCESS_RADIUS
            for t, (g, traj) in enumerate(zip(graphs, trajectories)):
                out.append(LabeledSnapshot(g, pseudo_label(traj, ep.gt_path, success), ep.id, t,
                                           traj, list(ep.gt_path), success))
    return out


def save_snapshots(snapshots: Sequence[LabeledSnapshot], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in snapshots:
            fh.write(json.dumps(s.to_dict()) + "\n")


def load_snapshots(path) -> list[LabeledSnapshot]:
    with Path(path).open(encoding="utf-8") as fh:
        return [LabeledSnapshot.from_dict(json.loads(line)) for line in fh if line.strip()]
