"""Two-layer graph attention network with edge encodings, in plain numpy.

Layer, per directed edge j -> i with edge feature f_ij::

    z = h W,   g_ij = f_ij W_e
    e_ij = LeakyReLU(a_dst . z_i + a_src . z_j + a_edge . g_ij)
    alpha_ij = softmax of e_ij over the in-edges of i (self loop included)
    h'_i = ELU(sum_j alpha_ij (z_j + g_ij))

Readout is a mean over the nodes of each graph followed by a linear unit;
the sigmoid of its output is the anomaly probability.  Graphs are batched
as a disjoint union so one pass handles a whole training set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

LEAKY_SLOPE = 0.2
N_LAYERS = 2


@dataclass
class GraphBatch:
    x: np.ndarray          # (N, node_dim)
    src: np.ndarray        # (E,) self loops included; edges sorted by dst
    dst: np.ndarray        # (E,)
    edge_attr: np.ndarray  # (E, edge_dim)
    node_graph: np.ndarray  # (N,) graph index of each node
    n_graphs: int

    def __post_init__(self):
        order = np.argsort(self.dst, kind="stable")
        self.src, self.dst, self.edge_attr = self.src[order], self.dst[order], self.edge_attr[order]
        n, e = len(self.x), len(self.dst)
        ones = np.ones(e)
        # incidence matrices turn segment sums into sparse products
        self.to_dst = sparse.csr_matrix((ones, (self.dst, np.arange(e))), shape=(n, e))
        self.to_src = sparse.csr_matrix((ones, (self.src, np.arange(e))), shape=(n, e))
        self.to_graph = sparse.csr_matrix(
            (np.ones(n), (self.node_graph, np.arange(n))), shape=(self.n_graphs, n))
        self.dst_starts = np.flatnonzero(np.r_[True, self.dst[1:] != self.dst[:-1]])
        if len(self.dst_starts) != n:
            raise ValueError("every node needs at least one in-edge (its self loop)")

    @property
    def n_nodes(self) -> int:
        return len(self.x)


def make_batch(graphs: Sequence, node_scale=None, edge_scale=None) -> GraphBatch:
    """Disjoint union of TrajectoryGraphs, with a self loop on every node.

    ``node_scale``/``edge_scale`` are optional ``(mean, std)`` pairs applied
    to the raw features before batching.
    """
    xs, srcs, dsts, eas, owners = [], [], [], [], []
    offset = 0
    edge_dim = None
    for gi, g in enumerate(graphs):
        n = len(g.x)
        if n == 0:
            raise ValueError(f"graph {gi} has no nodes")
        x = g.x if node_scale is None else (g.x - node_scale[0]) / node_scale[1]
        ea = g.edge_attr if edge_scale is None else (g.edge_attr - edge_scale[0]) / edge_scale[1]
        edge_dim = g.edge_attr.shape[1]
        loops = np.arange(n)
        xs.append(x)
        srcs.append(np.concatenate([g.src, loops]) + offset)
        dsts.append(np.concatenate([g.dst, loops]) + offset)
        eas.append(np.vstack([ea.reshape(-1, edge_dim), np.zeros((n, edge_dim))]))
        owners.append(np.full(n, gi))
        offset += n
    if not xs:
        raise ValueError("empty graph batch")
    return GraphBatch(
        x=np.vstack(xs),
        src=np.concatenate(srcs).astype(int),
        dst=np.concatenate(dsts).astype(int),
        edge_attr=np.vstack(eas),
        node_graph=np.concatenate(owners).astype(int),
        n_graphs=len(xs),
    )


def init_params(node_dim: int, edge_dim: int, hidden: int = 32,
                rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {}
    d_in = node_dim
    for layer in range(1, N_LAYERS + 1):
        params[f"gat{layer}.W"] = rng.normal(scale=np.sqrt(1.0 / d_in), size=(d_in, hidden))
        params[f"gat{layer}.We"] = rng.normal(scale=np.sqrt(1.0 / edge_dim), size=(edge_dim, hidden))
        params[f"gat{layer}.a"] = rng.normal(scale=np.sqrt(1.0 / hidden), size=3 * hidden)
        d_in = hidden
    params["readout.w"] = rng.normal(scale=np.sqrt(1.0 / hidden), size=hidden)
    params["readout.b"] = np.zeros(())
    return params


def zero_params(node_dim: int, edge_dim: int, hidden: int = 32) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in init_params(node_dim, edge_dim, hidden).items()}


def check_shapes(params: dict[str, np.ndarray], node_dim: int, edge_dim: int) -> None:
    d_in = node_dim
    for layer in range(1, N_LAYERS + 1):
        W, We, a = (params[f"gat{layer}.{k}"] for k in ("W", "We", "a"))
        hidden = W.shape[1]
        if W.shape != (d_in, hidden) or We.shape != (edge_dim, hidden) or a.shape != (3 * hidden,):
            raise ValueError(
                f"layer {layer}: shapes W{W.shape} We{We.shape} a{a.shape} do not match "
                f"input dim {d_in} and edge dim {edge_dim}"
            )
        d_in = hidden
    if params["readout.w"].shape != (d_in,):
        raise ValueError(f"readout.w has shape {params['readout.w'].shape}, expected ({d_in},)")


def _layer_forward(h, W, We, a, b: GraphBatch):
    H = W.shape[1]
    z = h @ W
    g = b.edge_attr @ We
    s = z[b.dst] @ a[:H] + z[b.src] @ a[H:2 * H] + g @ a[2 * H:]
    logit = np.where(s > 0, s, LEAKY_SLOPE * s)
    top = np.maximum.reduceat(logit, b.dst_starts)
    ex = np.exp(logit - top[b.dst])
    alpha = ex / (b.to_dst @ ex)[b.dst]
    msg = z[b.src] + g
    m = b.to_dst @ (alpha[:, None] * msg)
    out = np.where(m > 0, m, np.expm1(np.minimum(m, 0.0)))
    return out, (h, z, g, s, alpha, msg, m)


def _layer_backward(dout, W, We, a, b: GraphBatch, cache):
    h, z, g, s, alpha, msg, m = cache
    H = W.shape[1]
    dm = dout * np.where(m > 0, 1.0, np.exp(np.minimum(m, 0.0)))
    dm_dst = dm[b.dst]
    dalpha = np.einsum("eh,eh->e", dm_dst, msg)
    dmsg = alpha[:, None] * dm_dst
    dl = alpha * (dalpha - (b.to_dst @ (alpha * dalpha))[b.dst])
    ds = dl * np.where(s > 0, 1.0, LEAKY_SLOPE)
    z_dst, z_src = z[b.dst], z[b.src]
    da = np.concatenate([ds @ z_dst, ds @ z_src, ds @ g])
    dz = np.outer(b.to_dst @ ds, a[:H]) + np.outer(b.to_src @ ds, a[H:2 * H]) + b.to_src @ dmsg
    dg = np.outer(ds, a[2 * H:]) + dmsg
    return dz @ W.T, {"W": h.T @ dz, "We": b.edge_attr.T @ dg, "a": da}


def forward_logits(params: dict[str, np.ndarray], batch: GraphBatch, return_cache: bool = False):
    h = batch.x
    caches = []
    for layer in range(1, N_LAYERS + 1):
        h, cache = _layer_forward(h, params[f"gat{layer}.W"], params[f"gat{layer}.We"], params[f"gat{layer}.a"], batch)
        caches.append(cache)
    counts = np.bincount(batch.node_graph, minlength=batch.n_graphs).astype(float)
    pooled = (batch.to_graph @ h) / counts[:, None]
    logits = pooled @ params["readout.w"] + params["readout.b"]
    if return_cache:
        return logits, (caches, pooled, counts)
    return logits


def backward(params, batch: GraphBatch, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    caches, pooled, counts = cache
    grads = {"readout.w": pooled.T @ dlogits, "readout.b": np.asarray(dlogits.sum())}
    dpooled = np.outer(dlogits, params["readout.w"])
    dh = dpooled[batch.node_graph] / counts[batch.node_graph, None]
    for layer in range(N_LAYERS, 0, -1):
        W, We, a = params[f"gat{layer}.W"], params[f"gat{layer}.We"], params[f"gat{layer}.a"]
        dh, g = _layer_backward(dh, W, We, a, batch, caches[layer - 1])
        for k, v in g.items():
            grads[f"gat{layer}.{k}"] = v
    return grads


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def bce_loss_and_grad(params, batch: GraphBatch, labels: np.ndarray, sample_weight=None):
    """Mean binary cross-entropy on logits, and its gradient for every parameter."""
    logits, cache = forward_logits(params, batch, return_cache=True)
    w = np.ones_like(logits) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    total = w.sum()
    loss = float(np.sum(w * (np.logaddexp(0.0, logits) - labels * logits)) / total)
    dlogits = w * (sigmoid(logits) - labels) / total
    return loss, backward(params, batch, cache, dlogits)


def forward(params: dict[str, np.ndarray], graph) -> float:
    """Anomaly probability for a single graph."""
    return float(sigmoid(forward_logits(params, make_batch([graph]))[0]))
