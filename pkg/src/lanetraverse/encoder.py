"""Graph encoder: GRU sequence encoders, agent-node attention and GNN layers."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import GRU, Linear, ParamStore
from .autodiff.tensor import Tensor

HIDDEN = 32
EMBED = 16
GNN_KINDS = ("none", "gcn", "gat")
GAT_SLOPE = 0.2
POSITION_SCALE = 10.0  # network works in units of 10 m (and 10 m/s)


class EncoderOutput(NamedTuple):
    h_motion: Tensor  # (B, 32)
    h_agent: Tensor  # (B, A, 32)
    h_node: Tensor  # (B, N, 32)


def scale_motion(states: np.ndarray, scale: float = POSITION_SCALE) -> np.ndarray:
    """[x, y, v, a, omega, ped] rows with position and speed divided by ``scale``."""
    out = np.array(states, dtype=np.float64, copy=True)
    out[..., :3] /= scale
    return out


def scale_poses(poses: np.ndarray, scale: float = POSITION_SCALE) -> np.ndarray:
    out = np.array(poses, dtype=np.float64, copy=True)
    out[..., :2] /= scale
    return out


def gcn_propagation(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric normalisation D^-1/2 A D^-1/2 of an adjacency that already has self loops."""
    a = adjacency.astype(np.float64)
    deg = a.sum(axis=-1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    return a * inv[..., :, None] * inv[..., None, :]


class GraphEncoder:
    """Encodes the target history, surrounding agents and lane nodes.

    Each input step goes through a size-16 linear embedding with leaky ReLU
    and then a GRU with a 32-d hidden state. Node encodings are updated by a
    single-head attention over nearby agents and then ``gnn_depth`` layers
    of GCN or GAT propagation over the symmetrised graph with self loops.
    """

    def __init__(self, store: ParamStore, gnn_kind: str = "gat", gnn_depth: int = 2,
                 position_scale: float = POSITION_SCALE):
        if gnn_kind not in GNN_KINDS:
            raise ValueError(f"unknown gnn kind {gnn_kind!r}; expected one of {GNN_KINDS}")
        if gnn_depth not in (0, 1, 2):
            raise ValueError(f"gnn depth must be 0, 1 or 2, got {gnn_depth}")
        if gnn_kind == "none":
            gnn_depth = 0
        self.gnn_kind = gnn_kind
        self.gnn_depth = gnn_depth
        self.position_scale = position_scale
        self.target_embed = Linear(store, "enc.target_embed", 6, EMBED)
        self.target_gru = GRU(store, "enc.target_gru", EMBED, HIDDEN)
        self.agent_embed = Linear(store, "enc.agent_embed", 6, EMBED)
        self.agent_gru = GRU(store, "enc.agent_gru", EMBED, HIDDEN)
        self.node_embed = Linear(store, "enc.node_embed", 5, EMBED)
        self.node_gru = GRU(store, "enc.node_gru", EMBED, HIDDEN)
        self.att_query = Linear(store, "enc.an_query", HIDDEN, HIDDEN)
        self.att_key = Linear(store, "enc.an_key", HIDDEN, HIDDEN)
        self.att_value = Linear(store, "enc.an_value", HIDDEN, HIDDEN)
        self.att_out = Linear(store, "enc.an_out", 2 * HIDDEN, HIDDEN)
        self.gnn_weights = [store.uniform(f"enc.gnn{i}.w", (HIDDEN, HIDDEN), HIDDEN) for i in range(gnn_depth)]
        if gnn_kind == "gat":
            self.gat_src = [store.uniform(f"enc.gnn{i}.a_src", (HIDDEN, 1), HIDDEN) for i in range(gnn_depth)]
            self.gat_dst = [store.uniform(f"enc.gnn{i}.a_dst", (HIDDEN, 1), HIDDEN) for i in range(gnn_depth)]

    def encode_sequences(self, target, target_mask, agents, agent_mask, node_feats, pose_mask):
        s = self.position_scale
        tgt = T.leaky_relu(self.target_embed(Tensor(scale_motion(target, s))))
        h_motion = self.target_gru(tgt, np.asarray(target_mask, dtype=bool))
        agt = T.leaky_relu(self.agent_embed(Tensor(scale_motion(agents, s))))
        h_agent = self.agent_gru(agt, np.asarray(agent_mask, dtype=bool))
        nod = T.leaky_relu(self.node_embed(Tensor(scale_poses(node_feats, s))))
        h_node = self.node_gru(nod, np.asarray(pose_mask, dtype=bool))
        return h_motion, h_agent, h_node

    def agent_node_attention(self, h_node: Tensor, h_agent: Tensor, agent_node: np.ndarray) -> Tensor:
        """``agent_node`` (..., N, A) marks the agents each node may attend to."""
        q = self.att_query(h_node)
        k = self.att_key(h_agent)
        v = self.att_value(h_agent)
        att = T.scaled_dot_product_attention(q, k, v, agent_node)
        return T.leaky_relu(self.att_out(T.concat([h_node, att], axis=-1)))

    def gnn(self, h_node: Tensor, adjacency: np.ndarray) -> Tensor:
        adj = np.asarray(adjacency, dtype=bool)
        if self.gnn_kind == "gcn":
            prop = Tensor(gcn_propagation(adj))
            for w in self.gnn_weights:
                h_node = T.leaky_relu(T.matmul(prop, T.matmul(h_node, w)))
        elif self.gnn_kind == "gat":
            for w, a_src, a_dst in zip(self.gnn_weights, self.gat_src, self.gat_dst):
                wh = T.matmul(h_node, w)
                logits = T.add(T.matmul(wh, a_src), T.swapaxes(T.matmul(wh, a_dst), -1, -2))
                alpha = T.softmax(T.leaky_relu(logits, GAT_SLOPE), axis=-1, mask=adj)
                h_node = T.leaky_relu(T.matmul(alpha, wh))
        return h_node

    def __call__(self, batch) -> EncoderOutput:
        h_motion, h_agent, h_node = self.encode_sequences(
            batch.target, batch.target_mask, batch.agents, batch.agent_mask, batch.node_feats, batch.pose_mask)
        h_node = self.agent_node_attention(h_node, h_agent, batch.agent_node)
        h_node = self.gnn(h_node, batch.adjacency)
        return EncoderOutput(h_motion, h_agent, h_node)
