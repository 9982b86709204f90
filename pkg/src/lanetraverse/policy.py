"""Discrete traversal policy over lane-graph edges: scoring, behaviour cloning and rollouts."""

from __future__ import annotations

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import MLP, ParamStore
from .autodiff.tensor import ShapeError, Tensor
from .encoder import HIDDEN

EDGE_INPUT = 3 * HIDDEN + 2  # [h_motion | h_u | h_v | one-hot edge type]
PROB_FLOOR = 1e-12
MAX_STEPS = 12


class TraversalPolicy:
    """Scores each outgoing edge with a 98 -> 32 -> 32 -> 1 MLP; softmax per node.

    The END edge is scored with a zero destination encoding and an all-zero
    edge-type one-hot.
    """

    def __init__(self, store: ParamStore):
        self.mlp = MLP(store, "policy", [EDGE_INPUT, HIDDEN, HIDDEN, 1])

    def score_edge(self, edge_input: Tensor) -> Tensor:
        """Scores for concatenated edge inputs of shape (..., 98)."""
        edge_input = T.as_tensor(edge_input)
        if edge_input.shape[-1] != EDGE_INPUT:
            raise ShapeError(f"edge input must have length {EDGE_INPUT}, got shape {edge_input.shape}")
        out = self.mlp(edge_input)
        return T.reshape(out, out.shape[:-1])

    def edge_scores(self, h_motion: Tensor, h_node: Tensor, out_idx: np.ndarray, out_onehot: np.ndarray) -> Tensor:
        """Scores of every outgoing slot, (B, N, D).

        Same function as ``score_edge`` on the concatenated input, computed by
        splitting the first layer's weight into per-part blocks so the
        destination projection is gathered instead of recomputed per slot.
        ``out_idx`` points at index N (a zero row) for END and padding.
        """
        first = self.mlp.layers[0]
        w = first.w
        w_motion = T.getitem(w, slice(0, HIDDEN))
        w_src = T.getitem(w, slice(HIDDEN, 2 * HIDDEN))
        w_dst = T.getitem(w, slice(2 * HIDDEN, 3 * HIDDEN))
        w_type = T.getitem(w, slice(3 * HIDDEN, EDGE_INPUT))
        B, N = h_node.shape[:2]
        motion = T.reshape(T.matmul(h_motion, w_motion), (B, 1, 1, HIDDEN))
        src = T.reshape(T.matmul(h_node, w_src), (B, N, 1, HIDDEN))
        dst = T.matmul(h_node, w_dst)
        dst = T.concat([dst, Tensor(np.zeros((B, 1, HIDDEN)))], axis=1)  # END / padding row
        rows = np.arange(B)[:, None, None]
        dst = T.getitem(dst, (rows, np.asarray(out_idx)))
        typ = T.matmul(Tensor(np.asarray(out_onehot, dtype=np.float64)), w_type)
        x = T.leaky_relu(motion + src + dst + typ + first.b)
        for i, layer in enumerate(self.mlp.layers[1:], start=1):
            x = layer(x)
            if i < len(self.mlp.layers) - 1:
                x = T.leaky_relu(x)
        return T.reshape(x, x.shape[:-1])

    @staticmethod
    def probabilities(scores: Tensor, out_mask: np.ndarray) -> Tensor:
        """Softmax over each node's outgoing slots; padded slots get 0."""
        return T.softmax(scores, axis=-1, mask=out_mask)


def bc_loss(probs: Tensor, gt_slots, include=None) -> Tensor:
    """Mean over instances of the summed negative log-likelihood of the E_gt edges.

    ``gt_slots[b]`` is an (E, 2) array of (node, slot) rows. Instances with no
    edges (off-map ground truth) or with ``include[b]`` false contribute 0 and
    are left out of the mean.
    """
    bs, us, ss = [], [], []
    counted = 0
    for b, slots in enumerate(gt_slots):
        slots = np.asarray(slots, dtype=np.int64).reshape(-1, 2)
        if len(slots) == 0 or (include is not None and not include[b]):
            continue
        counted += 1
        bs.append(np.full(len(slots), b))
        us.append(slots[:, 0])
        ss.append(slots[:, 1])
    if not counted:
        return Tensor(0.0)
    picked = T.getitem(probs, (np.concatenate(bs), np.concatenate(us), np.concatenate(ss)))
    nll = T.sum_(T.log(picked, PROB_FLOOR)) * (-1.0)
    return nll * (1.0 / counted)


def sample_rollouts(probs: np.ndarray, dest: np.ndarray, start: int, uniforms: np.ndarray,
                    end_index: int, max_steps: int = MAX_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """Sample one rollout per row of ``uniforms`` (S, >= max_steps - 1).

    ``probs``/``dest`` are (N, D) tables of slot probabilities and destination
    nodes (``end_index`` marks END). Sampling stops at END, when ``max_steps``
    nodes have been visited, or when the sampled node was already visited.
    Returns (S, max_steps) node ids padded with -1 and the lengths.
    """
    S = len(uniforms)
    nodes = np.full((S, max_steps), -1, dtype=np.int64)
    nodes[:, 0] = start
    lengths = np.ones(S, dtype=np.int64)
    visited = np.zeros((S, end_index + 1), dtype=bool)
    visited[:, start] = True
    cur = np.full(S, start, dtype=np.int64)
    active = np.ones(S, dtype=bool)
    rows = np.arange(S)
    for step in range(1, max_steps):
        if not active.any():
            break
        p = probs[cur]
        c = np.cumsum(p, axis=1)
        thr = uniforms[:, step - 1] * c[:, -1]
        slot = np.minimum((c <= thr[:, None]).sum(axis=1), p.shape[1] - 1)
        nxt = dest[cur, slot]
        stop = (nxt == end_index) | visited[rows, np.minimum(nxt, end_index)]
        go = active & ~stop
        nodes[go, step] = nxt[go]
        lengths[go] += 1
        visited[rows[go], nxt[go]] = True
        cur = np.where(go, nxt, cur)
        active = go
    return nodes, lengths


def rollout_masks(nodes: np.ndarray, num_nodes: int) -> np.ndarray:
    """(S, num_nodes) membership of each rollout's node set."""
    masks = np.zeros((len(nodes), num_nodes + 1), dtype=bool)
    masks[np.arange(len(nodes))[:, None], np.where(nodes >= 0, nodes, num_nodes)] = True
    return masks[:, :num_nodes]


def gt_rollout(visited) -> list[int]:
    """Teacher-forcing rollout: the ground-truth visit sequence."""
    visited = list(visited)
    if not visited:
        raise ValueError("ground truth has no visited nodes (off-map); exclude the instance")
    return visited
