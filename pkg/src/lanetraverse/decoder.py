"""Trajectory decoder: rollout attention, latent-conditioned MLP and the WTA loss."""

from __future__ import annotations

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import Linear, ParamStore
from .autodiff.tensor import ShapeError, Tensor
from .encoder import HIDDEN, POSITION_SCALE
from .kmeans import KMeansResult
from .scene import FUTURE_STEPS
from .streams import ConfigurationError

DECODER_MODES = ("traversals+lv", "traversal_only", "lv_only")
HEADS = 32
HEAD_DIM = 4
CONTEXT = HEADS * HEAD_DIM  # 128
Z_DIM = 5
DECODER_HIDDEN = 128
OUTPUT = 2 * FUTURE_STEPS  # 24


def check_decoder_mode(mode: str) -> str:
    if mode not in DECODER_MODES:
        raise ConfigurationError(f"unknown decoder mode {mode!r}; expected one of {DECODER_MODES}")
    return mode


class TrajectoryDecoder:
    """Multi-head attention over rollout nodes followed by a one-hidden-layer MLP.

    ``traversal_only`` drops the latent input; ``lv_only`` is used with a
    whole-graph node mask instead of rollout masks.
    """

    def __init__(self, store: ParamStore, mode: str = "traversals+lv", position_scale: float = POSITION_SCALE):
        self.mode = check_decoder_mode(mode)
        self.uses_latent = mode != "traversal_only"
        self.position_scale = position_scale
        self.query = Linear(store, "dec.query", HIDDEN, CONTEXT)
        self.key = Linear(store, "dec.key", HIDDEN, CONTEXT)
        self.value = Linear(store, "dec.value", HIDDEN, CONTEXT)
        self.input_size = HIDDEN + CONTEXT + (Z_DIM if self.uses_latent else 0)
        self.hidden = Linear(store, "dec.hidden", self.input_size, DECODER_HIDDEN)
        self.out = Linear(store, "dec.out", DECODER_HIDDEN, OUTPUT)

    def traversal_attention(self, h_motion: Tensor, h_node: Tensor, node_masks: np.ndarray) -> Tensor:
        """Context vectors (B, U, 128) for U node-set masks (B, U, N) per instance."""
        B, N = h_node.shape[:2]
        U = node_masks.shape[1]
        q = T.reshape(self.query(h_motion), (B, HEADS, HEAD_DIM))
        k = T.swapaxes(T.reshape(self.key(h_node), (B, N, HEADS, HEAD_DIM)), 1, 2)
        v = T.swapaxes(T.reshape(self.value(h_node), (B, N, HEADS, HEAD_DIM)), 1, 2)
        out = T.subset_attention(q, k, v, node_masks)  # (B, U, H, d)
        return T.reshape(out, (B, U, CONTEXT))

    def decode(self, h_motion: Tensor, contexts: Tensor, which: np.ndarray, z: np.ndarray | None) -> Tensor:
        """Trajectories (B, S, 24) in metres for sample ``s`` using context ``which[b, s]``.

        The hidden layer is evaluated blockwise (motion, context, latent) so
        each distinct context is projected once.
        """
        w = self.hidden.w
        B = h_motion.shape[0]
        S = which.shape[1]
        motion = T.reshape(T.matmul(h_motion, T.getitem(w, slice(0, HIDDEN))), (B, 1, DECODER_HIDDEN))
        ctx = T.matmul(contexts, T.getitem(w, slice(HIDDEN, HIDDEN + CONTEXT)))
        ctx = T.getitem(ctx, (np.arange(B)[:, None], np.asarray(which)))
        pre = motion + ctx + self.hidden.b
        if self.uses_latent:
            if z is None or z.shape != (B, S, Z_DIM):
                raise ShapeError(f"latent samples must have shape {(B, S, Z_DIM)}")
            pre = pre + T.matmul(Tensor(z), T.getitem(w, slice(HIDDEN + CONTEXT, self.input_size)))
        return self.out(T.leaky_relu(pre)) * self.position_scale

    def decode_one(self, h_motion, context, z=None) -> Tensor:
        """Single trajectory (24,) from the concatenated decoder input."""
        parts = [T.as_tensor(h_motion), T.as_tensor(context)]
        if self.uses_latent:
            parts.append(T.as_tensor(z))
        x = T.concat(parts, axis=-1)
        if x.shape[-1] != self.input_size:
            raise ShapeError(f"decoder input must have length {self.input_size}, got {x.shape}")
        return self.out(T.leaky_relu(self.hidden(x))) * self.position_scale


def cluster_centers(samples: Tensor, clusters: KMeansResult) -> Tensor:
    """Cluster centers (B, K, 24) recomputed as the mean of member samples.

    Assignments are constants, so gradients reach each member equally.
    Empty (padding) clusters keep their stored center without a gradient.
    """
    labels = clusters.labels
    sizes = clusters.sizes
    B, K = sizes.shape
    member = (labels[:, None, :] == np.arange(K)[None, :, None]).astype(np.float64)
    weights = member / np.maximum(sizes, 1)[:, :, None]
    centers = T.matmul(Tensor(weights), samples)
    empty = sizes == 0
    if empty.any():
        centers = T.where(empty[:, :, None], Tensor(clusters.centers), centers)
    return centers


def regression_loss(modes: Tensor, ground_truth: np.ndarray) -> Tensor:
    """Winner-takes-all ADE averaged over instances.

    ``modes`` is (B, K, 24) or (B, K, 12, 2); ``ground_truth`` is (B, 12, 2).
    """
    modes = T.as_tensor(modes)
    B, K = modes.shape[:2]
    gt = np.asarray(ground_truth, dtype=np.float64)
    if gt.shape != (B, FUTURE_STEPS, 2):
        raise ShapeError(f"ground truth shape {gt.shape}, expected {(B, FUTURE_STEPS, 2)}")
    traj = T.reshape(modes, (B, K, FUTURE_STEPS, 2))
    err = T.norm(T.sub(traj, gt[:, None]), axis=-1)  # (B, K, 12)
    ade = T.mean(err, axis=-1)
    return T.mean(T.min_(ade, axis=-1))


def total_loss(bc: Tensor, reg: Tensor) -> Tensor:
    return T.add(bc, reg)
