"""The full traversal-conditioned prediction model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import ParamStore
from .autodiff.tensor import Tensor
from .config import RunConfig
from .data import Batch
from .decoder import Z_DIM, TrajectoryDecoder, cluster_centers, regression_loss, total_loss
from .encoder import EncoderOutput, GraphEncoder
from .kmeans import KMeansResult, kmeans
from .policy import TraversalPolicy, bc_loss, rollout_masks, sample_rollouts
from .scene import FUTURE_STEPS
from .streams import name_key, stream

PARAM_STREAM = 1
NOISE_STREAM = 2
PREDICT_KEY = (0xFFFF, 0)
TRAINER_KEYS = ("adam.", "progress")  # optimizer and schedule state stored alongside the parameters


@dataclass
class PredictionSet:
    """K modes for one instance, ordered by cluster size (largest first)."""

    instance_id: str
    trajectories: np.ndarray  # (K, 12, 2), target frame
    cluster_sizes: np.ndarray  # (K,)
    n_samples: int
    collapsed: bool = False

    @property
    def weights(self) -> np.ndarray:
        return self.cluster_sizes / float(self.n_samples)

    def top(self, k: int) -> "PredictionSet":
        return PredictionSet(self.instance_id, self.trajectories[:k], self.cluster_sizes[:k], self.n_samples,
                             self.collapsed)


class ForwardOutput(NamedTuple):
    encodings: EncoderOutput
    probs: Tensor  # (B, N, D)
    samples: Tensor  # (B, S, 24)
    clusters: KMeansResult
    centers: Tensor  # (B, K, 24)
    rollouts: list[np.ndarray]  # per instance (S, max_steps), -1 padded


class Losses(NamedTuple):
    bc: Tensor
    reg: Tensor
    total: Tensor


class TraversalModel:
    """Graph encoder, traversal policy and trajectory decoder with shared parameters."""

    def __init__(self, config: RunConfig = RunConfig()):
        self.config = config
        self.store = ParamStore(stream(config.seed, PARAM_STREAM))
        scale = config.position_scale_m
        self.encoder = GraphEncoder(self.store, config.gnn.kind, config.gnn.depth, scale)
        self.policy = TraversalPolicy(self.store)
        self.decoder = TrajectoryDecoder(self.store, config.decoder_mode, scale)

    # noise ---------------------------------------------------------------

    def noise(self, instance_id: str, key: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rollout uniforms (S, max_steps), latents (S, 5) and k-means seeding draws (K,)."""
        cfg = self.config
        rng = stream(cfg.seed, NOISE_STREAM, *key, name_key(instance_id))
        uniforms = rng.random((cfg.rollout.samples, cfg.rollout.max_steps))
        z = rng.standard_normal((cfg.rollout.samples, Z_DIM))
        seeding = rng.random(cfg.num_modes)
        return uniforms, z, seeding

    # forward -------------------------------------------------------------

    def policy_probs(self, batch: Batch, enc: EncoderOutput | None = None) -> Tensor:
        enc = self.encoder(batch) if enc is None else enc
        scores = self.policy.edge_scores(enc.h_motion, enc.h_node, batch.out_idx, batch.out_onehot)
        return self.policy.probabilities(scores, batch.out_mask)

    def _rollout_contexts(self, batch: Batch, probs: np.ndarray, uniforms: np.ndarray, teacher_forcing: bool):
        B, N = batch.node_mask.shape
        S = self.config.rollout.samples
        max_steps = self.config.rollout.max_steps
        rollouts = []
        if self.decoder.mode == "lv_only":
            return batch.node_mask[:, None, :], np.zeros((B, S), dtype=np.int64), rollouts
        if teacher_forcing:
            masks = np.zeros((B, 1, N), dtype=bool)
            for b, inst in enumerate(batch.instances):
                masks[b, 0, list(inst.gt_visited)] = True
                seq = np.full((1, max_steps), -1, dtype=np.int64)
                seq[0, :min(max_steps, len(inst.gt_visited))] = inst.gt_visited[:max_steps]
                rollouts.append(np.repeat(seq, S, axis=0))
            return masks, np.zeros((B, S), dtype=np.int64), rollouts
        uniq, which = [], np.zeros((B, S), dtype=np.int64)
        for b in range(B):
            nodes, _ = sample_rollouts(probs[b], batch.out_idx[b], int(batch.start[b]), uniforms[b], N, max_steps)
            rollouts.append(nodes)
            u, inv = np.unique(rollout_masks(nodes, N), axis=0, return_inverse=True)
            uniq.append(u)
            which[b] = inv.reshape(-1)
        U = max(len(u) for u in uniq)
        masks = np.zeros((B, U, N), dtype=bool)
        for b, u in enumerate(uniq):
            masks[b, :len(u)] = u
        return masks, which, rollouts

    def forward(self, batch: Batch, teacher_forcing: bool, key: tuple[int, int]) -> ForwardOutput:
        enc = self.encoder(batch)
        probs = self.policy_probs(batch, enc)
        draws = [self.noise(inst.scene_id, key) for inst in batch.instances]
        uniforms = np.stack([d[0] for d in draws])
        z = np.stack([d[1] for d in draws])
        seeding = np.stack([d[2] for d in draws])
        masks, which, rollouts = self._rollout_contexts(batch, probs.data, uniforms, teacher_forcing)
        contexts = self.decoder.traversal_attention(enc.h_motion, enc.h_node, masks)
        samples = self.decoder.decode(enc.h_motion, contexts, which, z if self.decoder.uses_latent else None)
        clusters = kmeans(samples.data, self.config.num_modes, seeding)
        centers = cluster_centers(samples, clusters)
        return ForwardOutput(enc, probs, samples, clusters, centers, rollouts)

    def losses(self, batch: Batch, out: ForwardOutput) -> Losses:
        bc = bc_loss(out.probs, [inst.gt_slots for inst in batch.instances], include=~batch.off_map)
        reg = regression_loss(out.centers, batch.gt)
        return Losses(bc, reg, total_loss(bc, reg))

    def predict(self, batch: Batch, key: tuple[int, int] = PREDICT_KEY) -> list[PredictionSet]:
        with T.no_record():
            out = self.forward(batch, teacher_forcing=False, key=key)
        centers = out.clusters.centers.reshape(batch.size, -1, FUTURE_STEPS, 2)
        return [
            PredictionSet(inst.scene_id, centers[b].copy(), out.clusters.sizes[b].copy(),
                          self.config.rollout.samples, bool(out.clusters.collapsed[b]))
            for b, inst in enumerate(batch.instances)
        ]

    # parameters ----------------------------------------------------------

    def state(self):
        return self.store.state()

    def load_state(self, state) -> None:
        """Load parameters; tensors this architecture does not have are rejected by name."""
        extra = [k for k in state if k not in self.store.params and not k.startswith(TRAINER_KEYS)]
        if extra:
            raise KeyError(f"checkpoint tensor {extra[0]!r} does not belong to this model configuration")
        self.store.load_state(state)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.store]
