"""Scene featurization and fixed-shape batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .lane_graph import (
    END,
    GT_RADIUS_M,
    GT_YAW,
    MAX_POSES,
    PROX_DIST_M,
    PROX_YAW,
    PROXIMAL,
    SUCCESSOR,
    LaneGraph,
    VectorMap,
    assign_gt_traversal,
    build_lane_graph,
    load_map,
    start_node,
)
from .scene import HISTORY_STEPS, SceneFrame, load_scene, stack_tracks, to_target_frame

AGENT_NODE_M = 10.0


@dataclass
class Instance:
    """A prediction instance in the target frame, with graph and model inputs."""

    scene: SceneFrame  # target frame
    vmap: VectorMap  # target frame
    graph: LaneGraph
    start: int
    gt_visited: tuple[int, ...]
    gt_edges: tuple[tuple[int, int], ...]  # (u, v) with v == END for the terminal edge
    off_map: bool
    target: np.ndarray  # (T, 6)
    target_mask: np.ndarray  # (T,)
    agents: np.ndarray  # (A, T, 6)
    agent_mask: np.ndarray  # (A, T)
    node_feats: np.ndarray  # (N, P, 5)
    pose_mask: np.ndarray  # (N, P)
    agent_node: np.ndarray  # (N, A) bool
    adjacency: np.ndarray  # (N, N) bool, symmetric, self loops
    out_idx: np.ndarray  # (N, D) destination node or END
    out_type: np.ndarray  # (N, D) SUCCESSOR / PROXIMAL / -1 for END and padding
    out_mask: np.ndarray  # (N, D) bool
    gt_slots: np.ndarray  # (E, 2) rows (u, slot) of E_gt in the outgoing table

    @property
    def scene_id(self) -> str:
        return self.scene.scene_id

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


def node_features(graph: LaneGraph) -> tuple[np.ndarray, np.ndarray]:
    """Poses padded to 20 by repeating the last pose, with a validity mask."""
    n = graph.num_nodes
    feats = np.zeros((n, MAX_POSES, 5))
    mask = np.zeros((n, MAX_POSES), dtype=bool)
    for node in graph.nodes:
        k = len(node.poses)
        feats[node.node_id, :k] = node.poses
        feats[node.node_id, k:] = node.poses[-1]
        mask[node.node_id, :k] = True
    return feats, mask


def agent_node_mask(node_feats: np.ndarray, pose_mask: np.ndarray, agent_xy: np.ndarray, thresh: float) -> np.ndarray:
    """Agents whose current position lies within ``thresh`` of any valid pose of a node."""
    if len(agent_xy) == 0:
        return np.zeros((len(node_feats), 0), dtype=bool)
    d = np.linalg.norm(node_feats[:, :, None, :2] - agent_xy[None, None, :, :], axis=-1)
    d = np.where(pose_mask[:, :, None], d, np.inf)
    return d.min(axis=1) <= thresh


def outgoing_table(graph: LaneGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = graph.num_nodes
    width = max(len(e) for e in graph.out_edges)
    idx = np.full((n, width), END, dtype=np.int64)
    typ = np.full((n, width), -1, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for u, outs in enumerate(graph.out_edges):
        for d, (v, t) in enumerate(outs):
            idx[u, d] = v
            typ[u, d] = t
            mask[u, d] = True
    return idx, typ, mask


def adjacency(graph: LaneGraph) -> np.ndarray:
    n = graph.num_nodes
    adj = np.eye(n, dtype=bool)
    for u, v in graph.edges:
        adj[u, v] = adj[v, u] = True
    return adj


def featurize(scene: SceneFrame, vmap: VectorMap, agent_node_m: float = AGENT_NODE_M,
              prox_dist: float = PROX_DIST_M, prox_yaw: float = PROX_YAW,
              gt_radius: float = GT_RADIUS_M, gt_yaw: float = GT_YAW) -> Instance:
    """Move ``scene`` (any frame, with ``vmap`` in world coordinates) into the target frame and build inputs."""
    local = to_target_frame(scene)
    x, y, yaw = local.pose
    vm = vmap.transformed((x, y), yaw)
    graph = build_lane_graph(vm, prox_dist, prox_yaw)
    start = start_node(graph, (0.0, 0.0), 0.0, gt_yaw)
    trav = assign_gt_traversal(graph, local.ground_truth, gt_yaw, gt_radius, strict=False)
    if not trav.off_map and trav.visited[0] != start:
        raise AssertionError("traversal must begin at the start node")
    feats, pmask = node_features(graph)
    agents, amask = stack_tracks(local.others)
    an = agent_node_mask(feats, pmask, agents[:, -1, :2] if len(agents) else np.zeros((0, 2)), agent_node_m)
    oi, ot, om = outgoing_table(graph)
    slots = []
    for u, v in trav.edges:
        row = np.flatnonzero(oi[u] == v)
        slots.append((u, int(row[0])))
    return Instance(
        scene=local, vmap=vm, graph=graph, start=start,
        gt_visited=trav.visited, gt_edges=trav.edges, off_map=trav.off_map,
        target=local.target.states, target_mask=local.target.valid_mask.astype(bool),
        agents=agents, agent_mask=amask.astype(bool),
        node_feats=feats, pose_mask=pmask, agent_node=an, adjacency=adjacency(graph),
        out_idx=oi, out_type=ot, out_mask=om,
        gt_slots=np.array(slots, dtype=np.int64).reshape(-1, 2),
    )


@dataclass
class Batch:
    """Padded arrays for B instances; padded nodes/agents/slots are masked out."""

    instances: list[Instance]
    target: np.ndarray  # (B, T, 6)
    target_mask: np.ndarray  # (B, T)
    agents: np.ndarray  # (B, A, T, 6)
    agent_mask: np.ndarray  # (B, A, T)
    node_feats: np.ndarray  # (B, N, P, 5)
    pose_mask: np.ndarray  # (B, N, P)
    node_mask: np.ndarray  # (B, N)
    agent_node: np.ndarray  # (B, N, A)
    adjacency: np.ndarray  # (B, N, N)
    out_idx: np.ndarray  # (B, N, D); END and padding point at index N (a zero row)
    out_onehot: np.ndarray  # (B, N, D, 2)
    out_mask: np.ndarray  # (B, N, D)
    start: np.ndarray  # (B,)
    gt: np.ndarray  # (B, 12, 2)
    off_map: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def max_nodes(self) -> int:
        return self.node_feats.shape[1]


def collate(instances: Sequence[Instance]) -> Batch:
    B = len(instances)
    T = HISTORY_STEPS + 1
    N = max(i.num_nodes for i in instances)
    A = max(1, max(len(i.agents) for i in instances))
    D = max(i.out_idx.shape[1] for i in instances)
    agents = np.zeros((B, A, T, 6))
    amask = np.zeros((B, A, T), dtype=bool)
    feats = np.zeros((B, N, MAX_POSES, 5))
    pmask = np.zeros((B, N, MAX_POSES), dtype=bool)
    nmask = np.zeros((B, N), dtype=bool)
    an = np.zeros((B, N, A), dtype=bool)
    adj = np.zeros((B, N, N), dtype=bool)
    oi = np.full((B, N, D), N, dtype=np.int64)
    onehot = np.zeros((B, N, D, 2))
    om = np.zeros((B, N, D), dtype=bool)
    for b, inst in enumerate(instances):
        n, a, d = inst.num_nodes, len(inst.agents), inst.out_idx.shape[1]
        agents[b, :a] = inst.agents
        amask[b, :a] = inst.agent_mask
        feats[b, :n] = inst.node_feats
        pmask[b, :n] = inst.pose_mask
        nmask[b, :n] = True
        an[b, :n, :a] = inst.agent_node
        adj[b, :n, :n] = inst.adjacency
        adj[b, np.arange(n, N), np.arange(n, N)] = True  # padded nodes only see themselves
        oi[b, :n, :d] = np.where(inst.out_idx == END, N, inst.out_idx)
        for t in (SUCCESSOR, PROXIMAL):
            onehot[b, :n, :d, t] = inst.out_type == t
        om[b, :n, :d] = inst.out_mask
    return Batch(
        instances=list(instances),
        target=np.stack([i.target for i in instances]),
        target_mask=np.stack([i.target_mask for i in instances]),
        agents=agents, agent_mask=amask, node_feats=feats, pose_mask=pmask, node_mask=nmask,
        agent_node=an, adjacency=adj, out_idx=oi, out_onehot=onehot, out_mask=om,
        start=np.array([i.start for i in instances], dtype=np.int64),
        gt=np.stack([i.scene.ground_truth for i in instances]),
        off_map=np.array([i.off_map for i in instances], dtype=bool),
    )


# corpus on disk -------------------------------------------------------------


def read_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def load_instance(root: str | Path, scene_id: str, **thresholds) -> Instance:
    root = Path(root)
    scene = load_scene(root / "scenes" / f"{scene_id}.json")
    vmap = load_map(root / "maps" / f"{scene.map_ref}.json")
    return featurize(scene, vmap, **thresholds)


def load_split(root: str | Path, split: str, **thresholds) -> list[Instance]:
    ids = read_manifest(root)["splits"][split]
    return [load_instance(root, sid, **thresholds) for sid in ids]


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
