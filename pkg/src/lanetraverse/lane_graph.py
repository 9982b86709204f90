"""Directed lane graph over lane-centerline snippets.

Nodes are <= 20 m snippets of lane centerlines resampled at 1 m. Successor
edges follow legal traffic flow (including branches and merges); proximal
edges join neighbouring, similarly oriented snippets of different lanes and
model lane changes. Every node additionally owns an edge to the END state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box

from . import geometry as geo

END = -1
SUCCESSOR, PROXIMAL = 0, 1

CROP_X = (-20.0, 80.0)  # longitudinal, target frame
CROP_Y = (-50.0, 50.0)  # lateral
MAX_SNIPPET_M = 20.0
POSE_SPACING_M = 1.0
MAX_POSES = 20

PROX_DIST_M = 4.5
PROX_YAW = math.pi / 4
GT_RADIUS_M = 3.0
GT_YAW = math.pi / 4
GT_DENSIFY_M = 0.5


class EmptyMapError(ValueError):
    """No lane survives cropping; the instance is skipped."""


class MapConsistencyError(ValueError):
    """A lane names a successor that the map does not contain."""


class OffMapGroundTruthError(ValueError):
    """Ground truth cannot be matched to a connected node sequence."""


# vector maps --------------------------------------------------------------


@dataclass(frozen=True)
class Lane:
    id: str
    centerline: np.ndarray
    successors: tuple[str, ...] = ()
    width: float = 3.5


@dataclass(frozen=True)
class VectorMap:
    lanes: tuple[Lane, ...]
    stop_lines: tuple[np.ndarray, ...] = ()
    crosswalks: tuple[np.ndarray, ...] = ()
    map_id: str = ""

    def lane(self, lane_id: str) -> Lane:
        for ln in self.lanes:
            if ln.id == lane_id:
                return ln
        raise KeyError(lane_id)

    def check_consistency(self) -> None:
        ids = {ln.id for ln in self.lanes}
        for ln in self.lanes:
            for s in ln.successors:
                if s not in ids:
                    raise MapConsistencyError(f"lane {ln.id!r} has dangling successor {s!r}")

    def transformed(self, origin, heading: float) -> "VectorMap":
        """Map re-expressed in the frame at ``origin`` with x along ``heading``."""
        return VectorMap(
            tuple(Lane(ln.id, geo.to_frame(ln.centerline, origin, heading), ln.successors, ln.width) for ln in self.lanes),
            tuple(geo.to_frame(p, origin, heading) for p in self.stop_lines),
            tuple(geo.to_frame(p, origin, heading) for p in self.crosswalks),
            self.map_id,
        )

    def to_dict(self) -> dict:
        return {
            "map_id": self.map_id,
            "lanes": [
                {"id": ln.id, "centerline": np.round(ln.centerline, 6).tolist(), "successors": list(ln.successors), "width": ln.width}
                for ln in self.lanes
            ],
            "stop_lines": [np.round(p, 6).tolist() for p in self.stop_lines],
            "crosswalks": [np.round(p, 6).tolist() for p in self.crosswalks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VectorMap":
        lanes = tuple(
            Lane(str(ln["id"]), np.asarray(ln["centerline"], dtype=float), tuple(str(s) for s in ln.get("successors", ())),
                 float(ln.get("width", 3.5)))
            for ln in d["lanes"]
        )
        return cls(
            lanes,
            tuple(np.asarray(p, dtype=float) for p in d.get("stop_lines", ())),
            tuple(np.asarray(p, dtype=float) for p in d.get("crosswalks", ())),
            str(d.get("map_id", "")),
        )


def save_map(path: str | Path, vmap: VectorMap) -> None:
    Path(path).write_text(json.dumps(vmap.to_dict(), sort_keys=True))


def load_map(path: str | Path) -> VectorMap:
    return VectorMap.from_dict(json.loads(Path(path).read_text()))


# graph types --------------------------------------------------------------


@dataclass(frozen=True)
class LaneNode:
    """A lane snippet.

    ``poses`` rows are [x, y, theta, on_stop_line, on_crosswalk]; ``extent`` is
    the snippet polyline from its first pose to where the next snippet starts.
    """

    node_id: int
    parent_lane_id: str
    poses: np.ndarray
    extent: np.ndarray
    width: float = 3.5

    @property
    def mean_heading(self) -> float:
        return geo.circular_mean(self.poses[:, 2])


@dataclass
class LaneGraph:
    nodes: list[LaneNode]
    suc_edges: set[tuple[int, int]]
    prox_edges: set[tuple[int, int]]
    out_edges: list[list[tuple[int, int]]] = field(default_factory=list)  # per node: (dest, type); END last

    def __post_init__(self):
        if not self.out_edges:
            self.out_edges = _outgoing(len(self.nodes), self.suc_edges, self.prox_edges)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> set[tuple[int, int]]:
        return self.suc_edges | self.prox_edges

    def successors(self, u: int) -> list[int]:
        return [v for v, t in self.out_edges[u] if t == SUCCESSOR]

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": n.node_id, "lane": n.parent_lane_id, "poses": np.round(n.poses, 9).tolist()} for n in self.nodes
            ],
            "suc_edges": sorted(map(list, self.suc_edges)),
            "prox_edges": sorted(map(list, self.prox_edges)),
        }


def _outgoing(n: int, suc: set, prox: set) -> list[list[tuple[int, int]]]:
    out: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for u, v in sorted(suc):
        out[u].append((v, SUCCESSOR))
    for u, v in sorted(prox):
        out[u].append((v, PROXIMAL))
    for u in range(n):
        out[u].append((END, -1))
    return out


# construction -------------------------------------------------------------


@dataclass(frozen=True)
class LanePiece:
    """A cropped lane polyline. ``clipped_start``/``clipped_end`` mark box cuts."""

    lane_id: str
    polyline: np.ndarray
    width: float
    clipped_start: bool
    clipped_end: bool


def crop_map(vmap: VectorMap, x_range=CROP_X, y_range=CROP_Y) -> list[LanePiece]:
    """Clip lane centerlines (already in the target frame) to the area of interest."""
    area = box(x_range[0], y_range[0], x_range[1], y_range[1])
    pieces: list[LanePiece] = []
    for ln in vmap.lanes:
        poly = geo.dedupe(ln.centerline)
        if len(poly) < 2:
            continue
        line = LineString(poly)
        clipped = line.intersection(area)
        if clipped.is_empty:
            continue
        parts = [g for g in getattr(clipped, "geoms", [clipped]) if g.geom_type == "LineString" and g.length > 1e-9]
        keyed = []
        for g in parts:
            c = np.asarray(g.coords, dtype=float)
            s0, s1 = line.project(shapely.Point(c[0])), line.project(shapely.Point(c[-1]))
            if s1 < s0:
                c, s0, s1 = c[::-1], s1, s0
            keyed.append((s0, s1, geo.dedupe(c)))
        keyed.sort(key=lambda k: k[0])
        total = line.length
        for s0, s1, c in keyed:
            if len(c) < 2:
                continue
            pieces.append(LanePiece(ln.id, c, ln.width, s0 > 1e-6, s1 < total - 1e-6))
    if not pieces:
        raise EmptyMapError(f"map {vmap.map_id!r}: no lane inside the area of interest")
    return pieces


def split_and_discretize(polyline: np.ndarray, max_len: float = MAX_SNIPPET_M, spacing: float = POSE_SPACING_M):
    """Split into near-equal snippets <= ``max_len`` and resample each at ``spacing``.

    Returns a list of ``(poses_xy_theta, extent)`` per snippet; consecutive
    snippets are chained by successor edges by the caller.
    """
    poly = geo.dedupe(polyline)
    cum = geo.arclength(poly)
    total = cum[-1]
    if total <= 0:
        raise ValueError("polyline has zero length")
    n = max(1, math.ceil(total / max_len - 1e-9))
    step = total / n
    out = []
    for i in range(n):
        s0, s1 = i * step, (i + 1) * step if i < n - 1 else total
        count = max(1, math.ceil((s1 - s0) / spacing - 1e-9))
        s = s0 + spacing * np.arange(count)
        xy = geo.interpolate(poly, s)
        th = geo.wrap_angle(geo.tangent_heading(poly, s))
        inner = cum[(cum > s0 + 1e-9) & (cum < s1 - 1e-9)]
        ext_s = np.unique(np.concatenate([s, inner, [s1]]))
        out.append((np.column_stack([xy, th]), geo.interpolate(poly, ext_s)))
    return out


def _flags(xy: np.ndarray, polygons: Sequence[np.ndarray]) -> np.ndarray:
    hit = np.zeros(len(xy), dtype=bool)
    for p in polygons:
        if len(p) >= 3:
            hit |= shapely.intersects_xy(Polygon(p), xy[:, 0], xy[:, 1])
    return hit.astype(float)


def add_successor_edges(vmap: VectorMap, pieces: list[LanePiece], first_node: dict, last_node: dict) -> set:
    """Edges from the last snippet of each lane to the first snippet of each successor.

    ``first_node``/``last_node`` map piece index to node id.
    """
    vmap.check_consistency()
    starts: dict[str, int] = {}
    ends: dict[str, int] = {}
    for i, pc in enumerate(pieces):
        if not pc.clipped_start:
            starts[pc.lane_id] = first_node[i]
        if not pc.clipped_end:
            ends[pc.lane_id] = last_node[i]
    edges = set()
    for ln in vmap.lanes:
        if ln.id not in ends:
            continue
        for s in ln.successors:
            if s in starts:
                edges.add((ends[ln.id], starts[s]))
    return edges


def _overlaps(a: LaneNode, b: LaneNode) -> bool:
    """Some pose of one node projects strictly inside the other's pose span."""
    for p, q in ((a, b), (b, a)):
        poly = q.poses[:, :2]
        if len(poly) < 2:
            return True
        s, _ = geo.project_arclength(p.poses[:, :2], poly)
        span = geo.arclength(poly)[-1]
        if np.any((s > 1e-9) & (s < span - 1e-9)):
            return True
    return False


def add_proximal_edges(nodes: Sequence[LaneNode], suc_edges: set, dist_thresh: float = PROX_DIST_M,
                       yaw_thresh: float = PROX_YAW) -> set:
    """Symmetric edges between nearby, similarly oriented snippets of different lanes.

    Besides the distance and heading gates, the two snippets must overlap
    side by side (a pose of one projects inside the other), which keeps
    diagonal neighbours in the next snippet row from pairing up.
    """
    linked = suc_edges | {(v, u) for u, v in suc_edges}
    heads = [n.mean_heading for n in nodes]
    xy = [n.poses[:, :2] for n in nodes]
    edges = set()
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if nodes[i].parent_lane_id == nodes[j].parent_lane_id or (i, j) in linked:
                continue
            if abs(float(geo.wrap_angle(heads[i] - heads[j]))) > yaw_thresh:
                continue
            d = np.min(np.linalg.norm(xy[i][:, None, :] - xy[j][None, :, :], axis=-1))
            if d > dist_thresh or not _overlaps(nodes[i], nodes[j]):
                continue
            edges.add((i, j))
            edges.add((j, i))
    return edges


def build_lane_graph(vmap: VectorMap, dist_thresh: float = PROX_DIST_M, yaw_thresh: float = PROX_YAW,
                     crop: bool = True) -> LaneGraph:
    """Build the lane graph from a map already expressed in the target frame."""
    vmap.check_consistency()
    if crop:
        pieces = crop_map(vmap)
    else:
        pieces = [LanePiece(ln.id, geo.dedupe(ln.centerline), ln.width, False, False) for ln in vmap.lanes
                  if len(geo.dedupe(ln.centerline)) >= 2]
        if not pieces:
            raise EmptyMapError(f"map {vmap.map_id!r} has no lanes")
    nodes: list[LaneNode] = []
    suc: set[tuple[int, int]] = set()
    first_node, last_node = {}, {}
    for i, pc in enumerate(pieces):
        snippets = split_and_discretize(pc.polyline)
        first_node[i] = len(nodes)
        for k, (pose, extent) in enumerate(snippets):
            flags = np.column_stack([_flags(pose[:, :2], vmap.stop_lines), _flags(pose[:, :2], vmap.crosswalks)])
            nid = len(nodes)
            nodes.append(LaneNode(nid, pc.lane_id, np.column_stack([pose, flags]), extent, pc.width))
            if k > 0:
                suc.add((nid - 1, nid))
        last_node[i] = len(nodes) - 1
    suc |= add_successor_edges(vmap, pieces, first_node, last_node)
    prox = add_proximal_edges(nodes, suc, dist_thresh, yaw_thresh)
    return LaneGraph(nodes, suc, prox)


# node lookup --------------------------------------------------------------


class _SegmentIndex:
    """All extent segments of a graph, for nearest-node queries."""

    def __init__(self, graph: LaneGraph):
        a, b, owner = [], [], []
        for n in graph.nodes:
            ext = n.extent if len(n.extent) >= 2 else np.vstack([n.extent, n.extent])
            a.append(ext[:-1])
            b.append(ext[1:])
            owner.append(np.full(len(ext) - 1, n.node_id))
        self.a = np.concatenate(a)
        self.b = np.concatenate(b)
        self.owner = np.concatenate(owner)
        d = self.b - self.a
        self.heading = np.arctan2(d[:, 1], d[:, 0])
        # single-pose nodes: fall back to the pose heading
        degenerate = np.linalg.norm(d, axis=1) == 0
        if degenerate.any():
            th = np.array([graph.nodes[o].poses[0, 2] for o in self.owner[degenerate]])
            self.heading[degenerate] = th

    def nearest(self, points: np.ndarray, headings: np.ndarray | None, yaw_thresh: float | None,
                radius: float | None) -> tuple[np.ndarray, np.ndarray]:
        """Nearest node id per point (-1 if none qualifies) and its distance.

        Ties go to the lower node id.
        """
        dist, _ = project_points(points, self.a, self.b)
        ok = np.ones_like(dist, dtype=bool)
        if yaw_thresh is not None and headings is not None:
            ok &= np.abs(geo.wrap_angle(headings[:, None] - self.heading[None, :])) <= yaw_thresh
        if radius is not None:
            ok &= dist <= radius
        masked = np.where(ok, dist, np.inf)
        best = masked.min(axis=1)
        # lowest node id among segments achieving the minimum
        cand = np.where(masked == best[:, None], self.owner[None, :], np.iinfo(np.int64).max)
        ids = cand.min(axis=1)
        ids = np.where(np.isfinite(best), ids, -1)
        return ids.astype(int), best


def project_points(points, a, b):
    return geo.project_onto_segments(np.atleast_2d(np.asarray(points, dtype=float)), a, b)


def nearest_nodes(graph: LaneGraph, points, headings, yaw_thresh: float = GT_YAW) -> np.ndarray:
    """Yaw-gated nearest node per point, falling back to the plain nearest node."""
    if graph.num_nodes == 0:
        raise EmptyMapError("graph has no nodes")
    idx = _SegmentIndex(graph)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    ids, _ = idx.nearest(p, np.atleast_1d(np.asarray(headings, dtype=float)), yaw_thresh, None)
    if (ids < 0).any():
        plain, _ = idx.nearest(p, None, None, None)
        ids = np.where(ids < 0, plain, ids)
    return ids


def start_node(graph: LaneGraph, position=(0.0, 0.0), heading: float = 0.0, yaw_thresh: float = GT_YAW) -> int:
    """Node nearest to the target's current pose, yaw-gated with an ungated fallback."""
    return int(nearest_nodes(graph, [position], [heading], yaw_thresh)[0])


@dataclass(frozen=True)
class GroundTruthTraversal:
    visited: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]  # consecutive visited pairs, then (last, END)
    off_map: bool = False


def _densify(points: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    out, heads = [], []
    heading = 0.0
    for i in range(len(points) - 1):
        p, q = points[i], points[i + 1]
        d = q - p
        length = float(np.hypot(*d))
        if length > 1e-9:
            heading = float(np.arctan2(d[1], d[0]))
        n = max(1, math.ceil(length / step))
        for k in range(1, n + 1):
            out.append(p + d * (k / n))
            heads.append(heading)
    return np.array(out).reshape(-1, 2), np.array(heads)


def assign_gt_traversal(graph: LaneGraph, ground_truth: np.ndarray, yaw_thresh: float = GT_YAW,
                        radius: float = GT_RADIUS_M, current=(0.0, 0.0, 0.0), strict: bool = True) -> GroundTruthTraversal:
    """Nodes visited by the ground truth (starting at the target's current node) and E_gt.

    The future path (current position followed by the ground-truth points)
    is densified, each point is matched to the nearest yaw-compatible node
    within ``radius``, and the visit order is the order of first visits.
    E_gt holds consecutive visited pairs plus an END edge from the last node.
    With ``strict`` an unmatched or disconnected traversal raises
    ``OffMapGroundTruthError``; otherwise it is returned flagged ``off_map``.
    """
    cx, cy, ch = current
    first = start_node(graph, (cx, cy), ch, yaw_thresh)
    path = np.vstack([[cx, cy], np.asarray(ground_truth, dtype=float)])
    pts, heads = _densify(path, GT_DENSIFY_M)
    ids, _ = _SegmentIndex(graph).nearest(pts, heads, yaw_thresh, radius)

    def fail(msg: str) -> GroundTruthTraversal:
        if strict:
            raise OffMapGroundTruthError(msg)
        return GroundTruthTraversal((), (), True)

    if (ids < 0).all():
        return fail("no ground-truth point matches a lane node")
    visited = [first]
    for i in ids:
        if i >= 0 and i not in visited:
            visited.append(int(i))
    edges = graph.edges
    pairs = list(zip(visited[:-1], visited[1:]))
    for u, v in pairs:
        if (u, v) not in edges:
            return fail(f"visited nodes {u} -> {v} are not connected")
    return GroundTruthTraversal(tuple(visited), tuple(pairs) + ((visited[-1], END),))


def route_legal(graph: LaneGraph, nodes: Sequence[int]) -> bool:
    edges = graph.edges
    return all((u, v) in edges for u, v in zip(nodes[:-1], nodes[1:]))
