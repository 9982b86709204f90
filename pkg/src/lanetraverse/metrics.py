"""Displacement, miss, off-road and diversity metrics over predicted mode sets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import geometry as geo
from .lane_graph import GT_YAW, LaneGraph, VectorMap, nearest_nodes
from .scene import DT, FUTURE_STEPS

MISS_M = 2.0
OFFROAD_MARGIN_M = 1.0
HORIZON_S = FUTURE_STEPS * DT


def _as_modes(trajectories) -> np.ndarray:
    t = np.asarray(trajectories, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if t.shape[1:] != (FUTURE_STEPS, 2):
        raise ValueError(f"modes must be (K, {FUTURE_STEPS}, 2), got {t.shape}")
    return t


def min_ade(trajectories, ground_truth, k: int | None = None) -> float:
    """Smallest mean pointwise error over the first ``k`` modes."""
    t = _as_modes(trajectories)[:k]
    return float(np.linalg.norm(t - np.asarray(ground_truth)[None], axis=-1).mean(axis=1).min())


def is_miss(trajectories, ground_truth, k: int | None = None, threshold: float = MISS_M) -> bool:
    """True when every one of the first ``k`` modes strays beyond ``threshold`` at some step."""
    t = _as_modes(trajectories)[:k]
    worst = np.linalg.norm(t - np.asarray(ground_truth)[None], axis=-1).max(axis=1)
    return bool(np.all(worst > threshold))


def on_road(points, vmap: VectorMap, margin: float = OFFROAD_MARGIN_M) -> np.ndarray:
    """Per point: within half a lane width plus ``margin`` of some lane centerline (boundary included)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ok = np.zeros(len(p), dtype=bool)
    for lane in vmap.lanes:
        c = lane.centerline
        if len(c) == 1:
            dist = np.linalg.norm(p - c[0], axis=1)
        else:
            dist = geo.project_onto_segments(p, c[:-1], c[1:])[0].min(axis=1)
        ok |= dist <= lane.width / 2.0 + margin
    return ok


def offroad_flags(trajectories, vmap: VectorMap, margin: float = OFFROAD_MARGIN_M) -> np.ndarray:
    """Per mode: any point off-road."""
    t = _as_modes(trajectories)
    return ~on_road(t.reshape(-1, 2), vmap, margin).reshape(len(t), FUTURE_STEPS).all(axis=1)


def _with_origin(t: np.ndarray, origin) -> np.ndarray:
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), (len(t), 1, 2))
    return np.concatenate([o, t], axis=1)


def final_headings(trajectories, origin=(0.0, 0.0)) -> np.ndarray:
    """Direction of each mode's last non-zero displacement (0 for a mode that never moves)."""
    path = _with_origin(_as_modes(trajectories), origin)
    seg = np.diff(path, axis=1)
    out = np.zeros(len(path))
    for m in range(len(path)):
        moving = np.flatnonzero(np.hypot(seg[m, :, 0], seg[m, :, 1]) > 0)
        if len(moving):
            dx, dy = seg[m, moving[-1]]
            out[m] = np.arctan2(dy, dx)
    return out


def circular_variance(angles) -> float:
    """Population variance of angles after wrapping about their circular mean."""
    a = np.asarray(angles, dtype=np.float64)
    dev = geo.wrap_angle(a - geo.circular_mean(a))
    return float(np.mean(dev * dev))


def lateral_diversity(trajectories, graph: LaneGraph, yaw_thresh: float = GT_YAW,
                      origin=(0.0, 0.0)) -> tuple[int, float]:
    """(distinct final lanes, variance of final headings) for one mode set."""
    t = _as_modes(trajectories)
    heads = final_headings(t, origin)
    nodes = nearest_nodes(graph, t[:, -1], heads, yaw_thresh)
    lanes = {graph.nodes[n].parent_lane_id for n in nodes}
    return len(lanes), circular_variance(heads)


def longitudinal_diversity(trajectories, origin=(0.0, 0.0)) -> tuple[float, float]:
    """Population variances across modes of average speed and average acceleration.

    Average speed is path length over the horizon; average acceleration is
    the last step speed minus the first, over the horizon.
    """
    path = _with_origin(_as_modes(trajectories), origin)
    step = np.linalg.norm(np.diff(path, axis=1), axis=-1)
    speed = step.sum(axis=1) / HORIZON_S
    acc = (step[:, -1] - step[:, 0]) / DT / HORIZON_S
    return float(np.var(speed)), float(np.var(acc))


@dataclass(frozen=True)
class MetricsReport:
    min_ade_5: float
    min_ade_10: float
    miss_rate_5_2: float
    miss_rate_10_2: float
    offroad_rate: float
    distinct_final_lanes: float
    var_yaw: float
    var_speed: float
    var_acc: float
    n_instances: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_kv(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in sorted(self.to_dict().items()))


@dataclass(frozen=True)
class InstanceMetrics:
    ade_5: float
    ade_10: float
    miss_5: bool
    miss_10: bool
    offroad: int  # number of off-road modes
    n_modes: int
    distinct_lanes: int
    var_yaw: float
    var_speed: float
    var_acc: float


def instance_metrics(trajectories, ground_truth, vmap: VectorMap, graph: LaneGraph,
                     margin: float = OFFROAD_MARGIN_M, miss_m: float = MISS_M,
                     yaw_thresh: float = GT_YAW, origin=(0.0, 0.0)) -> InstanceMetrics:
    """All per-instance metrics; ``origin`` is the target's current position (the target-frame origin by default)."""
    t = _as_modes(trajectories)
    lanes, vyaw = lateral_diversity(t, graph, yaw_thresh, origin)
    vspeed, vacc = longitudinal_diversity(t, origin)
    return InstanceMetrics(
        ade_5=min_ade(t, ground_truth, 5), ade_10=min_ade(t, ground_truth, 10),
        miss_5=is_miss(t, ground_truth, 5, miss_m), miss_10=is_miss(t, ground_truth, 10, miss_m),
        offroad=int(offroad_flags(t, vmap, margin).sum()), n_modes=len(t),
        distinct_lanes=lanes, var_yaw=vyaw, var_speed=vspeed, var_acc=vacc,
    )


def aggregate(per_instance: Sequence[InstanceMetrics]) -> MetricsReport:
    """Dataset means, summed in input order."""
    n = len(per_instance)
    if n == 0:
        raise ValueError("no instances to aggregate")

    def mean(attr):
        return float(sum(float(getattr(m, attr)) for m in per_instance) / n)

    modes = sum(m.n_modes for m in per_instance)
    return MetricsReport(
        min_ade_5=mean("ade_5"), min_ade_10=mean("ade_10"),
        miss_rate_5_2=mean("miss_5"), miss_rate_10_2=mean("miss_10"),
        offroad_rate=float(sum(m.offroad for m in per_instance) / modes),
        distinct_final_lanes=mean("distinct_lanes"), var_yaw=mean("var_yaw"),
        var_speed=mean("var_speed"), var_acc=mean("var_acc"), n_instances=n,
    )


def evaluate(predictions, instances, margin: float = OFFROAD_MARGIN_M, miss_m: float = MISS_M,
             yaw_thresh: float = GT_YAW) -> tuple[MetricsReport, list[InstanceMetrics]]:
    """Metrics for ``predictions[i]`` (K, 12, 2) against ``instances[i]`` in the target frame."""
    if len(predictions) != len(instances):
        raise ValueError("one prediction set per instance required")
    per = [
        instance_metrics(getattr(p, "trajectories", p), inst.scene.ground_truth, inst.vmap, inst.graph,
                         margin, miss_m, yaw_thresh)
        for p, inst in zip(predictions, instances)
    ]
    return aggregate(per), per
