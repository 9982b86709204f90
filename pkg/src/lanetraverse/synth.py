"""Deterministic synthetic maps and driving episodes.

Each scene is generated from a counter-based stream keyed by
``(corpus_seed, scene_index)`` so any scene can be regenerated on its own.
Maps are built in a canonical layout and then placed in the world with a
random rigid transform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .lane_graph import (
    Lane,
    OffMapGroundTruthError,
    VectorMap,
    assign_gt_traversal,
    build_lane_graph,
    save_map,
)
from .scene import DT, FUTURE_STEPS, HISTORY_STEPS, AgentTrack, SceneFrame, save_scene, to_target_frame
from .streams import ConfigurationError, stream

KINDS = ("straight", "curve", "t_intersection", "four_way", "merge", "lane_change_corridor")
V_MAX = 20.0
A_MAX = 3.0
MAX_FUTURE_TRAVEL = 75.0  # keeps the horizon inside the crop box
LANE_CHANGE_S = 3.0
LANE_CHANGE_MIN_SPEED = 5.0
BRAKE_STOP_S = 5.5
DEFAULT_SPLIT = (800, 100, 100)


@dataclass(frozen=True)
class ScenarioTemplate:
    kind: str
    lanes: int = 1
    lane_width: float = 3.5
    radius: float = 60.0
    arm_length: float = 90.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.lanes < 1 or self.lane_width <= 0:
            raise ConfigurationError("need at least one lane of positive width")
        if self.radius < self.lane_width * max(self.lanes, 1):
            raise ConfigurationError(f"radius {self.radius} smaller than road width")


def sample_template(kind: str, rng: np.random.Generator) -> ScenarioTemplate:
    width = float(rng.uniform(3.2, 3.8))
    if kind == "straight":
        return ScenarioTemplate(kind, int(rng.integers(1, 4)), width)
    if kind == "curve":
        return ScenarioTemplate(kind, int(rng.integers(1, 3)), width, float(rng.uniform(35.0, 110.0)))
    if kind == "lane_change_corridor":
        return ScenarioTemplate(kind, int(rng.integers(2, 4)), width)
    return ScenarioTemplate(kind, 1, width, arm_length=float(rng.uniform(80.0, 110.0)))


@dataclass
class MapLayout:
    """Canonical map plus the lane-level routes a target may follow."""

    vmap: VectorMap
    routes: list[tuple[str, ...]]
    lane_changes: list[tuple[tuple, tuple]] = field(default_factory=list)  # (route, adjacent parallel route)
    approach_lanes: frozenset = frozenset()  # lanes that end at a stop line
    single_route: bool = False


def _line(p0, p1, step: float = 1.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(1, math.ceil(np.linalg.norm(p1 - p0) / step))
    return p0 + (p1 - p0) * np.linspace(0.0, 1.0, n + 1)[:, None]


def _hermite(p0, h0, p1, h1, step: float = 0.5) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d0 = np.array([math.cos(h0), math.sin(h0)])
    d1 = np.array([math.cos(h1), math.sin(h1)])
    chord = float(np.linalg.norm(p1 - p0))
    if abs(float(geo.wrap_angle(h1 - h0))) < 1e-9:
        return _line(p0, p1, step)
    k = chord * 1.1
    t = np.linspace(0.0, 1.0, max(8, math.ceil(chord * 1.6 / step)) + 1)[:, None]
    h00, h10, h01, h11 = 2 * t**3 - 3 * t**2 + 1, t**3 - 2 * t**2 + t, -2 * t**3 + 3 * t**2, t**3 - t**2
    return h00 * p0 + h10 * k * d0 + h01 * p1 + h11 * k * d1


def _rect(center, heading: float, length: float, width: float) -> np.ndarray:
    c = np.asarray(center, float)
    u = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-u[1], u[0]])
    hl, hw = length / 2, width / 2
    return np.array([c + u * hl + n * hw, c - u * hl + n * hw, c - u * hl - n * hw, c + u * hl - n * hw])


def _straight_layout(t: ScenarioTemplate, rng, corridor: bool) -> MapLayout:
    w = t.lane_width
    split = float(rng.uniform(-30.0, 60.0))
    lanes, routes, changes = [], [], []
    for k in range(t.lanes):
        y = -k * w
        a, b = f"f{k}a", f"f{k}b"
        lanes.append(Lane(a, _line((-120.0, y), (split, y), 5.0), (b,), w))
        lanes.append(Lane(b, _line((split, y), (160.0, y), 5.0), (), w))
        routes.append((a, b))
        if corridor:
            for j in (k - 1, k + 1):
                if 0 <= j < t.lanes:
                    changes.append(((a, b), (f"f{j}a", f"f{j}b")))
    if not corridor:
        for k in range(int(rng.integers(0, 2)) + (t.lanes == 1)):
            y = w * (k + 1)
            lanes.append(Lane(f"o{k}", _line((160.0, y), (-120.0, y), 5.0), (), w))
    single = (not corridor) and t.lanes == 1
    return MapLayout(VectorMap(tuple(lanes)), routes, changes, frozenset(), single)


def _curve_pieces(y: float, radius: float, sweep: float, lead: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lead-in, arc and lead-out of a lane at lateral offset ``y`` (positive sweep turns left)."""
    sign = 1.0 if sweep > 0 else -1.0
    center = np.array([0.0, sign * radius])
    r = radius - sign * y
    a0 = -sign * math.pi / 2
    angles = a0 + np.linspace(0.0, sweep, max(16, int(abs(sweep) * r)) + 1)
    arc = center + r * np.column_stack([np.cos(angles), np.sin(angles)])
    lead_in = _line((-lead, y), (0.0, y), 5.0)
    exit_dir = np.array([math.cos(sweep), math.sin(sweep)])
    lead_out = _line(arc[-1], arc[-1] + exit_dir * 80.0, 5.0)
    return lead_in, arc, lead_out


def _curve_layout(t: ScenarioTemplate, rng) -> MapLayout:
    w = t.lane_width
    sweep = math.radians(float(rng.uniform(60.0, 140.0))) * (1 if rng.random() < 0.5 else -1)
    lead = float(rng.uniform(45.0, 65.0))
    lanes, routes = [], []
    for k in range(t.lanes):
        ids = (f"c{k}a", f"c{k}b", f"c{k}c")
        a, b, c = _curve_pieces(-k * w, t.radius, sweep, lead)
        lanes += [Lane(ids[0], a, (ids[1],), w), Lane(ids[1], b, (ids[2],), w), Lane(ids[2], c, (), w)]
        routes.append(ids)
    a, b, c = _curve_pieces(w, t.radius, sweep, lead)
    opposing = np.vstack([c[::-1], b[::-1][1:], a[::-1][1:]])
    lanes.append(Lane("opp", opposing, (), w))
    return MapLayout(VectorMap(tuple(lanes)), routes, [], frozenset(), t.lanes == 1)


def _junction_layout(t: ScenarioTemplate, rng, arm_angles: list[float], stop_arms: set[int]) -> MapLayout:
    """Intersection with one lane per direction on each arm (right-hand traffic)."""
    w = t.lane_width
    box_r = w + 4.0
    L = t.arm_length
    lanes: list[Lane] = []
    stops, walks = [], []
    inbound, outbound = {}, {}
    for i, phi in enumerate(arm_angles):
        u = np.array([math.cos(phi), math.sin(phi)])
        right_in = np.array([-u[1], u[0]])  # right of heading -u
        a = u * (box_r + L) + right_in * w / 2
        b = u * box_r + right_in * w / 2
        inbound[i] = (f"in{i}", b, float(phi + math.pi))
        lanes.append(Lane(f"in{i}", _line(a, b, 2.0), (), w))
        c = u * box_r - right_in * w / 2
        d = u * (box_r + L) - right_in * w / 2
        outbound[i] = (f"out{i}", c, float(phi))
        lanes.append(Lane(f"out{i}", _line(c, d, 2.0), (), w))
        if i in stop_arms:
            stops.append(_rect(u * (box_r + 1.5) + right_in * w / 2, phi, 3.0, w))
        walks.append(_rect(u * (box_r + 5.0), phi, 3.0, 2 * w + 2.0))
    routes = []
    succ: dict[str, list[str]] = {ln.id: [] for ln in lanes}
    connectors = []
    for i in inbound:
        for j in outbound:
            if i == j:
                continue
            lid_in, p0, h0 = inbound[i]
            lid_out, p1, h1 = outbound[j]
            cid = f"x{i}{j}"
            connectors.append(Lane(cid, _hermite(p0, h0, p1, h1), (lid_out,), w))
            succ[lid_in].append(cid)
            routes.append((lid_in, cid, lid_out))
    lanes = [Lane(ln.id, ln.centerline, tuple(succ[ln.id]), w) for ln in lanes] + connectors
    approach = frozenset(f"in{i}" for i in stop_arms)
    return MapLayout(VectorMap(tuple(lanes), tuple(stops), tuple(walks)), routes, [], approach, False)


def _merge_layout(t: ScenarioTemplate, rng) -> MapLayout:
    w = t.lane_width
    join = float(rng.uniform(10.0, 50.0))
    angle = math.radians(float(rng.uniform(12.0, 25.0)))
    ramp_len = 70.0
    main_a = Lane("main", _line((-120.0, 0.0), (join, 0.0), 5.0), ("merged",), w)
    start = np.array([join - ramp_len * math.cos(angle), -ramp_len * math.sin(angle)])
    ramp = Lane("ramp", _hermite(start, angle, (join, 0.0), 0.0, 1.0), ("merged",), w)
    merged = Lane("merged", _line((join, 0.0), (170.0, 0.0), 5.0), (), w)
    opp = Lane("opp", _line((170.0, w), (-120.0, w), 5.0), (), w)
    return MapLayout(VectorMap((main_a, ramp, merged, opp)), [("main", "merged"), ("ramp", "merged")], [], frozenset(), False)


def build_layout(t: ScenarioTemplate, rng: np.random.Generator) -> MapLayout:
    if t.kind == "straight":
        return _straight_layout(t, rng, corridor=False)
    if t.kind == "lane_change_corridor":
        return _straight_layout(t, rng, corridor=True)
    if t.kind == "curve":
        return _curve_layout(t, rng)
    if t.kind == "four_way":
        return _junction_layout(t, rng, [0.0, math.pi / 2, math.pi, 3 * math.pi / 2], {0, 1, 2, 3})
    if t.kind == "t_intersection":
        return _junction_layout(t, rng, [0.0, math.pi, 3 * math.pi / 2], {2})
    return _merge_layout(t, rng)


def enumerate_routes(vmap: VectorMap) -> list[tuple[str, ...]]:
    """Lane-level successor paths from lanes without predecessors to lanes without successors."""
    preds = {ln.id: 0 for ln in vmap.lanes}
    for ln in vmap.lanes:
        for s in ln.successors:
            preds[s] += 1
    by_id = {ln.id: ln for ln in vmap.lanes}
    routes = []

    def walk(path):
        nxt = by_id[path[-1]].successors
        if not nxt:
            routes.append(tuple(path))
        for s in nxt:
            if s not in path:
                walk(path + [s])

    for ln in vmap.lanes:
        if preds[ln.id] == 0:
            walk([ln.id])
    return routes


def _place(vmap: VectorMap, origin, heading: float, map_id: str) -> VectorMap:
    """Move a canonical map into the world: rotate by ``heading`` then translate."""
    f = lambda p: geo.from_frame(p, origin, heading)  # noqa: E731
    return VectorMap(
        tuple(Lane(ln.id, f(ln.centerline), ln.successors, ln.width) for ln in vmap.lanes),
        tuple(f(p) for p in vmap.stop_lines),
        tuple(f(p) for p in vmap.crosswalks),
        map_id,
    )


def generate_map(template: ScenarioTemplate, rng: np.random.Generator, map_id: str = "") -> tuple[VectorMap, MapLayout]:
    """Canonical layout for ``template`` placed in the world with a random rigid transform."""
    layout = build_layout(template, rng)
    origin = rng.uniform(-500.0, 500.0, size=2)
    heading = float(rng.uniform(-math.pi, math.pi))
    layout.vmap.check_consistency()
    return _place(layout.vmap, origin, heading, map_id), layout


# kinematics ---------------------------------------------------------------

TIMES = DT * np.arange(-HISTORY_STEPS, FUTURE_STEPS + 1)  # -2.0 ... 6.0 s


def integrate_profile(v0: float, accel: float, t_change: float, times=TIMES, v_max: float = V_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Arclength and speed under a piecewise-constant acceleration profile.

    Speed is ``v0`` before ``t_change`` and changes at ``accel`` afterwards,
    saturating at 0 and ``v_max``. ``s(0) = 0``.
    """

    def speed(t):
        dt = np.maximum(t - t_change, 0.0)
        return np.clip(v0 + accel * dt, 0.0, v_max)

    def dist(t):
        # exact integral of the clamped speed from t_change
        dt = np.maximum(t - t_change, 0.0)
        if accel == 0.0:
            return v0 * dt
        limit = (0.0 - v0) / accel if accel < 0 else (v_max - v0) / accel
        tau = np.minimum(dt, max(limit, 0.0))
        s = v0 * tau + 0.5 * accel * tau**2
        return s + speed(t) * (dt - tau)

    t = np.asarray(times, dtype=float)
    pre = v0 * np.minimum(t - t_change, 0.0)
    s = pre + dist(t)
    s0 = v0 * min(0.0 - t_change, 0.0) + float(dist(np.array(0.0)))
    return s - s0, speed(t)


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return 3 * u**2 - 2 * u**3


def _route_polyline(vmap: VectorMap, route) -> np.ndarray:
    parts = [vmap.lane(l).centerline for l in route]
    pts = [parts[0]] + [p[1:] for p in parts[1:]]
    return geo.dedupe(np.vstack(pts))


def _lane_end_arclength(vmap: VectorMap, route, lane_id: str) -> float:
    total = 0.0
    for lid in route:
        total += float(geo.arclength(geo.dedupe(vmap.lane(lid).centerline))[-1])
        if lid == lane_id:
            return total
    raise KeyError(lane_id)


def _sample_profile(rng, kind: str, stop_gap: float | None):
    """(v0, accel, t_change, label); ``stop_gap`` is the distance to a stop line if braking is possible."""
    if kind == "brake_to_stop":
        v0 = float(rng.uniform(4.0, 12.0))
        # strong enough to stand still before the end of the horizon
        decel = float(rng.uniform(max(1.0, v0 / BRAKE_STOP_S), A_MAX))
        return v0, -decel, 0.0, kind
    v0 = float(rng.uniform(3.0, 13.0))
    if kind == "cruise":
        return v0, 0.0, 0.0, kind
    if kind == "accelerate":
        return v0, float(rng.uniform(0.5, 2.5)), float(rng.uniform(-1.0, 2.0)), kind
    raise ConfigurationError(f"unknown speed profile {kind!r}")


def generate_episode(vmap: VectorMap, layout: MapLayout, template: ScenarioTemplate, rng: np.random.Generator,
                     scene_id: str = "", max_attempts: int = 200) -> SceneFrame:
    """Target and surrounding agents on ``vmap`` (canonical frame), sampled at 2 Hz."""
    for _ in range(max_attempts):
        scene = _try_episode(vmap, layout, template, rng, scene_id)
        if scene is not None:
            return scene
    raise RuntimeError(f"could not sample a valid episode for {template.kind}")


def _try_episode(vmap, layout: MapLayout, template, rng, scene_id):
    route = layout.routes[int(rng.integers(len(layout.routes)))]
    change = None
    if layout.lane_changes and rng.random() < 0.5:
        opts = [c for c in layout.lane_changes if c[0] == route]
        if opts:
            change = opts[int(rng.integers(len(opts)))]
    kinds = ["cruise", "accelerate"]
    if route[0] in layout.approach_lanes:
        kinds.append("brake_to_stop")
    kind = kinds[int(rng.integers(len(kinds)))]
    v0, accel, t_change, label = _sample_profile(rng, kind, None)
    s_rel, speed = integrate_profile(v0, accel, t_change)
    poly = _route_polyline(vmap, route)
    total = float(geo.arclength(poly)[-1])

    if label == "brake_to_stop":
        stop_at = _lane_end_arclength(vmap, route, route[0]) - 1.5
        travel = v0 * v0 / (2.0 * -accel)
        s0 = stop_at - travel
    else:
        lo = -s_rel[0] + 1.0
        hi = total - s_rel[-1] - 1.0
        if route[0] in layout.approach_lanes:
            # start within reach of the junction so the future crosses it often
            end_in = _lane_end_arclength(vmap, route, route[0])
            lo = max(lo, end_in - 60.0)
        if hi <= lo:
            return None
        s0 = float(rng.uniform(lo, hi))
    s = s0 + s_rel
    if s[0] < 0.5 or s[-1] > total - 0.5 or s_rel[-1] > MAX_FUTURE_TRAVEL:
        return None
    xy = geo.interpolate(poly, s)
    if change is not None and speed[HISTORY_STEPS:].min() < LANE_CHANGE_MIN_SPEED:
        change = None
    if change is not None:
        other = _route_polyline(vmap, change[1])
        t_lc = float(rng.uniform(0.0, 6.0 - LANE_CHANGE_S))
        blend = smoothstep((TIMES - t_lc) / LANE_CHANGE_S)
        xy = xy + blend[:, None] * (geo.interpolate(other, s) - xy)
        label = label + "+lane_change"
    hist, fut = xy[: HISTORY_STEPS + 1], xy[HISTORY_STEPS + 1:]
    heading0 = float(geo.tangent_heading(poly, s[HISTORY_STEPS]))
    target = AgentTrack.from_positions("target", hist, 0, heading0)

    others = []
    lanes = [ln for ln in vmap.lanes]
    for k in range(int(rng.integers(0, 5))):
        ln = lanes[int(rng.integers(len(lanes)))]
        pl = geo.dedupe(ln.centerline)
        length = float(geo.arclength(pl)[-1])
        ped = bool(vmap.crosswalks) and rng.random() < 0.15
        if ped:
            walk = vmap.crosswalks[int(rng.integers(len(vmap.crosswalks)))]
            a, b = (walk[0] + walk[1]) / 2, (walk[2] + walk[3]) / 2
            pl = np.vstack([a, b])
            length = float(np.linalg.norm(b - a))
            v = float(rng.uniform(0.8, 1.6))
        else:
            v = float(rng.uniform(0.0, 12.0))
        hist_len = v * DT * HISTORY_STEPS
        if length <= hist_len + 0.1:
            continue
        s_end = float(rng.uniform(hist_len, length))
        ss = s_end - v * DT * np.arange(HISTORY_STEPS, -1, -1)
        pos = geo.interpolate(pl, ss)
        yaw = float(geo.tangent_heading(pl, s_end))
        others.append(AgentTrack.from_positions(f"agent{k}", pos, int(ped), yaw))

    meta = {
        "template": template.kind,
        "route": list(route),
        "profile": label,
        "single_route": bool(layout.single_route and change is None),
        "final_speed": float(speed[-1]),
    }
    return SceneFrame(target, tuple(others), fut, vmap.map_id, scene_id=scene_id, meta=meta)


def _validate(scene_world: SceneFrame, vmap_world: VectorMap) -> bool:
    local = to_target_frame(scene_world)
    x, y, yaw = local.pose
    vm = vmap_world.transformed((x, y), yaw)
    try:
        graph = build_lane_graph(vm)
        assign_gt_traversal(graph, local.ground_truth)
    except (OffMapGroundTruthError, ValueError):
        return False
    gt = local.ground_truth
    return bool(np.all((gt[:, 0] >= -20) & (gt[:, 0] <= 80) & (np.abs(gt[:, 1]) <= 50)))


def generate_scene(seed: int, index: int, kind: str | None = None) -> tuple[SceneFrame, VectorMap]:
    """Scene ``index`` of the corpus keyed by ``seed`` (world frame) and its map."""
    rng = stream(seed, index)
    kind = KINDS[int(rng.integers(len(KINDS)))] if kind is None else kind
    scene_id = f"scene_{index:05d}"
    map_id = f"map_{index:05d}"
    for _ in range(50):
        template = sample_template(kind, rng)
        layout = build_layout(template, rng)
        episode = generate_episode(layout.vmap, layout, template, rng, scene_id)
        origin = rng.uniform(-500.0, 500.0, size=2)
        heading = float(rng.uniform(-math.pi, math.pi))
        vmap_w = _place(layout.vmap, origin, heading, map_id)
        tracks = [t.transformed(origin, heading, inverse=True) for t in episode.agents]
        gt = geo.from_frame(episode.ground_truth, origin, heading)
        scene_w = SceneFrame(tracks[0], tuple(tracks[1:]), gt, map_id, scene_id, meta=episode.meta)
        if _validate(scene_w, vmap_w):
            return scene_w, vmap_w
    raise RuntimeError(f"scene {index}: no valid episode")


@dataclass
class Dataset:
    root: Path
    seed: int
    splits: dict[str, list[str]]


def split_ids(seed: int, n_scenes: int, fractions=DEFAULT_SPLIT) -> dict[str, list[int]]:
    total = sum(fractions)
    n_train = round(n_scenes * fractions[0] / total)
    n_val = round(n_scenes * fractions[1] / total)
    perm = stream(seed, 0xFFFF_FFF0).permutation(n_scenes)
    return {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }


def write_corpus(root: str | Path, seed: int, n_scenes: int = sum(DEFAULT_SPLIT)) -> Dataset:
    root = Path(root)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for i in range(n_scenes):
        scene, vmap = generate_scene(seed, i)
        save_map(root / "maps" / f"{vmap.map_id}.json", vmap)
        save_scene(root / "scenes" / f"{scene.scene_id}.json", scene)
    splits = {k: [f"scene_{i:05d}" for i in v] for k, v in split_ids(seed, n_scenes).items()}
    manifest = {"seed": seed, "n_scenes": n_scenes, "splits": splits}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return Dataset(root, seed, splits)
