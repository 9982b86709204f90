"""Prediction instances: agent tracks, ground truth and the target-centric frame."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import from_frame, to_frame, wrap_angle

DT = 0.5  # 2 Hz
HISTORY_STEPS = 4  # t_h: 2 s of history before the current state
FUTURE_STEPS = 12  # t_f: 6 s horizon
STATIONARY_EPS = 1e-6  # metres per step below which a displacement has no direction


class DegeneratePoseError(ValueError):
    """Target heading is undefined: no motion and no yaw annotation."""


class InsufficientTrackError(ValueError):
    """Fewer than two positions to differentiate."""


class MotionState(NamedTuple):
    x: float
    y: float
    v: float
    a: float
    omega: float
    is_pedestrian: int


def derive_kinematics(positions, is_pedestrian: int = 0, dt: float = DT) -> list[MotionState]:
    """Speed, acceleration and yaw rate from positions sampled every ``dt`` seconds.

    Per-segment speeds and headings are formed first. Interior steps average
    the adjacent segment speeds and difference the adjacent segments for
    acceleration and yaw rate; endpoints reuse their single neighbour.
    """
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2 or len(p) < 2:
        raise InsufficientTrackError(f"need at least 2 positions, got {len(p)}")
    seg = np.diff(p, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    u = seg_len / dt
    psi = np.arctan2(seg[:, 1], seg[:, 0])
    for i in range(len(psi)):
        if seg_len[i] <= STATIONARY_EPS:
            psi[i] = psi[i - 1] if i > 0 else np.nan
    if np.isnan(psi).all():
        psi[:] = 0.0
    else:
        first = np.flatnonzero(~np.isnan(psi))[0]
        psi[:first] = psi[first]

    n = len(p)
    v = np.empty(n)
    a = np.empty(n)
    w = np.empty(n)
    v[0], v[-1] = u[0], u[-1]
    v[1:-1] = 0.5 * (u[:-1] + u[1:])
    if n == 2:
        a[:] = 0.0
        w[:] = 0.0
    else:
        a[1:-1] = np.diff(u) / dt
        w[1:-1] = wrap_angle(np.diff(psi)) / dt
        a[0], a[-1] = a[1], a[-2]
        w[0], w[-1] = w[1], w[-2]
    flag = int(bool(is_pedestrian))
    return [MotionState(*map(float, (p[i, 0], p[i, 1], v[i], a[i], w[i])), flag) for i in range(n)]


@dataclass(frozen=True)
class AgentTrack:
    """History of one agent: ``states`` is (t_h+1, 6) rows of [x, y, v, a, omega, is_pedestrian]."""

    agent_id: str
    states: np.ndarray
    valid_mask: np.ndarray
    yaw: float | None = None  # current heading annotation, in the track's frame

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        m = np.asarray(self.valid_mask, dtype=np.int8)
        if s.shape != (HISTORY_STEPS + 1, 6):
            raise ValueError(f"track {self.agent_id}: states shape {s.shape}, expected {(HISTORY_STEPS + 1, 6)}")
        if m.shape != (HISTORY_STEPS + 1,) or m[-1] != 1:
            raise ValueError(f"track {self.agent_id}: current state must be valid")
        if not np.isfinite(s).all():
            raise ValueError(f"track {self.agent_id}: non-finite kinematics")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "valid_mask", m)

    @classmethod
    def from_positions(cls, agent_id: str, positions, is_pedestrian: int = 0, yaw: float | None = None) -> "AgentTrack":
        """Build a track from up to t_h+1 positions (oldest first), padding the oldest end."""
        p = np.asarray(positions, dtype=float).reshape(-1, 2)[-(HISTORY_STEPS + 1):]
        if len(p) >= 2:
            rows = np.array([list(s) for s in derive_kinematics(p, is_pedestrian)])
        elif len(p) == 1:
            rows = np.array([[p[0, 0], p[0, 1], 0.0, 0.0, 0.0, float(bool(is_pedestrian))]])
        else:
            raise InsufficientTrackError(f"agent {agent_id} has no positions")
        pad = HISTORY_STEPS + 1 - len(rows)
        mask = np.concatenate([np.zeros(pad, np.int8), np.ones(len(rows), np.int8)])
        rows = np.concatenate([np.repeat(rows[:1], pad, axis=0), rows])
        return cls(str(agent_id), rows, mask, yaw)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def current(self) -> MotionState:
        r = self.states[-1]
        return MotionState(*map(float, r[:5]), int(r[5]))

    def motion_states(self) -> list[MotionState]:
        return [MotionState(*map(float, r[:5]), int(r[5])) for r in self.states]

    def heading(self) -> float:
        """Direction of the last valid displacement, else the yaw annotation."""
        p = self.positions
        valid = np.flatnonzero(self.valid_mask)
        for i in range(len(valid) - 1, 0, -1):
            d = p[valid[i]] - p[valid[i - 1]]
            if np.hypot(*d) > STATIONARY_EPS:
                return float(np.arctan2(d[1], d[0]))
        if self.yaw is not None:
            return float(self.yaw)
        raise DegeneratePoseError(f"agent {self.agent_id}: zero speed and no yaw annotation")

    def transformed(self, origin, heading: float, inverse: bool = False) -> "AgentTrack":
        s = self.states.copy()
        if inverse:
            s[:, :2] = from_frame(s[:, :2], origin, heading)
            yaw = None if self.yaw is None else float(wrap_angle(self.yaw + heading))
        else:
            s[:, :2] = to_frame(s[:, :2], origin, heading)
            yaw = None if self.yaw is None else float(wrap_angle(self.yaw - heading))
        return replace(self, states=s, yaw=yaw)


@dataclass(frozen=True)
class SceneFrame:
    """One prediction instance.

    ``pose`` is the world pose (x, y, yaw) of this frame's origin; (0, 0, 0)
    means world coordinates.
    """

    target: AgentTrack
    others: tuple[AgentTrack, ...]
    ground_truth: np.ndarray
    map_ref: str
    scene_id: str = ""
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        gt = np.asarray(self.ground_truth, dtype=float)
        if gt.shape != (FUTURE_STEPS, 2):
            raise ValueError(f"ground truth shape {gt.shape}, expected {(FUTURE_STEPS, 2)}")
        object.__setattr__(self, "ground_truth", gt)
        object.__setattr__(self, "others", tuple(self.others))

    @property
    def agents(self) -> tuple[AgentTrack, ...]:
        return (self.target,) + self.others

    def _apply(self, origin, heading: float, inverse: bool) -> "SceneFrame":
        gt = from_frame(self.ground_truth, origin, heading) if inverse else to_frame(self.ground_truth, origin, heading)
        return replace(
            self,
            target=self.target.transformed(origin, heading, inverse),
            others=tuple(o.transformed(origin, heading, inverse) for o in self.others),
            ground_truth=gt,
        )


def to_target_frame(scene: SceneFrame) -> SceneFrame:
    """Re-express the scene with the target at the origin heading along +x."""
    heading = scene.target.heading()
    origin = scene.target.positions[-1].copy()
    out = scene._apply(origin, heading, inverse=False)
    # compose with the incoming frame pose so the world pose stays recoverable
    px, py, pyaw = scene.pose
    wx, wy = from_frame(origin[None], (px, py), pyaw)[0]
    return replace(out, pose=(float(wx), float(wy), float(wrap_angle(pyaw + heading))))


def to_world_frame(scene: SceneFrame) -> SceneFrame:
    x, y, yaw = scene.pose
    out = scene._apply((x, y), yaw, inverse=True)
    return replace(out, pose=(0.0, 0.0, 0.0))


# JSON scene files ---------------------------------------------------------


def scene_to_dict(scene: SceneFrame) -> dict:
    """World-frame dict in the scene-file layout."""
    world = to_world_frame(scene) if scene.pose != (0.0, 0.0, 0.0) else scene
    agents = []
    for tr in world.agents:
        pos = tr.positions[np.flatnonzero(tr.valid_mask)]
        entry = {"id": tr.agent_id, "is_pedestrian": int(tr.states[-1, 5]), "positions": pos.tolist()}
        if tr.yaw is not None:
            entry["yaw"] = tr.yaw
        agents.append(entry)
    out = {
        "map_id": world.map_ref,
        "target_id": world.target.agent_id,
        "agents": agents,
        "ground_truth": world.ground_truth.tolist(),
    }
    if world.scene_id:
        out["scene_id"] = world.scene_id
    if world.meta:
        out["meta"] = world.meta
    return out


def scene_from_dict(d: dict) -> SceneFrame:
    tracks = {}
    for a in d["agents"]:
        tracks[str(a["id"])] = AgentTrack.from_positions(a["id"], a["positions"], a.get("is_pedestrian", 0), a.get("yaw"))
    target_id = str(d["target_id"])
    if target_id not in tracks:
        raise KeyError(f"target {target_id!r} not among agents")
    others = tuple(t for k, t in tracks.items() if k != target_id)
    return SceneFrame(tracks[target_id], others, np.asarray(d["ground_truth"], dtype=float), str(d["map_id"]),
                      scene_id=str(d.get("scene_id", "")), meta=dict(d.get("meta", {})))


def save_scene(path: str | Path, scene: SceneFrame) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), sort_keys=True))


def load_scene(path: str | Path) -> SceneFrame:
    return scene_from_dict(json.loads(Path(path).read_text()))


def stack_tracks(tracks: Sequence[AgentTrack]) -> tuple[np.ndarray, np.ndarray]:
    if not tracks:
        return np.zeros((0, HISTORY_STEPS + 1, 6)), np.zeros((0, HISTORY_STEPS + 1), np.int8)
    return np.stack([t.states for t in tracks]), np.stack([t.valid_mask for t in tracks])
