import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanetraverse.geometry import from_frame, to_frame
from lanetraverse.scene import (
    AgentTrack,
    DegeneratePoseError,
    InsufficientTrackError,
    SceneFrame,
    derive_kinematics,
    load_scene,
    save_scene,
    scene_from_dict,
    scene_to_dict,
    to_target_frame,
    to_world_frame,
)


def _scene(target_pos, gt, others=(), yaw=None):
    tgt = AgentTrack.from_positions("t", target_pos, yaw=yaw)
    oth = tuple(AgentTrack.from_positions(f"a{i}", p) for i, p in enumerate(others))
    return SceneFrame(tgt, oth, gt, "m0", scene_id="s0")


def test_uniform_motion_kinematics():
    pos = [(i * 1.0, 0.0) for i in range(5)]
    for s in derive_kinematics(pos):
        assert s.v == pytest.approx(2.0, abs=1e-12)
        assert s.a == 0.0
        assert s.omega == 0.0


def test_speed_change_step_acceleration():
    # segment speeds 2 m/s then 4 m/s: dv = 2 over 0.5 s
    states = derive_kinematics([(0, 0), (1, 0), (3, 0)])
    assert states[1].a == pytest.approx(4.0, abs=1e-12)


def test_single_position_is_insufficient():
    with pytest.raises(InsufficientTrackError):
        derive_kinematics([(0.0, 0.0)])


def test_constant_acceleration_profile_recovers_speed():
    v0, acc = 3.0, 1.5
    t = np.arange(7) * 0.5
    x = v0 * t + 0.5 * acc * t**2
    states = derive_kinematics(np.column_stack([x, np.zeros_like(x)]))
    for i in range(1, len(t) - 1):
        assert states[i].v == pytest.approx(v0 + acc * t[i], abs=1e-6)
        assert states[i].a == pytest.approx(acc, abs=1e-6)


def test_turning_yaw_rate():
    r, w = 20.0, 0.1  # rad/s
    t = np.arange(5) * 0.5
    pos = np.column_stack([r * np.sin(w * t), r - r * np.cos(w * t)])
    assert derive_kinematics(pos)[2].omega == pytest.approx(w, rel=1e-6)


def test_short_history_padded_at_oldest_end():
    tr = AgentTrack.from_positions("x", [(0, 0), (1, 0)])
    np.testing.assert_array_equal(tr.valid_mask, [0, 0, 0, 1, 1])
    np.testing.assert_array_equal(tr.states[0], tr.states[3])
    assert tr.valid_mask[-1] == 1


def test_target_frame_example():
    # heading pi/2 at (10, 5); GT point (10, 11) lies 6 m straight ahead
    gt = np.tile([10.0, 11.0], (12, 1))
    scene = _scene([(10, 3), (10, 4), (10, 5)], gt)
    local = to_target_frame(scene)
    np.testing.assert_allclose(local.ground_truth[0], [6.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(local.target.positions[-1], [0, 0], atol=1e-12)
    assert local.target.heading() == pytest.approx(0.0, abs=1e-12)
    # speeds and accelerations unchanged
    np.testing.assert_array_equal(local.target.states[:, 2:], scene.target.states[:, 2:])


def test_already_normalized_scene_is_identity():
    gt = np.column_stack([np.arange(1, 13), np.zeros(12)])
    scene = _scene([(-2, 0), (-1, 0), (0, 0)], gt)
    local = to_target_frame(scene)
    np.testing.assert_array_equal(local.ground_truth, scene.ground_truth)
    np.testing.assert_array_equal(local.target.states, scene.target.states)


def test_stationary_without_yaw_is_degenerate():
    scene = _scene([(1, 1), (1, 1), (1, 1)], np.zeros((12, 2)))
    with pytest.raises(DegeneratePoseError):
        to_target_frame(scene)
    ok = _scene([(1, 1), (1, 1)], np.zeros((12, 2)), yaw=0.3)
    assert to_target_frame(ok).pose[2] == pytest.approx(0.3)


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi), st.integers(0, 10_000))
def test_target_frame_is_isometry_and_invertible(x0, y0, h, seed):
    rng = np.random.default_rng(seed)
    steps = np.cumsum(rng.uniform(0.5, 2.0, size=(5, 1)) * [math.cos(h), math.sin(h)], axis=0)
    target = np.array([x0, y0]) + steps
    others = [target + rng.normal(scale=10, size=(1, 2)) + rng.normal(scale=0.3, size=(5, 2)) for _ in range(3)]
    gt = target[-1] + rng.normal(scale=20, size=(12, 2))
    scene = _scene(target, gt, others)
    local = to_target_frame(scene)
    world_pts = np.vstack([a.positions for a in scene.agents] + [scene.ground_truth])
    local_pts = np.vstack([a.positions for a in local.agents] + [local.ground_truth])
    dw = np.linalg.norm(world_pts[:, None] - world_pts[None], axis=-1)
    dl = np.linalg.norm(local_pts[:, None] - local_pts[None], axis=-1)
    np.testing.assert_allclose(dl, dw, rtol=1e-9, atol=1e-9)
    back = to_world_frame(local)
    np.testing.assert_allclose(back.ground_truth, scene.ground_truth, rtol=1e-9, atol=1e-9)
    for a, b in zip(back.agents, scene.agents):
        np.testing.assert_allclose(a.states, b.states, rtol=1e-9, atol=1e-9)


def test_frame_helpers_roundtrip():
    p = np.array([[3.0, -4.0], [0.5, 2.0]])
    np.testing.assert_allclose(from_frame(to_frame(p, (1, 2), 0.7), (1, 2), 0.7), p, atol=1e-12)


def test_json_roundtrip(tmp_path):
    gt = np.column_stack([np.linspace(1, 12, 12), np.zeros(12)])
    scene = _scene([(0, 0), (1, 0), (2, 0)], gt, others=[[(5, 3), (6, 3)]])
    d = scene_to_dict(scene)
    assert set(d) >= {"map_id", "target_id", "agents", "ground_truth"}
    assert d["agents"][1]["positions"] == [[5, 3], [6, 3]]
    path = tmp_path / "s.json"
    save_scene(path, scene)
    back = load_scene(path)
    np.testing.assert_array_equal(back.target.states, scene.target.states)
    np.testing.assert_array_equal(back.others[0].valid_mask, scene.others[0].valid_mask)
    assert scene_from_dict(d).ground_truth.tolist() == gt.tolist()


def test_invalid_shapes_rejected():
    with pytest.raises(ValueError):
        _scene([(0, 0), (1, 0)], np.zeros((11, 2)))
    with pytest.raises(ValueError):
        AgentTrack("x", np.zeros((5, 6)), np.array([1, 1, 1, 1, 0]))
