import math

import numpy as np
import pytest

from lanetraverse.autodiff import tensor as T
from lanetraverse.autodiff.nn import ParamStore
from lanetraverse.autodiff.tensor import Tensor
from lanetraverse.data import agent_node_mask, collate, featurize
from lanetraverse.encoder import HIDDEN, GraphEncoder, gcn_propagation
from lanetraverse.geometry import to_frame
from lanetraverse.scene import SceneFrame
from lanetraverse.synth import generate_scene


def make_encoder(kind="gat", depth=2, seed=5):
    return GraphEncoder(ParamStore(np.random.default_rng(seed)), kind, depth)


def test_output_shapes(batch):
    out = make_encoder()(batch)
    B, N = batch.node_mask.shape
    assert out.h_motion.shape == (B, HIDDEN)
    assert out.h_agent.shape == (B, batch.agents.shape[1], HIDDEN)
    assert out.h_node.shape == (B, N, HIDDEN)


def test_identical_agent_tracks_give_identical_encodings():
    enc = make_encoder()
    tr = np.random.default_rng(0).normal(size=(1, 5, 6))
    agents = np.concatenate([tr, tr], axis=0)[None]
    mask = np.ones((1, 2, 5), dtype=bool)
    _, h_agent, _ = enc.encode_sequences(np.zeros((1, 5, 6)), np.ones((1, 5), bool), agents, mask,
                                         np.zeros((1, 1, 20, 5)), np.ones((1, 1, 20), bool))
    np.testing.assert_array_equal(h_agent.data[0, 0], h_agent.data[0, 1])


def test_padded_poses_are_skipped():
    enc = make_encoder()
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(1, 2, 20, 5))
    feats[0, 1, 0] = feats[0, 0, 0]
    pmask = np.zeros((1, 2, 20), dtype=bool)
    pmask[0, 0, 0] = True  # one valid pose, the rest padding
    pmask[0, 1] = True
    single = np.zeros((1, 1, 20, 5))
    single[0, 0, 0] = feats[0, 0, 0]
    smask = np.zeros((1, 1, 20), dtype=bool)
    smask[0, 0, 0] = True
    args = (np.zeros((1, 5, 6)), np.ones((1, 5), bool), np.zeros((1, 1, 5, 6)), np.ones((1, 1, 5), bool))
    _, _, h_full = enc.encode_sequences(*args, feats, pmask)
    _, _, h_one = enc.encode_sequences(*args, single, smask)
    np.testing.assert_allclose(h_full.data[0, 0], h_one.data[0, 0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("index,origin,heading", [(4, (40.0, -25.0), 1.1), (5, (-300.0, 7.0), -2.9), (0, (0.0, 0.0), math.pi)])
def test_encoding_invariant_to_world_rigid_motion(index, origin, heading):
    scene, vmap = generate_scene(0, index)
    moved = SceneFrame(scene.target.transformed(origin, heading),
                       tuple(a.transformed(origin, heading) for a in scene.others),
                       to_frame(scene.ground_truth, origin, heading), scene.map_ref, scene.scene_id)
    enc = make_encoder()
    a = enc(collate([featurize(scene, vmap)]))
    b = enc(collate([featurize(moved, vmap.transformed(origin, heading))]))
    np.testing.assert_allclose(a.h_motion.data, b.h_motion.data, atol=1e-9)
    np.testing.assert_allclose(a.h_node.data, b.h_node.data, atol=1e-9)


# agent-node attention ----------------------------------------------------------------


def test_node_without_agents_uses_zero_attention():
    enc = make_encoder()
    rng = np.random.default_rng(2)
    h_node = Tensor(rng.normal(size=(1, 3, HIDDEN)))
    h_agent = Tensor(rng.normal(size=(1, 2, HIDDEN)))
    mask = np.zeros((1, 3, 2), dtype=bool)
    out = enc.agent_node_attention(h_node, h_agent, mask)
    expected = T.leaky_relu(enc.att_out(T.concat([h_node, Tensor(np.zeros((1, 3, HIDDEN)))], axis=-1)))
    np.testing.assert_allclose(out.data, expected.data, atol=1e-14)


def test_single_agent_attention_returns_its_value():
    enc = make_encoder()
    rng = np.random.default_rng(3)
    h_node = Tensor(rng.normal(size=(1, 1, HIDDEN)))
    h_agent = Tensor(rng.normal(size=(1, 3, HIDDEN)))
    mask = np.array([[[False, True, False]]])
    out = enc.agent_node_attention(h_node, h_agent, mask)
    value = enc.att_value(h_agent).data[0, 1]
    expected = T.leaky_relu(enc.att_out(T.concat([h_node, Tensor(value[None, None])], axis=-1)))
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)


def test_agent_distance_threshold_boundary():
    feats = np.zeros((1, 20, 5))
    feats[0, :, 0] = np.arange(20.0)
    pmask = np.ones((1, 20), dtype=bool)
    agents = np.array([[19.0 + 9.9, 0.0], [19.0 + 10.1, 0.0], [5.0, 9.9], [5.0, -10.1]])
    np.testing.assert_array_equal(agent_node_mask(feats, pmask, agents, 10.0), [[True, False, True, False]])
    # padded poses never count
    pmask[0, 10:] = False
    np.testing.assert_array_equal(agent_node_mask(feats, pmask, agents, 10.0), [[False, False, True, False]])


def test_zero_threshold_matches_no_agent_path(instances):
    inst = instances[0]
    zero = featurize(*generate_scene(3, 0), agent_node_m=0.0)
    assert not zero.agent_node.any()
    enc = make_encoder()
    b = collate([zero])
    h_motion, h_agent, h_node = enc.encode_sequences(b.target, b.target_mask, b.agents, b.agent_mask,
                                                     b.node_feats, b.pose_mask)
    att = enc.agent_node_attention(h_node, h_agent, b.agent_node)
    no_agents = T.leaky_relu(enc.att_out(T.concat([h_node, Tensor(np.zeros(h_node.shape))], axis=-1)))
    np.testing.assert_allclose(att.data, no_agents.data, atol=1e-14)
    assert inst.agent_node.any() and inst.num_nodes == zero.num_nodes


# GNN layers -----------------------------------------------------------------------


def test_depth_zero_is_identity():
    enc = make_encoder("gat", 0)
    h = Tensor(np.random.default_rng(4).normal(size=(1, 3, HIDDEN)))
    assert enc.gnn(h, np.eye(3, dtype=bool)[None]) is h
    assert make_encoder("none", 2).gnn_depth == 0


def test_isolated_node_gcn_is_leaky_linear():
    enc = make_encoder("gcn", 1)
    h = np.random.default_rng(5).normal(size=(1, 1, HIDDEN))
    out = enc.gnn(Tensor(h), np.ones((1, 1, 1), dtype=bool))
    w = enc.gnn_weights[0].data
    np.testing.assert_allclose(out.data, T.leaky_relu(Tensor(h @ w)).data, atol=1e-14)


def test_gcn_normalisation_example():
    a = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    d = np.array([2.0, 3.0, 2.0])
    expected = a / np.sqrt(np.outer(d, d))
    np.testing.assert_allclose(gcn_propagation(a), expected, atol=1e-15)


@pytest.mark.parametrize("kind", ["gcn", "gat"])
def test_symmetric_twins_get_identical_outputs(kind):
    enc = make_encoder(kind, 2)
    row = np.random.default_rng(6).normal(size=HIDDEN)
    h = Tensor(np.stack([row, row])[None])
    out = enc.gnn(h, np.ones((1, 2, 2), dtype=bool))
    np.testing.assert_allclose(out.data[0, 0], out.data[0, 1], atol=1e-14)


@pytest.mark.parametrize("kind", ["gcn", "gat"])
def test_permutation_equivariance(batch, kind):
    enc = make_encoder(kind, 2)
    b = collate([batch.instances[0]])
    N = b.max_nodes
    perm = np.random.default_rng(7).permutation(N)
    base = enc(b).h_node.data[0]
    h0 = enc.encode_sequences(b.target, b.target_mask, b.agents, b.agent_mask, b.node_feats, b.pose_mask)
    h_node = enc.agent_node_attention(h0[2], h0[1], b.agent_node)
    permuted = enc.gnn(T.getitem(h_node, (slice(None), perm)), b.adjacency[:, perm][:, :, perm])
    np.testing.assert_allclose(permuted.data[0], base[perm], atol=1e-12)


def test_invalid_configuration():
    with pytest.raises(ValueError):
        make_encoder("transformer", 1)
    with pytest.raises(ValueError):
        make_encoder("gcn", 3)
