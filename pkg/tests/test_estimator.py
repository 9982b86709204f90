import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lanetraverse.config import RunConfig
from lanetraverse.estimator import (
    ConstantVelocityPredictor,
    TrajectoryPredictor,
    check_instances,
    check_mode_array,
    predict_sets,
)
from lanetraverse.model import TraversalModel
from lanetraverse.scene import DT


def test_params_roundtrip_and_clone():
    est = TrajectoryPredictor(gnn_kind="gcn", n_samples=50, seed=3)
    params = est.get_params()
    assert params["gnn_kind"] == "gcn" and params["n_samples"] == 50
    twin = clone(est)
    assert twin.get_params() == params
    assert TrajectoryPredictor.from_config(est.to_config()).get_params() == params
    est.set_params(decoder_mode="lv_only")
    assert est.to_config().decoder_mode == "lv_only"


def test_validation_helpers(instances):
    assert check_instances(instances[0]) == [instances[0]]
    with pytest.raises(ValueError):
        check_instances([])
    with pytest.raises(TypeError):
        check_instances([np.zeros(3)])
    ok = np.zeros((2, 10, 12, 2))
    assert check_mode_array(ok, 2) is not None
    for bad in (np.zeros((2, 10, 11, 2)), np.zeros((10, 12, 2)), np.full((1, 1, 12, 2), np.nan)):
        with pytest.raises(ValueError):
            check_mode_array(bad)
    with pytest.raises(ValueError):
        check_mode_array(ok, 3)


def test_predict_requires_fit(instances):
    with pytest.raises(NotFittedError):
        TrajectoryPredictor().predict(instances[:1])


def test_fit_predict_small(instances):
    est = TrajectoryPredictor(n_samples=16, batch_size=4, pretrain_epochs=1, finetune_epochs=1)
    est.fit(instances[:4])
    assert [h.phase for h in est.history_] == ["pretrain", "finetune"]
    modes = est.predict(instances[:3])
    assert check_mode_array(modes, 3).shape == (3, 10, 12, 2)
    assert np.isfinite(est.score(instances[:3]))


def test_prediction_independent_of_batch_size(instances):
    model = TraversalModel(RunConfig().override({"rollout.samples": 16}))
    a = predict_sets(model, instances[:5], batch_size=5)
    b = predict_sets(model, instances[:5], batch_size=2)
    for pa, pb in zip(a, b):
        np.testing.assert_allclose(pa.trajectories, pb.trajectories, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(pa.cluster_sizes, pb.cluster_sizes)


def test_constant_velocity_baseline(instances):
    inst = instances[0]
    out = ConstantVelocityPredictor().fit().predict([inst])
    v = inst.target[-1, 2]
    np.testing.assert_allclose(out[0, 0, :, 0], v * DT * np.arange(1, 13))
    np.testing.assert_array_equal(out[0, 0, :, 1], 0.0)
