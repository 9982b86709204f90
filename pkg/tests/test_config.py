import json
import math

import pytest

from lanetraverse.config import RunConfig, load_config
from lanetraverse.streams import ConfigurationError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.train.lr, cfg.train.batch_size) == (1e-3, 32)
    assert (cfg.train.pretrain_epochs, cfg.train.finetune_epochs) == (100, 100)
    assert (cfg.num_modes, cfg.rollout.samples, cfg.z_dim, cfg.rollout.max_steps) == (10, 200, 5, 12)
    assert (cfg.gnn.kind, cfg.gnn.depth) == ("gat", 2)
    t = cfg.thresholds
    assert (t.agent_node_m, t.proximal_dist_m, t.gt_radius_m, t.offroad_margin_m, t.miss_m) == (10, 4.5, 3, 1, 2)
    assert t.proximal_yaw_rad == t.gt_yaw_rad == pytest.approx(math.pi / 4)


def test_json_roundtrip():
    cfg = RunConfig().override({"gnn.kind": "gcn", "train.lr": 3e-4, "seed": 9})
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("update", [{"bogus": 1}, {"gnn.width": 3}, {"train": 5}, {"gnn.depth": 3},
                                    {"decoder_mode": "goals+lv"}, {"num_modes": 500}, {"train.lr": "fast"}])
def test_invalid_overrides_rejected(update):
    with pytest.raises(ConfigurationError):
        RunConfig().override(update)


def test_precedence_file_env_flags(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "train": {"batch_size": 8}}))
    assert load_config(path, env={}).seed == 1
    assert load_config(path, env={"PGP_SEED": "4"}).seed == 4
    cfg = load_config(path, {"seed": 7}, env={"PGP_SEED": "4"})
    assert cfg.seed == 7 and cfg.train.batch_size == 8
    with pytest.raises(ConfigurationError):
        load_config(path, env={"PGP_SEED": "x"})
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json", env={})


def test_epoch_scale():
    t = RunConfig().override({"train.epoch_scale": 0.05}).train
    assert t.epochs("pretrain") == 5 and t.epochs("finetune") == 5
    assert RunConfig().override({"train.finetune_epochs": 0}).train.epochs("finetune") == 0
