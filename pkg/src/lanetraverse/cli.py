"""Command-line entry point: generate, train, eval, predict."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import CheckpointError
from .config import RunConfig, load_config
from .data import Instance, load_instance, load_split, read_manifest
from .estimator import ConstantVelocityPredictor, predict_sets
from .metrics import evaluate
from .streams import ConfigurationError
from .synth import write_corpus
from .training import NumericalError, Trainer, load_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("lanetraverse")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_overrides(args) -> dict:
    out = {}
    for attr, key in (("seed", "seed"), ("n_scenes", "n_scenes"), ("epoch_scale", "train.epoch_scale"),
                      ("decoder_mode", "decoder_mode"), ("gnn_kind", "gnn.kind"), ("gnn_depth", "gnn.depth"),
                      ("lr", "train.lr"), ("pretrain_epochs", "train.pretrain_epochs"),
                      ("finetune_epochs", "train.finetune_epochs"), ("samples", "rollout.samples")):
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _resolve_config(args, fallback: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    return load_config(path, _config_overrides(args))


def _require_dataset(path: Path) -> None:
    if not (path / "manifest.json").exists():
        raise DataError(f"no dataset at {path} (manifest.json missing)")


def _load_instances(cfg: RunConfig, root: Path, split: str) -> list[Instance]:
    _require_dataset(root)
    if split not in read_manifest(root)["splits"]:
        raise DataError(f"split {split!r} not in manifest")
    t = cfg.thresholds
    return load_split(root, split, agent_node_m=t.agent_node_m, prox_dist=t.proximal_dist_m,
                      prox_yaw=t.proximal_yaw_rad, gt_radius=t.gt_radius_m, gt_yaw=t.gt_yaw_rad)


def _load_model(cfg: RunConfig, checkpoint: Path):
    if not checkpoint.exists():
        raise DataError(f"checkpoint {checkpoint} not found")
    try:
        return load_model(cfg, checkpoint)
    except (KeyError, ValueError, CheckpointError) as exc:
        raise DataError(f"checkpoint/config mismatch: {exc}") from None


# commands --------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    write_corpus(out, cfg.seed, cfg.n_scenes)
    print(f"wrote {cfg.n_scenes} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = Path(args.run_dir)
    cfg = _resolve_config(args)
    data = Path(args.data)
    instances = _load_instances(cfg, data, args.split)
    trainer = Trainer(cfg)
    if args.resume:
        from .autodiff import checkpoint as ckpt

        try:
            trainer.load_state(ckpt.load(args.resume))
        except (KeyError, ValueError, CheckpointError) as exc:
            raise DataError(f"cannot resume from {args.resume}: {exc}") from None
    elif run.exists() and any(run.iterdir()) and not args.force:
        raise UsageError(f"{run} exists; pass --force to overwrite or --resume to continue")
    elif run.exists() and args.force:
        shutil.rmtree(run)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(cfg.to_json())
    try:
        trainer.fit(instances, run, on_epoch=lambda e: print(
            f"{e.phase} epoch {e.epoch}: l_bc={e.l_bc:.4f} l_reg={e.l_reg:.4f} l={e.l:.4f}", flush=True))
    except NumericalError as exc:
        dump = {"error": str(exc), "batch_ids": exc.batch_ids}
        (run / "nan_dump.json").write_text(json.dumps(dump, indent=2))
        print(f"numerical failure: {exc}; offending batch: {', '.join(exc.batch_ids)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"checkpoints in {run}")
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    cfg = _resolve_config(args, checkpoint.parent / "config.json" if checkpoint else None)
    instances = _load_instances(cfg, Path(args.data), args.split)
    if args.baseline == "cv":
        preds = list(ConstantVelocityPredictor().fit().predict(instances))
    elif args.baseline == "gt":
        preds = [inst.scene.ground_truth[None] for inst in instances]
    else:
        if checkpoint is None:
            raise UsageError("eval needs --checkpoint unless --baseline is given")
        model = _load_model(cfg, checkpoint)
        preds = [p.trajectories for p in predict_sets(model, instances, cfg.train.batch_size)]
    t = cfg.thresholds
    report, _ = evaluate(preds, instances, t.offroad_margin_m, t.miss_m, t.gt_yaw_rad)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
        out.with_suffix(".txt").write_text(report.to_kv())
    print(report.to_kv(), end="")
    return EXIT_OK


def prediction_dump(pred, inst: Instance) -> dict:
    return {
        "instance_id": inst.scene_id,
        "modes": [{"traj": t.tolist(), "weight": float(w)} for t, w in zip(pred.trajectories, pred.weights)],
        "gt": inst.scene.ground_truth.tolist(),
    }


def plot_data(pred, inst: Instance) -> dict:
    return {
        "instance_id": inst.scene_id,
        "frame": "target",
        "lanes": [{"id": ln.id, "centerline": np.asarray(ln.centerline).tolist()} for ln in inst.vmap.lanes],
        "history": inst.scene.target.positions[inst.scene.target.valid_mask.astype(bool)].tolist(),
        "gt": inst.scene.ground_truth.tolist(),
        "modes": [t.tolist() for t in pred.trajectories],
    }


def cmd_predict(args) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = _resolve_config(args, checkpoint.parent / "config.json")
    data = Path(args.data)
    _require_dataset(data)
    if not (data / "scenes" / f"{args.scene}.json").exists():
        raise DataError(f"unknown scene id {args.scene!r}")
    t = cfg.thresholds
    inst = load_instance(data, args.scene, agent_node_m=t.agent_node_m, prox_dist=t.proximal_dist_m,
                         prox_yaw=t.proximal_yaw_rad, gt_radius=t.gt_radius_m, gt_yaw=t.gt_yaw_rad)
    model = _load_model(cfg, checkpoint)
    k = args.modes or cfg.num_modes
    if not 1 <= k <= cfg.num_modes:
        raise UsageError(f"--modes must be between 1 and {cfg.num_modes}")
    pred = predict_sets(model, [inst])[0].top(k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.scene}.prediction.json").write_text(json.dumps(prediction_dump(pred, inst), indent=1))
    (out / f"{args.scene}.plot.json").write_text(json.dumps(plot_data(pred, inst), indent=1))
    print(f"wrote {out / (args.scene + '.prediction.json')}")
    return EXIT_OK


# parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lanetraverse", description="Lane-graph traversal trajectory prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")

    def model_flags(sp):
        sp.add_argument("--decoder-mode", choices=("traversals+lv", "traversal_only", "lv_only"))
        sp.add_argument("--gnn-kind", choices=("none", "gcn", "gat"))
        sp.add_argument("--gnn-depth", type=int, choices=(0, 1, 2))

    g = sub.add_parser("generate", help="write a synthetic corpus")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the pretrain + finetune schedule")
    common(t)
    model_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--run-dir", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--epoch-scale", type=float)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--finetune-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--samples", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute metrics on a split")
    common(e)
    model_flags(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--baseline", choices=("cv", "gt"), help="evaluate a reference predictor instead")
    e.add_argument("--out", help="report path (JSON; key=value copy written with .txt)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="dump predictions for one scene")
    common(r)
    model_flags(r)
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--modes", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
