"""End-to-end acceptance checks, one PASS/FAIL line each.

The module trains three models on the default 1000-scene corpus with the
default schedule, so a full run takes roughly an hour on one core. Select a
single criterion with ``-k`` to skip the trainings it does not need.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from lanetraverse import cli
from lanetraverse.autodiff import tensor as T
from lanetraverse.autodiff.gradcheck import max_gradient_error, sampled_gradient_error
from lanetraverse.autodiff.nn import ParamStore
from lanetraverse.autodiff.tensor import Tensor
from lanetraverse.config import RunConfig
from lanetraverse.data import collate, featurize, load_split
from lanetraverse.encoder import GraphEncoder
from lanetraverse.estimator import ConstantVelocityPredictor, predict_sets
from lanetraverse.lane_graph import Lane, VectorMap
from lanetraverse.metrics import evaluate, instance_metrics
from lanetraverse.model import TraversalModel
from lanetraverse.policy import TraversalPolicy, bc_loss, sample_rollouts
from lanetraverse.scene import DT, AgentTrack, SceneFrame
from lanetraverse.synth import generate_scene
from lanetraverse.training import Trainer, load_model, train_step

pytestmark = pytest.mark.slow

GRAD_TOL = 1e-4
FD_STEP = 1e-5
MODES = ("traversals+lv", "lv_only", "traversal_only")


def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


# shared corpus and trained models --------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("accept") / "corpus"
    assert cli.main(["generate", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def splits(corpus) -> dict:
    return {s: load_split(corpus, s) for s in ("train", "val", "test")}


@pytest.fixture(scope="module")
def all_instances(splits) -> list:
    return splits["train"] + splits["val"] + splits["test"]


class Runs:
    """Trains each decoder mode on first use and remembers the wall time."""

    def __init__(self, corpus: Path, root: Path):
        self.corpus = corpus
        self.root = root
        self.seconds: dict[str, float] = {}
        self.models: dict[str, TraversalModel] = {}
        self.preds: dict[str, list] = {}

    def model(self, mode: str) -> TraversalModel:
        if mode not in self.models:
            run = self.root / mode.replace("+", "_")
            t0 = time.perf_counter()
            code = cli.main(["train", "--data", str(self.corpus), "--run-dir", str(run), "--decoder-mode", mode])
            self.seconds[mode] = time.perf_counter() - t0
            assert code == 0
            cfg = RunConfig.from_dict(json.loads((run / "config.json").read_text()))
            self.models[mode] = load_model(cfg, run / "final.ckpt")
        return self.models[mode]

    def predictions(self, mode: str, instances) -> list:
        if mode not in self.preds:
            self.preds[mode] = [p.trajectories for p in predict_sets(self.model(mode), instances)]
        return self.preds[mode]


@pytest.fixture(scope="module")
def runs(corpus, tmp_path_factory) -> Runs:
    return Runs(corpus, tmp_path_factory.mktemp("runs"))


# 1. gradients ------------------------------------------------------------------


def toy_instance():
    """One 40 m lane (two nodes) with the target driving along it and one neighbour."""
    vm = VectorMap((Lane("a", np.linspace((-5.0, 0.0), (35.0, 0.0), 41)),), map_id="toy")
    target = AgentTrack.from_positions("t", [(-4.0 + 1.5 * i, 0.0) for i in range(5)])
    other = AgentTrack.from_positions("o", [(5.0 + i, 3.0) for i in range(5)])
    gt = np.column_stack([2.0 + 2.7 * np.arange(1, 13), np.zeros(12)])
    inst = featurize(SceneFrame(target, (other,), gt, "toy", scene_id="toy0"), vm)
    assert inst.num_nodes == 2
    return inst


def gradient_errors(instances) -> dict[str, float]:
    rng = np.random.default_rng(0)

    def rand(*shape):
        return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)

    errs = {}
    gru = [rand(3, 6), rand(3, 5), rand(6, 15), rand(5, 15), rand(15), rand(15)]
    errs["gru_cell"] = max_gradient_error(lambda: T.sum_(T.tanh(T.gru_cell(*gru))), gru, FD_STEP)

    q, k, v = rand(2, 4, 3, 5), rand(2, 4, 6, 5), rand(2, 4, 6, 7)
    mask = rng.random((2, 4, 3, 6)) < 0.7
    errs["multi_head_attention"] = max_gradient_error(
        lambda: T.sum_(T.tanh(T.scaled_dot_product_attention(q, k, v, mask))), [q, k, v], FD_STEP)

    qs, ks, vs = rand(2, 4, 3), rand(2, 4, 6, 3), rand(2, 4, 6, 5)
    subsets = rng.random((2, 3, 6)) < 0.5
    errs["rollout_attention"] = max_gradient_error(
        lambda: T.sum_(T.tanh(T.subset_attention(qs, ks, vs, subsets))), [qs, ks, vs], FD_STEP)

    adj = rng.random((1, 5, 5)) < 0.4
    adj = adj | np.swapaxes(adj, 1, 2) | np.eye(5, dtype=bool)[None]
    for kind in ("gcn", "gat"):
        enc = GraphEncoder(ParamStore(np.random.default_rng(1)), kind, 2)
        h = rand(1, 5, 32)
        params = [h, *enc.gnn_weights, *getattr(enc, "gat_src", []), *getattr(enc, "gat_dst", [])]
        errs[f"{kind}_propagation"] = max_gradient_error(lambda: T.sum_(T.tanh(enc.gnn(h, adj))), params, FD_STEP)

    batch = collate(instances[:3])
    pstore = ParamStore(np.random.default_rng(2))
    policy = TraversalPolicy(pstore)
    h_motion, h_node = rand(3, 32), rand(3, batch.node_mask.shape[1], 32)
    slots = [inst.gt_slots for inst in batch.instances]

    def policy_loss():
        scores = policy.edge_scores(h_motion, h_node, batch.out_idx, batch.out_onehot)
        return bc_loss(policy.probabilities(scores, batch.out_mask), slots, include=~batch.off_map)

    policy_params = [h_motion, h_node] + [p for _, p in pstore]
    errs["softmax_policy"] = sampled_gradient_error(policy_loss, policy_params, 24, rng, FD_STEP)

    toy = collate([toy_instance()])
    for phase, tf in (("pretrain", True), ("finetune", False)):
        model = TraversalModel(RunConfig().override({"rollout.samples": 12}))

        def full_loss():
            return model.losses(toy, model.forward(toy, tf, (0, 0))).total

        errs[f"full_loss_{phase}"] = sampled_gradient_error(full_loss, model.parameters(), 20, rng, FD_STEP)
    return errs


def test_1_gradient_correctness(capsys, instances):
    t0 = time.perf_counter()
    errs = gradient_errors(instances)
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < GRAD_TOL and secs < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    verdict(capsys, "1 gradient correctness", ok, f"worst {worst} {errs[worst]:.2e} < {GRAD_TOL}; {secs:.1f}s < 120s; "
            + detail)


# 2. policy validity ------------------------------------------------------------


def legal_edges(inst) -> set:
    return inst.graph.suc_edges | inst.graph.prox_edges


def rollout_problems(model: TraversalModel, instances, per_instance: int, seed: int) -> tuple[int, int, int, int]:
    """Sampled rollouts: (rollouts, transitions, illegal transitions, over-length rollouts)."""
    max_steps = model.config.rollout.max_steps
    rng = np.random.default_rng(seed)
    n_roll = n_trans = illegal = too_long = 0
    for s in range(0, len(instances), 50):
        chunk = instances[s:s + 50]
        batch = collate(chunk)
        with T.no_record():
            probs = model.policy_probs(batch).data
        for b, inst in enumerate(chunk):
            nodes, lengths = sample_rollouts(probs[b], batch.out_idx[b], inst.start,
                                             rng.random((per_instance, max_steps)), batch.node_mask.shape[1], max_steps)
            ok_edges = legal_edges(inst)
            for row, n in zip(nodes, lengths):
                n_roll += 1
                too_long += int(n > max_steps or (row[n:] != -1).any())
                for u, v in zip(row[:n - 1], row[1:n]):
                    n_trans += 1
                    illegal += int((int(u), int(v)) not in ok_edges)
    return n_roll, n_trans, illegal, too_long


def test_2_policy_validity(capsys, all_instances):
    model = TraversalModel(RunConfig())
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(0, len(all_instances), 50):
        batch = collate(all_instances[s:s + 50])
        with T.no_record():
            probs = model.policy_probs(batch).data
        sums = probs.sum(axis=-1)[batch.node_mask]
        worst = max(worst, float(np.abs(sums - 1.0).max()))
    n_roll, n_trans, illegal, too_long = rollout_problems(model, all_instances, 10, seed=1)
    secs = time.perf_counter() - t0
    ok = len(all_instances) == 1000 and worst <= 1e-9 and illegal == 0 and too_long == 0 and secs < 60
    verdict(capsys, "2 policy validity", ok,
            f"{len(all_instances)} graphs, max |sum-1| {worst:.1e}; {n_roll} rollouts, {illegal} disconnected steps, "
            f"{too_long} over max_steps; {secs:.1f}s < 60s")


# 3. behaviour cloning ----------------------------------------------------------


def test_3a_bc_overfits_one_four_way_scene(capsys):
    inst = featurize(*generate_scene(0, 0, "four_way"))
    trainer = Trainer(RunConfig())
    bc = math.inf
    step = 0
    for step in range(1, 201):
        bc = train_step(trainer.model, trainer.opt, [inst], True, (0, step))[0]
        if bc < 0.05:
            break
    verdict(capsys, "3a BC overfit", bc < 0.05, f"L_BC {bc:.4f} after {step} teacher-forced steps")


def single_route(inst) -> bool:
    """Every node reachable from the start has at most one legal non-END continuation."""
    N = inst.num_nodes
    seen, stack = {inst.start}, [inst.start]
    while stack:
        u = stack.pop()
        nxt = [int(v) for v in inst.out_idx[u] if 0 <= v < N]
        if len(nxt) > 1:
            return False
        for v in nxt:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return True


def test_3b_next_edge_accuracy_on_single_route_scenes(capsys, runs, splits):
    model = runs.model("traversals+lv")
    chosen = [i for i in splits["test"] if single_route(i) and not i.off_map]
    batch = collate(chosen)
    with T.no_record():
        probs = model.policy_probs(batch).data
    hits = total = 0
    for b, inst in enumerate(chosen):
        for u, slot in inst.gt_slots:
            total += 1
            hits += int(np.argmax(probs[b, u]) == slot)
    acc = hits / total
    verdict(capsys, "3b top-1 next edge", acc >= 0.90,
            f"accuracy {acc:.3f} >= 0.90 over {total} edges in {len(chosen)} single-route test scenes")


# 4. prediction quality -----------------------------------------------------------


def test_4_quality_vs_constant_velocity(capsys, runs, splits):
    test = splits["test"]
    report, _ = evaluate(runs.predictions("traversals+lv", test), test)
    cv, _ = evaluate(list(ConstantVelocityPredictor().fit().predict(test)), test)
    secs = runs.seconds["traversals+lv"]
    ratio = report.min_ade_10 / cv.min_ade_10
    ok = ratio <= 0.7 and report.offroad_rate <= 0.05 and secs <= 1800
    verdict(capsys, "4 quality vs CV", ok,
            f"minADE10 {report.min_ade_10:.3f} vs CV ADE {cv.min_ade_10:.3f} (ratio {ratio:.3f} <= 0.70), "
            f"offroad {report.offroad_rate:.3f} <= 0.05, train {secs:.0f}s <= 1800s")


# 5, 6. ablation directions ---------------------------------------------------------


def test_5_lateral_diversity_ablation(capsys, runs, splits):
    test = splits["test"]
    full, _ = evaluate(runs.predictions("traversals+lv", test), test)
    lv, _ = evaluate(runs.predictions("lv_only", test), test)
    ok = full.distinct_final_lanes > lv.distinct_final_lanes and full.var_yaw >= lv.var_yaw
    verdict(capsys, "5 lateral ablation", ok,
            f"distinct lanes {full.distinct_final_lanes:.3f} > {lv.distinct_final_lanes:.3f}, "
            f"var_yaw {full.var_yaw:.4f} >= {lv.var_yaw:.4f}")


def test_6_longitudinal_diversity_ablation(capsys, runs, splits):
    test = splits["test"]
    full, _ = evaluate(runs.predictions("traversals+lv", test), test)
    trav, _ = evaluate(runs.predictions("traversal_only", test), test)
    verdict(capsys, "6 longitudinal ablation", full.var_speed > trav.var_speed,
            f"var_speed {full.var_speed:.4f} > {trav.var_speed:.4f}")


# 7. metric oracle ----------------------------------------------------------------


def _seg_dist(px, py, ax, ay, bx, by) -> float:
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / L2))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _wrap(a: float) -> float:
    return math.remainder(a, 2 * math.pi)


def brute_force_metrics(modes, gt, vmap, graph, margin=1.0, miss_m=2.0, yaw_thresh=math.pi / 4) -> dict:
    """Direct per-point loops over the metric definitions."""
    modes = [[(float(x), float(y)) for x, y in m] for m in modes]
    gt = [(float(x), float(y)) for x, y in gt]
    T_ = len(gt)

    def errs(m):
        return [math.hypot(m[t][0] - gt[t][0], m[t][1] - gt[t][1]) for t in range(T_)]

    out = {}
    for k in (5, 10):
        out[f"ade_{k}"] = min(sum(errs(m)) / T_ for m in modes[:k])
        out[f"miss_{k}"] = all(max(errs(m)) > miss_m for m in modes[:k])

    def on_road(x, y):
        for lane in vmap.lanes:
            c = lane.centerline
            pts = [(c[i], c[i + 1]) for i in range(len(c) - 1)] or [(c[0], c[0])]
            if any(_seg_dist(x, y, a[0], a[1], b[0], b[1]) <= lane.width / 2 + margin for a, b in pts):
                return True
        return False

    out["offroad"] = sum(any(not on_road(x, y) for x, y in m) for m in modes)

    heads = []
    for m in modes:
        path = [(0.0, 0.0)] + m
        h = 0.0
        for i in range(len(path) - 1, 0, -1):
            dx, dy = path[i][0] - path[i - 1][0], path[i][1] - path[i - 1][1]
            if dx != 0 or dy != 0:
                h = math.atan2(dy, dx)
                break
        heads.append(h)
    mean = math.atan2(sum(math.sin(h) for h in heads) / len(heads), sum(math.cos(h) for h in heads) / len(heads))
    out["var_yaw"] = sum(_wrap(h - mean) ** 2 for h in heads) / len(heads)

    def node_of(x, y, h):
        best, gated = None, None
        for node in graph.nodes:
            e = node.extent if len(node.extent) >= 2 else np.vstack([node.extent, node.extent])
            for i in range(len(e) - 1):
                ax, ay, bx, by = e[i][0], e[i][1], e[i + 1][0], e[i + 1][1]
                d = _seg_dist(x, y, ax, ay, bx, by)
                sh = math.atan2(by - ay, bx - ax) if (ax, ay) != (bx, by) else node.poses[0][2]
                if best is None or d < best[0]:
                    best = (d, node.node_id)
                if abs(_wrap(h - sh)) <= yaw_thresh and (gated is None or d < gated[0]):
                    gated = (d, node.node_id)
        return (gated or best)[1]

    out["distinct_lanes"] = len({graph.nodes[node_of(m[-1][0], m[-1][1], h)].parent_lane_id
                                  for m, h in zip(modes, heads)})

    speeds, accs = [], []
    for m in modes:
        path = [(0.0, 0.0)] + m
        steps = [math.hypot(path[i][0] - path[i - 1][0], path[i][1] - path[i - 1][1]) for i in range(1, len(path))]
        horizon = T_ * DT
        speeds.append(sum(steps) / horizon)
        accs.append((steps[-1] - steps[0]) / DT / horizon)
    for name, vals in (("var_speed", speeds), ("var_acc", accs)):
        mu = sum(vals) / len(vals)
        out[name] = sum((v - mu) ** 2 for v in vals) / len(vals)
    return out


def random_prediction_set(rng, gt) -> np.ndarray:
    """Ten modes around the ground truth: jittered, laterally swept, rescaled and a few wild ones."""
    modes = []
    for _ in range(10):
        kind = rng.integers(4)
        if kind == 0:
            m = gt + rng.normal(scale=rng.uniform(0.1, 3.0), size=gt.shape)
        elif kind == 1:
            m = gt + np.outer(np.linspace(0, 1, 12), rng.normal(scale=6.0, size=2))
        elif kind == 2:
            m = gt * rng.uniform(0.3, 1.5)
        else:
            m = np.cumsum(rng.normal(scale=3.0, size=gt.shape), axis=0)
        modes.append(m)
    return np.array(modes)


def test_7_metric_oracle(capsys, splits):
    rng = np.random.default_rng(7)
    pool = splits["test"]
    worst = 0.0
    mismatched = []
    for i in range(100):
        inst = pool[int(rng.integers(len(pool)))]
        modes = random_prediction_set(rng, inst.scene.ground_truth)
        got = instance_metrics(modes, inst.scene.ground_truth, inst.vmap, inst.graph)
        ref = brute_force_metrics(modes, inst.scene.ground_truth, inst.vmap, inst.graph)
        for key, want in ref.items():
            have = getattr(got, key)
            if isinstance(want, bool) or key in ("offroad", "distinct_lanes"):
                if have != want:
                    mismatched.append((i, key, have, want))
            else:
                worst = max(worst, abs(have - want))
    ok = worst <= 1e-9 and not mismatched
    verdict(capsys, "7 metric oracle", ok,
            f"100 random sets, max continuous diff {worst:.1e} <= 1e-9, {len(mismatched)} discrete mismatches"
            + (f" first {mismatched[0]}" if mismatched else ""))


# 8. monotonicity -------------------------------------------------------------------


def test_8_monotone_in_k(capsys, runs, splits):
    test = splits["test"]
    bad = checked = 0
    for mode in MODES:
        _, per = evaluate(runs.predictions(mode, test), test)
        for m in per:
            checked += 1
            bad += int(m.ade_10 > m.ade_5 or m.miss_10 > m.miss_5)
    verdict(capsys, "8 monotonicity", bad == 0,
            f"{bad} of {checked} evaluated instances violate minADE10 <= minADE5 or miss10 <= miss5")


# 9. determinism --------------------------------------------------------------------


def end_to_end(root: Path) -> dict[str, bytes]:
    data, run = root / "data", root / "run"
    assert cli.main(["generate", "--out", str(data), "--n-scenes", "60"]) == 0
    assert cli.main(["train", "--data", str(data), "--run-dir", str(run), "--pretrain-epochs", "2",
                     "--finetune-epochs", "2", "--samples", "40", "--set", "train.batch_size=8"]) == 0
    assert cli.main(["eval", "--data", str(data), "--checkpoint", str(run / "final.ckpt"),
                     "--out", str(root / "report.json")]) == 0
    files = sorted(run.glob("*.ckpt")) + [root / "report.json", root / "report.txt", run / "loss_log.csv"]
    return {f.name: f.read_bytes() for f in files}


def test_9_determinism(capsys, tmp_path):
    first = end_to_end(tmp_path / "a")
    second = end_to_end(tmp_path / "b")
    differ = [k for k in first if first[k] != second.get(k)]
    ok = set(first) == set(second) and not differ
    verdict(capsys, "9 determinism", ok,
            f"{len(first)} artifacts compared ({', '.join(sorted(first))}); differing: {differ or 'none'}")


# 10. graph legality ------------------------------------------------------------------


def test_10_rollout_legality(capsys, runs, all_instances):
    n_roll, n_trans, illegal, _ = rollout_problems(runs.model("traversals+lv"), all_instances, 10, seed=10)
    ok = n_roll >= 10_000 and illegal == 0
    verdict(capsys, "10 graph legality", ok,
            f"{n_roll} rollouts, {n_trans} transitions, {illegal} outside successor/proximal edges")
