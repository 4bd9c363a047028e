"""Acceptance suite: one reported pass/fail line per criterion.

Lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
"acceptance criteria" section at the end of the pytest run.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import permute_input, random_input, random_proposals, random_stochastic
from oracles import (brute_force_roi, loop_gxw, loop_layer_norm_relu, loop_sim_graph, monolithic_forward)

from regiongraph.cli import main
from regiongraph.data import SynthSpec, VideoRecord, assemble, synth_generate
from regiongraph.graphs import (AffinityTransforms, build_back_graph, build_front_graph,
                                build_similarity_graph, canonical_order)
from regiongraph.model import (LayerNormParams, aggregate_clips, forward, gcn_layer, gcn_layer_multi,
                               nonlocal_block, similarity_first_layer)
from regiongraph.regions import BoundingBox, FeatureVolume, roi_align
from regiongraph.train import ABLATIONS, TrainConfig, fit, gradient_check, init_model, randomize_parameters


def record(number, title, passed, detail, started):
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] AC{number} {title}: {detail} ({time.perf_counter() - started:.1f} s)")
    assert passed, detail


def test_ac1_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    model = randomize_parameters(init_model(8, 2, 3, seed=0, dropout_rate=0.0), seed=1)
    inp = random_input(rng, 6, 8)  # no cached G_sim: gradients flow into w and w'
    worst = {}
    covered = set()
    for mode, target in (("softmax_ce", 1), ("per_class_sigmoid_bce", np.array([1.0, 0.0, 1.0]))):
        results = gradient_check(model, inp, target, mode, h=1e-5, tol=1e-4)
        covered |= {r.name for r in results}
        worst[mode] = max(r.max_rel_error for r in results)
    elapsed = time.perf_counter() - t0
    ok = (max(worst.values()) < 1e-4 and elapsed < 60
          and covered == set(model.parameter_dict()) and {"affinity.w", "affinity.w_prime"} <= covered)
    detail = ", ".join(f"{m} max rel err {v:.1e}" for m, v in worst.items())
    record(1, "gradient fidelity", ok, f"{detail}; {len(covered)} tensors; limit 1e-4 within 60 s", t0)


def test_ac2_graph_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    d = 8
    problems = []
    for v in range(1000):
        props = random_proposals(rng, int(rng.integers(1, 9)), int(rng.integers(1, 9)), d)
        props = [props[i] for i in canonical_order(props)]
        frames = np.array([p.frame for p in props])
        # affinity spread stays well inside the float64 exp range
        t = AffinityTransforms(rng.normal(0, 0.3, (d, d)), rng.normal(0, 0.3, (d, d)))
        sim = build_similarity_graph(np.stack([p.feature for p in props]), t).m
        if np.any(np.abs(sim.sum(axis=1) - 1) > 1e-9) or np.any(sim <= 0):
            problems.append(f"video {v}: sim")
        for g, step in ((build_front_graph(props).m, 1), (build_back_graph(props).m, -1)):
            sums = g.sum(axis=1)
            zero = ~np.any(g != 0, axis=1)
            if np.any(~zero & (np.abs(sums - 1) > 1e-9)) or np.any(g < 0):
                problems.append(f"video {v}: row sums")
            if np.any((g != 0) & ((frames[None, :] - frames[:, None]) != step)):
                problems.append(f"video {v}: edge direction")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 30
    record(2, "graph invariants", ok, f"1000 videos, {len(problems)} violations, {elapsed:.1f} s < 30 s", t0)


def test_ac3_oracle_equivalences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = {}
    vol = FeatureVolume(rng.normal(size=(2, 9, 11, 3)))
    roi = 0.0
    for _ in range(6):
        x1, y1 = rng.uniform(0, 6, 2)
        w, h = rng.uniform(0.5, 5, 2)
        box = BoundingBox(x1, y1, x1 + w, y1 + h)
        frame = int(rng.integers(2))
        for s in (1, 2):
            roi = max(roi, np.max(np.abs(roi_align(vol, frame, box, 7, s) - brute_force_roi(vol, frame, box, 7, s))))
    errs["roi_align"] = roi

    n, d = 5, 4
    x = rng.normal(size=(n, d))
    g1, g2 = random_stochastic(rng, n), random_stochastic(rng, n)
    w1, w2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    norm = LayerNormParams(rng.normal(1, 0.2, d), rng.normal(0, 0.2, d))
    want = loop_layer_norm_relu(loop_gxw(g1, x, w1) + x, norm.gain, norm.bias, 1e-5)
    errs["gcn_layer"] = np.max(np.abs(gcn_layer(g1, x, w1, norm) - want))
    want = loop_layer_norm_relu(loop_gxw(g1, x, w1) + loop_gxw(g2, x, w2) + x, norm.gain, norm.bias, 1e-5)
    errs["gcn_layer_multi"] = np.max(np.abs(gcn_layer_multi([g1, g2], x, [w1, w2], norm) - want))

    t = AffinityTransforms(rng.normal(size=(d, d)) * 0.5, rng.normal(size=(d, d)) * 0.5)
    gw = rng.normal(size=(d, d))
    want = loop_gxw(loop_sim_graph(x, t.w, t.w_prime), x @ gw.T, w1) + x
    errs["nonlocal_block"] = np.max(np.abs(nonlocal_block(x, t, gw, w1) - want))

    model = randomize_parameters(init_model(d, 2, 3, seed=3, dropout_rate=0.0), seed=4)
    inp = random_input(rng, 6, d)
    want, _ = monolithic_forward(model.parameter_dict(), inp.node_features, inp.g_front.m, inp.g_back.m,
                                 inp.global_feature, 2)
    errs["forward"] = np.max(np.abs(forward(model, inp)[0] - want))

    same = np.array_equal(nonlocal_block(inp.node_features, model.transforms, model.g_weight, model.sim_weights[0]),
                          similarity_first_layer(model, inp.node_features, apply_norm=False))
    ok = errs["roi_align"] < 1e-6 and all(v < 1e-10 for k, v in errs.items() if k != "roi_align") and same
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(3, "oracle equivalences", ok, f"{detail}; nonlocal == layer-1 pre-activation: {same}", t0)


def test_ac4_zero_init_structure():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    trials, identical = 20, 0
    for k in range(trials):
        model = init_model(8, 3, 5, seed=k)
        base = random_input(rng, 9, 8)  # G_sim computed from w, w'
        logits = forward(model, base)[0]
        other = random_input(rng, 9, 8, with_sim=True)
        other.node_features, other.global_feature = base.node_features, base.global_feature
        identical += forward(model, other)[0].tobytes() == logits.tobytes()
    record(4, "zero-init structure", identical == trials,
           f"{identical}/{trials} logits bit-identical under random row-stochastic adjacencies", t0)


BENCH = dict(frames=8, proposals_per_frame=4, d=32, map_size=48.0, pair_cue=0.7, contact_rate=0.7)


@pytest.mark.slow
def test_ac5_relational_benchmark():
    t0 = time.perf_counter()
    train = synth_generate(SynthSpec(num_videos=800, seed=1, **BENCH))
    test = synth_generate(SynthSpec(num_videos=200, seed=2, **BENCH))
    train_set = [(assemble(r), r.target()) for r in train]
    test_set = [(assemble(r), r.target()) for r in test]
    acc = {}
    for name in ("baseline", "similarity", "spatiotemporal", "joint"):
        model = init_model(BENCH["d"], 2, 4, seed=0)
        cfg = TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=8, total_iters=3000,
                          schedule=[(2400, 0.1)], frozen=ABLATIONS[name], seed=0)
        model, _ = fit(model, train_set, cfg)
        acc[name] = float(np.mean([np.argmax(forward(model, i)[0]) == y for i, y in test_set]))
    elapsed = time.perf_counter() - t0
    lo, hi = acc["baseline"], acc["joint"]
    ok = (hi - lo >= 0.30 and all(lo <= acc[b] <= hi for b in ("similarity", "spatiotemporal"))
          and elapsed < 600)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in acc.items())
    record(5, "relational synthetic benchmark", ok,
           f"test accuracy {detail}; joint - baseline {100 * (hi - lo):.1f} pp >= 30; {elapsed:.0f} s < 600 s", t0)


def _train_run(tmp_path, name):
    out = tmp_path / name
    cfg = tmp_path / "det.yaml"
    cfg.write_text("synth: {num_videos: 10, test_videos: 4, frames: 5, proposals_per_frame: 3}\n"
                   "model: {d: 6, layers: 2}\ntrain: {iters: 25, lr: 0.05, batch_size: 3}\n")
    for cmd in ("synth", "train"):
        assert main([cmd, "--config", str(cfg), "--out-dir", str(out), "--seed", "7"]) == 0
    return (out / "metrics.ndjson").read_bytes(), (out / "checkpoint.bin").read_bytes()


def test_ac6_equivariance_and_determinism(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    model = randomize_parameters(init_model(6, 2, 4, seed=6), seed=7)
    perm_err = 0.0
    for r in synth_generate(SynthSpec(num_videos=8, frames=6, proposals_per_frame=4, d=6, seed=6)):
        shuffled = VideoRecord(r.video_id, [r.proposals[i] for i in rng.permutation(len(r.proposals))], r.label)
        perm_err = max(perm_err, np.max(np.abs(forward(model, assemble(r))[0] - forward(model, assemble(shuffled))[0])))
        inp = assemble(r)
        perm = rng.permutation(inp.n)
        perm_err = max(perm_err, np.max(np.abs(forward(model, inp)[0] - forward(model, permute_input(inp, perm))[0])))

    first, second = _train_run(tmp_path, "a"), _train_run(tmp_path, "b")
    logs_same, ckpt_same = first[0] == second[0], first[1] == second[1]

    clips = [rng.normal(size=5) for _ in range(4)]
    agg = aggregate_clips(clips)
    clip_same = all(np.array_equal(aggregate_clips([clips[i] for i in rng.permutation(4)]), agg) for _ in range(10))

    ok = perm_err < 1e-9 and logs_same and ckpt_same and clip_same
    record(6, "equivariance and determinism", ok,
           f"permutation max |dlogit| {perm_err:.1e} < 1e-9; metrics log identical {logs_same}; "
           f"checkpoint identical {ckpt_same}; clip order invariant {clip_same}", t0)


def test_ac7_end_to_end_cli(tmp_path):
    t0 = time.perf_counter()
    codes, reports = {}, {}
    for mode in ("single", "multi"):
        cfg = tmp_path / f"{mode}.yaml"
        cfg.write_text(f"mode: {mode}\nsynth: {{num_videos: 24, test_videos: 12, frames: 8, proposals_per_frame: 4}}\n"
                       "model: {d: 16, layers: 2}\ntrain: {iters: 200, lr: 0.05, batch_size: 4, momentum: 0.9}\n")
        out = tmp_path / mode
        for cmd in ("synth", "train", "eval", "gradcheck"):
            codes[f"{mode}/{cmd}"] = main([cmd, "--config", str(cfg), "--out-dir", str(out)])
        if (out / "eval_metrics.json").exists():
            reports[mode] = json.loads((out / "eval_metrics.json").read_text())
    elapsed = time.perf_counter() - t0
    single, multi = reports.get("single", {}), reports.get("multi", {})
    ok = (all(c == 0 for c in codes.values()) and {"top1", "top5"} <= set(single) and "mAP" in multi
          and elapsed < 600)
    bad = [k for k, c in codes.items() if c != 0]
    record(7, "end-to-end CLI", ok,
           f"8 commands, nonzero exits {bad or 'none'}; top1 {single.get('top1', float('nan')):.3f}, top5 {single.get('top5', float('nan')):.3f}, "
           f"mAP {multi.get('mAP', float('nan')):.3f}", t0)
