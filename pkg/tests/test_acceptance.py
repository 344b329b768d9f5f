"""Exit criteria of the toolkit, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (see conftest.py) and by running this file directly.
"""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from apseval import io as aio
from apseval.cli import evaluate_dirs, main
from apseval.core import ClassTaxonomy
from apseval.fusion import fuse, fused_logit
from apseval.matching import brute_force_matching, is_valid_matching, max_weight_matching
from apseval.metrics import EvalConfig, evaluate, evaluate_image, finalize, merge_all
from apseval.stats import class_distribution, convexity, simplicity, truncate_percent
from apseval.synth import (
    PerturbationSpec,
    SceneSpec,
    add_segment,
    default_taxonomy,
    generate_scene,
    generate_scenes,
    perturb,
    remove_segment,
)

from conftest import annotation_from_sets, box_mask
from fixtures import hand_scene, pixel_oracle
from test_fusion import saturated_scene
from test_metrics import _free_pixel, sole_candidate_matches

RESULTS: dict[int, str] = {}
ROOT = Path(__file__).resolve().parent.parent
FULL = dict(height=376, width=1408)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def _perturbed_pairs(count, seed, tax, things=30):
    gts = generate_scenes(SceneSpec(min_things=things, max_things=things, seed=seed, **FULL), count, tax)
    p = [perturb(g, PerturbationSpec(drop_probability=0.1, spawn_probability=0.1, morph_radius=1,
                                     translate=4, seed=k), tax) for k, g in enumerate(gts)]
    return list(zip(gts, p))


def test_criterion_01_matching_oracle():
    rng = np.random.default_rng(20240101)
    worst, valid = 0.0, True
    t0 = time.perf_counter()
    for _ in range(1000):
        n, m = (int(v) for v in rng.integers(0, 7, size=2))
        w = rng.random((n, m))
        fast, slow = max_weight_matching(w), brute_force_matching(w)
        worst = max(worst, abs(fast.total - slow.total))
        valid &= is_valid_matching(fast, n, m, w) and is_valid_matching(slow, n, m, w)
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-9 and valid and elapsed < 5.0,
           f"1000 matrices, max |total diff| {worst:.1e}, all valid={valid}, {elapsed:.2f} s")


def test_criterion_02_perfect_prediction():
    tax = default_taxonomy()
    rng = np.random.default_rng(2)
    bad = []
    for k in range(50):
        h, w = int(rng.integers(64, 377)), int(rng.integers(128, 1409))
        if k < 10:
            h, w = 376, 1408
        gt = generate_scene(SceneSpec(height=h, width=w, max_things=30, max_size=min(120, h), seed=k), tax)
        r = finalize(evaluate_image(gt, gt, tax))
        if not (r.APQ == r.APC == r.mIoU == 100.0):
            bad.append(k)
        bad += [k for v in r.summary().values() if v is not None and v != 100.0]
        bad += [k for s in r.classes for v in (s.APQ, s.APC, s.APQ_visible, s.APQ_occluded,
                                                s.APC_visible, s.APC_occluded, s.IoU)
                if v is not None and v != 100.0]
    record(2, not bad, f"50 scenes up to 1408x376 with <= 30 things, scenes off 100.0: {sorted(set(bad))}")


def test_criterion_03_hand_fixture():
    tax = ClassTaxonomy.from_dict(hand_scene.TAXONOMY)
    h, w = hand_scene.HEIGHT, hand_scene.WIDTH
    pairs = [(annotation_from_sets(im["gt"], h, w), annotation_from_sets(im["pred"], h, w))
             for im in hand_scene.IMAGES]
    both = finalize(evaluate(pairs, tax))
    first = finalize(evaluate(pairs[:1], tax))
    got = {
        "APQ_sc (road)": first.scores(hand_scene.ROAD).APQ,
        "Cov_sc (building)": both.scores(hand_scene.BUILDING).APC,
        "Cov_tc (truck)": both.scores(hand_scene.TRUCK).APC,
        "amodal IoU (car TP)": both.scores(hand_scene.CAR).APQ / 100,
    }
    oracle = pixel_oracle.compute()
    want = {
        "APQ_sc (road)": 100 * oracle["road_APQ"],
        "Cov_sc (building)": 100 * oracle["building_APC"],
        "Cov_tc (truck)": 100 * oracle["truck_APC"],
        "amodal IoU (car TP)": oracle["car_amodal_iou"],
    }
    frozen = [50.0, 87.5, 82.0, 0.6]
    ok = all(abs(got[k] - want[k]) <= 1e-6 for k in got) and all(
        abs(a - b) <= 1e-6 for a, b in zip(want.values(), frozen))
    record(3, ok, ", ".join(f"{k}={v:.6f}" for k, v in got.items()))


def test_criterion_04_published_class_ratios():
    counts = {"car": 192624, "pedestrian": 6240, "cyclist": 3096, "two-wheelers": 2805,
              "truck": 6561, "van": 3573, "other": 443}
    total = sum(counts.values())
    got = {k: truncate_percent(counts[k], total) for k in ("car", "truck", "cyclist")}
    ratios = class_distribution(counts)
    ok = got == {"car": 89.4, "truck": 3.0, "cyclist": 1.4} and abs(sum(ratios.values()) - 1) <= 1e-9
    record(4, ok, f"car {got['car']}%, truck {got['truck']}%, cyclist {got['cyclist']}% (one decimal, truncated)")


def test_criterion_05_shape_closed_forms():
    rng = np.random.default_rng(5)
    worst_c = 0.0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 60, size=2))
        y0, x0 = (int(v) for v in rng.integers(0, 40, size=2))
        worst_c = max(worst_c, abs(convexity(box_mask(100, 100, y0, x0, y0 + h, x0 + w)) - 1.0))
    target = math.sqrt(math.pi) / 2
    worst_s = max(abs(simplicity(box_mask(70, 70, 0, 0, n, n)) - target) for n in (1, 4, 16, 64))
    record(5, worst_c <= 1e-9 and worst_s <= 1e-9,
           f"rectangle convexity max err {worst_c:.1e}, square simplicity max err {worst_s:.1e}")


def test_criterion_06_fusion_trace():
    tax = ClassTaxonomy(stuff_classes=((1, "road"), (2, "sky")), thing_classes=((11, "car"), (12, "truck")))
    sem, inst = saturated_scene()
    ann = fuse(sem, [inst], tax)
    vis = np.zeros((20, 30), dtype=bool)
    vis[4:14, 5:15] = True
    occ = np.zeros((20, 30), dtype=bool)
    occ[4:14, 15:20] = True
    trace_ok = (len(ann.segments) == 1 and np.array_equal(ann.segments[0].visible.to_array(), vis)
                and np.array_equal(ann.segments[0].occluded.to_array(), occ)
                and bool(np.all(ann.visible_map[~vis] == 1000)))
    vals = np.linspace(-20, 20, 41)
    a, b = np.meshgrid(vals, vals, indexing="ij")
    got = fused_logit(a, b)
    worst = max(abs(got[i, j] - (1 / (1 + math.exp(-x)) + 1 / (1 + math.exp(-y))) * (x + y))
                for i, x in enumerate(vals) for j, y in enumerate(vals))
    record(6, trace_ok and worst <= 1e-6, f"trace exact={trace_ok}, FL identity max err {worst:.1e} on 41x41 grid")


def test_criterion_07_sharding_determinism(tmp_path):
    tax = default_taxonomy()
    gt_dir, pred_dir = tmp_path / "gt", tmp_path / "pred"
    gts = generate_scenes(SceneSpec(max_things=30, seed=7, **FULL), 40, tax)
    for k, g in enumerate(gts):
        p = perturb(g, PerturbationSpec(drop_probability=0.1, spawn_probability=0.1, morph_radius=1,
                                        translate=4, seed=k), tax)
        aio.write_annotation(g, tax, gt_dir / f"s{k:03d}")
        aio.write_annotation(p, tax, pred_dir / f"s{k:03d}")
    aio.write_taxonomy(tax, tmp_path / "tax.json")
    files = []
    for threads in (1, 2, 8):
        out = tmp_path / f"threads{threads}.json"
        rc = main(["evaluate", "--gt-dir", str(gt_dir), "--pred-dir", str(pred_dir), "--taxonomy",
                   str(tmp_path / "tax.json"), "--output", str(out), "--threads", str(threads)])
        assert rc == 0
        files.append(out.read_bytes())
    shards = []
    for s in range(4):
        sg, sp = tmp_path / f"shard{s}" / "gt", tmp_path / f"shard{s}" / "pred"
        for k in range(s, 40, 4):
            for d_src, d_dst in ((gt_dir, sg), (pred_dir, sp)):
                d_dst.mkdir(parents=True, exist_ok=True)
                for suffix in (".png", ".json"):
                    (d_dst / f"s{k:03d}{suffix}").write_bytes((d_src / f"s{k:03d}{suffix}").read_bytes())
        acc, errors, missing = evaluate_dirs(sg, sp, tax, EvalConfig())
        assert not errors and not missing
        shards.append(acc)
    aio.write_report(finalize(merge_all(shards, tax)), tmp_path / "shards.json")
    files.append((tmp_path / "shards.json").read_bytes())
    same = all(f == files[0] for f in files)
    record(7, same, f"40 scenes: threads 1/2/8 and 4 merged shards byte-identical={same} ({len(files[0])} bytes)")


def test_criterion_08_monotonicity():
    tax = default_taxonomy()
    cfg = EvalConfig()
    fp_bad = del_bad = deletions = 0
    for trial in range(100):
        gt = generate_scene(SceneSpec(height=120, width=320, min_things=3, max_things=12, max_size=60,
                                      seed=trial), tax)
        pred = perturb(gt, PerturbationSpec(drop_probability=0.1, spawn_probability=0.1, morph_radius=1,
                                            translate=3, seed=trial), tax)
        base = finalize(evaluate_image(gt, pred, tax, cfg))
        rng = np.random.default_rng(trial)
        injected = add_segment(pred, int(rng.choice(tax.thing_ids)), _free_pixel(gt, pred, rng))
        r = finalize(evaluate_image(gt, injected, tax, cfg))
        fp_bad += not (r.APQ_T <= base.APQ_T and r.APC_T == base.APC_T)
        if pred.segments:
            j = int(rng.integers(len(pred.segments)))
            r = finalize(evaluate_image(gt, remove_segment(pred, j), tax, cfg))
            del_bad += not ((r.APC_T or 0.0) <= base.APC_T)
        cands = sole_candidate_matches(gt, pred, tax, cfg)
        if cands:
            j = cands[int(rng.integers(len(cands)))]
            r = finalize(evaluate_image(gt, remove_segment(pred, j), tax, cfg))
            deletions += 1
            del_bad += not (r.APQ_T <= base.APQ_T and (r.APC_T or 0.0) <= base.APC_T)
    record(8, fp_bad == 0 and del_bad == 0 and deletions >= 50,
           f"100 trials: FP injections violating={fp_bad}, deletions violating={del_bad} "
           f"({deletions} true-positive deletions)")


def test_criterion_09_performance():
    tax = default_taxonomy()
    pairs = _perturbed_pairs(100, 9, tax)
    gt, pred = pairs[0]
    assert len(gt.segments) >= 25
    times = []
    for _ in range(7):
        t0 = time.perf_counter()
        evaluate_image(gt, pred, tax)
        times.append(time.perf_counter() - t0)
    single = statistics.median(times)
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=8) as pool:
        accs = list(pool.map(lambda p: evaluate_image(p[0], p[1], tax), pairs))
    merge_all(accs, tax)
    batch = time.perf_counter() - t0
    record(9, single < 0.05 and batch < 5.0,
           f"single pair median {1000 * single:.1f} ms (<50), 100 pairs with 8 threads {batch:.2f} s (<5)")


def test_criterion_10_scope_statement():
    text = (ROOT / "README.md").read_text(encoding="utf-8")
    stated = "not reproduced" in text.lower()
    record(10, stated, "benchmark numbers of trained networks are not reproduced (stated in README); "
                       "criteria 1-9 are the substitute acceptance")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
