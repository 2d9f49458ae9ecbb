"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from groundsig import camera3d as c3
from groundsig import evaluation as ev
from groundsig import geometry as geo
from groundsig import instruct as ins
from groundsig import records
from groundsig import textcodec as tc
from groundsig.cli import EXIT_DIAGNOSTICS, main
from groundsig.geometry import HBB, OBB, GridMask, PixelMask

from oracles import box_iou, raster_iou, refine_membership
from synthetic import blob_corpus, sized_corpus

pytestmark = pytest.mark.acceptance
EPS = 1e-12


def random_hbb(rng):
    vals = rng.random(4)
    # pin a coordinate to the closed upper edge now and then
    if rng.random() < 0.05:
        vals[int(rng.integers(4))] = 1.0
    x1, x2 = sorted(vals[:2])
    y1, y2 = sorted(vals[2:])
    return HBB(x1, y1, x2, y2)


def obb_pair(rng):
    a = (rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.03, 0.5), rng.uniform(0.03, 0.5),
         rng.uniform(0, 90))
    b = (a[0] + rng.normal(0, 0.05), a[1] + rng.normal(0, 0.05), rng.uniform(0.03, 0.5),
         rng.uniform(0.03, 0.5), rng.uniform(0, 90))
    return a, b


# --------------------------------------------------------------------------- 1


def test_codec_round_trips(criterion):
    rng = np.random.default_rng(101)
    cfg = tc.CodecConfig()
    count = 10_000
    hbbs = [random_hbb(rng) for _ in range(count)]
    obbs = [geo.canonical_obb(*rng.random(4), rng.uniform(0, 90)) for _ in range(count)]
    grids = [GridMask(32, rng.random((32, 32)) < rng.uniform(0, 1)) for _ in range(count)]

    start = time.perf_counter()
    hbb_err = obb_lin_err = obb_ang_err = 0.0
    grid_bad = 0
    for box in hbbs:
        back = tc.decode_hbb(tc.encode_hbb(box, cfg), cfg)
        hbb_err = max(hbb_err, max(abs(a - b) for a, b in zip(box.as_tuple(), back.as_tuple())))
    for o in obbs:
        back = tc.decode_obb(tc.encode_obb(o, cfg), cfg)
        lin = (o.cx, o.cy, o.lw, o.sw)
        obb_lin_err = max(obb_lin_err, max(abs(a - b) for a, b in zip(lin, back.as_tuple()[:4])))
        obb_ang_err = max(obb_ang_err, abs(o.theta - back.theta))
    for g in grids:
        grid_bad += tc.decode_mask(tc.encode_mask(g, cfg), cfg) != g
    elapsed = time.perf_counter() - start

    ok = (hbb_err <= 0.5 / 1000 + EPS and obb_lin_err <= 0.5 / 100 + EPS and obb_ang_err < 1.0
          and grid_bad == 0 and elapsed < 5.0)
    criterion(1, "codec round-trips", ok,
              f"{count} each of HBB/OBB/grid; max HBB err {hbb_err:.2e}, OBB linear {obb_lin_err:.2e}, "
              f"angle {obb_ang_err:.6f} deg, grid mismatches {grid_bad}, {elapsed:.2f} s")
    assert ok


# --------------------------------------------------------------------------- 2


def test_rle_lossless_and_compresses(criterion):
    rng = np.random.default_rng(202)
    masks = [PixelMask(256, 256, b) for b in blob_corpus(rng, 1000)]
    grids = [geo.downsample(m, 16, "max_pool") for m in masks]
    cfg = tc.CodecConfig(mask_resolution=16)

    start = time.perf_counter()
    lossy = 0
    ratios = []
    for g in grids:
        sig = tc.encode_mask(g, cfg)
        lossy += tc.decode_mask(sig, cfg) != g
        raw = len(tc.mask_body(g, rle=False))
        ratios.append(len(sig.body) / raw)
    elapsed = time.perf_counter() - start
    mean_ratio = float(np.mean(ratios))

    ok = lossy == 0 and mean_ratio <= 0.6 and elapsed < 5.0
    criterion(2, "run-length masks lossless and compressing", ok,
              f"1000 blobs at n=16; {lossy} mismatches, mean compressed/raw {mean_ratio:.3f}, "
              f"max {max(ratios):.3f}, {elapsed:.2f} s")
    assert ok


# --------------------------------------------------------------------------- 3


def test_rotated_iou_matches_rasterization(criterion):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        a, b = obb_pair(rng)
        got = geo.rotated_iou(OBB(*a), OBB(*b))
        worst = max(worst, abs(got - raster_iou(a, b, 2048)))
    axis_worst = 0.0
    for _ in range(1000):
        p, q = random_hbb(rng), random_hbb(rng)
        got = geo.rotated_iou(geo.hbb_to_obb(p), geo.hbb_to_obb(q))
        axis_worst = max(axis_worst, abs(got - geo.hbb_iou(p, q)),
                         abs(got - box_iou(p.as_tuple(), q.as_tuple())))
    elapsed = time.perf_counter() - start

    ok = worst <= 2e-3 and axis_worst <= 1e-12 and elapsed < 60.0
    criterion(3, "rotated IoU vs 2048^2 rasterization", ok,
              f"1000 pairs max abs err {worst:.2e}; theta=0 vs hbb_iou {axis_worst:.1e}; {elapsed:.1f} s")
    assert ok


# --------------------------------------------------------------------------- 4


def inscribed_obb(box: HBB, theta_deg: float):
    """Rectangle at ``theta`` whose corners touch all four sides of ``box``, or None."""
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    det = c * c - s * s
    if abs(det) < 1e-6:
        return None
    lw = (box.width * c - box.height * s) / det
    sw = (box.height * c - box.width * s) / det
    if lw <= 0 or sw <= 0:
        return None
    return OBB((box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2, lw, sw, theta_deg)


def consistent_triple(rng, sid):
    n = 32
    r0, c0 = rng.integers(0, n - 2, size=2)
    r1, c1 = r0 + rng.integers(2, n - r0 + 1), c0 + rng.integers(2, n - c0 + 1)
    cells = np.zeros((n, n), dtype=np.uint8)
    cells[r0:r1, c0:c1] = rng.random((r1 - r0, c1 - c0)) < 0.6
    cells[r0, c0] = cells[r1 - 1, c1 - 1] = 1
    mask = GridMask(n, cells)
    box = geo.mask_to_hbb(mask)
    obb = inscribed_obb(box, rng.uniform(0, 40)) or geo.hbb_to_obb(box)
    return ev.PredictionTriple(sid, box, obb, mask)


def test_bcs(criterion):
    rng = np.random.default_rng(404)
    consistent = [ev.bcs(consistent_triple(rng, str(i))) for i in range(1000)]
    worst_consistent = max(abs(v - 1.0) for v in consistent)

    disjoint = []
    for i in range(1000):
        hbb = HBB(*rng.uniform(0, 0.1, 2), *rng.uniform(0.15, 0.3, 2))
        obb = geo.canonical_obb(rng.uniform(0.45, 0.55), rng.uniform(0.1, 0.2), rng.uniform(0.01, 0.1),
                                rng.uniform(0.01, 0.1), rng.uniform(0, 90))
        cells = np.zeros((16, 16), dtype=np.uint8)
        cells[12:, 12:] = rng.random((4, 4)) < 0.5
        cells[15, 15] = 1
        disjoint.append(ev.bcs(ev.PredictionTriple(str(i), hbb, obb, GridMask(16, cells))))

    box = HBB(0.25, 0.25, 0.75, 0.5)
    half = np.zeros((16, 16), dtype=np.uint8)
    half[4:8, 8:12] = 1
    mask = GridMask(16, half)
    mbox = geo.mask_to_hbb(mask).as_tuple()
    oracle_pairs = (1.0, box_iou(box.as_tuple(), mbox), box_iou(box.as_tuple(), mbox))
    hand = ev.bcs(ev.PredictionTriple("hand", box, geo.hbb_to_obb(box), mask))

    ok = (worst_consistent <= 1e-9 and max(disjoint) == 0.0
          and oracle_pairs == pytest.approx((1, 0.5, 0.5), abs=1e-12) and abs(hand - 2 / 3) <= 1e-9)
    criterion(4, "BBox consistency score", ok,
              f"consistent max |1-BCS| {worst_consistent:.1e}; disjoint max {max(disjoint)}; "
              f"(1, .5, .5) triple {hand:.12f}")
    assert ok


# --------------------------------------------------------------------------- 5


def ggl_corpus(rng, count, prefix="img"):
    out = []
    for i in range(count):
        n = 32
        r0, c0 = rng.integers(0, n - 1, size=2)
        r1, c1 = r0 + rng.integers(1, n - r0 + 1), c0 + rng.integers(1, n - c0 + 1)
        cells = np.zeros((n, n), dtype=np.uint8)
        cells[r0:r1, c0:c1] = rng.random((r1 - r0, c1 - c0)) < 0.7
        cells[r0, c0] = 1
        obb = geo.canonical_obb(*rng.uniform(0.05, 0.95, 2), *rng.uniform(0.01, 0.6, 2), rng.uniform(0, 180))
        out.append(ins.Annotation(f"{prefix}{i}", 512, 512, f"object {i}", obb=obb, mask=GridMask(n, cells)))
    return out


def independent_turn2(turn1: str, pair, codec):
    dense, sparse = pair
    if dense == "obb":
        return tc.encode_hbb(geo.obb_to_hbb(tc.decode_obb(turn1, codec)), codec).payload
    grid = tc.decode_mask(turn1, codec)
    if sparse == "hbb":
        rows, cols = np.nonzero(grid.cells)
        n = grid.n
        box = HBB(cols.min() / n, rows.min() / n, (cols.max() + 1) / n, (rows.max() + 1) / n)
        return tc.encode_hbb(box, codec).payload
    return tc.encode_obb(geo.mask_to_obb(grid), codec).payload


def test_ggl_determinism(criterion):
    cfg = ins.BuildConfig(allow_mask_to_obb=True)
    anns = ggl_corpus(np.random.default_rng(505), 1000)
    first, _ = ins.build_dataset(anns, ["ggl"], cfg, seed=17)
    second, _ = ins.build_dataset(anns, ["ggl"], cfg, seed=17)
    text_a = records.jsonl_text(r.to_json() for r in first)
    text_b = records.jsonl_text(r.to_json() for r in second)
    identical = text_a == text_b

    consistent = 0
    for r in first:
        pair = ins.parse_pair(r.meta["pair"])
        t1, t2 = r.model_turns()
        consistent += t2 == independent_turn2(t1, pair, cfg.codec)

    # other images carrying the same signals give the same second answer
    moved = [ins.Annotation(f"elsewhere{i}", 97, 61, "something else", obb=a.obb, mask=a.mask)
             for i, a in enumerate(anns)]
    third, _ = ins.build_dataset(moved, ["ggl"], cfg, seed=17)
    image_free = all(a.model_turns() == b.model_turns() for a, b in zip(first, third))

    ok = identical and consistent == len(first) and image_free and len(first) == 3000
    criterion(5, "GGL determinism and image-free second turn", ok,
              f"{len(first)} records from 1000 annotations; byte-identical {identical}; "
              f"turn-2 matches geometry {consistent}/{len(first)}; image-free {image_free}")
    assert ok


# --------------------------------------------------------------------------- 6


def test_disappearance_monotone(criterion):
    rng = np.random.default_rng(606)
    masks = [PixelMask(512, 512, b) for b in sized_corpus(rng, 1000)]
    areas = [m.count for m in masks]
    ns = (16, 24, 32, 100)
    rates = {mode: [ev.disappearance_rate(masks, n, mode) for n in ns] for mode in geo.DOWNSAMPLE_MODES}
    mp, nr = rates["max_pool"], rates["nearest"]
    monotone = all(b <= a for a, b in zip(mp, mp[1:]))
    ordered = all(x >= y for x, y in zip(nr, mp))

    ok = monotone and ordered and min(areas) >= 1 and max(areas) <= 1024
    criterion(6, "disappearance monotone, nearest >= max_pool", ok,
              f"areas {min(areas)}-{max(areas)} px; n={list(ns)} max_pool {mp}, "
              f"nearest {[round(v, 3) for v in nr]}")
    assert ok


# --------------------------------------------------------------------------- 7


def random_camera(rng):
    return c3.CameraModel(
        p=rng.uniform(1e-6, 2e-5), f=rng.uniform(0.004, 0.05),
        w=int(rng.integers(640, 8000)), h=int(rng.integers(480, 6000)),
        theta=math.radians(rng.uniform(5, 90)), H=rng.uniform(2, 500),
    )


def test_ground_plane_geometry(criterion):
    rng = np.random.default_rng(707)
    pairs = sky = 0
    worst_res = worst_px = 0.0
    while pairs < 10_000:
        cam = random_camera(rng)
        xp, yp = rng.uniform(0, cam.w), rng.uniform(0, cam.h)
        try:
            pt = c3.pixel_to_ground(xp, yp, cam)
        except c3.NoGroundIntersection:
            sky += 1
            continue
        pairs += 1
        worst_res = max(worst_res, abs(c3.ground_residual(pt, cam)))
        x2, y2 = c3.camera_to_pixel(pt, cam)
        worst_px = max(worst_px, math.hypot(x2 - xp, y2 - yp))

    nadir_err = 0.0
    for _ in range(1000):
        cam = random_camera(rng)
        cam = c3.CameraModel(cam.p, cam.f, cam.w, cam.h, math.pi / 2, cam.H)
        pt = c3.pixel_to_ground(cam.w / 2, cam.h / 2, cam)
        nadir_err = max(nadir_err, abs(pt.X), abs(pt.Y), abs(pt.Z - cam.H))

    ok = worst_res < 1e-9 and worst_px < 1e-6 and nadir_err <= 1e-12
    criterion(7, "ground-plane geometry", ok,
              f"10000 pairs ({sky} sky rays redrawn); max residual {worst_res:.1e} m, "
              f"reprojection {worst_px:.1e} px, nadir {nadir_err:.1e}")
    assert ok


# --------------------------------------------------------------------------- 8


def test_refiner_prompt_validity(criterion):
    from groundsig.refine import make_prompt

    rng = np.random.default_rng(808)
    bad = fallbacks = fallback_wrong = points = 0
    for i in range(1000):
        n = int(rng.choice([8, 16, 32]))
        density = 0.0 if rng.random() < 0.1 else rng.uniform(0.01, 0.6)
        cells = (rng.random((n, n)) < density).astype(np.uint8)
        w, h = int(rng.integers(16, 257)), int(rng.integers(16, 257))
        x1, x2 = sorted(rng.random(2))
        y1, y2 = sorted(rng.random(2))
        if rng.random() < 0.1:
            x2, y2 = x1, y1  # degenerate box
        box = HBB(x1, y1, x2, y2)
        prompt = make_prompt(GridMask(n, cells), box, (w, h), rng_seed=[808, i])
        in_mask, in_box = refine_membership(cells, box.as_tuple(), w, h)
        for x, y in prompt.positive_points:
            bad += not (in_mask(x, y) and in_box(x, y))
        for x, y in prompt.negative_points:
            bad += not (in_mask(x, y) and not in_box(x, y))
        points += len(prompt.positive_points) + len(prompt.negative_points)
        any_mask = any(in_mask(x, y) for y in range(h) for x in range(w)) if cells.any() else False
        fallbacks += prompt.fallback_box_only
        fallback_wrong += prompt.fallback_box_only != (not any_mask)

    ok = bad == 0 and fallback_wrong == 0 and fallbacks > 0
    criterion(8, "refiner prompt validity", ok,
              f"1000 pairs, {points} points, {bad} outside their region; "
              f"{fallbacks} box-only fallbacks, {fallback_wrong} wrong")
    assert ok


# --------------------------------------------------------------------------- 9


def test_evaluation_totality(tmp_path, criterion):
    rng = np.random.default_rng(909)
    codec = tc.CodecConfig()
    size = 64
    gt_rows, pred_lines, corrupt = [], [], set()
    count = 500
    for i in range(count):
        sid = f"s{i}"
        bits = sized_corpus(rng, 1, size=size, area=(20, 900))[0]
        mask = PixelMask(size, size, bits)
        box = geo.mask_to_hbb(mask)
        obb = geo.hbb_to_obb(box)
        gt_rows.append({"sample_id": sid, "image_width": size, "image_height": size,
                        "hbb": list(box.as_tuple()), "obb": list(obb.as_tuple()),
                        "mask": records.mask_to_json(mask)})
        jitter = rng.normal(0, 0.03, 4)
        x1, x2 = sorted(np.clip([box.x1 + jitter[0], box.x2 + jitter[1]], 0, 1))
        y1, y2 = sorted(np.clip([box.y1 + jitter[2], box.y2 + jitter[3]], 0, 1))
        p_box = HBB(x1, y1, x2, y2)
        p_obb = geo.canonical_obb(*geo.hbb_to_obb(p_box).as_tuple()[:4], rng.uniform(0, 20))
        p_mask = geo.downsample(mask if rng.random() < 0.7 else PixelMask(size, size, np.roll(bits, 9, 1)),
                                codec.mask_resolution)
        text = (f"box {tc.encode_hbb(p_box, codec)} obb {tc.encode_obb(p_obb, codec)} "
                f"mask {tc.encode_mask(p_mask, codec)}")
        pred_lines.append(json.dumps({"sample_id": sid, "raw_text": text}))
    for i in rng.choice(count, size=count // 10, replace=False):
        line = pred_lines[i]
        cut = int(rng.integers(1, len(line) - 1))
        pred_lines[i] = line[:cut] if rng.random() < 0.5 else "\x00" + line[cut:]
        corrupt.add(f"s{i}")

    gts_path, preds_path, out = tmp_path / "gt.jsonl", tmp_path / "pred.jsonl", tmp_path / "m.json"
    gts_path.write_text("".join(json.dumps(r) + "\n" for r in gt_rows))
    preds_path.write_text("\n".join(pred_lines) + "\n")
    code = main(["eval", str(preds_path), str(gts_path), "-o", str(out)])
    report = json.loads(out.read_text())
    metrics = report["metrics"]

    # clean-subset recomputation, with every corrupt sample contributing zero
    clean_lines = [l for l, r in zip(pred_lines, gt_rows) if r["sample_id"] not in corrupt]
    clean_gt_lines = [json.dumps(r) for r in gt_rows if r["sample_id"] not in corrupt]
    preds, _, fails = ev.parse_rows(clean_lines, codec)
    gts, _, _ = ev.parse_rows(clean_gt_lines, codec, ground_truth=True)
    clean = ev.evaluate(preds, gts).metrics
    scale = (count - len(corrupt)) / count
    expected = {k: clean[k] * scale for k in ("acc@0.5_hbb", "acc@0.5_obb", "acc@0.5_mask", "miou")}
    expected["bcs"] = clean["bcs"]  # corrupt rows carry no triple to score
    diffs = {k: abs(metrics[k] - v) for k, v in expected.items()}
    misses = [r for r in report["rows"] if r["sample_id"] in corrupt]
    scored_as_miss = all(r["status"] == "missing" and r["hbb_iou"] == 0 and r["obb_iou"] == 0
                         and r["mask_iou"] == 0 for r in misses)

    ok = (code == EXIT_DIAGNOSTICS and fails == 0 and report["parse_failures"] == len(corrupt)
          and scored_as_miss and len(misses) == len(corrupt) and max(diffs.values()) <= 1e-12)
    criterion(9, "evaluation totality on a fuzzed file", ok,
              f"exit {code}; {len(corrupt)}/{count} corrupt lines scored as misses; "
              f"max metric diff vs clean recomputation {max(diffs.values()):.1e}")
    assert ok
