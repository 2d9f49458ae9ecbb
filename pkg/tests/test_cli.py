import json
import subprocess
import sys

import numpy as np
import pytest

from groundsig import records
from groundsig.cli import EXIT_DIAGNOSTICS, EXIT_ERROR, EXIT_OK, main


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return str(path)


def read_rows(path):
    return [obj for _, obj, err in records.iter_jsonl(open(path).read().splitlines())]


def header(path):
    return json.loads(open(path).readline())[records.HEADER_KEY]


def pixel_mask_json(w, h, box):
    bits = np.zeros((h, w), dtype=np.uint8)
    x1, y1, x2, y2 = box
    bits[y1:y2, x1:x2] = 1
    return records.pixel_rle(records.PixelMask(w, h, bits))


def annotations(k=9):
    rng = np.random.default_rng(0)
    out = []
    for i in range(k):
        x, y = int(rng.integers(0, 40)), int(rng.integers(0, 30))
        box = (x, y, x + int(rng.integers(2, 20)), y + int(rng.integers(2, 15)))
        out.append({
            "image_id": f"img{i // 3}", "image_width": 64, "image_height": 48,
            "expression": f"object {i}", "category": "car" if i % 2 else "ship",
            "bbox": list(box), "mask": pixel_mask_json(64, 48, box),
        })
    return out


def test_encode_decode_round_trip(tmp_path):
    src = write_lines(tmp_path / "geo.jsonl", [
        {"id": "a", "hbb": [0.25, 0.5, 0.75, 1.0], "obb": [0.5, 0.5, 0.4, 0.2, 45]},
        {"id": "b", "pixel": True, "image_width": 200, "image_height": 100, "hbb": [20, 10, 120, 60]},
    ])
    enc = str(tmp_path / "enc.jsonl")
    assert main(["encode", src, "-o", enc]) == EXIT_OK
    rows = read_rows(enc)
    assert rows[0]["hbb"] == "<box>[250,500,750,999]</box>"
    assert rows[0]["obb"] == "<obb>(50,50,40,20,45)</obb>"
    assert rows[1]["hbb"] == "<box>[100,100,600,600]</box>"
    assert header(enc)["command"] == "encode"

    text = write_lines(tmp_path / "text.jsonl", [{"id": "a", "text": rows[0]["hbb"] + " " + rows[0]["obb"]}])
    dec = str(tmp_path / "dec.jsonl")
    assert main(["decode", text, "-o", dec]) == EXIT_OK
    sigs = read_rows(dec)[0]["signals"]
    assert [s["kind"] for s in sigs] == ["hbb", "obb"]


def test_encode_bad_rows_exit_2(tmp_path):
    src = write_lines(tmp_path / "geo.jsonl", ["[1, 2]", "{oops", {"id": "x"}, {"hbb": [0, 0, 1, 1]}])
    out = str(tmp_path / "out.jsonl")
    assert main(["encode", src, "-o", out]) == EXIT_DIAGNOSTICS
    assert len(read_rows(out)) == 1


def test_decode_reports_truncated_spans(tmp_path):
    src = write_lines(tmp_path / "t.jsonl", [{"id": 1, "text": "a <box>[1,2,3,4]</box> b <seg>0*4|"}])
    out = str(tmp_path / "o.jsonl")
    assert main(["decode", src, "-o", out]) == EXIT_DIAGNOSTICS
    row = read_rows(out)[0]
    assert len(row["signals"]) == 1 and len(row["diagnostics"]) == 1


def test_hard_errors_exit_1(tmp_path):
    assert main(["encode", str(tmp_path / "missing.jsonl")]) == EXIT_ERROR
    src = write_lines(tmp_path / "a.jsonl", annotations(1))
    assert main(["build-dataset", src, "--mask-res", "1", "-o", str(tmp_path / "o")]) == EXIT_ERROR
    assert main(["build-dataset", src, "--tasks", "caption", "-o", str(tmp_path / "o")]) == EXIT_ERROR
    empty = write_lines(tmp_path / "empty.jsonl", [])
    assert main(["analyze", empty, "-o", str(tmp_path / "t.csv")]) == EXIT_ERROR


def test_build_dataset_deterministic_across_workers(tmp_path):
    src = write_lines(tmp_path / "ann.jsonl", annotations())
    out = tmp_path / "ds.jsonl"
    summary = tmp_path / "summary.json"
    args = ["build-dataset", src, "-o", str(out), "--tasks", "all", "--mask-res", "16",
            "--seed", "3", "--summary", str(summary), "--allow-mask-to-obb"]
    assert main(args + ["--workers", "1"]) == EXIT_OK
    first = out.read_bytes()
    assert main(args + ["--workers", "3"]) == EXIT_OK
    assert out.read_bytes() == first
    prov = header(out)
    assert prov["config"]["seed"] == 3 and prov["build"]["mask_resolution"] == 16
    assert "workers" not in prov["config"]
    rows = read_rows(out)
    assert {r["task"] for r in rows} == {"rec", "rec_obb", "res", "det", "pal", "ggl"}
    info = json.loads(summary.read_text())
    assert info["records"] == len(rows)


def test_build_dataset_schema_violation_and_holdout(tmp_path):
    anns = annotations(6) + [{"image_id": "bad", "expression": "x"}]
    src = write_lines(tmp_path / "ann.jsonl", anns)
    hold = tmp_path / "hold.txt"
    hold.write_text("# held out\nimg0\n")
    out = str(tmp_path / "ds.jsonl")
    code = main(["build-dataset", src, "-o", out, "--holdout", str(hold), "--summary", str(tmp_path / "s.json")])
    assert code == EXIT_DIAGNOSTICS
    rows = read_rows(out)
    assert len(rows) == 3 and all(r["image"] != "img0" for r in rows)
    info = json.loads((tmp_path / "s.json").read_text())
    assert info["leakage_dropped"] == 3 and len(info["input_errors"]) == 1


def test_eval_writes_metrics_rows_and_figure(tmp_path):
    gts = write_lines(tmp_path / "gt.jsonl", [
        {"sample_id": "a", "hbb": [0.1, 0.1, 0.5, 0.5], "image_width": 10, "image_height": 10},
        {"sample_id": "b", "hbb": [0.5, 0.5, 0.9, 0.9], "image_width": 10, "image_height": 10},
    ])
    preds = write_lines(tmp_path / "p.jsonl", [
        {"sample_id": "a", "raw_text": "It is at <box>[100,100,500,500]</box>."},
        {"sample_id": "b", "raw_text": "I cannot find it."},
    ])
    out, rows = tmp_path / "m.json", tmp_path / "rows.tsv"
    code = main(["eval", preds, gts, "-o", str(out), "--rows", str(rows), "--format", "tsv",
                 "--figures", str(tmp_path / "fig")])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert report["metrics"]["acc@0.5_hbb"] == 0.5
    assert report["provenance"]["command"] == "eval"
    table = rows.read_text().splitlines()
    assert table[0].startswith("# provenance:") and len(table) == 4
    assert (tmp_path / "fig" / "iou_histogram.png").stat().st_size > 0


def test_eval_ground_truth_must_parse(tmp_path):
    gts = write_lines(tmp_path / "gt.jsonl", ["{broken"])
    preds = write_lines(tmp_path / "p.jsonl", [])
    assert main(["eval", preds, gts, "-o", str(tmp_path / "m.json")]) == EXIT_ERROR


def test_analyze_table_and_figures(tmp_path):
    masks = [pixel_mask_json(64, 64, (i, i, i + 1 + i % 7, i + 2)) for i in range(0, 60, 3)]
    src = write_lines(tmp_path / "masks.jsonl", [{"mask": m} for m in masks])
    out = tmp_path / "table.csv"
    figs = tmp_path / "figs"
    assert main(["analyze", src, "-o", str(out), "--n-list", "8,16,32", "--figures", str(figs)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# provenance:")
    assert lines[1].split(",")[:2] == ["n", "mode"] and len(lines) == 2 + 6
    assert (figs / "disappearance_rate.png").exists() and (figs / "mask_text_length.png").exists()
    out_json = tmp_path / "table.json"
    assert main(["analyze", src, "-o", str(out_json), "--format", "json", "--n-list", "8"]) == EXIT_OK
    assert len(json.loads(out_json.read_text())["rows"]) == 2


def test_refine_prompts(tmp_path):
    src = write_lines(tmp_path / "r.jsonl", [
        {"id": 1, "image_width": 64, "image_height": 64, "box": "<box>[100,100,600,600]</box>",
         "mask": "<seg>0*4|0110|0110|0*4</seg>"},
        {"id": 2, "image_width": 64, "image_height": 64, "box": [0.1, 0.1, 0.2, 0.2],
         "mask": {"grid": ["00", "00"]}},
        {"id": 3, "image_width": 64},
    ])
    out = str(tmp_path / "p.jsonl")
    assert main(["refine-prompts", src, "-o", out, "--seed", "1"]) == EXIT_DIAGNOSTICS
    rows = read_rows(out)
    assert len(rows) == 2
    assert rows[0]["point_labels"].count(1) == 3
    assert rows[1]["fallback_box_only"] is True


def test_project(tmp_path):
    cam = tmp_path / "cam.json"
    cam.write_text(json.dumps({"p": 1e-5, "f": 0.01, "w": 4000, "h": 3000, "theta_deg": 90, "H": 100}))
    src = write_lines(tmp_path / "b.jsonl", [
        {"image_id": "f1", "center": [0, 0, 100], "length": 4, "width": 2, "height": 0, "yaw_deg": 0},
        {"image_id": "f2", "ground_pixel": [2500, 1800], "length": 4, "width": 2, "height": 1.5},
        {"image_id": "f3", "center": [0, 0, 0.1], "length": 4, "width": 2, "height": 1},
    ])
    out = str(tmp_path / "o.jsonl")
    assert main(["project", str(cam), src, "-o", out]) == EXIT_DIAGNOSTICS
    rows = read_rows(out)
    assert len(rows) == 2
    x1, y1, x2, y2 = rows[0]["bbox"]
    assert x2 - x1 == pytest.approx(40) and y2 - y1 == pytest.approx(20)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "groundsig", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
    src = write_lines(tmp_path / "g.jsonl", [{"hbb": [0, 0, 1, 1]}])
    res = subprocess.run([sys.executable, "-m", "groundsig", "encode", src], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.splitlines()[1] == '{"id":null,"hbb":"<box>[0,0,999,999]</box>"}'
