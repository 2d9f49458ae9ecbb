"""Batch command line front end.

Exit status: 0 on success, 1 on a hard error, 2 when the run completed but
emitted per-record diagnostics.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import math
import os
import sys
from typing import List, Optional

from . import __version__
from . import camera3d as cam3d
from . import evaluation as ev
from . import geometry as geo
from . import instruct
from . import textcodec as tc
from .records import iter_jsonl, mask_from_json, open_text, ordered_map, write_jsonl

LOGGER = logging.getLogger("groundsig")

EXIT_OK, EXIT_ERROR, EXIT_DIAGNOSTICS = 0, 1, 2


class CommandError(Exception):
    """Hard failure: bad config or unreadable input."""


def _codec(args) -> tc.CodecConfig:
    try:
        return tc.CodecConfig(args.hbb_res, args.obb_res, args.mask_res, not args.no_rle)
    except ValueError as exc:
        raise CommandError(f"malformed config: {exc}") from exc


def _provenance(args, **extra) -> dict:
    cfg = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "workers", "verbose") and not callable(v)
    }
    return {"tool": "groundsig", "version": __version__, "config": cfg, **extra}


def _read_lines(path: str) -> List[str]:
    try:
        with open_text(path) as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}") from exc


def _report(diags: List[str]) -> int:
    for d in diags:
        LOGGER.warning("%s", d)
    return EXIT_DIAGNOSTICS if diags else EXIT_OK


def _write_table(path: str, rows: List[dict], columns, fmt: str, provenance: dict) -> None:
    with open_text(path, "w") as fh:
        if fmt == "json":
            json.dump({"provenance": provenance, "rows": rows}, fh, indent=2)
            fh.write("\n")
            return
        fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        writer = csv.DictWriter(fh, fieldnames=columns, delimiter="\t" if fmt == "tsv" else ",",
                                extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------- encode/decode


def _encode_row(obj: dict, cfg: tc.CodecConfig, mode: str) -> dict:
    out = {"id": obj.get("id")}
    pixel = bool(obj.get("pixel"))
    w, h = obj.get("image_width"), obj.get("image_height")
    if pixel and not (w and h):
        raise ValueError("pixel rows need image_width and image_height")
    if obj.get("hbb") is not None:
        box = geo.HBB.from_pixels(*obj["hbb"], w, h) if pixel else geo.HBB(*obj["hbb"])
        out["hbb"] = tc.encode_hbb(box, cfg).payload
    if obj.get("obb") is not None:
        box = geo.OBB.from_pixels(*obj["obb"], w, h) if pixel else geo.canonical_obb(*obj["obb"])
        out["obb"] = tc.encode_obb(box, cfg).payload
    if obj.get("mask") is not None:
        mask = mask_from_json(obj["mask"])
        if isinstance(mask, geo.PixelMask):
            mask = geo.downsample(mask, cfg.mask_resolution, mode)
        out["mask"] = tc.encode_mask(mask, cfg).payload
    if len(out) == 1:
        raise ValueError("row carries no hbb, obb or mask")
    return out


def cmd_encode(args) -> int:
    cfg = _codec(args)
    rows, diags = [], []
    for no, obj, err in iter_jsonl(_read_lines(args.input)):
        if err is not None:
            diags.append(f"line {no}: {err}")
            continue
        try:
            rows.append(_encode_row(obj, cfg, args.mode))
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            diags.append(f"line {no}: {exc}")
    write_jsonl(args.output, rows, _provenance(args, command="encode"))
    return _report(diags)


def _value_json(value):
    if isinstance(value, geo.GridMask):
        return {"grid": value.rows()}
    return list(value.as_tuple())


def cmd_decode(args) -> int:
    cfg = _codec(args)
    rows, diags = [], []
    for no, obj, err in iter_jsonl(_read_lines(args.input)):
        if err is not None:
            diags.append(f"line {no}: {err}")
            continue
        text = obj.get("text", obj.get("raw_text")) if isinstance(obj, dict) else None
        if not isinstance(text, str):
            diags.append(f"line {no}: row lacks a text field")
            continue
        signals, skipped = tc.extract_signals(text, cfg)
        row_diags = [f"{d.kind} at offset {d.offset}: {d.reason}" for d in skipped]
        rows.append({
            "id": obj.get("id"),
            "signals": [{"kind": s.kind, "value": _value_json(tc.decode(s, cfg))} for s in signals],
            "diagnostics": row_diags,
        })
        diags.extend(f"line {no}: {d}" for d in row_diags)
    write_jsonl(args.output, rows, _provenance(args, command="decode"))
    return _report(diags)


# --------------------------------------------------------------------------- dataset


def _parse_weights(text: Optional[str]) -> dict:
    out = {}
    for part in (text or "").split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        if not sep:
            raise CommandError(f"malformed weight {part!r}, expected task=value")
        w = float(val)
        if not 0.0 <= w <= 1.0:
            raise CommandError(f"weight for {key} must lie in [0, 1]")
        out[key.strip()] = w
    return out


def _read_holdout(path: Optional[str]) -> set:
    if not path:
        return set()
    ids = set()
    for line in _read_lines(path):
        line = line.strip()
        if line and not line.startswith("#"):
            ids.add(line)
    return ids


def cmd_build_dataset(args) -> int:
    cfg = instruct.BuildConfig(
        codec=_codec(args),
        downsample_mode=args.mode,
        synthesize_masks=args.synthesize_masks,
        allow_mask_to_obb=args.allow_mask_to_obb,
    )
    try:
        tasks = instruct.expand_tasks(args.tasks.split(","), cfg.allow_mask_to_obb)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    weights = _parse_weights(args.weights)
    annotations, diags = [], []
    for no, obj, err in iter_jsonl(_read_lines(args.input)):
        if err is not None:
            diags.append(f"line {no}: {err}")
            continue
        try:
            annotations.append(instruct.Annotation.from_json(obj))
        except Exception as exc:  # jsonschema.ValidationError or ValueError
            msg = getattr(exc, "message", str(exc))
            diags.append(f"line {no}: schema violation: {msg}")
    records, summary = instruct.build_dataset(
        annotations,
        [instruct.job_key(t, p) for t, p in tasks],
        cfg,
        seed=args.seed,
        weights=weights,
        held_out=_read_holdout(args.holdout),
        workers=args.workers,
    )
    header = _provenance(args, command="build-dataset", build=cfg.to_json())
    write_jsonl(args.output, (r.to_json() for r in records), header)
    report = {"provenance": header, **summary.to_json(), "input_errors": diags}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.summary:
        with open_text(args.summary, "w") as fh:
            fh.write(text)
    else:
        sys.stderr.write(text)
    for d in summary.diagnostics:
        LOGGER.info("%s", d)
    return _report(diags)


# --------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    cfg = _codec(args)
    gts, gt_diags, gt_fail = ev.parse_rows(_read_lines(args.gts), cfg, ground_truth=True)
    if gt_fail:
        raise CommandError("ground truth file has unparseable rows:\n  " + "\n  ".join(gt_diags))
    preds, diags, failures = ev.parse_rows(_read_lines(args.preds), cfg)
    try:
        report = ev.evaluate(preds, gts, obb_as_hbb=args.geochat, parse_failures=failures,
                             diagnostics=diags)
    except ev.DuplicateSampleError as exc:
        raise CommandError(f"ground truth: {exc}") from exc
    prov = _provenance(args, command="eval")
    with open_text(args.output, "w") as fh:
        json.dump(report.to_json(prov), fh, indent=2)
        fh.write("\n")
    if args.rows:
        with open_text(args.rows, "w") as fh:
            fh.write(report.to_csv("\t" if args.format == "tsv" else ",", prov))
    if args.figures:
        from .plotting import plot_iou_histogram

        plot_iou_histogram(report.rows, os.path.join(args.figures, "iou_histogram.png"))
    return _report(report.diagnostics)


# --------------------------------------------------------------------------- analyze

ANALYZE_COLUMNS = ("n", "mode", "masks", "disappeared", "disappearance_rate",
                   "raw_mean", "rle_mean", "length_ratio")


def _int_list(text: str) -> List[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CommandError(f"bad integer list {text!r}") from exc
    if not vals or min(vals) < 1:
        raise CommandError("resolutions must be positive integers")
    return vals


def analyze_masks(masks, n_list, modes) -> List[dict]:
    rows = []
    for mode in modes:
        for n in n_list:
            grids = [geo.downsample(m, n, mode) for m in masks]
            lengths = [ev.mask_lengths(g) for g in grids]
            gone = sum(g.empty for g in grids)
            raw = math.fsum(r for r, _ in lengths) / len(lengths)
            rle = math.fsum(c for _, c in lengths) / len(lengths)
            rows.append({
                "n": n, "mode": mode, "masks": len(masks), "disappeared": gone,
                "disappearance_rate": gone / len(masks),
                "raw_mean": raw, "rle_mean": rle, "length_ratio": rle / raw,
            })
    return rows


def cmd_analyze(args) -> int:
    n_list = _int_list(args.n_list)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in geo.DOWNSAMPLE_MODES:
            raise CommandError(f"unknown mode {m!r}")
    masks, diags = [], []
    for no, obj, err in iter_jsonl(_read_lines(args.input)):
        if err is not None:
            diags.append(f"line {no}: {err}")
            continue
        try:
            m = mask_from_json(obj.get("mask", obj))
            if isinstance(m, geo.GridMask):
                raise ValueError("analyze needs full-resolution masks, got a grid")
            masks.append(m)
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            diags.append(f"line {no}: {exc}")
    if not masks:
        raise CommandError("empty mask corpus")
    rows = analyze_masks(masks, n_list, modes)
    prov = _provenance(args, command="analyze")
    _write_table(args.output, rows, ANALYZE_COLUMNS, args.format, prov)
    if args.figures:
        from .plotting import plot_disappearance, plot_lengths

        plot_disappearance(rows, os.path.join(args.figures, "disappearance_rate.png"))
        plot_lengths(rows, os.path.join(args.figures, "mask_text_length.png"))
    return _report(diags)


# --------------------------------------------------------------------------- refine


def _refine_row(item, cfg: tc.CodecConfig, seed: int):
    from .refine import make_prompt

    index, no, obj = item
    w, h = int(obj["image_width"]), int(obj["image_height"])
    mask = obj["mask"]
    if isinstance(mask, str):
        grid = tc.decode_mask(mask, tc.CodecConfig(mask_resolution=tc.infer_mask_resolution(mask)))
    else:
        grid = mask_from_json(mask)
        if not isinstance(grid, geo.GridMask):
            raise ValueError("mask must be a grid")
    box = obj["box"]
    box = tc.decode_hbb(box, cfg) if isinstance(box, str) else geo.HBB(*box)
    prompt = make_prompt(grid, box, (w, h), [seed, index])
    return {"id": obj.get("id"), **prompt.to_json(obj.get("image", ""))}


def _safe_refine(item, cfg, seed):
    try:
        return _refine_row(item, cfg, seed), None
    except (ValueError, TypeError, KeyError, AttributeError) as exc:
        return None, f"line {item[1]}: {exc}"


def cmd_refine_prompts(args) -> int:
    cfg = _codec(args)
    items, diags = [], []
    for no, obj, err in iter_jsonl(_read_lines(args.input)):
        if err is not None:
            diags.append(f"line {no}: {err}")
            continue
        items.append((len(items), no, obj))
    worker = functools.partial(_safe_refine, cfg=cfg, seed=args.seed)
    rows = []
    for row, diag in ordered_map(worker, items, args.workers):
        if diag:
            diags.append(diag)
        else:
            rows.append(row)
    write_jsonl(args.output, rows, _provenance(args, command="refine-prompts"))
    return _report(diags)


# --------------------------------------------------------------------------- project


def _load_cameras(path: str) -> dict:
    text = "\n".join(_read_lines(path)).strip()
    if not text:
        raise CommandError("empty camera file")
    try:
        try:
            recs = [json.loads(text)]
        except json.JSONDecodeError:
            recs = [obj for _, obj, err in iter_jsonl(text.splitlines()) if err is None]
        cams = {}
        for rec in recs:
            cams[str(rec.get("camera_id", "default"))] = cam3d.CameraModel.from_record(rec)
        return cams
    except (ValueError, TypeError, AttributeError) as exc:
        raise CommandError(f"bad camera file: {exc}") from exc


def _project_row(obj: dict, cams: dict) -> dict:
    key = str(obj.get("camera_id", "default"))
    if key not in cams:
        key = next(iter(cams)) if len(cams) == 1 else key
    cam = cams[key]
    yaw = math.radians(float(obj.get("yaw_deg", 0.0)))
    dims = [float(obj[k]) for k in ("length", "width", "height")]
    if "ground_pixel" in obj:
        foot = cam3d.pixel_to_ground(*[float(v) for v in obj["ground_pixel"]], cam)
        box = cam3d.Box3.on_ground(foot, *dims, yaw, cam)
    else:
        box = cam3d.Box3(cam3d.Point3(*[float(v) for v in obj["center"]]), *dims, yaw)
    pixels, hbb = cam3d.project_box3(box, cam)
    out = {
        "image_id": str(obj.get("image_id", obj.get("id", ""))),
        "image_width": cam.w,
        "image_height": cam.h,
        "bbox": [v for v in hbb.to_pixels(cam.w, cam.h)],
        "hbb": list(hbb.as_tuple()),
        "corners_px": [list(p) for p in pixels],
        "center_camera": [box.center.X, box.center.Y, box.center.Z],
    }
    for k in ("expression", "category", "image"):
        if k in obj:
            out[k] = obj[k]
    return out


def cmd_project(args) -> int:
    cams = _load_cameras(args.camera)
    rows, diags = [], []
    for no, obj, err in iter_jsonl(_read_lines(args.input)):
        if err is not None:
            diags.append(f"line {no}: {err}")
            continue
        try:
            rows.append(_project_row(obj, cams))
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            diags.append(f"line {no}: {exc}")
    write_jsonl(args.output, rows, _provenance(args, command="project"))
    return _report(diags)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--hbb-res", type=int, default=1000)
    common.add_argument("--obb-res", type=int, default=100)
    common.add_argument("--mask-res", type=int, default=32)
    common.add_argument("--no-rle", action="store_true", help="emit raw mask rows")
    common.add_argument("--mode", choices=geo.DOWNSAMPLE_MODES, default="max_pool")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--format", choices=("csv", "tsv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groundsig", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[common], help="geometry JSONL -> tagged text")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="tagged text JSONL -> geometry")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("build-dataset", parents=[common], help="annotations -> instruction JSONL")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--tasks", default="rec")
    p.add_argument("--weights", default=None, help="e.g. pal=0.5,ggl:mask->hbb=0.2")
    p.add_argument("--holdout", default=None, help="file of held-out image ids, one per line")
    p.add_argument("--summary", default=None)
    p.add_argument("--synthesize-masks", action="store_true")
    p.add_argument("--allow-mask-to-obb", action="store_true")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("eval", parents=[common], help="score predictions")
    p.add_argument("preds")
    p.add_argument("gts")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--rows", default=None, help="per-sample table path")
    p.add_argument("--geochat", action="store_true", help="score predicted OBBs as their enclosing HBBs")
    p.add_argument("--figures", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="disappearance and length tables")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--n-list", default="16,24,32,100")
    p.add_argument("--modes", default="max_pool,nearest")
    p.add_argument("--figures", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("refine-prompts", parents=[common], help="coarse masks -> segmenter prompts")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_refine_prompts)

    p = sub.add_parser("project", parents=[common], help="3D boxes -> 2D HBB annotations")
    p.add_argument("camera")
    p.add_argument("input")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_project)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        LOGGER.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
