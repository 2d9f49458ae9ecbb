"""Scoring of grounding predictions: Acc@0.5, mIoU, BBox Consistency Score, and corpus statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import geometry as geo
from . import textcodec as tc
from .geometry import HBB, OBB, GridMask, PixelMask
from .records import iter_jsonl, mask_from_json

IOU_THRESHOLD = 0.5


class DuplicateSampleError(ValueError):
    pass


class IncompleteTripleError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionTriple:
    sample_id: str
    hbb: Optional[HBB] = None
    obb: Optional[OBB] = None
    mask: object = None  # GridMask or PixelMask

    @property
    def complete(self) -> bool:
        return self.hbb is not None and self.obb is not None and self.mask is not None


def index_by_id(items: Iterable[PredictionTriple]) -> Dict[str, PredictionTriple]:
    out: Dict[str, PredictionTriple] = {}
    for t in items:
        if t.sample_id in out:
            raise DuplicateSampleError(f"duplicate sample_id {t.sample_id!r}")
        out[t.sample_id] = t
    return out


def _acc(preds, gts, attr, iou_fn) -> float:
    pmap, gmap = index_by_id(preds), index_by_id(gts)
    hits = total = 0
    for sid, gt in gmap.items():
        g = getattr(gt, attr)
        if g is None:
            continue
        total += 1
        p = pmap.get(sid)
        pv = getattr(p, attr) if p is not None else None
        if pv is not None and iou_fn(pv, g) >= IOU_THRESHOLD:
            hits += 1
    return hits / total if total else 0.0


def acc_at_05_hbb(preds: Iterable[PredictionTriple], gts: Iterable[PredictionTriple]) -> float:
    """Fraction of ground-truth boxes matched with IoU >= 0.5; missing predictions miss."""
    return _acc(preds, gts, "hbb", geo.hbb_iou)


def acc_at_05_obb(preds: Iterable[PredictionTriple], gts: Iterable[PredictionTriple]) -> float:
    return _acc(preds, gts, "obb", geo.rotated_iou)


def _to_pixels(mask, width: int, height: int) -> PixelMask:
    if isinstance(mask, GridMask):
        return geo.upsample(mask, width, height)
    if (mask.width, mask.height) != (width, height):
        raise ValueError(
            f"mask is {mask.width}x{mask.height}, image is {width}x{height}"
        )
    return mask


def sample_mask_iou(pred, gt, width: int, height: int) -> float:
    """IoU at full image resolution after nearest upsampling of grid masks."""
    return geo.mask_iou(_to_pixels(pred, width, height), _to_pixels(gt, width, height))


@dataclass
class MaskScores:
    miou: float
    acc: float
    ious: Dict[str, float]
    diagnostics: List[str] = field(default_factory=list)


def miou(pred_masks: Mapping, gt_masks: Mapping, image_dims: Mapping) -> MaskScores:
    """Mean mask IoU over the ground-truth samples, plus mask-level Acc@0.5.

    ``pred_masks`` and ``gt_masks`` map sample ids to masks; ``image_dims`` maps
    them to ``(width, height)``.
    """
    ious: Dict[str, float] = {}
    diags: List[str] = []
    for sid, gt in gt_masks.items():
        pred = pred_masks.get(sid)
        if pred is None:
            ious[sid] = 0.0
            continue
        w, h = image_dims[sid]
        try:
            ious[sid] = sample_mask_iou(pred, gt, w, h)
        except ValueError as exc:
            ious[sid] = 0.0
            diags.append(f"{sid}: {exc}")
    if not ious:
        return MaskScores(0.0, 0.0, ious, diags)
    vals = list(ious.values())
    return MaskScores(
        math.fsum(vals) / len(vals),
        sum(v >= IOU_THRESHOLD for v in vals) / len(vals),
        ious,
        diags,
    )


def bcs_pairs(t: PredictionTriple) -> Tuple[float, float, float]:
    """The three pairwise IoUs between the HBB, the OBB's HBB and the mask's HBB."""
    if not t.complete:
        raise IncompleteTripleError(f"incomplete-triple: sample {t.sample_id!r}")
    from_obb = geo.obb_to_hbb(t.obb)
    try:
        from_mask = geo.mask_to_hbb(t.mask)
    except geo.EmptyMaskError:
        return geo.hbb_iou(t.hbb, from_obb), 0.0, 0.0
    return (
        geo.hbb_iou(t.hbb, from_obb),
        geo.hbb_iou(t.hbb, from_mask),
        geo.hbb_iou(from_obb, from_mask),
    )


def bcs(t: PredictionTriple) -> float:
    """BBox Consistency Score; an empty mask scores its two pairs as 0."""
    return math.fsum(bcs_pairs(t)) / 3.0


def disappearance_rate(masks: Sequence[PixelMask], n: int, mode: str = "max_pool") -> float:
    if not masks:
        raise ValueError("no masks given")
    gone = sum(geo.downsample(m, n, mode).empty for m in masks)
    return gone / len(masks)


def mask_lengths(grid: GridMask) -> Tuple[int, int]:
    """Character counts of the mask text body, raw and run-length encoded."""
    return len(tc.mask_body(grid, rle=False)), len(tc.mask_body(grid, rle=True))


def length_stats(signals: Iterable[tc.TextSignal], cfg: Optional[tc.CodecConfig] = None) -> dict:
    """Payload body lengths per kind; masks are measured in both encodings.

    Mask resolution is read off each signal unless ``cfg`` is given.
    """
    per_kind: Dict[str, list] = {"hbb": [], "obb": [], "mask": []}
    for sig in signals:
        if sig.kind == "mask":
            n = cfg.mask_resolution if cfg else tc.infer_mask_resolution(sig)
            grid = tc.decode_mask(sig, tc.CodecConfig(mask_resolution=n))
            per_kind["mask"].append(mask_lengths(grid))
        else:
            per_kind[sig.kind].append(len(sig.body))
    out = {}
    for kind in ("hbb", "obb"):
        vals = per_kind[kind]
        if vals:
            out[kind] = {"count": len(vals), "mean": sum(vals) / len(vals), "max": max(vals)}
    if per_kind["mask"]:
        raw = [r for r, _ in per_kind["mask"]]
        rle = [c for _, c in per_kind["mask"]]
        k = len(raw)
        out["mask"] = {
            "count": k,
            "raw_mean": sum(raw) / k,
            "raw_max": max(raw),
            "rle_mean": sum(rle) / k,
            "rle_max": max(rle),
            "ratio": math.fsum(c / r for r, c in zip(raw, rle)) / k,
        }
    return out


# --------------------------------------------------------------------------- files


@dataclass(frozen=True)
class GroundTruth:
    triple: PredictionTriple
    width: Optional[int] = None
    height: Optional[int] = None


def _parse_signals(row: dict, cfg: tc.CodecConfig):
    """Signals from a row: ``raw_text`` via extraction, or explicit normalized fields."""
    hbb = obb = mask = None
    diags: List[str] = []
    if "raw_text" in row:
        if not isinstance(row["raw_text"], str):
            raise ValueError("raw_text must be a string")
        signals, skipped = tc.extract_signals(row["raw_text"], cfg)
        diags.extend(f"skipped {d.kind} at offset {d.offset}: {d.reason}" for d in skipped)
        for sig in signals:
            if sig.kind == "hbb" and hbb is None:
                hbb = tc.decode_hbb(sig, cfg)
            elif sig.kind == "obb" and obb is None:
                obb = tc.decode_obb(sig, cfg)
            elif sig.kind == "mask" and mask is None:
                mask = tc.decode_mask(sig, cfg)
    if row.get("hbb") is not None:
        hbb = HBB(*[float(v) for v in row["hbb"]])
    if row.get("obb") is not None:
        obb = geo.canonical_obb(*[float(v) for v in row["obb"]])
    if row.get("mask") is not None:
        m = row["mask"]
        mask = tc.decode_mask(m, cfg) if isinstance(m, str) else mask_from_json(m)
    return hbb, obb, mask, diags


def parse_rows(lines: Iterable[str], cfg: tc.CodecConfig = tc.CodecConfig(), ground_truth: bool = False):
    """Parse prediction or ground-truth JSONL.

    Never raises on content: broken lines become diagnostics.  Returns
    ``(items, diagnostics, failures)`` where items are PredictionTriple (or
    GroundTruth) and ``failures`` counts lines or signal spans that did not parse.
    """
    items, diags = [], []
    failures = 0
    for no, obj, err in iter_jsonl(lines):
        if err is not None:
            diags.append(f"line {no}: {err}")
            failures += 1
            continue
        try:
            if not isinstance(obj, dict) or "sample_id" not in obj:
                raise ValueError("row lacks sample_id")
            sid = str(obj["sample_id"])
            hbb, obb, mask, sd = _parse_signals(obj, cfg)
            diags.extend(f"line {no} ({sid}): {d}" for d in sd)
            failures += bool(sd)
            triple = PredictionTriple(sid, hbb, obb, mask)
            if ground_truth:
                w, h = obj.get("image_width"), obj.get("image_height")
                items.append(GroundTruth(triple, int(w) if w else None, int(h) if h else None))
            else:
                items.append(triple)
        except (ValueError, TypeError, KeyError) as exc:
            diags.append(f"line {no}: {exc}")
            failures += 1
    return items, diags, failures


@dataclass
class EvalReport:
    metrics: Dict[str, float]
    rows: List[dict]
    parse_failures: int
    diagnostics: List[str] = field(default_factory=list)

    COLUMNS = ("sample_id", "hbb_iou", "obb_iou", "mask_iou", "bcs", "status")

    def to_json(self, provenance: Optional[dict] = None) -> dict:
        out = {
            "metrics": self.metrics,
            "parse_failures": self.parse_failures,
            "diagnostics": self.diagnostics,
            "rows": self.rows,
        }
        if provenance is not None:
            out = {"provenance": provenance, **out}
        return out

    def to_csv(self, delimiter: str = ",", provenance: Optional[dict] = None) -> str:
        buf = io.StringIO()
        if provenance is not None:
            buf.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, delimiter=delimiter,
                                extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in self.COLUMNS})
        return buf.getvalue()


def _score_sample(pred: Optional[PredictionTriple], gt: GroundTruth, obb_as_hbb: bool) -> dict:
    g = gt.triple
    row = {"sample_id": g.sample_id, "hbb_iou": None, "obb_iou": None, "mask_iou": None,
           "bcs": None, "status": "ok"}
    notes = []
    if pred is None:
        row["status"] = "missing"
        pred = PredictionTriple(g.sample_id)
    p_hbb = pred.hbb
    if obb_as_hbb and pred.obb is not None:
        p_hbb = geo.obb_to_hbb(pred.obb)
    if g.hbb is not None:
        row["hbb_iou"] = geo.hbb_iou(p_hbb, g.hbb) if p_hbb is not None else 0.0
    if g.obb is not None:
        row["obb_iou"] = geo.rotated_iou(pred.obb, g.obb) if pred.obb is not None else 0.0
    if g.mask is not None:
        if pred.mask is None:
            row["mask_iou"] = 0.0
        else:
            w = gt.width or (g.mask.width if isinstance(g.mask, PixelMask) else g.mask.n)
            h = gt.height or (g.mask.height if isinstance(g.mask, PixelMask) else g.mask.n)
            try:
                row["mask_iou"] = sample_mask_iou(pred.mask, g.mask, w, h)
            except ValueError as exc:
                row["mask_iou"] = 0.0
                notes.append(str(exc))
    if pred.complete:
        row["bcs"] = bcs(pred)
        if pred.mask.empty:
            notes.append("empty mask in BCS triple")
    if notes:
        row["status"] = "; ".join(notes)
    return row


def _mean(vals: List[float]) -> float:
    return math.fsum(vals) / len(vals) if vals else 0.0


def evaluate(
    preds: Sequence[PredictionTriple],
    gts: Sequence[GroundTruth],
    obb_as_hbb: bool = False,
    parse_failures: int = 0,
    diagnostics: Sequence[str] = (),
) -> EvalReport:
    """Score predictions against ground truth, one row per ground-truth sample.

    ``obb_as_hbb`` replaces each predicted HBB with the box enclosing the
    predicted OBB, for models that only emit oriented boxes.
    """
    diags = list(diagnostics)
    pmap: Dict[str, PredictionTriple] = {}
    for p in preds:
        if p.sample_id in pmap:
            diags.append(f"{p.sample_id}: duplicate prediction ignored")
            continue
        pmap[p.sample_id] = p
    index_by_id(g.triple for g in gts)
    rows = [_score_sample(pmap.get(g.triple.sample_id), g, obb_as_hbb) for g in gts]
    for r in rows:
        if r["status"] not in ("ok", "missing"):
            diags.append(f"{r['sample_id']}: {r['status']}")
    metrics: Dict[str, float] = {"samples": float(len(rows))}
    for key, name in (("hbb_iou", "acc@0.5_hbb"), ("obb_iou", "acc@0.5_obb"), ("mask_iou", "acc@0.5_mask")):
        vals = [r[key] for r in rows if r[key] is not None]
        if vals:
            metrics[name] = sum(v >= IOU_THRESHOLD for v in vals) / len(vals)
    masks = [r["mask_iou"] for r in rows if r["mask_iou"] is not None]
    if masks:
        metrics["miou"] = _mean(masks)
    scores = [r["bcs"] for r in rows if r["bcs"] is not None]
    if scores:
        metrics["bcs"] = _mean(scores)
        metrics["bcs_samples"] = float(len(scores))
    return EvalReport(metrics, rows, parse_failures, diags)
