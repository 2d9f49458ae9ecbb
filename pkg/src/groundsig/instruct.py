"""Instruction-tuning samples from grounding annotations.

Besides plain referring (``rec``), oriented referring (``rec_obb``),
segmentation (``res``) and detection (``det``) samples, two hybrid kinds are
generated:

* ``pal`` - the query carries a sparse signal and the answer is a denser one.
* ``ggl`` - two turns; the second answer is the sparse signal computed purely
  geometrically from the first answer, so it never depends on the image.
"""

from __future__ import annotations

import functools
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from . import geometry as geo
from . import textcodec as tc
from .geometry import HBB, OBB, GridMask, PixelMask
from .records import mask_from_json, ordered_map

ROLES = ("human", "model")
TASKS = ("rec", "rec_obb", "res", "det", "pal", "ggl")
PAL_PAIRS = (("hbb", "obb"), ("hbb", "mask"), ("obb", "mask"))
GGL_PAIRS = (("obb", "hbb"), ("mask", "hbb"), ("mask", "obb"))
SIGNAL_NAMES = {"hbb": "bounding box", "obb": "oriented bounding box", "mask": "segmentation mask"}
TASK_CODES = {name: i for i, name in enumerate(TASKS)}

REF = "<ref>{prompt}</ref>"

TEMPLATES = {
    "rec": (
        "[refer] give me the bounding box of " + REF,
        "[refer] output the bounding box of the " + REF + " in the image.",
        "[refer] from this image, provide the bounding box for " + REF + ".",
        "[refer] please provide the bounding box coordinate of the region this sentence describes: " + REF,
        "[refer] can you locate and provide the bounding box for " + REF + " in the given image?",
    ),
    "rec_obb": (
        "[refer] give me the oriented bounding box of " + REF,
        "[refer] output the oriented bounding box of the " + REF + " in the image.",
        "[refer] from this image, provide the oriented bounding box for " + REF + ".",
        "[refer] please provide the oriented bounding box coordinate of the region this sentence describes: " + REF,
        "[refer] can you locate and provide the oriented bounding box for " + REF + " in the given image?",
    ),
    "res": (
        "[refer] give me the segmentation mask of " + REF,
        "[refer] output the segmentation mask of the " + REF + " in the image.",
        "[refer] from this image, provide the segmentation mask for " + REF + ".",
        "[refer] please provide the segmentation mask of the region this sentence describes: " + REF + ".",
        "[refer] can you segment the " + REF + " in the given image?",
    ),
    "det": (
        "[refer] give me the bounding box of all " + REF,
        "[refer] output the bounding box of all " + REF + " in the image.",
        "[refer] from this image, provide the bounding box for all " + REF + ".",
        "[refer] please provide the bounding box coordinate of all objects in this sentence describes: " + REF,
        "[refer] can you locate and provide the bounding box for all " + REF + " in the given image?",
    ),
    "pal": (
        "[refer] give me the {dense} of " + REF + "{sparse}",
        "[refer] output the {dense} of the " + REF + "{sparse} in the image.",
        "[refer] from this image, provide the {dense} for " + REF + "{sparse}.",
        "[refer] please provide the {dense} coordinate of this region: " + REF + "{sparse}",
        "[refer] can you locate and provide the {dense} for " + REF + "{sparse} in the given image?",
    ),
    "ggl": (
        "[refer] give me the {dense} of " + REF,
        "[refer] output the {dense} of the " + REF + " in the image.",
        "[refer] from this image, provide the {dense} for " + REF + ".",
        "[refer] please provide the {dense} coordinate of the region this sentence describes: " + REF,
        "[refer] can you locate and provide the {dense} for " + REF + " in the given image?",
    ),
}
GGL_FOLLOWUP = "The {sparse} corresponding to this {dense} is"


class SkipSample(ValueError):
    """The annotation cannot produce the requested sample; ``reason`` is a short tag."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["image_id", "image_width", "image_height", "expression"],
    "properties": {
        "image_id": {"type": ["string", "integer"]},
        "image": {"type": "string"},
        "image_width": {"type": "integer", "minimum": 1},
        "image_height": {"type": "integer", "minimum": 1},
        "expression": {"type": "string", "minLength": 1},
        "category": {"type": "string"},
        "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        "obb": {"type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5},
        "mask": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["rle", "size"],
                    "properties": {
                        "rle": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        "size": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                 "minItems": 2, "maxItems": 2},
                    },
                },
                {
                    "type": "object",
                    "required": ["grid"],
                    "properties": {
                        "grid": {"type": "array", "items": {"type": "string", "pattern": "^[01]+$"},
                                 "minItems": 1},
                    },
                },
            ]
        },
    },
    "anyOf": [{"required": ["bbox"]}, {"required": ["obb"]}, {"required": ["mask"]}],
}

INSTRUCTION_SCHEMA = {
    "type": "object",
    "required": ["id", "image", "conversations", "task", "meta"],
    "properties": {
        "id": {"type": "string"},
        "image": {"type": "string"},
        "task": {"enum": list(TASKS)},
        "conversations": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["from", "value"],
                "properties": {"from": {"enum": list(ROLES)}, "value": {"type": "string"}},
            },
        },
        "meta": {"type": "object"},
    },
}


@dataclass(frozen=True)
class Annotation:
    image_id: str
    image_width: int
    image_height: int
    expression: str
    hbb: Optional[HBB] = None
    obb: Optional[OBB] = None
    mask: object = None  # PixelMask or GridMask
    category: Optional[str] = None
    image: Optional[str] = None

    def __post_init__(self):
        if not self.expression:
            raise ValueError("expression must be non-empty")
        if self.hbb is None and self.obb is None and self.mask is None:
            raise ValueError("annotation carries no signal")

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        """Validate and convert one pixel-space annotation record."""
        jsonschema.validate(obj, ANNOTATION_SCHEMA)
        w, h = obj["image_width"], obj["image_height"]
        hbb = HBB.from_pixels(*obj["bbox"], w, h) if "bbox" in obj else None
        obb = OBB.from_pixels(*obj["obb"], w, h) if "obb" in obj else None
        mask = mask_from_json(obj["mask"]) if "mask" in obj else None
        if isinstance(mask, PixelMask) and (mask.width, mask.height) != (w, h):
            raise ValueError(f"mask is {mask.width}x{mask.height}, image is {w}x{h}")
        return cls(
            image_id=str(obj["image_id"]),
            image_width=w,
            image_height=h,
            expression=obj["expression"],
            hbb=hbb,
            obb=obb,
            mask=mask,
            category=obj.get("category"),
            image=obj.get("image"),
        )


@dataclass(frozen=True)
class InstructionRecord:
    image_id: str
    conversations: Tuple[Tuple[str, str], ...]
    task: str
    seed_template_index: int
    image: str = ""
    meta: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for i, (role, _) in enumerate(self.conversations):
            if role != ROLES[i % 2]:
                raise ValueError("conversation must alternate human/model turns, human first")

    @property
    def record_id(self) -> str:
        rid = f"{self.image_id}-{self.meta.get('index', 0)}-{self.task}"
        if "pair" in self.meta:
            rid += "-" + self.meta["pair"].replace("->", "2")
        return rid

    def model_turns(self) -> List[str]:
        return [text for role, text in self.conversations if role == "model"]

    def to_json(self) -> dict:
        meta = dict(self.meta)
        meta["seed_template_index"] = self.seed_template_index
        return {
            "id": self.record_id,
            "image": self.image or self.image_id,
            "conversations": [{"from": r, "value": v} for r, v in self.conversations],
            "task": self.task,
            "meta": meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InstructionRecord":
        jsonschema.validate(obj, INSTRUCTION_SCHEMA)
        meta = dict(obj["meta"])
        idx = meta.pop("seed_template_index", 0)
        return cls(
            image_id=str(meta.get("image_id", obj["image"])),
            conversations=tuple((c["from"], c["value"]) for c in obj["conversations"]),
            task=obj["task"],
            seed_template_index=idx,
            image=obj["image"],
            meta=meta,
        )


@dataclass(frozen=True)
class BuildConfig:
    codec: tc.CodecConfig = tc.CodecConfig()
    downsample_mode: str = "max_pool"
    synthesize_masks: bool = False  # rasterize the OBB when no mask is annotated
    allow_mask_to_obb: bool = False  # enables the min-area-rectangle conversion
    image_token: str = "<image>\n"

    def to_json(self) -> dict:
        return {
            "hbb_resolution": self.codec.hbb_resolution,
            "obb_resolution": self.codec.obb_resolution,
            "mask_resolution": self.codec.mask_resolution,
            "rle_enabled": self.codec.rle_enabled,
            "downsample_mode": self.downsample_mode,
            "synthesize_masks": self.synthesize_masks,
            "allow_mask_to_obb": self.allow_mask_to_obb,
        }


# --------------------------------------------------------------------------- signals


def _template_index(seed) -> int:
    return int(np.random.default_rng(seed).integers(0, 5))


def _grid(a: Annotation, cfg: BuildConfig) -> Tuple[GridMask, str]:
    n = cfg.codec.mask_resolution
    if isinstance(a.mask, GridMask):
        if a.mask.n == n:
            return a.mask, "annotation"
        pix = geo.upsample(a.mask, a.image_width, a.image_height)
        return geo.downsample(pix, n, cfg.downsample_mode), "annotation"
    if isinstance(a.mask, PixelMask):
        return geo.downsample(a.mask, n, cfg.downsample_mode), "annotation"
    if cfg.synthesize_masks and a.obb is not None:
        pix = geo.rasterize_obb(a.obb, a.image_width, a.image_height)
        return geo.downsample(pix, n, cfg.downsample_mode), "rasterized_obb"
    raise SkipSample("missing-mask", f"image {a.image_id}")


def _mask_grid(a: Annotation, cfg: BuildConfig) -> Tuple[GridMask, str]:
    grid, source = _grid(a, cfg)
    if grid.empty:
        raise SkipSample("disappeared-object", f"mask vanished at {grid.n}x{grid.n}")
    return grid, source


def _hbb(a: Annotation, cfg: BuildConfig) -> HBB:
    if a.hbb is not None:
        return a.hbb
    if a.obb is not None:
        return geo.obb_to_hbb(a.obb)
    if a.mask is not None and not a.mask.empty:
        return geo.mask_to_hbb(a.mask)
    raise SkipSample("missing-hbb", f"image {a.image_id}")


def _obb(a: Annotation, cfg: BuildConfig) -> OBB:
    if a.obb is not None:
        return a.obb
    if cfg.allow_mask_to_obb and a.mask is not None:
        grid, _ = _mask_grid(a, cfg)
        return geo.mask_to_obb(grid)
    raise SkipSample("missing-obb", f"image {a.image_id}")


def _signal(kind: str, a: Annotation, cfg: BuildConfig) -> Tuple[tc.TextSignal, dict]:
    if kind == "hbb":
        return tc.encode_hbb(_hbb(a, cfg), cfg.codec), {}
    if kind == "obb":
        return tc.encode_obb(_obb(a, cfg), cfg.codec), {}
    grid, source = _mask_grid(a, cfg)
    return tc.encode_mask(grid, cfg.codec), {"mask_source": source}


def _record(a, task, turns, index, meta) -> InstructionRecord:
    meta = {"image_id": a.image_id, **meta}
    return InstructionRecord(
        image_id=a.image_id,
        conversations=tuple(turns),
        task=task,
        seed_template_index=index,
        image=a.image or a.image_id,
        meta=meta,
    )


def _fill(template: str, a: Annotation, **kw) -> str:
    return template.format(prompt=a.expression, dense=kw.get("dense", ""), sparse=kw.get("sparse", ""))


# --------------------------------------------------------------------------- builders

_BASIC_KIND = {"rec": "hbb", "rec_obb": "obb", "res": "mask", "det": "hbb"}


def build_basic(a: Annotation, task: str, cfg: BuildConfig = BuildConfig(), rng_seed=0) -> InstructionRecord:
    """Single-turn referring sample; ``det`` falls through to :func:`build_det`."""
    if task == "det":
        return build_det([a], cfg, rng_seed)
    if task not in _BASIC_KIND:
        raise ValueError(f"{task!r} is not a basic task")
    sig, meta = _signal(_BASIC_KIND[task], a, cfg)
    idx = _template_index(rng_seed)
    query = cfg.image_token + _fill(TEMPLATES[task][idx], a)
    return _record(a, task, [("human", query), ("model", sig.payload)], idx, meta)


def build_det(group: Sequence[Annotation], cfg: BuildConfig = BuildConfig(), rng_seed=0) -> InstructionRecord:
    """All objects of one category in one image, answered as ``;``-joined boxes."""
    if not group:
        raise ValueError("empty detection group")
    first = group[0]
    if any(g.image_id != first.image_id for g in group):
        raise ValueError("detection group spans several images")
    category = first.category or first.expression
    boxes = [_hbb(g, cfg) for g in group]
    idx = _template_index(rng_seed)
    query = cfg.image_token + TEMPLATES["det"][idx].format(prompt=category)
    answer = tc.encode_hbbs(boxes, cfg.codec).payload
    return _record(first, "det", [("human", query), ("model", answer)], idx,
                   {"category": category, "objects": len(boxes)})


def _check_pair(pair, allowed, name):
    pair = tuple(pair)
    if pair not in allowed:
        raise ValueError(f"unsupported {name} pair {pair[0]}->{pair[1]}")
    return pair


def parse_pair(text: str) -> Tuple[str, str]:
    src, _, dst = text.partition("->")
    return src.strip(), dst.strip()


def build_pal(a: Annotation, pair, cfg: BuildConfig = BuildConfig(), rng_seed=0) -> InstructionRecord:
    """Query embeds the sparse signal; the answer is the dense one."""
    sparse, dense = _check_pair(pair, PAL_PAIRS, "PAL")
    dense_sig, meta = _signal(dense, a, cfg)
    sparse_sig, meta2 = _signal(sparse, a, cfg)
    idx = _template_index(rng_seed)
    query = cfg.image_token + _fill(
        TEMPLATES["pal"][idx], a, dense=SIGNAL_NAMES[dense], sparse=sparse_sig.payload
    )
    meta = {**meta2, **meta, "pair": f"{sparse}->{dense}"}
    return _record(a, "pal", [("human", query), ("model", dense_sig.payload)], idx, meta)


def geometric_reduction(dense_text: str, pair, codec: tc.CodecConfig) -> str:
    """Sparse signal text computed from dense signal text alone."""
    dense, sparse = _check_pair(pair, GGL_PAIRS, "GGL")
    if dense == "obb":
        value = geo.obb_to_hbb(tc.decode_obb(dense_text, codec))
    else:
        grid = tc.decode_mask(dense_text, codec)
        if grid.empty:
            raise SkipSample("disappeared-object", "dense mask has no foreground")
        value = geo.mask_to_hbb(grid) if sparse == "hbb" else geo.mask_to_obb(grid)
    return (tc.encode_hbb(value, codec) if sparse == "hbb" else tc.encode_obb(value, codec)).payload


def build_ggl(a: Annotation, pair, cfg: BuildConfig = BuildConfig(), rng_seed=0) -> InstructionRecord:
    dense, sparse = _check_pair(pair, GGL_PAIRS, "GGL")
    if (dense, sparse) == ("mask", "obb") and not cfg.allow_mask_to_obb:
        raise ValueError("mask->obb requires allow_mask_to_obb")
    dense_sig, meta = _signal(dense, a, cfg)
    idx = _template_index(rng_seed)
    q1 = cfg.image_token + _fill(TEMPLATES["ggl"][idx], a, dense=SIGNAL_NAMES[dense])
    q2 = GGL_FOLLOWUP.format(sparse=SIGNAL_NAMES[sparse], dense=SIGNAL_NAMES[dense])
    answer2 = geometric_reduction(dense_sig.payload, (dense, sparse), cfg.codec)
    turns = [("human", q1), ("model", dense_sig.payload), ("human", q2), ("model", answer2)]
    return _record(a, "ggl", turns, idx, {**meta, "pair": f"{dense}->{sparse}"})


def filter_leakage(records: Iterable[InstructionRecord], held_out_image_ids) -> Tuple[list, int]:
    held = {str(i) for i in held_out_image_ids}
    kept, dropped = [], 0
    for r in records:
        if str(r.image_id) in held:
            dropped += 1
        else:
            kept.append(r)
    return kept, dropped


# --------------------------------------------------------------------------- dataset


def expand_tasks(names: Iterable[str], allow_mask_to_obb: bool = False) -> List[Tuple[str, Optional[Tuple[str, str]]]]:
    """Expand names like ``rec``, ``pal``, ``ggl:mask->hbb`` or ``all`` into (task, pair) jobs."""
    out: List[Tuple[str, Optional[Tuple[str, str]]]] = []
    for name in names:
        name = name.strip()
        if not name:
            continue
        if name == "all":
            out.extend(expand_tasks(TASKS, allow_mask_to_obb))
            continue
        task, _, pair = name.partition(":")
        if task in ("pal", "ggl"):
            allowed = PAL_PAIRS if task == "pal" else GGL_PAIRS
            if pair:
                out.append((task, _check_pair(parse_pair(pair), allowed, task.upper())))
            else:
                for p in allowed:
                    if p == ("mask", "obb") and not allow_mask_to_obb:
                        continue
                    out.append((task, p))
        elif task in _BASIC_KIND and not pair:
            out.append((task, None))
        else:
            raise ValueError(f"unknown task {name!r}")
    return list(OrderedDict.fromkeys(out))


def job_key(task: str, pair) -> str:
    return task if pair is None else f"{task}:{pair[0]}->{pair[1]}"


def _job_code(task: str, pair) -> int:
    code = TASK_CODES[task] * 16
    if pair is not None:
        allowed = PAL_PAIRS if task == "pal" else GGL_PAIRS
        code += allowed.index(pair) + 1
    return code


@dataclass
class BuildSummary:
    counts: Counter = field(default_factory=Counter)
    skips: Counter = field(default_factory=Counter)
    sampled_out: int = 0
    leakage_dropped: int = 0
    diagnostics: List[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "records": int(sum(self.counts.values())),
            "per_task": dict(sorted(self.counts.items())),
            "skips": dict(sorted(self.skips.items())),
            "sampled_out": self.sampled_out,
            "leakage_dropped": self.leakage_dropped,
        }


def _annotation_jobs(item, jobs, cfg, seed, weights):
    index, a = item
    out = []
    for task, pair in jobs:
        if task == "det":
            continue
        key = job_key(task, pair)
        code = _job_code(task, pair)
        w = weights.get(key, weights.get(task, 1.0))
        if w < 1.0 and np.random.default_rng([seed, index, code, 1]).random() >= w:
            out.append(("sampled_out", key, None))
            continue
        rseed = [seed, index, code]
        try:
            if task == "pal":
                rec = build_pal(a, pair, cfg, rseed)
            elif task == "ggl":
                rec = build_ggl(a, pair, cfg, rseed)
            else:
                rec = build_basic(a, task, cfg, rseed)
        except SkipSample as exc:
            out.append(("skip", key, (exc.reason, f"annotation {index}: {exc}")))
            continue
        except geo.EmptyMaskError as exc:
            out.append(("skip", key, ("disappeared-object", f"annotation {index}: {exc}")))
            continue
        out.append(("ok", key, _with_index(rec, index)))
    return out


def _with_index(rec: InstructionRecord, index: int) -> InstructionRecord:
    return InstructionRecord(
        rec.image_id, rec.conversations, rec.task, rec.seed_template_index, rec.image,
        {**rec.meta, "index": index},
    )


def build_dataset(
    annotations: Sequence[Annotation],
    tasks: Iterable[str] = ("rec",),
    cfg: BuildConfig = BuildConfig(),
    seed: int = 0,
    weights: Optional[Dict[str, float]] = None,
    held_out: Iterable[str] = (),
    workers: int = 1,
) -> Tuple[List[InstructionRecord], BuildSummary]:
    """Generate records for every (annotation, task) pair, in input order.

    ``weights`` maps a task name (``"pal"``) or job key (``"pal:hbb->obb"``) to
    the probability of emitting it per annotation; unspecified tasks get 1.
    """
    jobs = expand_tasks(tasks, cfg.allow_mask_to_obb)
    weights = dict(weights or {})
    summary = BuildSummary()
    worker = functools.partial(_annotation_jobs, jobs=jobs, cfg=cfg, seed=seed, weights=weights)
    tagged: List[Tuple[str, InstructionRecord]] = []
    for results in ordered_map(worker, list(enumerate(annotations)), workers):
        for status, key, payload in results:
            if status == "ok":
                tagged.append((key, payload))
            elif status == "skip":
                reason, message = payload
                summary.skips[f"{key}: {reason}"] += 1
                summary.diagnostics.append(f"{key} {message}")
            else:
                summary.sampled_out += 1
    if any(t == "det" for t, _ in jobs):
        groups: "OrderedDict[tuple, list]" = OrderedDict()
        for i, a in enumerate(annotations):
            if a.category is None:
                summary.skips["det: missing-category"] += 1
                continue
            groups.setdefault((a.image_id, a.category), []).append((i, a))
        for members in groups.values():
            index = members[0][0]
            try:
                rec = build_det([a for _, a in members], cfg, [seed, index, _job_code("det", None)])
            except SkipSample as exc:
                summary.skips[f"det: {exc.reason}"] += 1
                summary.diagnostics.append(f"det annotation {index}: {exc}")
                continue
            tagged.append(("det", _with_index(rec, index)))
    held = {str(i) for i in held_out}
    kept = [(k, r) for k, r in tagged if r.image_id not in held]
    summary.leakage_dropped = len(tagged) - len(kept)
    for key, _ in kept:
        summary.counts[key] += 1
    return [r for _, r in kept], summary
