"""JSONL I/O, provenance headers and the JSON forms of masks."""

from __future__ import annotations

import contextlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .geometry import GridMask, PixelMask

HEADER_KEY = "__header__"


def pixel_rle(mask: PixelMask) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = mask.bits.ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts.insert(0, 0)
    return {"rle": counts, "size": [mask.height, mask.width]}


def mask_from_json(obj: dict):
    """``{"rle": [...], "size": [h, w]}`` -> PixelMask, ``{"grid": [rows]}`` -> GridMask."""
    if "grid" in obj:
        rows = obj["grid"]
        if any(len(r) != len(rows) for r in rows):
            raise ValueError("grid rows must form a square")
        if any(ch not in "01" for r in rows for ch in r):
            raise ValueError("grid rows may only contain '0' and '1'")
        return GridMask.from_rows(rows)
    if "rle" in obj:
        h, w = (int(v) for v in obj["size"])
        counts = [int(c) for c in obj["rle"]]
        if any(c < 0 for c in counts) or sum(counts) != h * w:
            raise ValueError(f"run lengths sum to {sum(counts)}, expected {h * w}")
        values = np.arange(len(counts)) % 2
        flat = np.repeat(values, counts).astype(np.uint8)
        return PixelMask(w, h, flat.reshape(h, w))
    raise ValueError("mask must carry either 'grid' or 'rle'")


def mask_to_json(mask) -> dict:
    if isinstance(mask, GridMask):
        return {"grid": mask.rows()}
    return pixel_rle(mask)


@contextlib.contextmanager
def open_text(path: str, mode: str = "r"):
    """Open a path, treating ``-`` as stdin/stdout."""
    if path == "-":
        stream = sys.stdin if "r" in mode else sys.stdout
        yield stream
        if "w" in mode:
            stream.flush()
    else:
        with open(path, mode, encoding="utf-8", newline="") as fh:
            yield fh


def iter_jsonl(lines: Iterable[str]) -> Iterator[Tuple[int, Optional[Any], Optional[str]]]:
    """Yield ``(line_no, obj, error)`` for every non-blank line; headers are skipped."""
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            yield no, None, f"invalid JSON: {exc.msg} at column {exc.colno}"
            continue
        if isinstance(obj, dict) and HEADER_KEY in obj:
            continue
        yield no, obj, None


def read_jsonl(path: str) -> List[Tuple[int, Optional[Any], Optional[str]]]:
    with open_text(path) as fh:
        return list(iter_jsonl(fh))


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False, ensure_ascii=False)


def write_jsonl(path: str, rows: Iterable[dict], header: Optional[dict] = None) -> None:
    with open_text(path, "w") as fh:
        if header is not None:
            fh.write(dumps({HEADER_KEY: header}) + "\n")
        for row in rows:
            fh.write(dumps(row) + "\n")


def jsonl_text(rows: Iterable[dict], header: Optional[dict] = None) -> str:
    buf = io.StringIO()
    if header is not None:
        buf.write(dumps({HEADER_KEY: header}) + "\n")
    for row in rows:
        buf.write(dumps(row) + "\n")
    return buf.getvalue()


def ordered_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """``map`` whose output order matches the input order for any worker count."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunk))
