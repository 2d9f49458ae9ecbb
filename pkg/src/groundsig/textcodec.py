"""Textual serialization of grounding signals.

Wire formats (byte-exact)::

    <box>[x1,y1,x2,y2]</box>          integers in [0, hbb_resolution)
    <obb>(cx,cy,lw,sw,theta)</obb>    integers; theta in whole degrees, [0, 89]
    <seg>row|row|...|row</seg>         n rows, each raw ("0011") or run-length ("0*2,1*2")

Several boxes inside one ``<box>`` or ``<obb>`` pair are separated by ``;``.
The parsers accept either ``[...]`` or ``(...)`` around box values.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .geometry import HBB, OBB, GridMask, canonical_obb

KINDS = ("hbb", "obb", "mask")
TAGS = {"hbb": "box", "obb": "obb", "mask": "seg"}
KIND_OF_TAG = {v: k for k, v in TAGS.items()}


class ParseError(ValueError):
    """Malformed signal text.  ``offset`` indexes into the text that was parsed."""

    def __init__(self, message: str, offset: Optional[int] = None, row: Optional[int] = None):
        self.offset = offset
        self.row = row
        where = []
        if row is not None:
            where.append(f"row {row}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SignalRangeError(ParseError):
    """Well-formed text whose numbers fall outside the quantization range."""


@dataclass(frozen=True)
class CodecConfig:
    hbb_resolution: int = 1000
    obb_resolution: int = 100
    mask_resolution: int = 32
    rle_enabled: bool = True

    def __post_init__(self):
        for name in ("hbb_resolution", "obb_resolution", "mask_resolution"):
            if int(getattr(self, name)) < 2:
                raise ValueError(f"{name} must be >= 2")


@dataclass(frozen=True)
class TextSignal:
    kind: str
    payload: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")
        tag = TAGS[self.kind]
        if not (self.payload.startswith(f"<{tag}>") and self.payload.endswith(f"</{tag}>")):
            raise ValueError(f"payload is not wrapped in <{tag}>...</{tag}>")

    @property
    def body(self) -> str:
        return self.payload[len(TAGS[self.kind]) + 2 : -(len(TAGS[self.kind]) + 3)]

    def __str__(self):
        return self.payload


def wrap(kind: str, body: str) -> TextSignal:
    tag = TAGS[kind]
    return TextSignal(kind, f"<{tag}>{body}</{tag}>")


def quantize(value: float, resolution: int) -> int:
    return min(max(math.floor(value * resolution), 0), resolution - 1)


def dequantize(index: int, resolution: int) -> float:
    return (index + 0.5) / resolution


# --------------------------------------------------------------------------- boxes


def _hbb_body(box: HBB, r: int) -> str:
    return "[" + ",".join(str(quantize(v, r)) for v in box.as_tuple()) + "]"


def _obb_body(box: OBB, r: int) -> str:
    vals = [quantize(v, r) for v in (box.cx, box.cy, box.lw, box.sw)]
    vals.append(min(max(math.floor(box.theta), 0), 89))
    return "(" + ",".join(str(v) for v in vals) + ")"


def encode_hbb(box: HBB, cfg: CodecConfig = CodecConfig()) -> TextSignal:
    return wrap("hbb", _hbb_body(box, cfg.hbb_resolution))


def encode_hbbs(boxes, cfg: CodecConfig = CodecConfig()) -> TextSignal:
    """Several boxes in one ``<box>`` pair, ``;``-joined (detection answers)."""
    return wrap("hbb", ";".join(_hbb_body(b, cfg.hbb_resolution) for b in boxes))


def encode_obb(box: OBB, cfg: CodecConfig = CodecConfig()) -> TextSignal:
    return wrap("obb", _obb_body(box, cfg.obb_resolution))


_CLOSE = {"[": "]", "(": ")"}


def _parse_int_group(text: str, arity: int, base: int = 0) -> List[int]:
    """Parse ``[a,b,...]`` or ``(a,b,...)``; offsets are reported relative to ``base``."""
    i, n = 0, len(text)
    while i < n and text[i] == " ":
        i += 1
    if i >= n or text[i] not in _CLOSE:
        raise ParseError("expected '[' or '('", base + i)
    close = _CLOSE[text[i]]
    i += 1
    values: List[int] = []
    while True:
        while i < n and text[i] == " ":
            i += 1
        start = i
        while i < n and text[i] not in ",)] ":
            i += 1
        token = text[start:i]
        if not token:
            raise ParseError("missing number", base + start)
        if not token.isdigit() or not token.isascii():
            raise ParseError(f"non-integer token {token!r}", base + start)
        values.append(int(token))
        while i < n and text[i] == " ":
            i += 1
        if i >= n:
            raise ParseError(f"unterminated group, expected {close!r}", base + i)
        if text[i] == ",":
            i += 1
            continue
        if text[i] != close:
            raise ParseError(f"mismatched bracket {text[i]!r}", base + i)
        i += 1
        break
    if text[i:].strip(" "):
        raise ParseError("trailing characters after group", base + i)
    if len(values) != arity:
        raise ParseError(f"expected {arity} values, got {len(values)}", base)
    return values


def _body_of(text, kind: str) -> Tuple[str, int]:
    if isinstance(text, TextSignal):
        if text.kind != kind:
            raise ParseError(f"expected a {kind} signal, got {text.kind}")
        text = text.payload
    tag = TAGS[kind]
    open_, close = f"<{tag}>", f"</{tag}>"
    if not text.startswith(open_):
        raise ParseError(f"missing opening tag {open_}", 0)
    if not text.endswith(close):
        raise ParseError(f"missing closing tag {close}", len(text))
    return text[len(open_) : len(text) - len(close)], len(open_)


def _hbb_from_values(vals: List[int], r: int, base: int) -> HBB:
    for v in vals:
        if v >= r:
            raise SignalRangeError(f"coordinate {v} >= resolution {r}", base)
    x1, y1, x2, y2 = (dequantize(v, r) for v in vals)
    return HBB(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def _obb_from_values(vals: List[int], r: int, base: int) -> OBB:
    *lin, theta = vals
    for v in lin:
        if v >= r:
            raise SignalRangeError(f"value {v} >= resolution {r}", base)
    if not 0 <= theta < 90:
        raise SignalRangeError(f"angle {theta} outside [0, 90)", base)
    cx, cy, lw, sw = (dequantize(v, r) for v in lin)
    return canonical_obb(cx, cy, lw, sw, float(theta))


def decode_hbb(text, cfg: CodecConfig = CodecConfig()) -> HBB:
    body, base = _body_of(text, "hbb")
    return _hbb_from_values(_parse_int_group(body, 4, base), cfg.hbb_resolution, base)


def decode_obb(text, cfg: CodecConfig = CodecConfig()) -> OBB:
    body, base = _body_of(text, "obb")
    return _obb_from_values(_parse_int_group(body, 5, base), cfg.obb_resolution, base)


def decode_hbbs(text, cfg: CodecConfig = CodecConfig()) -> List[HBB]:
    body, base = _body_of(text, "hbb")
    out = []
    for group, off in _split_groups(body, base):
        out.append(_hbb_from_values(_parse_int_group(group, 4, off), cfg.hbb_resolution, off))
    return out


def _split_groups(body: str, base: int):
    off = base
    for part in body.split(";"):
        yield part, off
        off += len(part) + 1


# --------------------------------------------------------------------------- masks


_RUN_RE = re.compile(r"0+|1+")
_RLE_ROW_RE = re.compile(r"[01]\*[0-9]+(?:,[01]\*[0-9]+)*")


def rle_row(row: str) -> str:
    """Run-length form of one ``'0'/'1'`` row, e.g. ``'0011'`` -> ``'0*2,1*2'``."""
    return ",".join(f"{m[0][0]}*{len(m[0])}" for m in _RUN_RE.finditer(row))


def _may_compress(row: str) -> bool:
    # a run-length row is at least 4 * runs - 1 characters long
    runs = row.count("01") + row.count("10") + 1
    return 4 * runs - 1 <= len(row)


def mask_body(grid: GridMask, rle: bool = True) -> str:
    """Rows joined by ``|``.  With ``rle`` each row uses whichever form is shorter."""
    rows = grid.rows()
    if rle:
        rows = [min(rle_row(r), r, key=len) if _may_compress(r) else r for r in rows]
    return "|".join(rows)


def encode_mask(grid: GridMask, cfg: CodecConfig = CodecConfig()) -> TextSignal:
    if grid.n != cfg.mask_resolution:
        raise ValueError(f"grid is {grid.n}x{grid.n} but mask_resolution is {cfg.mask_resolution}")
    return wrap("mask", mask_body(grid, cfg.rle_enabled))


def _decode_rle_row(row: str, n: int, index: int, base: int) -> str:
    out = []
    pos = 0
    for run in row.split(","):
        if len(run) < 3 or run[0] not in "01" or run[1] != "*":
            bad = next((k for k, ch in enumerate(run) if ch not in "01*"), 0)
            raise ParseError(f"malformed run {run!r}", base + pos + bad, row=index)
        count = run[2:]
        if not (count.isdigit() and count.isascii()) or int(count) < 1:
            raise ParseError(f"bad run length {count!r}", base + pos + 2, row=index)
        out.append(run[0] * int(count))
        pos += len(run) + 1
        if sum(map(len, out)) > n:
            break
    total = sum(map(len, out))
    if total != n:
        raise ParseError(f"run lengths sum to {total}, expected {n}", base, row=index)
    return "".join(out)


def decode_mask(text, cfg: CodecConfig = CodecConfig()) -> GridMask:
    """Inverse of :func:`encode_mask`; raw and run-length rows may be mixed."""
    body, base = _body_of(text, "mask")
    return _decode_mask_body(body, cfg.mask_resolution, base)


def _decode_mask_body(body: str, n: int, base: int = 0) -> GridMask:
    rows_text = body.split("|")
    if len(rows_text) != n:
        raise ParseError(f"expected {n} rows, got {len(rows_text)}", base)
    rows = []
    off = base
    for idx, row in enumerate(rows_text):
        if len(row) == n and not row.strip("01"):
            rows.append(row)
            off += n + 1
            continue
        if _RLE_ROW_RE.fullmatch(row):
            runs = [(run[0], int(run[2:])) for run in row.split(",")]
            if sum(k for _, k in runs) == n and all(k > 0 for _, k in runs):
                rows.append("".join(v * k for v, k in runs))
                off += len(row) + 1
                continue
        bad = next((k for k, ch in enumerate(row) if ch not in "01*,0123456789"), None)
        if bad is not None:
            raise ParseError(f"illegal character {row[bad]!r}", off + bad, row=idx)
        if "*" in row:
            rows.append(_decode_rle_row(row, n, idx, off))
        else:
            bad = next((k for k, ch in enumerate(row) if ch not in "01"), None)
            if bad is not None:
                raise ParseError(f"illegal character {row[bad]!r}", off + bad, row=idx)
            if len(row) != n:
                raise ParseError(f"row has {len(row)} cells, expected {n}", off, row=idx)
            rows.append(row)
        off += len(row) + 1
    return GridMask.from_rows(rows)


def infer_mask_resolution(text) -> int:
    body, _ = _body_of(text, "mask")
    return body.count("|") + 1


# --------------------------------------------------------------------------- scanning


@dataclass(frozen=True)
class SkipDiagnostic:
    offset: int
    kind: str
    reason: str


_OPEN_RE = re.compile(r"<(box|obb|seg)>")


def decode(signal: TextSignal, cfg: CodecConfig = CodecConfig()):
    """Decode a single signal to its geometry value."""
    if signal.kind == "hbb":
        return decode_hbb(signal, cfg)
    if signal.kind == "obb":
        return decode_obb(signal, cfg)
    return decode_mask(signal, cfg)


def extract_signals(
    model_output: str, cfg: CodecConfig = CodecConfig()
) -> Tuple[List[TextSignal], List[SkipDiagnostic]]:
    """Find every well-formed signal in free text, in document order.

    Malformed or truncated spans are skipped and reported, never raised.
    ``;``-separated groups inside one box/obb pair become separate signals.
    """
    signals: List[TextSignal] = []
    diags: List[SkipDiagnostic] = []
    pos = 0
    while True:
        m = _OPEN_RE.search(model_output, pos)
        if m is None:
            break
        tag = m.group(1)
        kind = KIND_OF_TAG[tag]
        close = f"</{tag}>"
        end = model_output.find(close, m.end())
        nxt = _OPEN_RE.search(model_output, m.end())
        if end < 0 or (nxt is not None and nxt.start() < end):
            diags.append(SkipDiagnostic(m.start(), kind, f"unterminated <{tag}> span"))
            pos = m.end()
            continue
        body = model_output[m.end() : end]
        pos = end + len(close)
        groups = _split_groups(body, m.end()) if kind != "mask" else [(body, m.end())]
        for group, off in groups:
            sig = wrap(kind, group.strip(" "))
            try:
                decode(sig, cfg)
            except (ParseError, ValueError) as exc:
                diags.append(SkipDiagnostic(off, kind, str(exc)))
                continue
            signals.append(sig)
    return signals, diags
