"""Figures written next to the delimited tables of ``analyze`` and ``eval``."""

from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "groundsig",
}
MARKERS = {"max_pool": "o", "nearest": "s"}


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Date": None} if path.endswith(".svg") else None)
    plt.close(fig)
    return path


def _by_mode(rows: Sequence[dict]) -> Dict[str, List[dict]]:
    out: Dict[str, List[dict]] = {}
    for r in rows:
        out.setdefault(r["mode"], []).append(r)
    for v in out.values():
        v.sort(key=lambda r: r["n"])
    return out


def plot_disappearance(rows: Sequence[dict], path: str) -> str:
    """Disappearance rate against grid resolution, one line per downsampling mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        for mode, rs in _by_mode(rows).items():
            ax.plot([r["n"] for r in rs], [100 * r["disappearance_rate"] for r in rs],
                    marker=MARKERS.get(mode, "^"), label=mode)
        ax.set_xlabel("grid resolution N")
        ax.set_ylabel("disappearance rate (%)")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_lengths(rows: Sequence[dict], path: str) -> str:
    """Mean mask text length, raw against run-length encoded."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        for mode, rs in _by_mode(rows).items():
            ns = [r["n"] for r in rs]
            ax.plot(ns, [r["raw_mean"] for r in rs], ls="--", marker=MARKERS.get(mode, "^"),
                    label=f"raw ({mode})")
            ax.plot(ns, [r["rle_mean"] for r in rs], marker=MARKERS.get(mode, "^"),
                    label=f"run-length ({mode})")
        ax.set_xlabel("grid resolution N")
        ax.set_ylabel("mean characters")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_iou_histogram(rows: Sequence[dict], path: str) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        bins = [i / 20 for i in range(21)]
        for key, label in (("hbb_iou", "HBB"), ("obb_iou", "OBB"), ("mask_iou", "mask")):
            vals = [r[key] for r in rows if r.get(key) is not None]
            if vals:
                ax.hist(vals, bins=bins, histtype="step", label=label)
        ax.axvline(0.5, color="0.5", lw=0.8, ls=":")
        ax.set_xlabel("IoU")
        ax.set_ylabel("samples")
        ax.legend(frameon=False)
        return _save(fig, path)
