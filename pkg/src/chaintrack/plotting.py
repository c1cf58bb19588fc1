"""Figures for the report: an instance timeline and a per-instance state count chart."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .canonical import abbreviate  # noqa: E402

# Fixed metadata keeps repeated renders byte-identical.
_PNG_META = {"Software": None}


def _label(row: dict[str, Any]) -> str:
    it = row.get("iteration_label")
    return f"{row['state_name']} ({it})" if it else row["state_name"]


def plot_timeline(rows: Sequence[dict[str, Any]], path: Union[str, Path], title: str = "Instance protocol") -> Path:
    """One bar per state from entered_at to exited_at, in protocol order."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 0.35 * max(len(rows), 1) + 1.2))
    if rows:
        t0 = min(r["entered_at"] for r in rows)
        for i, r in enumerate(rows):
            start = (r["entered_at"] - t0) / 1000
            end = ((r.get("exited_at") or r["entered_at"]) - t0) / 1000
            ax.barh(i, max(end - start, 0.05), left=start, height=0.6, color="C0")
            ax.plot((r["block_timestamp"] - t0) / 1000, i, "k|", markersize=9)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels([f"{r['position']:>2}  {_label(r)}" for r in rows], fontsize=7)
        ax.invert_yaxis()
    ax.set_xlabel("seconds since first state (bar: state, tick: block time)")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_state_counts(rows: Sequence[dict[str, Any]], path: Union[str, Path], title: str = "States per instance") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [abbreviate(r["instance_hash"]) for r in rows]
    counts = [r["state_count"] for r in rows]
    bars = ax.bar(range(len(rows)), counts, color="C1")
    ax.bar_label(bars, fontsize=8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("states")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
