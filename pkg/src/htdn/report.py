"""Result tables and figures.

Tables come in two flavors: an aligned text rendering for the terminal and
a TSV twin for machines.  Figures are rendered with the Agg backend and
stripped of version metadata, so rerunning a run reproduces every output
file byte for byte.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError, DataError
from .ioutil import atomic_write_text

_FIG_DPI = 110


def fmt_pct(x) -> str:
    """Fraction to one-decimal percent text; None renders as '-'."""
    if x is None:
        return "-"
    return f"{100.0 * float(x):.1f}"


def render_table(headers, rows) -> str:
    """Aligned monospace table.  Cells are strings; None becomes '-'."""
    cells = [[("-" if c is None else str(c)) for c in row] for row in rows]
    for row in cells:
        if len(row) != len(headers):
            raise ContractError(f"row width {len(row)} != header width {len(headers)}")
    widths = [len(h) for h in headers]
    for row in cells:
        for j, c in enumerate(row):
            widths[j] = max(widths[j], len(c))
    def line(row, pad=" "):
        first = row[0].ljust(widths[0])
        rest = [c.rjust(widths[j + 1]) for j, c in enumerate(row[1:])]
        return pad.join([first] + rest).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


def write_tsv(path, headers, rows) -> None:
    lines = ["\t".join(headers)]
    for row in rows:
        cells = [("-" if c is None else str(c)) for c in row]
        if len(cells) != len(headers):
            raise ContractError(f"row width {len(cells)} != header width {len(headers)}")
        lines.append("\t".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_scores(path, ids, labels, scores) -> None:
    """Per-ad scores: id, binary label, score at full float precision."""
    if not (len(ids) == len(labels) == len(scores)):
        raise ContractError("ids, labels and scores must be the same length")
    lines = ["id\tlabel\tscore"]
    for i, y, s in zip(ids, labels, scores):
        lines.append(f"{i}\t{int(y)}\t{float(s):.8e}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_scores(path):
    """Read a scores file back; returns (ids, labels, scores array)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "id\tlabel\tscore":
        raise DataError(f"{path}: not a scores file")
    ids, labels, scores = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        ids.append(parts[0])
        try:
            labels.append(int(parts[1]))
            scores.append(float(parts[2]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric label or score") from None
    return ids, np.array(labels, dtype=np.int64), np.array(scores, dtype=np.float64)


def _save_fig(fig, path):
    fig.savefig(path, dpi=_FIG_DPI, metadata={"Software": None})
    plt.close(fig)


def metric_bars(path, names, values, title, xlabel) -> None:
    """Horizontal bars, one per system, in the order given."""
    if len(names) != len(values):
        raise ContractError("names and values must be the same length")
    height = max(2.4, 0.38 * len(names) + 1.2)
    fig, ax = plt.subplots(figsize=(7.5, height))
    y = np.arange(len(names))[::-1]
    vals = [0.0 if v is None else 100.0 * float(v) for v in values]
    ax.barh(y, vals, color="#3b6ea5")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_xlim(0, 100)
    ax.set_title(title)
    for yi, v in zip(y, vals):
        ax.text(v + 1, yi, f"{v:.1f}", va="center", fontsize=7)
    fig.tight_layout()
    _save_fig(fig, path)


def training_curves(path, history: dict, title) -> None:
    """One line per named series; epochs on the x axis."""
    series = {k: v for k, v in history.items() if v}
    if not series:
        raise ContractError("history has no non-empty series")
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for name in sorted(series):
        vals = series[name]
        ax.plot(range(1, len(vals) + 1), vals, marker="o", markersize=3,
                linewidth=1.2, label=name)
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save_fig(fig, path)


def length_histogram(path, lengths, title) -> None:
    lengths = np.asarray(lengths)
    if lengths.size == 0:
        raise ContractError("no lengths to plot")
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    upper = max(int(lengths.max()), 1)
    bins = np.arange(0, upper + 5, max(1, upper // 40))
    ax.hist(lengths, bins=bins, color="#3b6ea5", edgecolor="white", linewidth=0.3)
    ax.set_xlabel("tokens per ad")
    ax.set_ylabel("ads")
    ax.set_title(title)
    fig.tight_layout()
    _save_fig(fig, path)


def count_bars(path, counts: dict, title, xlabel) -> None:
    """Vertical bars for small integer-keyed histograms (e.g. images per ad)."""
    if not counts:
        raise ContractError("no counts to plot")
    keys = sorted(counts)
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    pos = np.arange(len(keys))
    ax.bar(pos, [counts[k] for k in keys], color="#3b6ea5")
    ax.set_xticks(pos)
    ax.set_xticklabels([str(k) for k in keys])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("ads")
    ax.set_title(title)
    fig.tight_layout()
    _save_fig(fig, path)


__all__ = ["fmt_pct", "render_table", "write_tsv", "write_scores", "load_scores",
           "metric_bars", "training_curves", "length_histogram", "count_bars"]
