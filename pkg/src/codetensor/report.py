"""Text rendering of report CSVs and training-curve plots."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .errors import FormatError

# plot panels: title -> history columns
SERIES = {
    "loss": ("loss_d", "loss_g"),
    "accuracy": ("d_accuracy",),
    "recall": ("bbda_generated",),
}


def parse_csv(text: str):
    """``(header, rows)``; every row must have as many cells as the header."""
    try:
        reader = csv.reader(io.StringIO(text))
        table = [r for r in reader if r]
    except csv.Error as exc:
        raise FormatError(f"malformed CSV: {exc}") from None
    if not table:
        raise FormatError("CSV has no header")
    header, rows = table[0], table[1:]
    if len(set(header)) != len(header) or any(not h.strip() for h in header):
        raise FormatError("CSV header has empty or duplicate columns")
    for n, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise FormatError(f"line {n}: {len(r)} cells, header has {len(header)}")
    return header, rows


def render_table(header, rows) -> str:
    """Left-aligned text columns; numbers are right-aligned."""
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]

    def cell(v, w):
        try:
            float(v)
            return v.rjust(w)
        except ValueError:
            return v.ljust(w)

    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(cell(v, w) for v, w in zip(r, widths)).rstrip() for r in rows)
    return "\n".join(lines) + "\n"


def _read(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    except UnicodeDecodeError:
        raise FormatError(f"{path} is not a text CSV") from None


def history_series(header, rows):
    """``{panel: {column: [(step, value), ...]}}`` for the columns present."""
    if "step" not in header:
        raise FormatError("history CSV needs a 'step' column")
    idx = {h: i for i, h in enumerate(header)}
    out = {}
    try:
        steps = [int(r[idx["step"]]) for r in rows]
        for panel, cols in SERIES.items():
            present = [c for c in cols if c in idx]
            if present:
                out[panel] = {c: list(zip(steps, (float(r[idx[c]]) for r in rows))) for c in present}
    except ValueError as exc:
        raise FormatError(f"non-numeric history value: {exc}") from None
    return out


def write_plot_data(series, path):
    """Long-format CSV: ``panel, series, step, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("panel", "series", "step", "value"))
        for panel, cols in series.items():
            for name, pts in cols.items():
                for step, v in pts:
                    w.writerow((panel, name, step, f"{v:.6f}"))


def write_plot_svg(series, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "codetensor"

    fig, axes = plt.subplots(1, len(series), figsize=(4 * len(series), 3), squeeze=False)
    for ax, (panel, cols) in zip(axes[0], series.items()):
        for name, pts in cols.items():
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name)
        ax.set_title(panel)
        ax.set_xlabel("step")
        ax.legend(fontsize="small")
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def report_render(report_csv, history_csv=None, plot_prefix=None) -> str:
    """Aligned text table of ``report_csv``.

    With ``history_csv`` and ``plot_prefix``, writes ``<prefix>.csv`` (plot
    data) and ``<prefix>.svg`` with loss, accuracy and recall panels.
    """
    header, rows = parse_csv(_read(report_csv))
    text = render_table(header, rows)
    if history_csv is not None and plot_prefix is not None:
        series = history_series(*parse_csv(_read(history_csv)))
        write_plot_data(series, f"{plot_prefix}.csv")
        write_plot_svg(series, f"{plot_prefix}.svg")
    return text
