"""Matplotlib figures for cost curves and training losses.

Figures are built on ``matplotlib.figure.Figure`` directly (no pyplot state)
and saved as SVG with a fixed hash salt and no date stamp, so reruns produce
identical bytes.
"""

from __future__ import annotations

import io

import matplotlib
from matplotlib.figure import Figure

STYLE = {
    "svg.hashsalt": "sparsecot",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _svg_bytes(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with matplotlib.rc_context(STYLE):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def cost_curve_figure(report, column: str = "allowed_pairs") -> Figure:
    """Log-log plot of ``column`` against sequence length, one line per pattern."""
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(6, 4.2))
        ax = fig.add_subplot()
        for pattern in report.patterns():
            n, y = report.series(pattern, column)
            ax.plot(n, y, marker="o", label=f"{pattern} (slope {report.slope(pattern, column):.2f})"
                    if len(set(n)) >= 4 else pattern)
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("sequence length n")
        ax.set_ylabel(column.replace("_", " "))
        ax.legend(loc="upper left")
        fig.tight_layout()
    return fig


def loss_curve_figure(losses, start_step: int = 0) -> Figure:
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot()
        ax.plot(range(start_step, start_step + len(losses)), losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("sparsemax loss")
        fig.tight_layout()
    return fig


def cost_curve_svg(report, column: str = "allowed_pairs") -> bytes:
    return _svg_bytes(cost_curve_figure(report, column))


def loss_curve_svg(losses, start_step: int = 0) -> bytes:
    return _svg_bytes(loss_curve_figure(losses, start_step))
