"""SVG line charts of speedup and accept length against context length.

Output bytes are fixed for a fixed report: the SVG hash salt is pinned and
the date metadata is dropped.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import RunReport  # noqa: E402

SVG_SALT = "specpv"
_STYLE = {"svg.hashsalt": SVG_SALT, "svg.fonttype": "path", "font.family": "DejaVu Sans"}


def _series(report: RunReport, field: str) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = {}
    for c in report.cells:
        v = getattr(c, field)
        if c.status != "ok" or v is None:
            continue
        out.setdefault(c.method, []).append((c.context_len, float(v)))
    return {m: sorted(pts) for m, pts in out.items()}


def chart_figure(series, ylabel: str, title: str):
    """One line per method, a marker at every point. Caller closes the figure."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for method in sorted(series):
        xs, ys = zip(*series[method])
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("context length (tokens)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def _chart(series, ylabel: str, title: str, path: Path) -> None:
    with plt.rc_context(_STYLE):
        fig = chart_figure(series, ylabel, title)
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)


def emit_plots(report: RunReport, out_dir) -> list[Path]:
    """Write speedup and tau charts; returns the files written (none for an empty sweep)."""
    alpha_meas = _series(report, "alpha_measured")
    alpha_mod = _series(report, "alpha_modeled")
    tau = _series(report, "tau")
    if not (alpha_meas or alpha_mod or tau):
        warnings.warn("report has no successful cells; no plots written", stacklevel=2)
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, series, ylabel, title in (
        ("speedup_measured_vs_context.svg", alpha_meas, "speedup over ar (measured)", "Measured speedup"),
        ("speedup_modeled_vs_context.svg", alpha_mod, "speedup over ar (modeled)", "Modeled speedup (offload cost model)"),
        ("tau_vs_context.svg", tau, "accept length tau", "Accept length"),
    ):
        if series:
            path = out / name
            _chart(series, ylabel, title, path)
            written.append(path)
    return written
