"""Deterministic SVG chart emission for run records, sweep tables, and risk
curves. Identical inputs produce identical bytes (fixed hash salt, no
timestamps), which the determinism checks rely on.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

PLOT_KINDS = ("loss_curve", "norm_curve", "elr_curve", "trace_trend", "risk_curve", "ushape")

_FIELD_FOR_KIND = {
    "loss_curve": ("step", "train_loss", "training loss"),
    "norm_curve": ("step", "param_norm", "parameter norm"),
    "elr_curve": ("step", "eff_lr", "effective learning rate"),
    "trace_trend": ("step", "trace_estimate", "Hessian trace estimate"),
}


def render_plot(kind: str, series: dict, out_path=None) -> bytes:
    """Render named (x, y) series as an SVG line/scatter chart.

    `series` maps a legend label to a pair of equal-length sequences. The
    ushape kind scatters terminal metric against learning rate on a log x
    axis; the rest are step-indexed polylines.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if not series or all(len(x) == 0 for x, _ in series.values()):
        raise ValueError("empty series input; nothing to plot")
    for label, (x, y) in series.items():
        if len(x) != len(y):
            raise ValueError(f"series {label!r} has mismatched lengths")

    with plt.rc_context({"svg.hashsalt": "decaylab", "figure.max_open_warning": 0}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        try:
            if kind == "ushape":
                for label, (x, y) in series.items():
                    ax.plot(x, y, marker="o", linestyle="-", label=label)
                ax.set_xscale("log")
                ax.set_xlabel("learning rate")
                ax.set_ylabel("terminal metric")
            elif kind == "risk_curve":
                for label, (x, y) in series.items():
                    ax.plot(x, y, label=label)
                ax.set_xscale("log")
                ax.set_yscale("log")
                ax.set_xlabel("step")
                ax.set_ylabel("expected squared error")
            else:
                _, _, ylabel = _FIELD_FOR_KIND[kind]
                for label, (x, y) in series.items():
                    ax.plot(x, y, label=label)
                ax.set_xlabel("step")
                ax.set_ylabel(ylabel)
            ax.legend(loc="best")
            ax.grid(True, alpha=0.3)
            buf = io.BytesIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    data = buf.getvalue()
    if out_path is not None:
        with open(out_path, "wb") as fh:
            fh.write(data)
    return data


def series_from_records(records: list[dict], kind: str, label: str = "run") -> dict:
    """Extract the (x, y) series a record-based plot kind needs."""
    if kind not in _FIELD_FOR_KIND:
        raise ValueError(f"kind {kind!r} does not plot probe records")
    xf, yf, _ = _FIELD_FOR_KIND[kind]
    return {label: ([r[xf] for r in records], [r[yf] for r in records])}


def series_from_sweep(rows: list[dict], metric: str = "test_metric") -> dict:
    """Group sweep rows into per-lambda series of metric against lr."""
    groups: dict = {}
    for r in rows:
        key = f"lambda={r.get('lambda_wd', 0)}"
        groups.setdefault(key, ([], []))
        groups[key][0].append(float(r["lr"]))
        groups[key][1].append(float(r[metric]))
    return groups


def series_from_risk_curve(curve) -> dict:
    out = {
        "exact": (list(curve.steps[1:]), list(curve.expected_error[1:])),
        "bias": (list(curve.steps[1:]), list(curve.bias_part[1:])),
        "variance": (list(curve.steps[1:]), list(curve.variance_part[1:])),
    }
    if curve.empirical_mean is not None:
        out["empirical"] = (list(curve.steps[1:]), list(curve.empirical_mean[1:]))
    return out
