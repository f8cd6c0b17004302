"""Report figures: training loss curves, caption-metric bars, retrieval bars.

Rendered headless with the Agg backend; PNG metadata is pinned so reruns are
byte-identical.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .autodiff.checkpoint import atomic_write_bytes  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
_PNG_META = {"Software": None}

TEXT_METRICS = ("bleu1", "bleu4", "rougeL", "meteor", "cider", "exact_match")
LOSS_COLUMNS = {
    "plp": ("ptc", "ptg", "ptm", "total"),
    "align": ("loss",),
    "tune": ("loss",),
}


def _save(fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return path


def moving_average(values, window: int = 20) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_loss_curves(logs: dict[str, list[list[float]]], path: Path) -> Path | None:
    """One panel per stage that has a log; raw losses faint, moving average solid."""
    stages = [s for s in LOSS_COLUMNS if logs.get(s)]
    if not stages:
        return None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(stages), figsize=(3.6 * len(stages), 2.8), squeeze=False)
        for ax, stage in zip(axes[0], stages):
            rows = logs[stage]
            steps = [r[0] for r in rows]
            for k, col in enumerate(LOSS_COLUMNS[stage]):
                ys = [r[2 + k] for r in rows]
                (line,) = ax.plot(steps, moving_average(ys), lw=1.2, label=col)
                ax.plot(steps, ys, lw=0.5, alpha=0.25, color=line.get_color())
            ax.set_title(stage)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            if len(LOSS_COLUMNS[stage]) > 1:
                ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)


def plot_metric_bars(aggregate: dict, path: Path) -> Path | None:
    names = [m for m in TEXT_METRICS if aggregate.get(m) is not None]
    if not names:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 2.8))
        vals = [aggregate[m] for m in names]
        ax.bar(names, vals, color="0.35")
        for x, v in enumerate(vals):
            ax.text(x, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
        ax.set_ylim(0, max(1.0, max(vals) * 1.1))
        ax.set_ylabel("score")
        ax.set_title(f"caption metrics (n={aggregate.get('count', len(vals))})")
        return _save(fig, path)


def plot_retrieval(report: dict, path: Path) -> Path | None:
    bars = []
    plp = report.get("plp_retrieval")
    if plp:
        bars += [("P→T Acc", plp["p2t_acc"]), ("P→T R@20", plp["p2t_r20"]), ("T→P Acc", plp["t2p_acc"]), ("T→P R@20", plp["t2p_r20"])]
    cross = report.get("cross_level")
    if cross:
        bars += [("align→ter Acc", cross["acc"]), ("align→ter R@20", cross["r20"])]
    if not bars:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 2.8))
        ax.bar([b[0] for b in bars], [b[1] for b in bars], color="0.35")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("fraction")
        ax.set_title("retrieval")
        ax.tick_params(axis="x", labelrotation=30, labelsize=7)
        return _save(fig, path)


def render_report_figures(run_dir: Path, report: dict, fig_dir: Path) -> list[Path]:
    from .pipeline import read_loss_log

    logs = {s: read_loss_log(run_dir / f"{s}_loss.tsv") for s in LOSS_COLUMNS}
    made = [
        plot_loss_curves(logs, fig_dir / "loss_curves.png"),
        plot_metric_bars(report["text"]["aggregate"], fig_dir / "text_metrics.png"),
        plot_retrieval(report, fig_dir / "retrieval.png"),
    ]
    return [p for p in made if p is not None]
