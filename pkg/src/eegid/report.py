"""Report rendering: delimited output, a fixed-width text table, and
matplotlib figures written alongside the CSV."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import format_report_table, write_report_csv


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in text)


def render_metrics_figure(reports, path) -> None:
    """Grouped bars of accuracy and EER per (protocol, system) row."""
    labels = [f"{r.system}\n{r.protocol}" for r in reports]
    acc = [100 * r.rank1 for r in reports]
    eer = [100 * r.eer for r in reports]
    x = np.arange(len(reports))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(reports)), 4.2))
    ax.bar(x - width / 2, acc, width, label="accuracy (%)", color="#2b6ca3")
    ax.bar(x + width / 2, eer, width, label="EER (%)", color="#c85a3a")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7, rotation=30, ha="right")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_score_histogram(report, path) -> None:
    """Target vs non-target score distributions for one evaluation."""
    table = report.table
    if table is None:
        return
    mask = table.target_mask()
    targets = table.scores[mask]
    nontargets = table.scores[~mask]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    bins = np.linspace(
        min(targets.min(), nontargets.min()), max(targets.max(), nontargets.max()), 41
    )
    ax.hist(nontargets, bins=bins, alpha=0.6, label="non-target", color="#c85a3a", density=True)
    ax.hist(targets, bins=bins, alpha=0.6, label="target", color="#2b6ca3", density=True)
    ax.set_xlabel("score")
    ax.set_ylabel("density")
    ax.set_title(f"{report.system} / {report.protocol}", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report(reports, out_dir, prefix: str = "report") -> dict:
    """Write CSV + text table + figures; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{prefix}.csv", "txt": out_dir / f"{prefix}.txt"}
    write_report_csv(reports, paths["csv"])
    paths["txt"].write_text(format_report_table(reports) + "\n", encoding="utf-8")
    figures = []
    metrics_path = out_dir / f"{prefix}_metrics.png"
    render_metrics_figure(reports, metrics_path)
    figures.append(metrics_path)
    for report in reports:
        if report.table is None:
            continue
        fig_path = out_dir / f"{prefix}_scores_{_slug(report.protocol)}_{_slug(report.system)}.png"
        render_score_histogram(report, fig_path)
        figures.append(fig_path)
    paths["figures"] = figures
    return paths
