"""Tab-separated metric tables and matplotlib bar charts rendered to files.

Charts go through the Agg backend with scrubbed PNG metadata so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVEFIG = dict(dpi=110, metadata={"Software": None})


def write_tsv(path, columns, rows):
    """Rows of dicts to a tab-separated table with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            cells = []
            for col in columns:
                v = row.get(col, "")
                cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
            fh.write("\t".join(cells) + "\n")


def metric_bar_chart(path, title, labels, values, ylabel):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(labels) + 1.5), 3.2))
    x = range(len(labels))
    ax.bar(x, values, color="#4878a8")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def metric_report_files(report, out_dir, *, prefix: str = "report") -> list[str]:
    """Emit the metric table plus one bar chart per metric; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    columns = ["class", "defect"] + list(report.METRICS)
    table = out_dir / f"{prefix}.tsv"
    write_tsv(table, columns, report.rows)
    written.append(str(table))

    detail = [r for r in report.rows if r["class"] != "all"]
    agg = report.aggregate()
    labels = [f"{r['class']}/{r['defect']}" for r in detail]
    if agg is not None:
        labels.append("all")
    for metric in report.METRICS:
        values = [r[metric] for r in detail]
        if agg is not None:
            values.append(agg[metric])
        png = out_dir / f"{prefix}-{metric.replace('_', '-')}.png"
        metric_bar_chart(png, metric.replace("_", " "), labels, values, metric)
        written.append(str(png))

    if report.background:
        bg = out_dir / f"{prefix}-background.tsv"
        write_tsv(bg, ["statistic", "value"],
                  [{"statistic": k, "value": v} for k, v in
                   sorted(report.background.items())])
        written.append(str(bg))

    if report.ablation:
        abl = out_dir / f"{prefix}-ablation.tsv"
        write_tsv(abl, ["config", "dae", "ago", "pixel_auroc", "pixel_ap",
                        "pixel_f1max"], report.ablation)
        written.append(str(abl))
        png = out_dir / f"{prefix}-ablation.png"
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        names = [r["config"] for r in report.ablation]
        x = range(len(names))
        width = 0.27
        for off, metric in ((-1, "pixel_auroc"), (0, "pixel_ap"), (1, "pixel_f1max")):
            ax.bar([xi + off * width for xi in x],
                   [r[metric] for r in report.ablation], width,
                   label=metric.replace("pixel_", ""))
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, fontsize=8)
        ax.set_ylim(0.0, 1.05)
        ax.legend(fontsize=7)
        ax.set_title("ablation grid (pixel metrics)", fontsize=10)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(png, **_SAVEFIG)
        plt.close(fig)
        written.append(str(png))
    return written


def component_image_to_png(channels, path, upscale: int = 8):
    """Save a [0, 1] HxWx3 component image as an upscaled PNG."""
    import numpy as np
    from PIL import Image

    arr = (np.clip(np.asarray(channels), 0.0, 1.0) * 255).astype("uint8")
    arr = arr.repeat(upscale, axis=0).repeat(upscale, axis=1)
    Image.fromarray(arr, mode="RGB").save(path)
