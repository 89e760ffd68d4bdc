"""Figure rendering for the experiment report.

Writes summary charts (accuracy per system, model-size reduction) as PNG
files next to the delimited report output.  DET operating points are exported
as CSV by the pipeline for external plotting and are not rendered here.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  - backend must be set first

__all__ = ["render_report_figures"]


def render_report_figures(report, figures_dir) -> list[Path]:
    """Render the report's summary figures; returns the written paths."""
    figures_dir = Path(figures_dir)
    figures_dir.mkdir(parents=True, exist_ok=True)
    written = [
        _metrics_figure(report, figures_dir / "metrics.png"),
        _sizes_figure(report, figures_dir / "model_sizes.png"),
    ]
    return written


def _system_colors(rows):
    return ["#9467bd" if r.variant == "composite" else "#1f77b4" for r in rows]


def _metrics_figure(report, path: Path) -> Path:
    students = report.student_rows()
    teacher = next((r for r in report.rows if r.variant == "teacher"), None)
    labels = [r.label for r in students]
    x = range(len(students))
    fig, (ax_eer, ax_dcf) = plt.subplots(1, 2, figsize=(11, 4.2))
    ax_eer.bar(x, [r.eer_percent for r in students], color=_system_colors(students))
    ax_eer.set_ylabel("EER (%)")
    ax_eer.set_title("Equal error rate per system")
    ax_dcf.bar(x, [r.min_dcf for r in students], color=_system_colors(students))
    ax_dcf.set_ylabel("minDCF")
    ax_dcf.set_title("Minimum detection cost per system")
    for ax in (ax_eer, ax_dcf):
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=40, ha="right", fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    if teacher is not None:
        ax_eer.axhline(teacher.eer_percent, color="#d62728", ls="--", lw=1, label="teacher")
        ax_dcf.axhline(teacher.min_dcf, color="#d62728", ls="--", lw=1, label="teacher")
        ax_eer.legend(fontsize=8)
        ax_dcf.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _sizes_figure(report, path: Path) -> Path:
    students = report.student_rows()
    labels = [r.label for r in students]
    x = range(len(students))
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    ax.bar(
        x,
        [100.0 * (r.size_reduction or 0.0) for r in students],
        color=_system_colors(students),
    )
    ax.set_ylabel("size reduction vs. teacher (%)")
    ax.set_title("Student model size reduction")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=40, ha="right", fontsize=8)
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    for i, r in enumerate(students):
        ax.text(
            i,
            100.0 * (r.size_reduction or 0.0) + 1.0,
            f"{r.parameters / 1e6:.2f}M",
            ha="center",
            fontsize=7,
        )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
