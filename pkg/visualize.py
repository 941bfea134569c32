# visualize.py
# Turns stored score dumps and sweep tables into uncertainty figures

from pathlib import Path
from typing import List, Literal, Mapping, Tuple

import matplotlib
import numpy as np
import pandas as pd

# Figures are always written to disk, never shown
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

FigureType = Literal["fig3", "fig4", "fig5"]
AVAILABLE_FIGURES = ["fig3", "fig4", "fig5"]

# split name in the score dumps -> legend group
SPLIT_GROUPS = {"IND_f": "old", "IND_c": "current", "OOD": "unseen"}
GROUP_COLORS = {"old": "#1f77b4", "current": "#2ca02c", "unseen": "#d62728"}


def render_figure(figure_id: FigureType, data: Mapping) -> List[Tuple[str, plt.Figure]]:
    """
    Takes a figure id and the data it needs, returns [(file stem, Figure), ...].

    fig3: data["scores"]       {task_id: per-sample score frame}
    fig4: data["uncertainty"]  frame with model_task, data_task, VACUITY, DISSONANCE
    fig5: data["sweep"]        frame with task_id, beta, fpr95
    """
    if figure_id == "fig3":
        return _render_sample_uncertainty(data["scores"])
    elif figure_id == "fig4":
        return [("fig4_average_uncertainty", _render_average_uncertainty(data["uncertainty"]))]
    elif figure_id == "fig5":
        return [("fig5_beta_sweep", _render_beta_sweep(data["sweep"]))]
    else:
        raise ValueError(f"Unsupported figure_id: {figure_id}. Options: {AVAILABLE_FIGURES}")


def save_figure(fig: plt.Figure, out_dir: Path, stem: str) -> List[Path]:
    """Raster + vector copy of one figure. Metadata is pinned so reruns give identical files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{stem}.png"
    pdf = out_dir / f"{stem}.pdf"
    fig.savefig(png, dpi=150, metadata={"Software": None})
    fig.savefig(pdf, metadata={"CreationDate": None, "Producer": None, "Creator": None})
    plt.close(fig)
    return [png, pdf]


def _render_sample_uncertainty(scores: Mapping[int, pd.DataFrame]) -> List[Tuple[str, plt.Figure]]:
    """One figure per task model: vacuity (top) and dissonance (bottom) for every test sample."""
    figures = []
    for task_id in sorted(scores):
        df = scores[task_id].sort_values(["data_task", "sample_id"]).reset_index(drop=True)
        groups = df["split"].map(SPLIT_GROUPS)

        fig, (ax_vac, ax_diss) = plt.subplots(2, 1, figsize=(10, 7), sharex=True)
        for ax, column in ((ax_vac, "vacuity"), (ax_diss, "dissonance")):
            for group, color in GROUP_COLORS.items():
                mask = (groups == group).to_numpy()
                if not mask.any():
                    continue
                ax.scatter(np.flatnonzero(mask), df.loc[mask, column], s=6, alpha=0.6, c=color, label=group)

            # IND on the left, OOD (tasks not trained yet) on the right
            ood_rows = np.flatnonzero((df["split"] == "OOD").to_numpy())
            if len(ood_rows):
                ax.axvline(ood_rows[0] - 0.5, color='black', linestyle='--', alpha=0.7)

            ax.set_ylabel(column.capitalize(), fontsize=12)
            ax.set_ylim(-0.02, 1.02)
            ax.grid(alpha=0.3)

        ax_vac.legend(loc='upper left', markerscale=3)
        ax_vac.set_title(f"Uncertainty per test sample after task {task_id}", fontsize=14, fontweight='bold')
        ax_diss.set_xlabel("Test sample (ordered by task)", fontsize=12)

        plt.tight_layout()
        figures.append((f"fig3_task_{task_id}", fig))
    return figures


def _render_average_uncertainty(uncertainty: pd.DataFrame) -> plt.Figure:
    """Average vacuity (left) and dissonance (right) per data task, one line per model."""
    fig, axes = plt.subplots(1, 2, figsize=(12, 5))

    for ax, column in zip(axes, ("VACUITY", "DISSONANCE")):
        for model_task, df in uncertainty.groupby("model_task"):
            df = df.sort_values("data_task")
            ax.plot(df["data_task"], df[column], marker='o', label=f"model after task {model_task}")
            # highlight the task the model was just trained on
            current = df[df["data_task"] == model_task]
            ax.scatter(current["data_task"], current[column], s=120, facecolors='none', edgecolors='black')

        ax.set_xlabel("Data task", fontsize=12)
        ax.set_ylabel(f"Average {column.lower()}", fontsize=12)
        ax.set_xticks(sorted(uncertainty["data_task"].unique()))
        ax.grid(alpha=0.3)

    axes[0].legend(loc='best', fontsize=9)
    fig.suptitle("Average uncertainty of each task model on every task", fontsize=14, fontweight='bold')
    plt.tight_layout()
    return fig


def _render_beta_sweep(sweep: pd.DataFrame) -> plt.Figure:
    """FPR95 distribution over tasks for each beta of the combined uncertainty."""
    fig, ax = plt.subplots(figsize=(10, 6))

    betas = sorted(sweep["beta"].unique())
    values = [sweep.loc[sweep["beta"] == b, "fpr95"].to_numpy() * 100 for b in betas]
    ax.boxplot(values)
    ax.set_xticks(range(1, len(betas) + 1), [f"{b:.1f}" for b in betas])

    ax.set_xlabel("beta (0 = dissonance only, 1 = vacuity only)", fontsize=12)
    ax.set_ylabel("FPR95 (%)  [Lower = Better]", fontsize=12)
    ax.set_title("IND_f vs OOD detection with combined uncertainty", fontsize=14, fontweight='bold')
    ax.grid(axis='y', alpha=0.3)

    plt.tight_layout()
    return fig

