"""
Optional figures: ROC/FROC curves for an evaluation, metric-vs-value for a sweep.
"""

import io
from typing import Any, Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from metrics import FROC_OPERATING_POINTS  # noqa: E402
from reporting import PathLike, atomic_write_bytes  # noqa: E402


def _save(fig, path: PathLike) -> None:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=150, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())


def plot_curves(curves: Dict[str, List[Tuple[float, float]]], path: PathLike, title: str = "") -> None:
    """ROC curves (bag / instance) on the left, the FROC curve on the right."""
    sns.set_theme(style="whitegrid")
    fig, (ax_roc, ax_froc) = plt.subplots(1, 2, figsize=(11, 4.5))

    for name in ("bag_roc", "instance_roc"):
        if curves.get(name):
            x, y = zip(*curves[name])
            ax_roc.plot(x, y, label=name.replace("_", " "))
    ax_roc.plot([0, 1], [0, 1], color="grey", linestyle="--", linewidth=0.8)
    ax_roc.set_xlabel("False positive rate")
    ax_roc.set_ylabel("True positive rate")
    ax_roc.set_title("ROC", fontweight="bold")
    ax_roc.legend(loc="lower right")

    if curves.get("froc"):
        x, y = zip(*curves["froc"])
        ax_froc.step(x, y, where="post")
        for point in FROC_OPERATING_POINTS:
            ax_froc.axvline(point, color="red", linestyle=":", alpha=0.4)
        ax_froc.set_xscale("symlog", linthresh=0.25)
    ax_froc.set_xlabel("False positives per bag")
    ax_froc.set_ylabel("Sensitivity")
    ax_froc.set_title("FROC", fontweight="bold")

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(rows: Sequence[Dict[str, Any]], axis: str, path: PathLike) -> None:
    """Instance and bag AUC per grid value; failed cells are left out."""
    frame = pd.DataFrame([row for row in rows if row["status"] == "ok"])
    sns.set_theme(style="whitegrid")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if not frame.empty:
        long = frame.melt(id_vars=["value"], value_vars=["instance_auc", "bag_auc"],
                          var_name="metric", value_name="AUC").dropna()
        long["value"] = long["value"].astype(str)
        if axis == "strategy":
            sns.barplot(data=long, x="value", y="AUC", hue="metric", ax=ax)
        else:
            sns.pointplot(data=long, x="value", y="AUC", hue="metric", ax=ax)
    ax.set_xlabel(axis)
    ax.set_ylabel("AUC")
    ax.set_title(f"{axis} sweep", fontweight="bold")
    fig.tight_layout()
    _save(fig, path)
