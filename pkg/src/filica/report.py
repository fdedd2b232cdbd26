"""Boxplot SVGs of per-replicate metrics."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fusion import METHODS  # noqa: E402

METRIC_LABELS = {
    "xw_abs_corr": "|corr(best-matching X_W, true X_W)|",
    "h_abs_corr": "|corr(best-matching H, true H)|",
    "c1_corr_bias": "bias of corr(C1, H1)",
    "c2_corr_bias": "bias of corr(C2, H2)",
    "c2_cohens_d_bias": "bias of Cohen's d (C2, H2)",
}
METHOD_COLORS = {"filica": "#d62728", "completer": "#1f77b4", "replace0": "#2ca02c", "oracle": "#7f7f7f"}

# keep SVG output byte-stable between runs
plt.rcParams["svg.hashsalt"] = "filica"
plt.rcParams["svg.fonttype"] = "none"


def boxplot_svg(rows: Iterable[dict], setting: str, metric: str, path: str | Path) -> Path:
    """One figure per (setting, metric): a panel per component, boxes per
    (missing percentage, method).  Whiskers at 1.5 IQR."""
    rows = [r for r in rows if r["setting"] == setting and r["metric"] == metric]
    if not rows:
        raise ValueError(f"no rows for setting={setting!r} metric={metric!r}")
    comps = sorted({int(r["component"]) for r in rows})
    pcts = sorted({float(r["missing_pct"]) for r in rows})
    methods = [m for m in METHODS if any(r["method"] == m for r in rows)]

    fig, axes = plt.subplots(1, len(comps), figsize=(4.5 * len(comps), 4), squeeze=False, sharey=True)
    width = 0.8 / len(methods)
    for ax, comp in zip(axes[0], comps):
        for i, method in enumerate(methods):
            data, pos = [], []
            for j, pct in enumerate(pcts):
                vals = [r["value"] for r in rows if r["component"] == comp
                        and r["method"] == method and float(r["missing_pct"]) == pct]
                if vals:
                    data.append(vals)
                    pos.append(j + (i - (len(methods) - 1) / 2) * width)
            if not data:
                continue
            bp = ax.boxplot(data, positions=pos, widths=width * 0.9, whis=1.5, patch_artist=True,
                            manage_ticks=False)
            for box in bp["boxes"]:
                box.set_facecolor(METHOD_COLORS.get(method, "white"))
                box.set_alpha(0.7)
            ax.plot([], [], color=METHOD_COLORS.get(method, "black"), lw=6, alpha=0.7, label=method)
        ax.set_xticks(range(len(pcts)))
        ax.set_xticklabels([f"{round(p * 100)}%" for p in pcts])
        ax.set_xlabel("missing per modality")
        ax.set_title(f"component {comp}")
        if "bias" in metric:
            ax.axhline(0.0, color="black", lw=0.8, ls="--")
    axes[0][0].set_ylabel(METRIC_LABELS.get(metric, metric))
    axes[0][-1].legend(loc="best", fontsize="small")
    fig.suptitle(setting)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def write_boxplots(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Write ``<setting>_<metric>.svg`` for every pair present in ``rows``."""
    out = []
    keys = sorted({(r["setting"], r["metric"]) for r in rows})
    for setting, metric in keys:
        out.append(boxplot_svg(rows, setting, metric, Path(out_dir) / f"{setting}_{metric}.svg"))
    return out
