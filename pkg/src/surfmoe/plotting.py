"""Report figures. Everything renders off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluator import QUANTITIES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}
EXPERT_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown")


def _save(fig, path):
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(metrics, path):
    steps = [r["step"] for r in metrics]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 2.8))
        ax = axes[0]
        ax.semilogy(steps, [r["loss_pressure"] for r in metrics], label="pressure")
        ax.semilogy(steps, [r["loss_shear"] for r in metrics], label="shear")
        val = [(r["step"], r["val_loss_pressure"], r["val_loss_shear"]) for r in metrics
               if r["val_loss_pressure"] is not None]
        if val:
            s, vp, vs = zip(*val)
            ax.semilogy(s, vp, "o", ms=3, color="tab:blue", label="val pressure")
            ax.semilogy(s, vs, "o", ms=3, color="tab:orange", label="val shear")
        ax.set_xlabel("step")
        ax.set_ylabel("MSE (normalized)")
        ax.legend()
        ax = axes[1]
        ax.plot(steps, [r["entropy_pressure"] for r in metrics], label="pressure")
        ax.plot(steps, [r["entropy_shear"] for r in metrics], label="shear")
        ax.set_xlabel("step")
        ax.set_ylabel("gate entropy")
        ax.legend()
        axes[2].plot(steps, [r["lr"] for r in metrics], color="k")
        axes[2].set_xlabel("step")
        axes[2].set_ylabel("learning rate")
        fig.tight_layout()
        return _save(fig, path)


def error_table(report, path):
    """Grouped bars of mean L-2 error, one group per quantity."""
    table = report.table()
    n_models = len(report.models)
    x = np.arange(len(QUANTITIES))
    width = 0.8 / n_models
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        for i, model in enumerate(report.models):
            color = "k" if i == 0 else EXPERT_COLORS[(i - 1) % len(EXPERT_COLORS)]
            ax.bar(x + (i - (n_models - 1) / 2) * width, table[i], width, label=model, color=color)
        ax.set_xticks(x)
        ax.set_xticklabels([q.replace("_", " ") for q in QUANTITIES])
        ax.set_ylabel("L-2 relative error")
        ax.legend(ncol=n_models, loc="upper center", bbox_to_anchor=(0.5, 1.15), frameon=False)
        return _save(fig, path)


def weight_map(sample, inference, path, head="pressure"):
    """Side view of the body coloured by each expert's gate weight."""
    w = inference.weights_p if head == "pressure" else inference.weights_s
    n_exp = w.shape[1]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_exp, 1, figsize=(6, 1.6 * n_exp), sharex=True)
        axes = np.atleast_1d(axes)
        for k, ax in enumerate(axes):
            sc = ax.scatter(sample.points[:, 0], sample.points[:, 2], c=w[:, k], s=2,
                            vmin=0.0, vmax=1.0, cmap="viridis")
            ax.set_aspect("equal")
            ax.set_ylabel("z")
            ax.set_title(f"{head} weight: {inference.experts[k]}", loc="left")
        axes[-1].set_xlabel("x")
        fig.colorbar(sc, ax=list(axes), shrink=0.8)
        return _save(fig, path)


def ablation_summary(results, path):
    ok = [r for r in results if not r.error]
    labels = [r.label for r in ok]
    y = np.arange(len(ok))
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 0.45 * len(ok) + 1.2), sharey=True)
        ax0.barh(y - 0.2, [r.entropy_pressure for r in ok], 0.4, label="pressure")
        ax0.barh(y + 0.2, [r.entropy_shear for r in ok], 0.4, label="shear")
        ax0.axvline(np.log(3), color="grey", ls=":", lw=1)
        ax0.set_yticks(y)
        ax0.set_yticklabels(labels)
        ax0.set_xlabel("mean gate entropy")
        ax0.legend()
        if ok:
            experts = list(ok[0].mean_weights_pressure)
            left = np.zeros(len(ok))
            for k, e in enumerate(experts):
                vals = np.array([r.mean_weights_pressure.get(e, 0.0) for r in ok])
                ax1.barh(y, vals, left=left, color=EXPERT_COLORS[k % len(EXPERT_COLORS)], label=e)
                left += vals
            ax1.axvline(0.9, color="grey", ls=":", lw=1)
            ax1.set_xlabel("mean pressure weight")
            ax1.legend(ncol=len(experts), loc="upper center", bbox_to_anchor=(0.5, 1.12),
                       frameon=False)
        fig.tight_layout()
        return _save(fig, path)
