"""Figures written next to the CSV/JSON outputs.

Everything renders off-screen through the Agg/SVG backends, and SVG output
is made deterministic (fixed hash salt, no date metadata) so repeated runs
produce identical files.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import BAND_EDGES, BANDS  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "eyeopen",
    "svg.fonttype": "none",
}


def _save(fig, path):
    fmt = str(path).rsplit(".", 1)[-1].lower()
    meta = {"Date": None} if fmt == "svg" else {}
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)


def plot_curve(report, path, title=None):
    """Predicted vs ground-truth degree per frame, with the eye-state bands shaded."""
    frames = [f["frame"] for f in report.frames]
    pred = [f["pred"] for f in report.frames]
    gt = [f["gt"] for f in report.frames]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        edges = (0.0,) + tuple(BAND_EDGES) + (max(110.0, max(pred + gt) + 5),)
        for k, name in enumerate(BANDS):
            ax.axhspan(edges[k], edges[k + 1], color=f"C{k}", alpha=0.07, lw=0)
            ax.text(frames[-1], (edges[k] + min(edges[k + 1], 105)) / 2, name, ha="right",
                    va="center", fontsize=6, alpha=0.6)
        ax.plot(frames, gt, color="0.4", lw=1.0, ls="--", label="ground truth")
        ax.plot(frames, pred, "o", ms=2.5, color="C0", label="predicted")
        for m in report.pred_minima:
            ax.axvline(m, color="C3", lw=0.6, alpha=0.5)
        ax.set_xlabel("frame")
        ax.set_ylabel("degree of openness")
        ax.set_ylim(-5, edges[-1])
        rho = f"{report.spearman:.3f}" if report.spearman_defined else "undefined"
        ax.set_title(title or f"Spearman rho = {rho}")
        ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_training_log(history, path):
    """Per-epoch loss terms on a log scale."""
    epochs = [h.epoch for h in history]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for key in ("loss1", "loss2", "loss3", "total"):
            vals = [getattr(h, key) for h in history]
            if any(v > 0 for v in vals):
                ax.plot(epochs, vals, marker=".", label=key)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
