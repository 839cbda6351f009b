"""Report figures. Rendered off-screen to files next to the text/CSV outputs."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    # fixed metadata keeps PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_mma(report, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(report.mma_thresholds, report.mma_curve(), marker="o")
    ax.set_xlabel("threshold (px)")
    ax.set_ylabel("mean matching accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_corner_error_cdf(report, path, max_err=10.0):
    err = np.sort(report.corner_errors)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    if len(err):
        shown = np.clip(err, 0, max_err)
        ax.step(np.concatenate([[0], shown]), np.arange(len(err) + 1) / len(err), where="post")
    for t in report.auc_thresholds:
        ax.axvline(t, color="grey", lw=0.8, ls="--")
    ax.set_xlim(0, max_err)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("corner error (px)")
    ax.set_ylabel("fraction of pairs")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(curve, path):
    """``curve`` as returned by train.read_loss_curve."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for key in ("total", "coarse_pos", "coarse_neg", "fine"):
        ax.plot(curve["step"], curve[key], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_bench(rows, path):
    """FLOP ratio (topic-restricted / full) against K_co/K for each kernel."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for kernel in sorted({r["kernel"] for r in rows}):
        sel = [r for r in rows if r["kernel"] == kernel]
        ax.scatter([r["kco"] / r["k"] for r in sel], [r["ratio"] for r in sel], label=kernel, s=14)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--", label="K_co/K")
    ax.set_xlabel("K_co / K")
    ax.set_ylabel("restricted / full FLOPs")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
