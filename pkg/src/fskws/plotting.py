"""Report figures rendered to files next to the delimited outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import METRIC_TITLES, METRICS, error_rates  # noqa: E402


def plot_settings(fontsize=10):
    plt.rc("font", size=fontsize)
    plt.rc("axes", labelsize=fontsize, titlesize=fontsize)
    plt.rc("legend", fontsize=fontsize - 1)
    plt.rc("savefig", dpi=120, bbox="tight")


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curve(losses, path, smooth=50):
    plot_settings()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(len(losses))
    ax.plot(steps, losses, color="0.75", lw=0.6, label="episode loss")
    if len(losses) >= smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1:], np.convolve(losses, kernel, mode="valid"),
                color="C0", lw=1.5, label=f"{smooth}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    _save(fig, path)


def plot_roc(scores_unknown, scores_known, path, d_th=None):
    """ROC of unknown-vs-known detection; the score is the candidate distance."""
    plot_settings()
    t = np.unique(np.concatenate([scores_unknown, scores_known, [np.inf]]))
    fpr, fnr = error_rates(scores_unknown, scores_known, t)
    fig, (ax, hx) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax.plot(fpr, 1 - fnr, color="C0")
    ax.plot([0, 1], [0, 1], ls=":", color="0.5")
    ax.set_xlabel("unknowns accepted (FPR)")
    ax.set_ylabel("knowns accepted (TPR)")
    bins = np.linspace(min(np.min(scores_unknown), np.min(scores_known)),
                       max(np.max(scores_unknown), np.max(scores_known)), 40)
    hx.hist(scores_known, bins=bins, alpha=0.6, label="target")
    hx.hist(scores_unknown, bins=bins, alpha=0.6, label="unknown")
    if d_th is not None:
        hx.axvline(d_th, color="k", ls="--", lw=1, label="EER threshold")
    hx.set_xlabel("distance to candidate prototype")
    hx.legend()
    _save(fig, path)


def plot_k_sweep(reports, path):
    plot_settings()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_method = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r)
    for i, (method, rs) in enumerate(by_method.items()):
        rs = sorted(rs, key=lambda r: r.k_shots)
        ks = [r.k_shots for r in rs]
        for j, m in enumerate(METRICS):
            mean = [r.summary[m][0] for r in rs]
            ci = [r.summary[m][1] for r in rs]
            ax.errorbar(ks, mean, yerr=ci, marker="o", capsize=3, color=f"C{j}",
                        ls=["-", "--", ":"][i % 3],
                        label=f"{method} {METRIC_TITLES[m]}".strip())
    ax.set_xscale("log")
    ax.set_xticks(sorted({r.k_shots for r in reports}))
    ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
    ax.set_xlabel("supports per keyword (K)")
    ax.set_ylabel("%")
    ax.legend(loc="lower right")
    _save(fig, path)
