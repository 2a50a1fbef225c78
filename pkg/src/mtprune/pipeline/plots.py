"""Report figures.  Everything renders to files through the Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sparsity(history, path, control=None):
    """Fraction of near-zero scales per round of the alternating loop."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rounds = history.column("round")
    for col, label in (("sparsity_backbone", "backbone (w1)"),
                       ("sparsity_decoder", "decoder (w2)"),
                       ("sparsity_w3", "backbone copy (w3)")):
        ax.plot(rounds, history.column(col), marker="o", label=label)
    if control is not None and len(control):
        ax.plot(control.column("round"), control.column("sparsity_backbone"), "k--",
                label="backbone, alpha=0")
    ax.set_xlabel("round")
    ax.set_ylabel("fraction |gamma| < 1e-3")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_kept_channels(graph, plan, path, title=""):
    """Kept vs original channels of every prunable layer; decoder boxed in red."""
    layers = graph.prunable_layers()
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(layers)), 3.8))
    xs = range(len(layers))
    ax.bar(xs, [l.out_channels for l in layers], color="0.85", label="original")
    ax.bar(xs, [sum(plan.keep_masks[l.id]) for l in layers], color="tab:blue", label="kept")
    dec = [i for i, l in enumerate(layers) if l.partition == "decoder"]
    if dec:
        top = max(l.out_channels for l in layers) * 1.05
        ax.add_patch(Rectangle((dec[0] - 0.5, 0), len(dec), top, fill=False,
                               edgecolor="red", linewidth=1.5, label="decoder"))
    ax.set_xticks(list(xs))
    ax.set_xticklabels([l.id.replace("_conv", "") for l in layers], rotation=70, fontsize=7)
    ax.set_ylabel("channels")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_accuracy_flops(rows, path):
    """mIoU against FLOPs for every evaluated stage of a report."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in rows:
        if r.get("miou") is None or r.get("flops") is None:
            continue
        ax.scatter(r["flops"] / 1e6, r["miou"])
        ax.annotate(r["stage"], (r["flops"] / 1e6, r["miou"]), fontsize=7,
                    xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("MFLOPs (MACs)")
    ax.set_ylabel("mIoU (%)")
    return _save(fig, path)
