"""Figure rendering for sweep and bench output files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_sweep", "plot_times"]

_X_LABELS = {
    "encoder_layers": "encoder layers",
    "embedding_size": "embedding size",
    "attention_heads": "attention heads",
}


def plot_sweep(rows: list, parameter: str, path: str) -> None:
    """Macro F1 versus the swept value, one line per (input size, head)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    series = sorted({(r["input_bits"], r["head_type"]) for r in rows})
    for bits, head in series:
        pts = sorted(
            (r["param_value"], r["macro_f1"])
            for r in rows
            if r["input_bits"] == bits and r["head_type"] == head
        )
        ax.plot(
            [p[0] for p in pts],
            [p[1] for p in pts],
            marker="o",
            label=f"{bits} bits, {head}",
        )
    ax.axhline(0.7, color="gray", linestyle="--", linewidth=0.8,
               label="convergence threshold")
    ax.set_xlabel(_X_LABELS.get(parameter, parameter))
    ax.set_ylabel("macro F1")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_times(results: list, path: str) -> None:
    """Inference time versus input size, one line per technique."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    techniques = sorted({r.technique for r in results})
    for technique in techniques:
        pts = sorted(
            (r.input_bits, r.compute_seconds)
            for r in results
            if r.technique == technique
        )
        ax.plot(
            [p[0] for p in pts],
            [p[1] for p in pts],
            marker="o",
            label=technique,
        )
    ax.set_xlabel("input size (bits)")
    ax.set_ylabel("inference time (s)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
