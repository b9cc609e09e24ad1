"""Figure rendering for the report paths.

Each study can drop a PNG next to its CSV.  The CSV stays the canonical
record; these plots are conveniences for eyeballing convergence histories,
per-mode growth factors and scalability sweeps.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _target(path):
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def render_solve(result: dict, path) -> Path:
    """Residual history per seed on a log scale."""
    out = _target(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for seed, history in result["histories"]:
        ax.semilogy(history, lw=1.0, label=f"seed {seed}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual norm")
    ax.set_title(result.get("label", "solve"))
    if len(result["histories"]) <= 10:
        ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_eigen(result: dict, path) -> Path:
    """One panel per configuration: growth factor against operator eigenvalue."""
    out = _target(path)
    panels = result["panels"]
    fig, axes = plt.subplots(1, len(panels), figsize=(4.0 * len(panels), 3.4),
                             squeeze=False)
    for ax, panel in zip(axes[0], panels):
        for name, amp in panel["columns"].items():
            ax.plot(panel["eigs"], amp, ".", ms=3, label=name)
        ax.axhline(1.0, color="k", lw=0.8, ls="--")
        ax.set_title(f"k={panel['k_h']:g}, cells={panel['cells']}")
        ax.set_xlabel("operator eigenvalue")
        ax.set_ylabel("mode growth factor")
        ax.legend(fontsize=6)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_mg(result: dict, path) -> Path:
    """Iteration counts per smoothing schedule."""
    out = _target(path)
    fig, ax = plt.subplots(figsize=(6.0, 0.5 * len(result["schedules"]) + 1.5))
    y = range(len(result["schedules"]))
    ax.barh(list(y), result["means"], xerr=result["stds"], color="#4878a8")
    ax.set_yticks(list(y))
    ax.set_yticklabels(result["schedules"], fontsize=8, family="monospace")
    ax.invert_yaxis()
    ax.set_xlabel("iterations (mean over seeds)")
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_asm(result: dict, path) -> Path:
    """Iterations against subdomain count, one line per coarse space."""
    out = _target(path)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    s_values = result["s_values"]
    for label, by_s in sorted(result["series"].items()):
        ax.plot(s_values, [by_s[s] for s in s_values], "o-", label=label)
    ax.set_xscale("log", base=2)
    ax.set_xticks(s_values)
    ax.set_xticklabels([str(s) for s in s_values])
    ax.set_xlabel("subdomains")
    ax.set_ylabel("iterations (mean over seeds)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
