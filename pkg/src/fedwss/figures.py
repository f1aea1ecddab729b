"""Round-curve figures rendered next to the delimited metrics output."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_TERMS = ("loss_pce", "loss_mstree", "loss_gcrf", "loss_con")


def render_round_figures(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Write loss and DSC curves from recorder rows; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    by_round: dict[int, list[dict]] = defaultdict(list)
    for row in rows:
        by_round[row["round"]].append(row)
    rounds = sorted(by_round)

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for term in _TERMS:
        ys = [sum(r[term] for r in by_round[t]) / len(by_round[t]) for t in rounds]
        if any(abs(y) > 0 for y in ys):
            ax.plot(rounds, ys, label=term.replace("loss_", ""))
    ax.set_xlabel("round")
    ax.set_ylabel("mean training loss")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    eval_rounds = [t for t in rounds if by_round[t][0].get("dsc") is not None]
    if eval_rounds:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        sites = sorted({r["site"] for r in rows})
        for site in sites:
            ys = [next(r["dsc"] for r in by_round[t] if r["site"] == site)
                  for t in eval_rounds]
            ax.plot(eval_rounds, ys, alpha=0.55, label=f"site {site}")
        avg = [sum(r["dsc"] for r in by_round[t]) / len(by_round[t])
               for t in eval_rounds]
        ax.plot(eval_rounds, avg, color="black", linewidth=2.0, label="average")
        ax.set_xlabel("round")
        ax.set_ylabel("test DSC")
        ax.set_ylim(0.0, 1.0)
        ax.legend(loc="lower right", fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / "dsc_curves.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
