#!/usr/bin/env python3
"""Plot learning curves from a results.csv produced by run_benchmark.py.

One line per strategy: mean dice over folds/seeds/classes against the
annotation budget, with a +-1 std band. The 100% reference fit is drawn as a
dashed horizon rather than a curve point.
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from aloop.experiment import LearningCurve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("results_csv")
    ap.add_argument("--out", default="curves.png")
    ap.add_argument("--with-full", action="store_true",
                    help="include the 100%% budget as a curve point instead")
    args = ap.parse_args()

    frame = LearningCurve.read_csv(args.results_csv).to_frame()
    per_cell = (frame.groupby(["strategy", "budget_pct", "fold", "seed"])["dice"]
                .mean().reset_index())

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, block in per_cell.groupby("strategy"):
        stats = block.groupby("budget_pct")["dice"].agg(["mean", "std"]).fillna(0.0)
        al_steps = stats[stats.index < 100.0] if not args.with_full else stats
        line, = ax.plot(al_steps.index, al_steps["mean"], marker="o", label=name)
        ax.fill_between(al_steps.index, al_steps["mean"] - al_steps["std"],
                        al_steps["mean"] + al_steps["std"], alpha=0.15,
                        color=line.get_color())
        if not args.with_full and 100.0 in stats.index:
            ax.axhline(stats.loc[100.0, "mean"], color=line.get_color(),
                       linestyle="--", linewidth=0.8, alpha=0.6)

    ax.set_xlabel("annotated pool fraction (%)")
    ax.set_ylabel("mean dice (held-out folds)")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
