"""Render the tables of an experiment directory as PNG figures.

    python scripts/plot.py runs/desk
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def augmentation(run, out):
    df = pd.read_csv(run / "augmentation.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    arms = list(dict.fromkeys(df["arm"]))
    for i, arm in enumerate(arms):
        r2 = df[df["arm"] == arm]["r2"]
        ax.scatter([i] * len(r2), r2, color="k", s=12)
        ax.hlines(r2.median(), i - 0.25, i + 0.25, color="C0")
    ax.set_xticks(range(len(arms)), arms)
    ax.set_ylabel("test R²")
    fig.tight_layout()
    fig.savefig(out / "augmentation.png", dpi=150)


def transfer(run, out):
    df = pd.read_csv(run / "transfer.csv")
    if df.empty:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = range(len(df))
    ax.bar([i - 0.2 for i in x], df["scratch_mae"], 0.4, label="random init")
    ax.bar([i + 0.2 for i in x], df["finetune_mae"], 0.4, label="fine-tuned")
    ax.set_xticks(list(x), [f"seed {s}" for s in df["seed"]])
    ax.set_ylabel("test MAE (high fidelity)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "transfer.png", dpi=150)


def histogram(run, out):
    df = pd.read_csv(run / "histogram.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    centers = (df["bin_lo"] + df["bin_hi"]) / 2
    width = (df["bin_hi"] - df["bin_lo"]).iloc[0]
    for col in df.columns[2:]:
        ax.step(centers, df[col], where="mid", label=col)
    ax.set_xlabel("ΔΨ")
    ax.set_ylabel("% of set")
    ax.set_xlim(df["bin_lo"].iloc[0] - width, df["bin_hi"].iloc[-1] + width)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "histogram.png", dpi=150)


def frechet(run, out):
    df = pd.read_csv(run / "frechet.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [f"{a}\nvs {b}" for a, b in zip(df["a"], df["b"])]
    ax.bar(labels, df["distance"], yerr=df["se"], capsize=4)
    ax.set_yscale("log")
    ax.set_ylabel("descriptor Fréchet distance")
    fig.tight_layout()
    fig.savefig(out / "frechet.png", dpi=150)


def main():
    run = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")
    out = run / "figures"
    out.mkdir(exist_ok=True)
    for f in (augmentation, transfer, histogram, frechet):
        if (run / f"{f.__name__}.csv").exists():
            f(run, out)
    print(out)


if __name__ == "__main__":
    main()
