"""Plot the outputs of ``twofactor experiment``.

Usage: python scripts/plot_figures.py OUT_DIR

Reads errors.csv and bands.csv from OUT_DIR and writes errors.png (estimation
error against sample size, one panel per parameter) and bands.png (true and
filtered factors and spot price with their confidence bands). Needs
matplotlib, which the package itself does not depend on.
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def load_errors(path):
    errs = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["error"]:
                errs[row["param"]][int(row["n_t"])].append(float(row["error"]))
    return errs


def plot_errors(errs, out):
    names = list(errs)
    fig, axes = plt.subplots(1, len(names), figsize=(2.6 * len(names), 2.8), sharex=True)
    for ax, name in zip(np.atleast_1d(axes), names):
        sizes = sorted(errs[name])
        for n in sizes:
            ax.scatter([n] * len(errs[name][n]), errs[name][n], s=6, color="0.6")
        ax.plot(sizes, [np.mean(errs[name][n]) for n in sizes], "k-o", ms=3)
        ax.axhline(0.0, color="r", lw=0.8)
        ax.set_title(name)
        ax.set_xlabel("n_T")
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_bands(path, out):
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = data["t"]
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    for ax, key in zip(axes, ("chi", "xi", "S")):
        ax.fill_between(t, data[f"{key}_lo"], data[f"{key}_hi"], color="C0", alpha=0.25, lw=0)
        ax.plot(t, data[f"{key}_hat"], color="C0", lw=0.8, label="filtered")
        ax.plot(t, data[f"{key}_true"], color="k", lw=0.6, label="simulated")
        ax.set_ylabel(key)
    axes[0].legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("t (years)")
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    args = parser.parse_args()
    plot_errors(load_errors(args.out_dir / "errors.csv"), args.out_dir / "errors.png")
    plot_bands(args.out_dir / "bands.csv", args.out_dir / "bands.png")


if __name__ == "__main__":
    main()
