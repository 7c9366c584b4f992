"""Plot measured vs predicted levels from ``grustab evaluate --out DIR``.

Run: python3 demos/plot_predictions.py DIR/predictions.csv [out.png]
Needs matplotlib, which the package itself does not depend on.
"""

import csv
import sys
from collections import defaultdict


def main(path, out="predictions.png"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = defaultdict(lambda: ([], [], []))
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            k, meas, pred = series[(row["sequence"], row["channel"])]
            k.append(int(row["k"]))
            meas.append(float(row["y_measured"]))
            pred.append(float(row["y_predicted"]))
    keys = sorted(series)
    fig, axes = plt.subplots(len(keys), 1, figsize=(8, 2.2 * len(keys)), squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        k, meas, pred = series[key]
        ax.plot(k, meas, label="measured")
        ax.plot(k, pred, "--", label="predicted")
        ax.set_ylabel(f"h{key[1]} [m]")
        ax.set_title(f"sequence {key[0]}", fontsize=9)
    axes[0, 0].legend(loc="best")
    axes[-1, 0].set_xlabel("k")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    main(*sys.argv[1:3])
