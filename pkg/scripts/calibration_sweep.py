"""Logit-noise calibration sweep on the blobs task for all three heads.

Adds N(0, std^2) noise to the class scores (mu for Gaussian heads, raw
logits for softmax) over the default 0.00-2.00 grid and prints mean
accuracy per std, averaged over seeds.

    python scripts/calibration_sweep.py --seeds 0 1 2 --out runs/sweep.csv
"""

import argparse
import csv

import numpy as np

from _common import blobs_config
from zclassifier import latent
from zclassifier import pipeline as pl

HEADS = ("zclassifier", "nokl", "softmax")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--trials", type=int, default=20)
    parser.add_argument("--out", help="optional CSV with one row per (seed, head, std)")
    args = parser.parse_args()

    stds = latent.DEFAULT_STDS
    acc = {h: [] for h in HEADS}
    margins = {h: [] for h in HEADS}
    for seed in args.seeds:
        for head in HEADS:
            cfg = blobs_config(seed, head, args.epochs)
            task = pl.load_task(cfg)
            model, _ = pl.train_model(cfg, task)
            res = latent.noise_calibration_sweep(model, task.test, stds, args.trials, seed, head)
            acc[head].append(res.accuracies)
            # top-1 minus top-2 score: the scale the noise has to overcome
            scores = np.sort(latent.collect_logits(model, task.test).vectors, axis=1)
            margins[head].append(float(np.median(scores[:, -1] - scores[:, -2])))

    print(f"{'std':>5} " + " ".join(f"{h:>12}" for h in HEADS))
    for i, s in enumerate(stds):
        print(f"{s:5.2f} " + " ".join(f"{np.mean([a[i] for a in acc[h]]):12.4f}" for h in HEADS))
    print("median top-1 margin " + " ".join(f"{h}={np.mean(margins[h]):.2f}" for h in HEADS))

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "head", "std", "accuracy"])
            for head in HEADS:
                for seed, accs in zip(args.seeds, acc[head]):
                    writer.writerows([seed, head, f"{s:.6f}", f"{a:.6f}"] for s, a in zip(stds, accs))


if __name__ == "__main__":
    main()
