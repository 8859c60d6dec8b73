"""Participation study: final accuracy as the per-round join ratio grows.

Repeats each ratio over several seeds and writes one CSV of per-ratio means,
plus the usual per-run artifacts under out/join_<ratio>_seed<k>/.
"""

import argparse
import copy
import csv
import os

import numpy as np

from fedkdx.config import config_from_dict
from fedkdx.experiment import run_experiment

BASE = {
    "strategy": "FEDKDX", "rounds": 100,
    "lr_teacher": 0.05, "lr_student": 0.05, "batch_size": 32,
    "deterministic_timing": True,
    "dataset": {"kind": "synthetic", "num_classes": 3, "dims": 6,
                "samples_per_class": 400, "separation": 3.92},
    "partition": {"mode": "dirichlet", "num_clients": 8, "alpha": 0.1},
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results/join_ratio")
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--rounds", type=int, default=BASE["rounds"])
    parser.add_argument("--ratios", nargs="+", type=float,
                        default=[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    args = parser.parse_args()

    rows = []
    for ratio in args.ratios:
        accs, up = [], []
        for seed in range(args.seeds):
            raw = copy.deepcopy(BASE)
            raw.update(seed=seed, rounds=args.rounds, join_ratio=ratio)
            out_dir = os.path.join(args.out, f"join_{ratio:g}_seed{seed}")
            summary = run_experiment(config_from_dict(raw), out_dir)
            accs.append(summary["final"]["accuracy"])
            up.append(summary["totals"]["bytes_up"])
        rows.append([f"{ratio:g}", repr(float(np.mean(accs))),
                     repr(float(np.std(accs))), str(int(np.mean(up)))])
        print(f"join {ratio:g}: accuracy {np.mean(accs):.4f} "
              f"+- {np.std(accs):.4f}, mean uplink {int(np.mean(up))} bytes")

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "join_ratio.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["join_ratio", "accuracy_mean", "accuracy_std",
                         "bytes_up_mean"])
        writer.writerows(rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
