"""Ablation over reasoning modes, repeated over several training seeds.

Prints the per-seed table and the mean/std of PQ per mode. Differences between
modes on the toy task are small and seed-dependent; read them as such.
"""

import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from bgrnet.cli import RunConfig, format_table, run_ablation
from bgrnet.toytask import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eval-n", type=int, default=100)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        rc = RunConfig(dataclasses.replace(TrainConfig(), seed=seed), eval_n=args.eval_n)
        seed_rows = run_ablation(rc)
        print(format_table(seed_rows), "\n")
        rows.extend(seed_rows)
    (out / "ablation_seeds.json").write_text(json.dumps(rows, indent=2))

    print(f"{'mode':16s} {'PQ mean':>8s} {'std':>6s}")
    for mode in dict.fromkeys(r["mode"] for r in rows):
        pq = np.array([100 * r["PQ"] for r in rows if r["mode"] == mode])
        print(f"{mode:16s} {pq.mean():8.2f} {pq.std():6.2f}")


if __name__ == "__main__":
    main()
