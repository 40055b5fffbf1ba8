"""Expert-teacher comparison: OKD per teacher, AvgMKD and AMTML over seeds.

    python scripts/expert_experiment.py [--seeds 1 2 3 4 5]

Prints per-seed test accuracy and the adapter's mean weight on each class's
expert, then the means.
"""
import argparse

import numpy as np

from amtml.experiments import ExpertTask, run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    args = ap.parse_args()
    task = ExpertTask()
    rows = []
    print(f"{'seed':>4s} {'okd_0':>7s} {'okd_1':>7s} {'avgmkd':>7s} {'amtml':>7s} {'w_expert':>8s}")
    for seed in args.seeds:
        r = run_seed(task, seed)
        rows.append(r)
        print(f"{seed:4d} {r['okd_0']:7.4f} {r['okd_1']:7.4f} {r['avgmkd']:7.4f} {r['amtml']:7.4f} "
              f"{r['expert_weight']:8.4f}")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("okd_0", "okd_1", "avgmkd", "amtml", "expert_weight")}
    print(f"{'mean':>4s} {mean['okd_0']:7.4f} {mean['okd_1']:7.4f} {mean['avgmkd']:7.4f} {mean['amtml']:7.4f} "
          f"{mean['expert_weight']:8.4f}")


if __name__ == "__main__":
    main()
