"""Loss-term ablation on the expert-teacher task.

    python scripts/ablation.py [--seed 1] [--epochs 60]

Runs AMTML with all terms, without the angle term, without the hint term and
without both, then prints the final-epoch loss terms and test accuracy.
"""
import argparse

from amtml.experiments import ExpertTask, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=60)
    args = ap.parse_args()
    results = run_ablation(ExpertTask(), args.seed, epochs=args.epochs)
    print(f"{'config':14s} {'ce':>9s} {'kd_kl':>9s} {'angle':>9s} {'hint':>9s} {'total':>9s} {'test_acc':>9s}")
    for name, res in results.items():
        t = res.report.epochs[-1].terms
        print(f"{name:14s} {t.ce:9.5f} {t.kd_kl:9.5f} {t.angle:9.5f} {t.hint:9.5f} {t.total:9.5f} "
              f"{res.report.final_test_acc:9.4f}")


if __name__ == "__main__":
    main()
