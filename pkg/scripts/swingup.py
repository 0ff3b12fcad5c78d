"""Double-link swing-up over several seeds, with and without importance sampling.

Writes one run directory per (variant, seed) under --out and prints the
improvement ratio, the share of significant return decreases and the
area under each learning curve.

    python scripts/swingup.py --seeds 0 1 2 3 4 --n-iters 150 --out runs/swingup
"""
import argparse
from pathlib import Path

from moto.experiments import decrease_fraction, learning_curve_area, run_experiment

VARIANTS = {"default": "", "no_is": "importance_sampling = false\n"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n-iters", type=int, default=150)
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--eval-rollouts", type=int, default=100)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="runs/swingup")
    args = ap.parse_args()

    results = {}
    for variant in args.variants:
        for seed in args.seeds:
            text = (f"seed = {seed}\nn_iters = {args.n_iters}\nthreads = {args.threads}\n"
                    f"log_wall_clock = false\n{VARIANTS[variant]}")
            res = run_experiment(text, Path(args.out) / f"{variant}_seed{seed}", "double_link",
                                 args.eval_rollouts)
            results[variant, seed] = res
            c = res.curve
            print(f"{variant:8s} seed {seed}: J_init {res.j_init[0]:10.2f}  J_final {res.j_final[0]:9.2f}"
                  f"  decreases {decrease_fraction(c['return_mean'], c['return_stderr']):.3f}"
                  f"  AUC {learning_curve_area(c['return_mean']):.4g}", flush=True)

    for variant in args.variants:
        runs = [results[variant, s] for s in args.seeds]
        best = max(r.j_final[0] for r in runs)
        ok = sum(r.j_final[0] - r.j_init[0] >= 0.9 * (best - r.j_init[0]) for r in runs)
        print(f"{variant}: {ok}/{len(runs)} seeds within 90% of the best improvement")
    if set(VARIANTS) <= set(args.variants):
        wins = sum(learning_curve_area(results["default", s].curve["return_mean"])
                   > learning_curve_area(results["no_is", s].curve["return_mean"]) for s in args.seeds)
        print(f"importance sampling has the larger area on {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
