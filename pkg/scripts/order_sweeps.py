#!/usr/bin/env python3
"""Polynomial-order and neighbor-count sweeps on an existing workspace.

Runs the F sweep (Chebyshev order 1..10) and the K sweep (neighbors
1..13) as two separate run directories, then prints both tables. Use
--epochs to trade fidelity for speed.
"""

import argparse
import os
import sys

from sozpipe.harness import ExperimentConfig, run_experiment


def sweep(workspace, out, param, values, args):
    cfg = ExperimentConfig(
        cohort=workspace, repeats=args.repeats, seed=args.seed,
        sweep={"param": param, "values": values},
        hfgcn={"epochs": args.epochs, "hidden": args.hidden})
    run_dir, reports, _ = run_experiment(cfg, out_dir=out,
                                         workers=args.workers)
    print(f"\n{param} sweep ({run_dir})")
    print(f"{param:>4} {'acc':>16} {'f1':>16}")
    for rep in reports:
        print(f"{rep.sweep_value:>4} "
              f"{rep.mean['acc']:.3f} +- {rep.std['acc']:.3f}  "
              f"{rep.mean['f1']:.3f} +- {rep.std['f1']:.3f}")
    return run_dir


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workspace", required=True,
                    help="directory holding latents/ and graphs/")
    ap.add_argument("--out", default="runs/sweeps")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    sweep(args.workspace, os.path.join(args.out, "order_f"), "F",
          list(range(1, 11)), args)
    sweep(args.workspace, os.path.join(args.out, "neighbors_k"), "K",
          list(range(1, 14)), args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
