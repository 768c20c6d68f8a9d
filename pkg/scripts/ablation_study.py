#!/usr/bin/env python3
"""Fusion-mode ablation on an existing workspace.

Sweeps the five fusion variants, prints the mean/std table, and reports
whether the expected ordering (full at least as good as either single
branch in mean F1) held. The flag is informative, not enforced: on small
synthetic cohorts single-branch variants can legitimately win.
"""

import argparse
import sys

from sozpipe.harness import ExperimentConfig, run_experiment
from sozpipe.hfgcn import FUSION_MODES


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workspace", required=True,
                    help="directory holding latents/ and graphs/")
    ap.add_argument("--out", help="run directory")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cfg = ExperimentConfig(
        cohort=args.workspace, repeats=args.repeats, seed=args.seed,
        sweep={"param": "fusion_mode", "values": list(FUSION_MODES)},
        hfgcn={"epochs": args.epochs, "hidden": args.hidden})
    run_dir, reports, trend = run_experiment(cfg, out_dir=args.out,
                                             workers=args.workers)

    print(f"{'mode':<14} {'acc':>14} {'f1':>14} {'baseline f1':>12}")
    for rep in reports:
        print(f"{rep.sweep_value:<14} "
              f"{rep.mean['acc']:.3f} +- {rep.std['acc']:.3f} "
              f"{rep.mean['f1']:.3f} +- {rep.std['f1']:.3f} "
              f"{rep.baseline_mean['f1']:>12.3f}")
    if trend is not None:
        verdict = "held" if trend["ok"] else "did NOT hold"
        print(f"\nfusion ordering {verdict}: full {trend['full_f1']:.3f}, "
              f"static_only {trend['static_only_f1']:.3f}, "
              f"dynamic_only {trend['dynamic_only_f1']:.3f}")
    print(f"artifacts: {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
