#!/usr/bin/env python3
"""Build a complete workspace from scratch: synthetic cohort, band-power
features, shared autoencoder, latent store, and evoked-response graphs.

The defaults produce a small demo workspace in a couple of minutes. For
the full-scale reference cohort pass --patients 5 --sites 64
--state-seconds 60 --feat-len 128 (expect several minutes and a few GB
under the output directory).
"""

import argparse
import json
import os
import sys

from sozpipe import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="workspace root directory")
    ap.add_argument("--patients", type=int, default=3)
    ap.add_argument("--sites", type=int, default=24)
    ap.add_argument("--state-seconds", type=float, default=12.0)
    ap.add_argument("--ccep-segments", type=int, default=4)
    ap.add_argument("--raw-rate", type=float, default=5000.0)
    ap.add_argument("--feat-len", type=int, default=64)
    ap.add_argument("--latent-dim", type=int, default=16)
    ap.add_argument("--sae-epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    spec_path = os.path.join(args.out, "cohort_spec.json")
    with open(spec_path, "w") as fh:
        json.dump({"num_patients": args.patients, "num_sites": args.sites,
                   "duration_state_s": args.state_seconds,
                   "num_ccep_segments": args.ccep_segments,
                   "raw_rate_hz": args.raw_rate, "seed": args.seed}, fh)

    # encoder widths scale off the feature length; halve four times
    dims = [args.feat_len]
    for _ in range(4):
        dims.append(max(args.latent_dim, (dims[-1] * 3) // 4))
    sae_path = os.path.join(args.out, "sae_config.json")
    with open(sae_path, "w") as fh:
        json.dump({"input_dim": args.feat_len, "latent_dim": args.latent_dim,
                   "encoder_dims": dims, "epochs": args.sae_epochs,
                   "seed": args.seed}, fh)

    cohort = os.path.join(args.out, "cohort")
    features = os.path.join(args.out, "features")
    ckpt = os.path.join(args.out, "sae.ckpt")
    steps = [
        ["synth", "--spec", spec_path, "--out", cohort],
        ["preprocess", "--cohort", cohort, "--out", features,
         "--feat-len", str(args.feat_len)],
        ["train-sae", "--features", features, "--config", sae_path,
         "--out", ckpt],
        ["encode", "--model", ckpt, "--features", features,
         "--out", os.path.join(args.out, "latents")],
        ["build-graph", "--cohort", cohort, "--features", features,
         "--out", os.path.join(args.out, "graphs")],
    ]
    for argv in steps:
        print(f"==> sozpipe {' '.join(argv)}")
        code = cli.main(argv)
        if code != 0:
            return code
    print(f"workspace ready: {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
