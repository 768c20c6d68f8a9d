"""Command line entry point.

Stages and their artifacts:

    synth        cohort spec JSON        -> cohort directory
    preprocess   cohort                  -> feature store (site, state, band, feature)
    train-sae    feature store           -> shared autoencoder checkpoint
    encode       checkpoint + features   -> latent store (site, state_band, latent)
    build-graph  cohort                  -> graph store (adjacency + labels)
    train-hfgcn  graph store + latents   -> per-patient model + history CSV
    run          experiment config JSON  -> run directory (metrics.csv, ...)
    report       run directories         -> combined report CSV/JSON

Exit codes: 0 success, 2 configuration or artifact-format problem,
3 missing upstream artifact (the message names the stage to run),
4 non-finite numerics.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import connstats, dsp, harness, hfgcn, satae, synthcohort
from .errors import (ConfigError, DependencyError, FormatError,
                     NumericalError)
from .util import child_seed, fmt_float

log = logging.getLogger(__name__)


def _load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            loaded = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return loaded


def _config_overrides(args) -> dict:
    return _load_json(args.config) if args.config else {}


def _parse_subset(value, default: tuple[str, ...]) -> tuple[str, ...]:
    """Accept either a comma-separated string or a JSON list."""
    if value is None:
        return default
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return tuple(value)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    spec_dict = _load_json(args.spec) if args.spec else {}
    spec_dict.update(_config_overrides(args))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = synthcohort.CohortSpec(**spec_dict)
    synthcohort.save_cohort(synthcohort.iter_patients(spec), args.out,
                            spec=spec)
    print(f"wrote {spec.num_patients} patients to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    index = synthcohort.read_cohort_index(args.cohort)
    overrides = _config_overrides(args)
    feat_len = int(overrides.get("feat_len", args.feat_len))
    per_patient = {}
    for pid in index["patients"]:
        patient = synthcohort.load_patient(args.cohort, pid)
        per_state = [dsp.state_band_features(patient.states[state],
                                             feat_len=feat_len)
                     for state in synthcohort.STATES]
        features = dsp.zscore_sites(np.stack(per_state, axis=1))
        per_patient[pid] = features
        log.info("preprocessed %s: %s", pid, features.shape)
    meta = {"cohort": os.path.abspath(args.cohort), "feat_len": feat_len,
            "states": list(synthcohort.STATES),
            "bands": list(dsp.BAND_NAMES)}
    dsp.save_feature_store(args.out, per_patient, meta)
    print(f"wrote features for {len(per_patient)} patients to {args.out}")
    return 0


def cmd_train_sae(args) -> int:
    if not os.path.exists(os.path.join(args.features, "store.json")):
        raise DependencyError(f"no feature store at {args.features}; run "
                              f"the preprocess stage first")
    features, meta = dsp.load_feature_store(args.features)
    cfg_dict = _config_overrides(args)
    for key in ("encoder_dims", "decoder_dims"):
        if cfg_dict.get(key) is not None:
            cfg_dict[key] = tuple(cfg_dict[key])
    cfg_dict.setdefault("input_dim", int(meta.get("feat_len",
                                                  dsp.DEFAULT_FEATURE_LEN)))
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = satae.SataeConfig(**cfg_dict)
    model, losses = satae.train_shared(features, cfg)
    satae.save_satae(model, args.out)
    print(f"trained autoencoder ({cfg.epochs} epochs, final loss "
          f"{fmt_float(losses[-1])}); checkpoint at {args.out}")
    return 0


def cmd_encode(args) -> int:
    if not os.path.exists(os.path.join(args.features, "store.json")):
        raise DependencyError(f"no feature store at {args.features}; run "
                              f"the preprocess stage first")
    if not os.path.exists(args.model):
        raise DependencyError(f"no autoencoder checkpoint at {args.model}; "
                              f"run the train-sae stage first")
    model = satae.load_satae(args.model)
    features, feat_meta = dsp.load_feature_store(args.features)
    latents = satae.encode_cohort(model, features)
    meta = {"source_features": os.path.abspath(args.features),
            "latent_dim": model.cfg.latent_dim,
            "attention_placement": model.cfg.attention_placement,
            "states": feat_meta.get("states", list(synthcohort.STATES)),
            "bands": feat_meta.get("bands", list(dsp.BAND_NAMES))}
    dsp.save_feature_store(args.out, latents, meta,
                           axes=("site", "state_band", "latent"))
    print(f"encoded {len(latents)} patients to {args.out} "
          f"(latent dim {model.cfg.latent_dim})")
    return 0


def cmd_build_graph(args) -> int:
    index = synthcohort.read_cohort_index(args.cohort)
    subset = None
    if args.ccep_subset:
        subset = [int(tok) for tok in args.ccep_subset.split(",") if tok.strip()]
    feature_sites = None
    if args.features:
        feats, _ = dsp.load_feature_store(args.features)
        feature_sites = {pid: arr.shape[0] for pid, arr in feats.items()}
    entries = []
    for pid in index["patients"]:
        patient = synthcohort.load_patient(args.cohort, pid)
        if feature_sites is not None and pid in feature_sites \
                and feature_sites[pid] != patient.num_sites:
            raise ConfigError(
                f"{pid}: feature store has {feature_sites[pid]} sites, "
                f"cohort has {patient.num_sites}")
        adjacency = connstats.patient_adjacency(
            patient, rho_tau=args.rho_tau, alpha=args.alpha,
            eq8_literal=args.eq8_literal, segment_indices=subset)
        entries.append(connstats.GraphEntry(
            patient_id=pid, adjacency=adjacency, labels=patient.labels,
            communities=patient.communities))
        log.info("built graph for %s", pid)
    meta = {"cohort": os.path.abspath(args.cohort), "rho_tau": args.rho_tau,
            "alpha": args.alpha, "eq8_literal": args.eq8_literal,
            "ccep_subset": subset}
    connstats.save_graph_store(args.out, entries, meta)
    print(f"wrote {len(entries)} graphs to {args.out}")
    return 0


HISTORY_COLUMNS = ("epoch", "train_loss", "val_acc", "val_f1")


def cmd_train_hfgcn(args) -> int:
    if not os.path.exists(os.path.join(args.graph, "graphs.json")):
        raise DependencyError(f"no graph store at {args.graph}; run the "
                              f"build-graph stage first")
    if not os.path.exists(os.path.join(args.latents, "store.json")):
        raise DependencyError(f"no latent store at {args.latents}; run the "
                              f"encode stage first")
    entries, _ = connstats.load_graph_store(args.graph)
    latents, _ = dsp.load_feature_store(args.latents)
    graphs = {e.patient_id: e for e in entries}
    if args.patient is not None:
        if args.patient not in graphs:
            raise ConfigError(f"patient {args.patient!r} not in the graph "
                              f"store ({sorted(graphs)})")
        pids = [args.patient]
    else:
        pids = sorted(graphs)

    cfg_dict = _config_overrides(args)
    bands = _parse_subset(cfg_dict.pop("band_subset", None), dsp.BAND_NAMES)
    states = _parse_subset(cfg_dict.pop("state_subset", None),
                           synthcohort.STATES)
    fractions = tuple(cfg_dict.pop("split_fractions",
                                   harness.DEFAULT_FRACTIONS))
    auto_weights = cfg_dict.get("class_weights") == "auto"
    if auto_weights:
        cfg_dict["class_weights"] = None
    if cfg_dict.get("class_weights") is not None:
        cfg_dict["class_weights"] = tuple(cfg_dict["class_weights"])
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    base_cfg = hfgcn.HfgcnConfig(**cfg_dict)

    os.makedirs(args.out, exist_ok=True)
    summary = {}
    for pid in pids:
        entry = graphs[pid]
        if entry.labels is None:
            raise DependencyError(f"graph store entry {pid} carries no "
                                  f"labels; re-run the build-graph stage")
        if pid not in latents:
            raise DependencyError(f"patient {pid} missing from the latent "
                                  f"store; re-run the encode stage")
        x = harness.assemble_node_features(latents[pid], bands, states)
        train, val, test = harness.split_nodes(
            entry.labels, fractions, child_seed(base_cfg.seed, 0, pid))
        cfg = base_cfg
        if auto_weights:
            weights = hfgcn.auto_class_weights(entry.labels, train)
            cfg = hfgcn.HfgcnConfig(**{**asdict(base_cfg),
                                       "class_weights": weights})
        graph = hfgcn.PatientGraph(x=x, a=entry.adjacency,
                                   labels=entry.labels, train_mask=train,
                                   val_mask=val, test_mask=test,
                                   patient_id=pid)
        model, history, best_epoch = hfgcn.train_hfgcn(graph, cfg)
        hfgcn.save_hfgcn(model, os.path.join(args.out, f"{pid}.ckpt"),
                         extra_meta={"patient": pid,
                                     "best_epoch": best_epoch})
        with open(os.path.join(args.out, f"history_{pid}.csv"), "w") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for row in history:
                fh.write(f"{row['epoch']},{fmt_float(row['train_loss'])},"
                         f"{fmt_float(row['val_acc'])},"
                         f"{fmt_float(row['val_f1'])}\n")
        pred = model.forward(graph).argmax(axis=1)
        metrics = harness.compute_metrics(pred, entry.labels, test)
        summary[pid] = {"best_epoch": best_epoch, **metrics}
        print(f"{pid}: best epoch {best_epoch}, test f1 "
              f"{fmt_float(metrics['f1'])}")
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return 0


def cmd_run(args) -> int:
    cfg_dict = _load_json(args.experiment)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    for key in ("band_subset", "state_subset", "split_fractions"):
        if key in cfg_dict:
            cfg_dict[key] = tuple(cfg_dict[key])
    cfg = harness.ExperimentConfig(**cfg_dict)
    run_dir, reports, trend = harness.run_experiment(cfg, out_dir=args.out,
                                                     workers=args.workers)
    for rep in reports:
        tag = (f"{rep.sweep_param}={rep.sweep_value}"
               if rep.sweep_param else "default")
        print(f"{tag}: acc {rep.mean['acc']:.3f}+-{rep.std['acc']:.3f} "
              f"f1 {rep.mean['f1']:.3f}+-{rep.std['f1']:.3f} "
              f"(baseline f1 {rep.baseline_mean['f1']:.3f})")
    if trend is not None:
        print(f"fusion trend ok={trend['ok']} "
              f"(full {trend['full_f1']:.3f}, static "
              f"{trend['static_only_f1']:.3f}, dynamic "
              f"{trend['dynamic_only_f1']:.3f})")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_report(args) -> int:
    rows, had_errors = harness.report(args.run_dirs, args.out)
    for row in rows:
        if row["status"] == "ok":
            print(f"{row['run']}: acc {row['acc_mean']} f1 {row['f1_mean']}")
        else:
            print(f"{row['run']}: {row['status']}")
    print(f"report written to {args.out}.csv / {args.out}.json")
    return 3 if had_errors else 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the seed from the config")
    common.add_argument("--workers", type=int, default=1,
                        help="worker processes for independent jobs")
    common.add_argument("--config", default=None,
                        help="JSON file with defaults for this subcommand")

    parser = argparse.ArgumentParser(
        prog="sozpipe",
        description="synthetic iEEG cohorts, shared-autoencoder latents, "
                    "evoked-response graphs, and graph-network training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic cohort")
    p.add_argument("--spec", help="cohort spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common],
                       help="behavioral-state band features per site")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feat-len", type=int, default=dsp.DEFAULT_FEATURE_LEN)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-sae", parents=[common],
                       help="train the shared attention autoencoder")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_sae)

    p = sub.add_parser("encode", parents=[common],
                       help="encode features into latents")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("build-graph", parents=[common],
                       help="evoked-response adjacency per patient")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rho-tau", type=float, default=connstats.DEFAULT_RHO_TAU)
    p.add_argument("--alpha", type=float, default=connstats.DEFAULT_ALPHA)
    p.add_argument("--eq8-literal", action="store_true",
                   help="use the literal z*sqrt(n-3) variance-stabilized "
                        "statistic instead of the corrected z/sqrt(...)")
    p.add_argument("--ccep-subset",
                   help="comma-separated evoked segment indices")
    p.add_argument("--features",
                   help="feature store for a site-count cross-check")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train-hfgcn", parents=[common],
                       help="train the graph classifier per patient")
    p.add_argument("--graph", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patient", help="train only this patient")
    p.set_defaults(func=cmd_train_hfgcn)

    p = sub.add_parser("run", parents=[common],
                       help="full experiment over a workspace")
    p.add_argument("--experiment", required=True,
                   help="experiment config JSON")
    p.add_argument("--out", help="run directory (default runs/<stamp>-<fp>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[common],
                       help="combine stored run metrics into one table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report",
                   help="output path prefix (default ./report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SOZPIPE_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:          # includes VersionError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
