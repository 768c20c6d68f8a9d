"""Experiment orchestration over the staged stores.

Consumes the latent store (from the encode stage) and the graph store
(from the graph-building stage) under one workspace root, assembles
per-node features, splits nodes, trains the graph classifier, and
aggregates metrics across patients and repeated splits into a run
directory of CSV/JSON artifacts.

The node split is stratified by label even though the protocol only
states percentages: at a 10% training fraction an unstratified draw
frequently contains no positive site, which makes the loss degenerate.
Every report header carries this note (see REPORT_NOTE).

Metric aggregation: each patient's metrics are first averaged over
repeated splits, then mean and standard deviation (ddof=1) are taken
across patients. Byte-level reproducibility of metrics.csv is part of
the contract, so wall-clock time and timestamps live in run_info.json,
never in the CSV artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .connstats import load_graph_store
from .dsp import BAND_NAMES, load_feature_store
from .errors import ConfigError, DependencyError
from .hfgcn import (FUSION_MODES, HfgcnConfig, PatientGraph,
                    auto_class_weights, train_hfgcn)
from .satae import ATTENTION_PLACEMENTS
from .synthcohort import STATES
from .util import canonical_json, child_seed, fingerprint, fmt_float

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.10, 0.20, 0.70)
SWEEPABLE_PARAMS = ("F", "K", "fusion_mode")
METRIC_NAMES = ("acc", "recall", "precision", "f1")
REPORT_NOTE = ("splits are stratified by label; the source protocol states "
               "only the 10/20/70 percentages")

LATENTS_SUBDIR = "latents"
GRAPHS_SUBDIR = "graphs"


def _canonical_subset(values, universe, what: str) -> tuple[str, ...]:
    vals = set(values)
    unknown = vals - set(universe)
    if unknown:
        raise ConfigError(f"unknown {what} {sorted(unknown)}; "
                          f"valid: {list(universe)}")
    if not vals:
        raise ConfigError(f"{what} subset must not be empty")
    return tuple(v for v in universe if v in vals)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: which workspace, which feature slice, which model
    variant, how many repeated splits. `sweep` turns the run into a grid
    over F (polynomial order), K (neighbors), or fusion_mode."""

    cohort: str
    band_subset: tuple[str, ...] = BAND_NAMES
    state_subset: tuple[str, ...] = STATES
    fusion_mode: str = "full"
    attention_placement: str = "E"
    sweep: dict | None = None
    split_fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0
    repeats: int = 5
    hfgcn: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "band_subset",
                           _canonical_subset(self.band_subset, BAND_NAMES,
                                             "band"))
        object.__setattr__(self, "state_subset",
                           _canonical_subset(self.state_subset, STATES,
                                             "state"))
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.attention_placement not in ATTENTION_PLACEMENTS:
            raise ConfigError(f"attention_placement must be one of "
                              f"{ATTENTION_PLACEMENTS}")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or fr[0] <= 0:
            raise ConfigError("split_fractions must be three nonnegative "
                              "numbers with a positive train share")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must sum to 1, got {sum(fr)}")
        object.__setattr__(self, "split_fractions", fr)
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for key in ("fusion_mode", "seed"):
            if key in self.hfgcn:
                raise ConfigError(f"set {key} at the experiment level, not "
                                  f"inside the hfgcn overrides")
        if self.sweep is not None:
            sw = dict(self.sweep)
            if set(sw) != {"param", "values"}:
                raise ConfigError("sweep needs exactly the keys "
                                  "'param' and 'values'")
            if sw["param"] not in SWEEPABLE_PARAMS:
                raise ConfigError(f"sweep param must be one of "
                                  f"{SWEEPABLE_PARAMS}")
            values = list(sw["values"])
            if not values:
                raise ConfigError("sweep values must not be empty")
            object.__setattr__(self, "sweep",
                               {"param": sw["param"], "values": values})
        # surface invalid overrides and sweep values now, not mid-run
        for value in (self.sweep["values"] if self.sweep else [None]):
            self.hfgcn_config(value)

    def hfgcn_config(self, sweep_value=None) -> HfgcnConfig:
        kwargs = dict(self.hfgcn)
        if kwargs.get("class_weights") == "auto":
            kwargs["class_weights"] = None   # resolved per patient split
        kwargs["fusion_mode"] = self.fusion_mode
        kwargs["seed"] = self.seed
        if sweep_value is not None:
            param = self.sweep["param"]
            if param == "F":
                kwargs["cheb_order"] = sweep_value
            elif param == "K":
                kwargs["knn_k"] = sweep_value
            else:
                kwargs["fusion_mode"] = sweep_value
        return HfgcnConfig(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# node splits

def split_nodes(labels: np.ndarray,
                fractions=DEFAULT_FRACTIONS,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified train/val/test masks, uniform within each class.

    Bucket totals are round(fraction * C) (test takes the remainder) and
    per-class counts follow largest-remainder apportionment, so the
    split sizes are exact regardless of class balance. Whenever the
    train bucket has at least one seat per class, every class gets one.
    """
    labels = np.asarray(labels).astype(np.int64)
    n = labels.shape[0]
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("cannot stratify a split: labels contain a single "
                          "class")
    fr = tuple(float(f) for f in fractions)
    n_train = max(1, round(fr[0] * n))
    n_val = round(fr[1] * n)
    n_val = min(n_val, n - n_train)
    rng = np.random.default_rng(seed)

    def apportion(pool_sizes: np.ndarray, total: int) -> np.ndarray:
        pool_total = int(pool_sizes.sum())
        if pool_total == 0 or total == 0:
            return np.zeros_like(pool_sizes)
        quota = total * pool_sizes / pool_total
        base = np.floor(quota).astype(np.int64)
        remainder = quota - base
        # ties go to the lower class index; argsort is stable
        order = np.argsort(-remainder, kind="stable")
        deficit = total - int(base.sum())
        base[order[:deficit]] += 1
        return base

    counts = np.array([int((labels == c).sum()) for c in classes])
    take_train = apportion(counts, n_train)
    if n_train >= classes.size:
        for i in range(classes.size):
            if take_train[i] == 0:
                donor = int(np.argmax(take_train))
                take_train[donor] -= 1
                take_train[i] += 1
    take_val = apportion(counts - take_train, n_val)

    train = np.zeros(n, bool)
    val = np.zeros(n, bool)
    test = np.zeros(n, bool)
    for i, c in enumerate(classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        tr, va = int(take_train[i]), int(take_val[i])
        train[members[:tr]] = True
        val[members[tr : tr + va]] = True
        test[members[tr + va :]] = True
    return train, val, test


# ---------------------------------------------------------------------------
# feature assembly

def assemble_node_features(latents: np.ndarray,
                           band_subset=BAND_NAMES,
                           state_subset=STATES) -> np.ndarray:
    """Concatenate per-(state, band) latent blocks into node features.

    The latent tensor is (sites, states*bands, N) with a state-major
    second axis. Output order is always canonical - states outer, bands
    inner - no matter how the subsets are passed, so feature columns
    mean the same thing across runs."""
    bands = _canonical_subset(band_subset, BAND_NAMES, "band")
    states = _canonical_subset(state_subset, STATES, "state")
    lat = np.asarray(latents, dtype=np.float64)
    expected = len(STATES) * len(BAND_NAMES)
    if lat.ndim != 3 or lat.shape[1] != expected:
        raise ConfigError(f"latents must be (sites, {expected}, N), "
                          f"got {lat.shape}")
    sel = [STATES.index(s) * len(BAND_NAMES) + BAND_NAMES.index(b)
           for s in states for b in bands]
    picked = lat[:, sel, :]
    return picked.reshape(lat.shape[0], len(sel) * lat.shape[2])


# ---------------------------------------------------------------------------
# metrics

def compute_metrics(predictions: np.ndarray, labels: np.ndarray,
                    test_mask: np.ndarray) -> dict[str, float]:
    """Accuracy, recall, precision, F1 on the test nodes, positive class
    = label 1. Zero-denominator cases score 0 and are logged."""
    predictions = np.asarray(predictions)
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    labels = np.asarray(labels).astype(np.int64)
    test_mask = np.asarray(test_mask).astype(bool)
    if not test_mask.any():
        raise ConfigError("test mask selects no nodes")
    y = labels[test_mask]
    p = predictions[test_mask].astype(np.int64)
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    acc = (tp + tn) / y.size
    if tp + fn == 0:
        log.info("no positive nodes in the test split; recall set to 0")
        recall = 0.0
    else:
        recall = tp / (tp + fn)
    if tp + fp == 0:
        log.info("no positive predictions; precision set to 0")
        precision = 0.0
    else:
        precision = tp / (tp + fp)
    if precision + recall == 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return {"acc": acc, "recall": recall, "precision": precision, "f1": f1}


def logistic_baseline(x: np.ndarray, labels: np.ndarray, train_mask,
                      test_mask) -> dict[str, float]:
    """Plain logistic regression on the same node features and split."""
    try:
        from sklearn.linear_model import LogisticRegression
    except ImportError as exc:   # pragma: no cover - environment guard
        raise DependencyError("scikit-learn is required for the logistic "
                              "baseline") from exc
    train_mask = np.asarray(train_mask).astype(bool)
    y_train = labels[train_mask]
    if np.unique(y_train).size < 2:
        log.warning("single-class training split; baseline predicts the "
                    "majority class")
        pred = np.full(labels.shape[0], int(y_train[0]))
    else:
        clf = LogisticRegression(max_iter=1000)
        clf.fit(x[train_mask], y_train)
        pred = clf.predict(x)
    return compute_metrics(pred, labels, test_mask)


def aggregate_rows(rows: list[dict], prefix: str = "") -> tuple[dict, dict]:
    """Patient-level means over repeats, then mean/std (ddof=1) across
    patients. Returns ({metric: mean}, {metric: std})."""
    patients = sorted({r["patient"] for r in rows})
    per_patient = []
    for pid in patients:
        mine = [r for r in rows if r["patient"] == pid]
        per_patient.append({m: float(np.mean([r[prefix + m] for r in mine]))
                            for m in METRIC_NAMES})
    means = {m: float(np.mean([p[m] for p in per_patient]))
             for m in METRIC_NAMES}
    if len(per_patient) > 1:
        stds = {m: float(np.std([p[m] for p in per_patient], ddof=1))
                for m in METRIC_NAMES}
    else:
        stds = {m: 0.0 for m in METRIC_NAMES}
    for m in METRIC_NAMES:
        if not 0.0 <= means[m] <= 1.0:
            raise ConfigError(f"aggregated {m} outside [0, 1]")
    return means, stds


@dataclass
class MetricsReport:
    """Aggregate for one configuration (one sweep point)."""

    sweep_param: str | None
    sweep_value: object
    per_patient: list[dict]
    mean: dict[str, float]
    std: dict[str, float]
    baseline_mean: dict[str, float]
    baseline_std: dict[str, float]
    config_fingerprint: str
    wall_seconds: float
    num_patients: int
    repeats: int


# ---------------------------------------------------------------------------
# the experiment driver

def _run_single(payload: dict) -> dict:
    """One (sweep value, repeat, patient) training job. Top level so a
    process pool can pickle it."""
    graph = PatientGraph(
        x=payload["x"], a=payload["adjacency"], labels=payload["labels"],
        train_mask=payload["train_mask"], val_mask=payload["val_mask"],
        test_mask=payload["test_mask"], patient_id=payload["patient"])
    hf_cfg: HfgcnConfig = payload["hf_cfg"]
    if payload["auto_class_weights"]:
        weights = auto_class_weights(graph.labels, graph.train_mask)
        hf_cfg = HfgcnConfig(**{**asdict(hf_cfg), "class_weights": weights})
    model, history, best_epoch = train_hfgcn(graph, hf_cfg)
    pred = model.forward(graph).argmax(axis=1)
    metrics = compute_metrics(pred, graph.labels, graph.test_mask)
    baseline = logistic_baseline(payload["x"], graph.labels,
                                 graph.train_mask, graph.test_mask)
    if payload["ckpt_path"]:
        from .hfgcn import save_hfgcn
        save_hfgcn(model, payload["ckpt_path"],
                   extra_meta={"patient": payload["patient"],
                               "repeat": payload["repeat"],
                               "sweep_value": payload["sweep_value"],
                               "best_epoch": best_epoch})
    row = {"sweep_value": payload["sweep_value"],
           "patient": payload["patient"], "repeat": payload["repeat"],
           "split_seed": payload["split_seed"], "best_epoch": best_epoch}
    row.update(metrics)
    row.update({"baseline_" + k: v for k, v in baseline.items()})
    return row


def load_workspace(cfg: ExperimentConfig):
    """Latent store + graph store for the workspace, with stage-naming
    errors when either is missing or inconsistent."""
    latents_dir = os.path.join(cfg.cohort, LATENTS_SUBDIR)
    graphs_dir = os.path.join(cfg.cohort, GRAPHS_SUBDIR)
    if not os.path.exists(os.path.join(latents_dir, "store.json")):
        raise DependencyError(f"no latent store at {latents_dir}; run the "
                              f"encode stage first")
    if not os.path.exists(os.path.join(graphs_dir, "graphs.json")):
        raise DependencyError(f"no graph store at {graphs_dir}; run the "
                              f"build-graph stage first")
    latents, lat_meta = load_feature_store(latents_dir)
    stored = lat_meta.get("attention_placement")
    if stored is not None and stored != cfg.attention_placement:
        raise ConfigError(f"latents were encoded with attention placement "
                          f"{stored!r}, config says "
                          f"{cfg.attention_placement!r}")
    entries, _ = load_graph_store(graphs_dir)
    graphs = {e.patient_id: e for e in entries}
    if sorted(graphs) != sorted(latents):
        raise DependencyError(
            f"latent store and graph store disagree on patients "
            f"({sorted(latents)} vs {sorted(graphs)}); re-run the encode "
            f"and build-graph stages on the same cohort")
    for pid, entry in graphs.items():
        if entry.labels is None:
            raise DependencyError(f"graph store entry {pid} carries no "
                                  f"labels; re-run the build-graph stage")
    return latents, graphs


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None,
                   workers: int = 1):
    """Train/evaluate over the whole cohort and persist artifacts.

    Returns (run_dir, [MetricsReport per sweep point], trend dict or
    None). The trend dict appears when the sweep covers fusion modes
    full, static_only, and dynamic_only: it flags whether full >= each
    single-branch variant in mean F1 (reported, never enforced)."""
    latents, graphs = load_workspace(cfg)
    patients = sorted(latents)
    cfg_dict = cfg.as_dict()
    fp = fingerprint(cfg_dict)
    if out_dir is None:
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        out_dir = os.path.join("runs", f"{stamp}-{fp}")
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    features = {pid: assemble_node_features(latents[pid], cfg.band_subset,
                                            cfg.state_subset)
                for pid in patients}
    auto_weights = cfg.hfgcn.get("class_weights") == "auto"

    sweep_param = cfg.sweep["param"] if cfg.sweep else None
    sweep_values = cfg.sweep["values"] if cfg.sweep else [None]
    reports: list[MetricsReport] = []
    all_rows: list[dict] = []
    started = time.time()
    for sweep_value in sweep_values:
        t0 = time.time()
        hf_cfg = cfg.hfgcn_config(sweep_value)
        jobs = []
        for repeat in range(cfg.repeats):
            for pid in patients:
                split_seed = child_seed(cfg.seed + repeat, pid)
                train, val, test = split_nodes(graphs[pid].labels,
                                               cfg.split_fractions,
                                               split_seed)
                tag = "" if sweep_value is None else f"{sweep_param}{sweep_value}_"
                ckpt = os.path.join(out_dir, "checkpoints",
                                    f"{tag}{pid}_rep{repeat}.ckpt")
                jobs.append({
                    "x": features[pid], "adjacency": graphs[pid].adjacency,
                    "labels": graphs[pid].labels, "train_mask": train,
                    "val_mask": val, "test_mask": test, "hf_cfg": hf_cfg,
                    "auto_class_weights": auto_weights, "patient": pid,
                    "repeat": repeat, "split_seed": split_seed,
                    "sweep_value": sweep_value, "ckpt_path": ckpt,
                })
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_single, jobs))
        else:
            rows = [_run_single(job) for job in jobs]
        rows.sort(key=lambda r: (r["repeat"], r["patient"]))
        mean, std = aggregate_rows(rows)
        base_mean, base_std = aggregate_rows(rows, prefix="baseline_")
        patient_means = []
        for pid in patients:
            mine = [r for r in rows if r["patient"] == pid]
            entry = {"patient": pid}
            entry.update({m: float(np.mean([r[m] for r in mine]))
                          for m in METRIC_NAMES})
            patient_means.append(entry)
        reports.append(MetricsReport(
            sweep_param=sweep_param, sweep_value=sweep_value,
            per_patient=patient_means, mean=mean, std=std,
            baseline_mean=base_mean, baseline_std=base_std,
            config_fingerprint=fp, wall_seconds=time.time() - t0,
            num_patients=len(patients), repeats=cfg.repeats))
        all_rows.extend(rows)

    trend = None
    if sweep_param == "fusion_mode":
        by_mode = {r.sweep_value: r.mean["f1"] for r in reports}
        if {"full", "static_only", "dynamic_only"} <= set(by_mode):
            trend = {
                "full_f1": by_mode["full"],
                "static_only_f1": by_mode["static_only"],
                "dynamic_only_f1": by_mode["dynamic_only"],
                "full_ge_static": by_mode["full"] >= by_mode["static_only"],
                "full_ge_dynamic": by_mode["full"] >= by_mode["dynamic_only"],
            }
            trend["ok"] = trend["full_ge_static"] and trend["full_ge_dynamic"]

    _write_run_dir(out_dir, cfg_dict, fp, reports, all_rows, trend,
                   time.time() - started)
    return out_dir, reports, trend


_METRIC_COLS = [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
_BASELINE_COLS = [f"baseline_{c}" for c in _METRIC_COLS]
METRICS_CSV_COLUMNS = (["sweep_param", "sweep_value", "fingerprint",
                        "patients", "repeats"] + _METRIC_COLS
                       + _BASELINE_COLS)
PER_PATIENT_CSV_COLUMNS = (["sweep_param", "sweep_value", "patient", "repeat",
                            "split_seed", "best_epoch"] + list(METRIC_NAMES)
                           + [f"baseline_{m}" for m in METRIC_NAMES])


def _write_run_dir(out_dir, cfg_dict, fp, reports, rows, trend, wall):
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(canonical_json(cfg_dict) + "\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_CSV_COLUMNS)
        for rep in reports:
            row = [rep.sweep_param or "", "" if rep.sweep_value is None
                   else str(rep.sweep_value), fp, rep.num_patients,
                   rep.repeats]
            for m in METRIC_NAMES:
                row += [fmt_float(rep.mean[m]), fmt_float(rep.std[m])]
            for m in METRIC_NAMES:
                row += [fmt_float(rep.baseline_mean[m]),
                        fmt_float(rep.baseline_std[m])]
            writer.writerow(row)
    sweep_param = reports[0].sweep_param or ""
    with open(os.path.join(out_dir, "per_patient.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PER_PATIENT_CSV_COLUMNS)
        for r in rows:
            out = [sweep_param,
                   "" if r["sweep_value"] is None else str(r["sweep_value"]),
                   r["patient"], r["repeat"], r["split_seed"],
                   r["best_epoch"]]
            out += [fmt_float(r[m]) for m in METRIC_NAMES]
            out += [fmt_float(r["baseline_" + m]) for m in METRIC_NAMES]
            writer.writerow(out)
    info = {"wall_seconds": wall, "timestamp": time.time(),
            "note": REPORT_NOTE, "trend": trend}
    with open(os.path.join(out_dir, "run_info.json"), "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# cross-run report

REPORT_COLUMNS = (["run", "status", "sweep_param", "sweep_value",
                   "fingerprint"] + _METRIC_COLS + _BASELINE_COLS)


def report(run_dirs: list[str], out_path: str = "report"):
    """Collect stored aggregate rows from run directories into one table
    (CSV + JSON), sorted by mean accuracy descending. Never recomputes
    metrics. Returns (rows, had_errors)."""
    rows = []
    had_errors = False
    for rd in run_dirs:
        path = os.path.join(rd, "metrics.csv")
        if not os.path.exists(path):
            had_errors = True
            rows.append({"run": rd, "status": "error: missing metrics.csv"})
            continue
        with open(path, newline="") as fh:
            for stored in csv.DictReader(fh):
                row = {"run": rd, "status": "ok"}
                row.update({k: stored.get(k, "") for k in REPORT_COLUMNS
                            if k not in ("run", "status")})
                rows.append(row)

    def sort_key(row):
        try:
            acc = -float(row.get("acc_mean", ""))
        except ValueError:
            acc = np.inf     # error rows trail the table
        return (row["status"] != "ok", acc, row["run"])

    rows.sort(key=sort_key)
    with open(out_path + ".csv", "w", newline="") as fh:
        fh.write(f"# {REPORT_NOTE}\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS,
                                restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    with open(out_path + ".json", "w") as fh:
        json.dump({"note": REPORT_NOTE, "rows": rows}, fh, indent=1,
                  sort_keys=True)
    return rows, had_errors
