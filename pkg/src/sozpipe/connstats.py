"""Evoked-response connectivity: significance-masked correlation graphs.

Per evoked segment the chain is: paired t-test of every site against its
baseline, Benjamini-Hochberg correction across sites, zeroing of
non-significant rows, pairwise Pearson correlation, magnitude
thresholding, and finally averaging over segments into one signed
adjacency matrix per patient.

Conventions worth knowing before reading the code:

* Degenerate t-tests are defined, not errors: zero-variance differences
  give p = 1 when the mean is also zero and p = 0 otherwise. Both are
  logged.
* Zero-variance rows (masked-out sites) correlate to 0 with everything,
  so insignificant sites become isolated nodes rather than NaN sources.
* The default threshold keeps entries with |rho| >= rho_tau. The
  `eq8_literal` flag inverts this to keep rho < rho_tau instead; it
  exists to reproduce a printed inequality we believe is a typo, since
  a filter that keeps only sub-threshold correlations cannot "filter
  out noise connections". See the project decision log.
* Averaging segment matrices does not re-threshold, so averaged entries
  may legitimately fall below rho_tau.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dsp import Recording, prepare_baseline, prepare_ccep, CCEP_RATE_HZ
from .errors import ConfigError, FormatError, VersionError

log = logging.getLogger(__name__)

GRAPH_MAGIC = "SOZGRAPH"
GRAPH_VERSION = 1

DEFAULT_RHO_TAU = 0.3
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class SignificanceMask:
    """Per-site significance of the evoked response vs baseline."""

    p_raw: np.ndarray
    p_adjusted: np.ndarray
    mask: np.ndarray       # 1 where p_adjusted < alpha
    alpha: float

    def __post_init__(self):
        for name in ("p_raw", "p_adjusted"):
            p = getattr(self, name)
            if np.any((p < 0) | (p > 1)):
                raise ConfigError(f"{name} outside [0, 1]")
        if not np.array_equal(self.mask, (self.p_adjusted < self.alpha).astype(self.mask.dtype)):
            raise ConfigError("mask inconsistent with adjusted p-values")


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Symmetric zero-diagonal signed adjacency with its threshold."""

    a: np.ndarray
    threshold: float

    def __post_init__(self):
        a = self.a
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigError(f"adjacency must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ConfigError("adjacency entries must be finite")
        if not np.array_equal(a, a.T):
            raise ConfigError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0.0):
            raise ConfigError("adjacency diagonal must be zero")
        if np.any(np.abs(a) > 1.0):
            raise ConfigError("adjacency entries must lie in [-1, 1]")

    @property
    def num_sites(self) -> int:
        return self.a.shape[0]


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, Recording):
        return x.samples
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# statistics

def paired_t_test_rows(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise paired t-test of x against y, both (C, T). Returns
    (t, p) vectors; p is two-sided with T-1 degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"paired arrays differ in shape: {x.shape} vs {y.shape}")
    n = x.shape[1]
    if n < 2:
        raise ConfigError("paired t-test needs at least two samples")
    d = x - y
    mean = d.mean(axis=1)
    sd = d.std(axis=1, ddof=1)
    t = np.zeros(x.shape[0])
    p = np.ones(x.shape[0])
    regular = sd > 0.0
    t[regular] = mean[regular] / (sd[regular] / np.sqrt(n))
    p[regular] = 2.0 * stats.t.sf(np.abs(t[regular]), n - 1)
    degenerate_sure = ~regular & (mean != 0.0)
    if np.any(degenerate_sure):
        t[degenerate_sure] = np.sign(mean[degenerate_sure]) * np.inf
        p[degenerate_sure] = 0.0
        log.warning("paired t-test: %d rows with zero-variance nonzero-mean "
                    "differences, p set to 0", int(degenerate_sure.sum()))
    degenerate_flat = ~regular & (mean == 0.0)
    if np.any(degenerate_flat):
        log.info("paired t-test: %d rows with identical pairs, p set to 1",
                 int(degenerate_flat.sum()))
    return t, p


def paired_t_test(x, y) -> tuple[float, float]:
    """Scalar form of paired_t_test_rows for two vectors of length T."""
    t, p = paired_t_test_rows(np.atleast_2d(x), np.atleast_2d(y))
    return float(t[0]), float(p[0])


def fdr_bh(p: np.ndarray, alpha: float = DEFAULT_ALPHA) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up. Returns (adjusted p, binary mask with
    mask[i] = 1 iff adjusted[i] < alpha)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ConfigError("fdr_bh expects a nonempty vector")
    if np.any((p < 0) | (p > 1)):
        raise ConfigError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum(1.0, np.minimum.accumulate(ranked[::-1])[::-1])
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    mask = (adjusted < alpha).astype(np.int64)
    return adjusted, mask


def significance_mask(ccep, baseline, alpha: float = DEFAULT_ALPHA) -> SignificanceMask:
    _, p = paired_t_test_rows(_as_matrix(ccep), _as_matrix(baseline))
    adjusted, mask = fdr_bh(p, alpha)
    return SignificanceMask(p_raw=p, p_adjusted=adjusted, mask=mask, alpha=alpha)


def mask_ccep(ccep, mask: np.ndarray):
    """Zero the rows of sites whose evoked response is not significant."""
    mask = np.asarray(mask)
    if isinstance(ccep, Recording):
        return ccep.replace(samples=ccep.samples * mask[:, None])
    return _as_matrix(ccep) * mask[:, None]


def pearson(v_i, v_j) -> float:
    """Correlation of two equal-length vectors; 0 if either is constant."""
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    if v_i.shape != v_j.shape or v_i.ndim != 1:
        raise ConfigError("pearson expects two equal-length vectors")
    if v_i.size < 2:
        raise ConfigError("pearson needs at least two samples")
    a = v_i - v_i.mean()
    b = v_j - v_j.mean()
    denom = np.sqrt((a ** 2).sum() * (b ** 2).sum())
    if denom == 0.0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def pearson_matrix(x: np.ndarray) -> np.ndarray:
    """All-pairs correlation of the rows of x (C, T). Constant rows get
    zero correlation with everything, themselves included."""
    x = _as_matrix(x)
    centered = x - x.mean(axis=1, keepdims=True)
    ss = (centered ** 2).sum(axis=1)
    denom = np.sqrt(np.outer(ss, ss))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (centered @ centered.T) / denom
    rho[denom == 0.0] = 0.0
    np.clip(rho, -1.0, 1.0, out=rho)
    return rho


def threshold_correlations(rho: np.ndarray, rho_tau: float,
                           eq8_literal: bool = False) -> np.ndarray:
    """Apply the edge-keeping rule, zero the diagonal, and mirror the
    upper triangle for exact symmetry."""
    if eq8_literal:
        keep = rho < rho_tau
    else:
        keep = np.abs(rho) >= rho_tau
    a = np.where(keep, rho, 0.0)
    upper = np.triu(a, k=1)
    return upper + upper.T


def adjacency_from_ccep(s_ccep, baseline, rho_tau: float = DEFAULT_RHO_TAU,
                        alpha: float = DEFAULT_ALPHA,
                        eq8_literal: bool = False) -> AdjacencyMatrix:
    """Single-segment adjacency. Site counts must agree; if the time axes
    differ both are truncated to the shorter (time-sample pairing is the
    only axis available for the paired test)."""
    ccep_mat = _as_matrix(s_ccep)
    base_mat = _as_matrix(baseline)
    if ccep_mat.ndim != 2 or base_mat.ndim != 2:
        raise ConfigError("expected 2-d site-by-time arrays")
    if ccep_mat.shape[0] != base_mat.shape[0]:
        raise ConfigError(f"site count mismatch: {ccep_mat.shape[0]} vs "
                          f"{base_mat.shape[0]}")
    t_common = min(ccep_mat.shape[1], base_mat.shape[1])
    ccep_mat = ccep_mat[:, :t_common]
    base_mat = base_mat[:, :t_common]
    sig = significance_mask(ccep_mat, base_mat, alpha)
    masked = mask_ccep(ccep_mat, sig.mask)
    rho = pearson_matrix(masked)
    return AdjacencyMatrix(threshold_correlations(rho, rho_tau, eq8_literal),
                           rho_tau)


def average_adjacency(matrices: list[AdjacencyMatrix]) -> AdjacencyMatrix:
    """Element-wise mean over segments. Deliberately no re-thresholding:
    averaged entries may fall below the per-segment threshold."""
    if not matrices:
        raise ConfigError("average_adjacency needs at least one matrix")
    thresholds = {m.threshold for m in matrices}
    if len(thresholds) != 1:
        raise ConfigError(f"mixed thresholds in average: {sorted(thresholds)}")
    mean = np.mean([m.a for m in matrices], axis=0)
    # float mean of symmetric matrices is symmetric term-by-term, but make
    # the invariant unconditional
    upper = np.triu(mean, k=1)
    return AdjacencyMatrix(upper + upper.T, thresholds.pop())


def patient_adjacency(patient, rho_tau: float = DEFAULT_RHO_TAU,
                      alpha: float = DEFAULT_ALPHA, eq8_literal: bool = False,
                      segment_indices: list[int] | None = None,
                      rate_hz: float = CCEP_RATE_HZ) -> AdjacencyMatrix:
    """Full per-patient chain: decimate evoked segments, build the
    interictal baseline, compute one adjacency per segment, average."""
    baseline = prepare_baseline(patient.interictal, rate_hz)
    indices = range(len(patient.ccep)) if segment_indices is None else segment_indices
    per_segment = []
    for q in indices:
        if not (0 <= q < len(patient.ccep)):
            raise ConfigError(f"evoked segment index {q} out of range "
                              f"(have {len(patient.ccep)})")
        seg = prepare_ccep(patient.ccep[q], rate_hz)
        per_segment.append(adjacency_from_ccep(seg, baseline, rho_tau,
                                               alpha, eq8_literal))
    return average_adjacency(per_segment)


# ---------------------------------------------------------------------------
# persistence

@dataclass
class GraphEntry:
    """One patient's averaged adjacency plus the node metadata downstream
    training needs, so graph consumers never reopen raw recordings."""

    patient_id: str
    adjacency: AdjacencyMatrix
    labels: np.ndarray | None = None
    communities: np.ndarray | None = None


def save_graph_store(path: str, entries: list[GraphEntry], meta: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    ids = []
    for e in entries:
        arr = np.ascontiguousarray(e.adjacency.a, dtype="<f8")
        arr.tofile(os.path.join(path, f"{e.patient_id}.adj"))
        sidecar = {
            "patient": e.patient_id,
            "num_sites": e.adjacency.num_sites,
            "dtype": "<f8",
            "rho_tau": e.adjacency.threshold,
            "labels": None if e.labels is None else np.asarray(e.labels).tolist(),
            "communities": None if e.communities is None
                           else np.asarray(e.communities).tolist(),
        }
        # build parameters (alpha, segment count, flags) repeat in every
        # sidecar so a single patient file is self-describing
        for key, value in (meta or {}).items():
            sidecar.setdefault(key, value)
        with open(os.path.join(path, f"{e.patient_id}.json"), "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
        ids.append(e.patient_id)
    index = {"format": GRAPH_MAGIC, "version": GRAPH_VERSION,
             "patients": ids, "meta": meta or {}}
    with open(os.path.join(path, "graphs.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def load_graph_store(path: str) -> tuple[list[GraphEntry], dict]:
    index_path = os.path.join(path, "graphs.json")
    if not os.path.exists(index_path):
        raise FormatError(f"missing graph index {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("format") != GRAPH_MAGIC:
        raise FormatError(f"{index_path}: bad magic {index.get('format')!r}, "
                          f"expected {GRAPH_MAGIC!r}")
    if index.get("version") != GRAPH_VERSION:
        raise VersionError(f"{index_path}: unsupported version {index.get('version')}")
    entries = []
    for pid in index["patients"]:
        with open(os.path.join(path, f"{pid}.json")) as fh:
            sidecar = json.load(fh)
        c = sidecar["num_sites"]
        bin_path = os.path.join(path, f"{pid}.adj")
        expected = c * c * 8
        actual = os.path.getsize(bin_path)
        if actual != expected:
            raise FormatError(f"{bin_path}: expected {expected} bytes for "
                              f"{c}x{c} float64, found {actual}")
        a = np.fromfile(bin_path, dtype="<f8").reshape(c, c)
        entries.append(GraphEntry(
            patient_id=pid,
            adjacency=AdjacencyMatrix(a, sidecar["rho_tau"]),
            labels=None if sidecar["labels"] is None
                   else np.asarray(sidecar["labels"], dtype=np.int64),
            communities=None if sidecar["communities"] is None
                        else np.asarray(sidecar["communities"], dtype=np.int64)))
    return entries, index.get("meta", {})
