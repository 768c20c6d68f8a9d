"""Two-branch graph network over patient adjacency with explicit backprop.

Static branch: Chebyshev polynomial filters of the scaled graph
Laplacian, chained layer to layer. Dynamic branch: per-layer EdgeConv
that rebuilds a k-nearest-neighbor graph in feature space from the
static layer's output, passes concatenated (center, neighbor) features
through two relu dense maps, and max-aggregates over neighbors. The two
branches are summed per layer and the sums are combined by node-wise L2
weighting into the classifier input.

Everything is float64 and hand-differentiated; the only stochastic part
is parameter initialization. Gradient does not flow through the k-NN
selection or the max-aggregation choice (discrete argmax routing, first
maximal edge on ties), which is the standard subgradient treatment.

Fusion modes select what the classifier reads:
  full         cascaded weighting of the summed branches (default)
  fusion_s1    product of static-only norms applied to the last static layer
  fusion_s2    product of summed-branch norms applied to the last sum
  static_only  last static layer directly
  dynamic_only EdgeConv of the last static layer directly

`weighting="raw-layer"` replaces the cascade's norm-of-weighted-stream
with the raw per-layer norm; only the last weight then reaches the
output. With the default cascade, norms accumulate multiplicatively,
which makes full and fusion_s2 algebraically identical at any depth;
both are kept because they are distinct protocol rows in the ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nncore as nn
from .connstats import AdjacencyMatrix
from .errors import ConfigError
from .util import require_finite

FUSION_MODES = ("full", "fusion_s1", "fusion_s2", "static_only", "dynamic_only")
WEIGHTING_MODES = ("cascade", "raw-layer")

_DEGREE_EPS = 1e-8
_POWER_TOL = 1e-6
_POWER_MAX_ITERS = 500
_LAMBDA_FALLBACK = 2.0


@dataclass(frozen=True)
class HfgcnConfig:
    layers: int = 3
    cheb_order: int = 3
    knn_k: int = 10
    hidden: int = 64
    fusion_mode: str = "full"
    weighting: str = "cascade"
    lr: float = 0.005
    epochs: int = 150
    seed: int = 0
    class_weights: tuple[float, float] | None = None
    clamp_negative_edges: bool = False

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigError("layers must be >= 2 (weighting needs "
                              "consecutive layers)")
        if self.cheb_order < 1:
            raise ConfigError("cheb_order must be >= 1")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, "
                              f"got {self.fusion_mode!r}")
        if self.weighting not in WEIGHTING_MODES:
            raise ConfigError(f"weighting must be one of {WEIGHTING_MODES}, "
                              f"got {self.weighting!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.class_weights is not None:
            cw = tuple(float(w) for w in self.class_weights)
            if len(cw) != 2 or any(w <= 0 for w in cw):
                raise ConfigError("class_weights must be two positive numbers")
            object.__setattr__(self, "class_weights", cw)


@dataclass
class PatientGraph:
    """Node features, adjacency, labels and the three node splits."""

    x: np.ndarray
    a: AdjacencyMatrix
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    patient_id: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        c = self.x.shape[0]
        if self.x.ndim != 2:
            raise ConfigError("node features must be 2-d (sites, features)")
        if self.a.num_sites != c or self.labels.shape != (c,):
            raise ConfigError("features, adjacency, and labels disagree on "
                              "node count")
        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name)).astype(bool)
            if m.shape != (c,):
                raise ConfigError(f"{name} must have one entry per node")
            masks.append(m)
            setattr(self, name, m)
        total = masks[0].astype(int) + masks[1] + masks[2]
        if np.any(total != 1):
            raise ConfigError("masks must be disjoint and cover every node")

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# scaled Laplacian

@dataclass(frozen=True)
class ScaledLaplacian:
    l_tilde: np.ndarray
    lambda_max: float


def _certified_top_eigenvalue(m: np.ndarray) -> float | None:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration,
    residual-certified against m itself and padded by the certified
    error. The iteration multiplies by m^4 (built once) purely to speed
    convergence on small spectral gaps; the acceptance test stays
    ||m v - lam v|| <= tol * max(1, lam) on the original matrix.

    The first start vector is a nonlinear hash of the matrix rows, so a
    relabeled matrix runs through the same arithmetic and lands on the
    same estimate (node order must not leak into downstream filters).
    That start can sit in an invariant subspace on highly symmetric
    graphs, in which case the iteration certifies a subdominant
    eigenpair; the trace and diagonal lower bounds detect this and a
    random restart burns the remaining iteration budget. Returns None
    when nothing certified survives the lower-bound check."""
    c = m.shape[0]
    # every eigenvalue certified below this provably is not the largest
    lower = max(float(np.sqrt((m * m).sum() / c)), float(m.diagonal().max()))
    accept = lower * (1.0 - _POWER_TOL)
    m2 = m @ m
    m4 = m2 @ m2

    def run(v: np.ndarray, budget: int):
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return None, budget
        v = v / norm
        for it in range(budget):
            mv = m @ v
            lam = float(v @ mv)
            residual = float(np.linalg.norm(mv - lam * v))
            if residual <= _POWER_TOL * max(1.0, abs(lam)):
                padded = lam + residual + _POWER_TOL * max(1.0, abs(lam))
                return padded, budget - it - 1
            step = m4 @ v
            norm = np.linalg.norm(step)
            if norm == 0.0:
                return None, budget - it - 1
            v = step / norm
        return None, 0

    start = np.sin(1000.0 * m).sum(axis=1)
    lam, remaining = run(start, _POWER_MAX_ITERS)
    if lam is not None and lam >= accept:
        return lam
    rng = np.random.default_rng(0xC0FFEE + c)
    lam, _ = run(rng.standard_normal(c), remaining)
    if lam is not None and lam >= accept:
        return lam
    return None


def scaled_laplacian(a, clamp_negative: bool = False) -> ScaledLaplacian:
    """Degree-normalized Laplacian rescaled so its spectrum fits [-1, 1].

    Degrees use |a_ij| since correlation edges may be negative; pass
    clamp_negative=True to zero negative edges instead."""
    mat = a.a if isinstance(a, AdjacencyMatrix) else np.asarray(a, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigError(f"adjacency must be square, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=0.0, rtol=0.0):
        raise ConfigError("adjacency must be symmetric")
    if np.any(mat.diagonal() != 0.0):
        raise ConfigError("adjacency must have a zero diagonal")
    if clamp_negative:
        mat = np.where(mat > 0.0, mat, 0.0)
    c = mat.shape[0]
    degree = np.abs(mat).sum(axis=1) + _DEGREE_EPS
    inv_sqrt = 1.0 / np.sqrt(degree)
    norm_upper = np.triu(inv_sqrt[:, None] * mat * inv_sqrt[None, :], 1)
    lap = np.eye(c) - (norm_upper + norm_upper.T)   # exactly symmetric
    lam = _certified_top_eigenvalue(lap)
    if lam is None or lam <= 0.0:
        lam = _LAMBDA_FALLBACK
    l_tilde = 2.0 * lap / lam - np.eye(c)
    return ScaledLaplacian(l_tilde=l_tilde, lambda_max=float(lam))


# ---------------------------------------------------------------------------
# Chebyshev branch

def cheb_conv_forward(h: np.ndarray, lap: ScaledLaplacian,
                      weights: list[np.ndarray]) -> tuple[np.ndarray, dict]:
    """tanh of the order-F polynomial filter: sum_f T_f(l_tilde) @ h @ W_f
    with T_0 = I, T_1 = l_tilde, T_f = 2 l_tilde T_{f-1} - T_{f-2}.
    The cache holds the basis terms and pre-activation for backward."""
    if len(weights) < 1:
        raise ConfigError("cheb_conv needs at least one weight tensor")
    lt = lap.l_tilde
    terms = [h]
    if len(weights) > 1:
        terms.append(lt @ h)
    for _ in range(2, len(weights)):
        terms.append(2.0 * (lt @ terms[-1]) - terms[-2])
    pre = terms[0] @ weights[0]
    for t, w in zip(terms[1:], weights[1:]):
        pre = pre + t @ w
    out = np.tanh(pre)
    return out, {"terms": terms, "pre": pre, "out": out}


def cheb_conv_backward(cache: dict, lap: ScaledLaplacian,
                       weights: list[np.ndarray],
                       dout: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (dh, [dW_f]). Reverse-mode through the recurrence: each
    basis term's adjoint feeds the two earlier terms (l_tilde is
    symmetric, so transposes drop out)."""
    lt = lap.l_tilde
    terms = cache["terms"]
    dpre = nn.tanh_backward(cache["out"], dout)
    dweights = [t.T @ dpre for t in terms]
    dterms = [dpre @ w.T for w in weights]
    for f in range(len(terms) - 1, 1, -1):
        dterms[f - 1] += 2.0 * (lt @ dterms[f])
        dterms[f - 2] -= dterms[f]
    dh = dterms[0].copy()
    if len(terms) > 1:
        dh += lt @ dterms[1]
    return dh, dweights


# ---------------------------------------------------------------------------
# dynamic branch

def knn_pairs(h: np.ndarray, k: int) -> np.ndarray:
    """(C, k) neighbor indices by squared Euclidean distance, excluding
    self; ties broken toward the smaller index via stable sort."""
    h = np.asarray(h, dtype=np.float64)
    c = h.shape[0]
    if k >= c:
        raise ConfigError(f"knn_k={k} must be smaller than the node count {c}")
    diff = h[:, None, :] - h[None, :, :]
    dist = (diff * diff).sum(axis=-1)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k]


def edge_conv_forward(h: np.ndarray, k: int, w1: np.ndarray,
                      w2: np.ndarray) -> tuple[np.ndarray, dict]:
    """EdgeConv: per node, relu(relu([h_i, h_neighbor] @ W1) @ W2) over
    its k nearest neighbors in feature space, max-aggregated."""
    idx = knn_pairs(h, k)
    c = h.shape[0]
    center = np.repeat(h[:, None, :], k, axis=1)
    neigh = h[idx]
    e0 = np.concatenate([center, neigh], axis=-1)         # (C, k, 2D)
    z1 = e0 @ w1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2
    edges = np.maximum(z2, 0.0)                            # (C, k, D_out)
    amax = edges.argmax(axis=1)                            # first max wins ties
    out = np.take_along_axis(edges, amax[:, None, :], axis=1)[:, 0, :]
    cache = {"idx": idx, "e0": e0, "z1": z1, "a1": a1, "z2": z2,
             "amax": amax, "in_dim": h.shape[1], "num_nodes": c}
    return out, cache


def edge_conv_backward(cache: dict, w1: np.ndarray, w2: np.ndarray,
                       dout: np.ndarray):
    """Returns (dh, dW1, dW2); gradient reaches only each output
    coordinate's argmax edge."""
    k = cache["idx"].shape[1]
    dedges = np.zeros_like(cache["z2"])
    np.put_along_axis(dedges, cache["amax"][:, None, :],
                      dout[:, None, :], axis=1)
    dz2 = dedges * (cache["z2"] > 0.0)
    da1 = dz2 @ w2.T
    dw2 = np.einsum("ckh,ckd->hd", cache["a1"], dz2)
    dz1 = da1 * (cache["z1"] > 0.0)
    de0 = dz1 @ w1.T
    dw1 = np.einsum("cka,ckh->ah", cache["e0"], dz1)
    d_in = cache["in_dim"]
    dh = de0[:, :, :d_in].sum(axis=1)
    np.add.at(dh, cache["idx"], de0[:, :, d_in:])
    return dh, dw1, dw2


# ---------------------------------------------------------------------------
# node weighting

def node_l2(h: np.ndarray) -> np.ndarray:
    return np.sqrt((h * h).sum(axis=1))


def _weight_apply(w: np.ndarray, s: np.ndarray) -> np.ndarray:
    return w[:, None] * s


def _weight_backward(w: np.ndarray, u: np.ndarray, s: np.ndarray,
                     dz: np.ndarray):
    """Backward of z = diag(||u||) s. Returns (du, ds); zero-norm rows get
    zero gradient (subgradient choice at the kink)."""
    ds = w[:, None] * dz
    dw = (dz * s).sum(axis=1)
    du = np.zeros_like(u)
    nz = w > 0.0
    du[nz] = (dw[nz] / w[nz])[:, None] * u[nz]
    return du, ds


# ---------------------------------------------------------------------------
# model

class HfgcnModel:
    """Parameter container plus cached forward / exact backward."""

    def __init__(self, cfg: HfgcnConfig, in_dim: int,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.in_dim = int(in_dim)
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden
        self.params: dict[str, nn.Param] = {}
        for layer in range(1, cfg.layers + 1):
            fan_in = self.in_dim if layer == 1 else d
            for f in range(cfg.cheb_order):
                self.params[f"cheb{layer}_w{f}"] = nn.Param(
                    nn.glorot_uniform(rng, fan_in, d))
            self.params[f"edge{layer}_w1"] = nn.Param(
                nn.glorot_uniform(rng, 2 * d, d))
            self.params[f"edge{layer}_w2"] = nn.Param(
                nn.glorot_uniform(rng, d, d))
        w, b = nn.dense_param(rng, d, 2)
        self.params["cls_w"] = w
        self.params["cls_b"] = b

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def param_list(self) -> list[nn.Param]:
        return [self.params[k] for k in sorted(self.params)]

    def _cheb_weights(self, layer: int) -> list[np.ndarray]:
        return [self.params[f"cheb{layer}_w{f}"].data
                for f in range(self.cfg.cheb_order)]

    # -- forward ----------------------------------------------------------

    def forward(self, graph: PatientGraph,
                lap: ScaledLaplacian | None = None) -> np.ndarray:
        cfg = self.cfg
        if graph.x.shape[1] != self.in_dim:
            raise ConfigError(f"graph features have width {graph.x.shape[1]}, "
                              f"model expects {self.in_dim}")
        if cfg.knn_k >= graph.num_nodes:
            raise ConfigError(f"knn_k={cfg.knn_k} needs more than "
                              f"{cfg.knn_k} nodes, graph has {graph.num_nodes}")
        if lap is None:
            lap = scaled_laplacian(graph.a, cfg.clamp_negative_edges)
        c: dict = {"lap": lap, "static": [], "dynamic": [], "sums": []}
        self._cache = c

        h = graph.x
        needs_dynamic = cfg.fusion_mode in ("full", "fusion_s2", "dynamic_only")
        for layer in range(1, cfg.layers + 1):
            h_static, cheb_cache = cheb_conv_forward(
                h, lap, self._cheb_weights(layer))
            c["static"].append((h_static, cheb_cache))
            run_edge = needs_dynamic and (
                cfg.fusion_mode != "dynamic_only" or layer == cfg.layers)
            if run_edge:
                h_dyn, edge_cache = edge_conv_forward(
                    h_static, cfg.knn_k,
                    self.params[f"edge{layer}_w1"].data,
                    self.params[f"edge{layer}_w2"].data)
                c["dynamic"].append((h_dyn, edge_cache))
                c["sums"].append(h_static + h_dyn)
            else:
                c["dynamic"].append(None)
                c["sums"].append(None)
            h = h_static

        h_out = self._combine(c)
        c["h_out"] = h_out
        logits = nn.dense_forward(h_out, self.params["cls_w"].data,
                                  self.params["cls_b"].data)
        c["logits"] = logits
        return logits

    def _combine(self, c: dict) -> np.ndarray:
        cfg = self.cfg
        mode = cfg.fusion_mode
        statics = [s for s, _ in c["static"]]
        if mode == "static_only":
            return statics[-1]
        if mode == "dynamic_only":
            return c["dynamic"][-1][0]
        sums = c["sums"]
        if mode == "full":
            # cascade: z_k = diag(||z_{k-1}||) s_{k+1}, starting from s_1;
            # raw-layer weighting reads the unweighted layer norm instead
            z = sums[0]
            c["cascade"] = [z]
            for k in range(1, cfg.layers):
                basis = sums[k - 1] if cfg.weighting == "raw-layer" else z
                w = node_l2(basis)
                z = _weight_apply(w, sums[k])
                c["cascade"].append(z)
            return z
        if mode == "fusion_s1":
            streams = statics
        else:                      # fusion_s2
            streams = sums
        w_total = np.ones(streams[0].shape[0])
        for layer in range(cfg.layers - 1):
            w_total = w_total * node_l2(streams[layer])
        c["w_total"] = w_total
        return _weight_apply(w_total, streams[-1])

    # -- backward ---------------------------------------------------------

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        c = self._cache
        dh_out, dw, db = nn.dense_backward(c["h_out"],
                                           self.params["cls_w"].data, dlogits)
        self.params["cls_w"].grad += dw
        self.params["cls_b"].grad += db

        dstatic = [np.zeros_like(s) for s, _ in c["static"]]
        dsums = [None if s is None else np.zeros_like(s) for s in c["sums"]]
        mode = cfg.fusion_mode

        if mode == "static_only":
            dstatic[-1] += dh_out
        elif mode == "dynamic_only":
            h_dyn, edge_cache = c["dynamic"][-1]
            dh, dw1, dw2 = edge_conv_backward(
                edge_cache, self.params[f"edge{cfg.layers}_w1"].data,
                self.params[f"edge{cfg.layers}_w2"].data, dh_out)
            self.params[f"edge{cfg.layers}_w1"].grad += dw1
            self.params[f"edge{cfg.layers}_w2"].grad += dw2
            dstatic[-1] += dh
        elif mode == "full":
            dz = dh_out
            for k in range(cfg.layers - 1, 0, -1):
                z_prev = c["cascade"][k - 1]
                basis = c["sums"][k - 1] if cfg.weighting == "raw-layer" else z_prev
                w = node_l2(basis)
                dbasis, ds = _weight_backward(w, basis, c["sums"][k], dz)
                dsums[k] += ds
                if cfg.weighting == "raw-layer":
                    dsums[k - 1] += dbasis
                    dz = np.zeros_like(z_prev)
                else:
                    dz = dbasis
            dsums[0] += dz
        else:
            # fusion_s1 / fusion_s2: H_out = diag(prod of norms) stream_L
            streams = [s for s, _ in c["static"]] if mode == "fusion_s1" \
                else c["sums"]
            dtargets = [np.zeros_like(s) for s in streams]
            norms = [node_l2(streams[layer]) for layer in range(cfg.layers - 1)]
            w_total = c["w_total"]
            dtargets[-1] += _weight_apply(w_total, dh_out)
            dw_total = (dh_out * streams[-1]).sum(axis=1)
            for layer in range(cfg.layers - 1):
                others = np.ones_like(w_total)
                for j in range(cfg.layers - 1):
                    if j != layer:
                        others = others * norms[j]
                dnorm = dw_total * others
                nz = norms[layer] > 0.0
                dt = np.zeros_like(streams[layer])
                dt[nz] = (dnorm[nz] / norms[layer][nz])[:, None] * streams[layer][nz]
                dtargets[layer] += dt
            if mode == "fusion_s1":
                for layer in range(cfg.layers):
                    dstatic[layer] += dtargets[layer]
            else:
                for layer in range(cfg.layers):
                    dsums[layer] += dtargets[layer]

        # branch sums feed back into both branches
        for layer in range(cfg.layers, 0, -1):
            i = layer - 1
            if dsums[i] is not None and c["dynamic"][i] is not None:
                dstatic[i] += dsums[i]
                _, edge_cache = c["dynamic"][i]
                dh, dw1, dw2 = edge_conv_backward(
                    edge_cache, self.params[f"edge{layer}_w1"].data,
                    self.params[f"edge{layer}_w2"].data, dsums[i])
                self.params[f"edge{layer}_w1"].grad += dw1
                self.params[f"edge{layer}_w2"].grad += dw2
                dstatic[i] += dh

            dh_in, dweights = cheb_conv_backward(
                c["static"][i][1], c["lap"], self._cheb_weights(layer),
                dstatic[i])
            for f, dwf in enumerate(dweights):
                self.params[f"cheb{layer}_w{f}"].grad += dwf
            if i > 0:
                dstatic[i - 1] += dh_in
            else:
                dx = dh_in
        return dx


def hierarchical_forward(graph: PatientGraph, model: HfgcnModel) -> np.ndarray:
    """Functional wrapper: logits (C, 2) for the graph under the model."""
    return model.forward(graph)


def predict(graph: PatientGraph, model: HfgcnModel) -> np.ndarray:
    """Per-node class probabilities (rows sum to one)."""
    return nn.softmax_rows(model.forward(graph))


# ---------------------------------------------------------------------------
# training

def _binary_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """F1 of the positive class, 0 when a denominator vanishes."""
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def auto_class_weights(labels: np.ndarray, train_mask: np.ndarray) -> tuple[float, float]:
    """Inverse train-frequency weights, normalized so they average 1."""
    counts = np.bincount(labels[train_mask].astype(int), minlength=2)
    if np.any(counts == 0):
        raise ConfigError("auto class weights need both classes in the "
                          "training nodes")
    total = counts.sum()
    return (total / (2.0 * counts[0]), total / (2.0 * counts[1]))


def train_hfgcn(graph: PatientGraph, cfg: HfgcnConfig):
    """Full-graph training with loss on the training nodes only. The
    returned model carries the weights of the epoch with the best
    validation F1 (earliest such epoch on ties, epoch 0 excluded).

    Returns (model, history, best_epoch). History row e describes the
    state after e optimizer steps: train_loss and train_acc on the
    training nodes, val_acc and val_f1 on the validation nodes (0.0
    when the validation mask is empty). The step at epoch e consumes
    the gradients of row e-1's loss, so one forward serves both."""
    if not np.any(graph.train_mask):
        raise ConfigError("training mask selects no nodes")
    model = HfgcnModel(cfg, graph.x.shape[1],
                       np.random.default_rng(cfg.seed))
    lap = scaled_laplacian(graph.a, cfg.clamp_negative_edges)
    optimizer = nn.Adam(model.param_list(), lr=cfg.lr)
    class_weights = None if cfg.class_weights is None else \
        np.asarray(cfg.class_weights, dtype=np.float64)

    train_idx = np.flatnonzero(graph.train_mask)
    val_idx = np.flatnonzero(graph.val_mask)
    y_train = graph.labels[train_idx]
    y_val = graph.labels[val_idx]

    def row(epoch, logits):
        probs = nn.softmax_rows(logits[train_idx])
        loss, dprobs = nn.cross_entropy(probs, y_train, class_weights)
        require_finite(f"epoch {epoch} training loss", np.array(loss))
        train_acc = float(np.mean(logits[train_idx].argmax(axis=1) == y_train))
        if val_idx.size:
            val_pred = logits[val_idx].argmax(axis=1)
            val_acc = float(np.mean(val_pred == y_val))
            val_f1 = _binary_f1(y_val, val_pred)
        else:
            val_acc, val_f1 = 0.0, 0.0
        entry = {"epoch": epoch, "train_loss": loss, "train_acc": train_acc,
                 "val_acc": val_acc, "val_f1": val_f1}
        return entry, dprobs

    logits = model.forward(graph, lap)
    entry, dlocal = row(0, logits)
    history = [entry]

    best_f1 = -1.0
    best_epoch = 0
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        dlogits = np.zeros_like(logits)
        dlogits[train_idx] = dlocal
        model.zero_grad()
        model.backward(dlogits)
        optimizer.step()

        logits = model.forward(graph, lap)
        entry, dlocal = row(epoch, logits)
        history.append(entry)
        if entry["val_f1"] > best_f1:
            best_f1 = entry["val_f1"]
            best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in model.params.items()}

    if best_state is not None:
        for k, p in model.params.items():
            p.data[...] = best_state[k]
    return model, history, best_epoch


# ---------------------------------------------------------------------------
# checkpointing

def save_hfgcn(model: HfgcnModel, path: str, extra_meta: dict | None = None) -> None:
    tensors = []
    for name in sorted(model.params):
        role = "classifier" if name.startswith("cls") else (
            "static" if name.startswith("cheb") else "dynamic")
        tensors.append((name, model.params[name].data, role))
    meta = {"kind": "hfgcn", "config": asdict(model.cfg),
            "in_dim": model.in_dim}
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, tensors, meta)


def load_hfgcn(path: str) -> HfgcnModel:
    tensors, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "hfgcn":
        raise ConfigError(f"{path}: checkpoint kind {meta.get('kind')!r}, "
                          f"expected 'hfgcn'")
    cfg_dict = dict(meta["config"])
    if cfg_dict.get("class_weights") is not None:
        cfg_dict["class_weights"] = tuple(cfg_dict["class_weights"])
    cfg = HfgcnConfig(**cfg_dict)
    model = HfgcnModel(cfg, meta["in_dim"])
    for name, param in model.params.items():
        if name not in tensors:
            raise ConfigError(f"{path}: missing tensor {name}")
        param.data[...] = tensors[name]
    return model
