"""Hybrid graph regressor: residual GCN stack, edge-aware multi-head GAT,
TopK pooling, global readout, and a per-node prediction head.

The forward pass follows one fixed recipe:

    H0 = X W_in + b_in                      (projection so residuals type-check)
    H1 = gcn_layer^L(H0)                    (ReLU(LayerNorm(A_hat H W + b)) + H)
    E' = ReLU(E_raw W_e^T + b_e)
    H2 = gat_layer(H1, edges, E')           (per-head attention, ReLU(LayerNorm(.)))
    H3, A', E'' = topk_pool(H2)             (score gating, induced subgraph)
    HL = gat_layer(gcn_layer(H3), A', E'')
    g  = concat(mean(HL), max(HL))          (global readout)
    y_hat_i = head(concat(H2_i, g))

Per-node embeddings (for the placement agent and the head) come from H2,
the pre-pooling attention output, so every node keeps a prediction even
when pooling drops it. ``use_gcn`` / ``use_gat`` switch off either message
passing block for ablations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, no_grad
from .errors import (
    EmptyPooledGraph,
    EmptyTrainSet,
    InvalidConfig,
    NonFiniteLoss,
    ShapeMismatch,
)
from .graph import NetworkGraph, SplitAssignment


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    gcn_layers: int = 2
    gat_heads: int = 4
    topk_ratio: float = 0.5
    head_hidden: int = 64
    edge_dim: int = 16
    learning_rate: float = 1e-3
    max_epochs: int = 300
    patience: int = 30
    use_gcn: bool = True
    use_gat: bool = True
    leaky_slope: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.topk_ratio <= 1.0):
            raise InvalidConfig("topk_ratio must be in (0, 1]")
        for name in ("hidden_dim", "gcn_layers", "gat_heads", "head_hidden",
                     "edge_dim", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.hidden_dim % self.gat_heads != 0:
            raise InvalidConfig("hidden_dim must be divisible by gat_heads")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if not (self.use_gcn or self.use_gat):
            raise InvalidConfig("at least one of use_gcn/use_gat must be enabled")


@dataclass(frozen=True)
class GraphStructure:
    """Index arrays for one graph: symmetric-normalized aggregation edges
    (with self-loops and coefficients) and directed attention edges."""

    n: int
    pairs: np.ndarray          # undirected edges, shape (m, 2)
    gcn_src: np.ndarray        # directed + self-loops
    gcn_dst: np.ndarray
    gcn_coeff: np.ndarray      # (len(gcn_src), 1), 1/sqrt(deg_u deg_v)
    gat_src: np.ndarray        # directed real edges, no self-loops
    gat_dst: np.ndarray
    edge_dup: np.ndarray       # directed real edge -> undirected edge row


def build_structure(n: int, pairs: np.ndarray) -> GraphStructure:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    m = pairs.shape[0]
    u, v = pairs[:, 0], pairs[:, 1]
    loop = np.arange(n, dtype=np.int64)
    deg = np.ones(n)
    np.add.at(deg, u, 1.0)
    np.add.at(deg, v, 1.0)
    gcn_src = np.concatenate([u, v, loop])
    gcn_dst = np.concatenate([v, u, loop])
    coeff = (1.0 / np.sqrt(deg[gcn_src] * deg[gcn_dst])).reshape(-1, 1)
    return GraphStructure(
        n=n,
        pairs=pairs,
        gcn_src=gcn_src,
        gcn_dst=gcn_dst,
        gcn_coeff=coeff,
        gat_src=np.concatenate([u, v]),
        gat_dst=np.concatenate([v, u]),
        edge_dup=np.concatenate([np.arange(m), np.arange(m)]),
    )


def graph_structure(graph: NetworkGraph) -> GraphStructure:
    return build_structure(graph.n, graph.edge_index)


# --------------------------------------------------------------------------
# Parameter initialization
# --------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape):
    sd = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, sd, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_params(config: ModelConfig, d: int, d_e: int) -> dict[str, Tensor]:
    """Fresh parameter dict; pure function of (config, widths)."""
    config.validate()
    if d < 1:
        raise InvalidConfig("model needs at least one node feature")
    rng = np.random.default_rng(config.seed)
    h = config.hidden_dim
    p_dim = h // config.gat_heads
    he = config.edge_dim
    params: dict[str, Tensor] = {
        "in_proj.W": _glorot(rng, d, h, (d, h)),
        "in_proj.b": _zeros((1, h)),
    }

    def add_gcn(prefix):
        params[f"{prefix}.W"] = _glorot(rng, h, h, (h, h))
        params[f"{prefix}.b"] = _zeros((1, h))
        params[f"{prefix}.gain"] = _ones((1, h))
        params[f"{prefix}.bias"] = _zeros((1, h))

    def add_gat(prefix):
        for k in range(config.gat_heads):
            params[f"{prefix}.h{k}.W"] = _glorot(rng, h, p_dim, (h, p_dim))
            params[f"{prefix}.h{k}.a_src"] = _glorot(rng, p_dim, 1, (1, p_dim))
            params[f"{prefix}.h{k}.a_dst"] = _glorot(rng, p_dim, 1, (1, p_dim))
            params[f"{prefix}.h{k}.a_edge"] = _glorot(rng, he, 1, (1, he))
        params[f"{prefix}.self_edge"] = _glorot(rng, he, he, (1, he))
        params[f"{prefix}.gain"] = _ones((1, h))
        params[f"{prefix}.bias"] = _zeros((1, h))

    if config.use_gcn:
        for i in range(1, config.gcn_layers + 1):
            add_gcn(f"gcn{i}")
        add_gcn("gcn_pool")
    if config.use_gat:
        params["edge_enc.W"] = _glorot(rng, d_e, he, (he, max(d_e, 1)))
        params["edge_enc.b"] = _zeros((1, he))
        add_gat("gat1")
        add_gat("gat2")
    params["pool.p"] = _glorot(rng, h, 1, (h, 1))
    params["head.W1"] = _glorot(rng, 3 * h, config.head_hidden, (3 * h, config.head_hidden))
    params["head.b1"] = _zeros((1, config.head_hidden))
    params["head.W2"] = _glorot(rng, config.head_hidden, 1, (config.head_hidden, 1))
    params["head.b2"] = _zeros((1, 1))
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


# --------------------------------------------------------------------------
# Forward-pass building blocks
# --------------------------------------------------------------------------

def _aggregate(h: Tensor, structure: GraphStructure) -> Tensor:
    """A_hat @ H via gather/scale/scatter over the self-loop edge list."""
    rows = ad.gather_rows(h, structure.gcn_src)
    scaled = ad.mul(rows, Tensor(structure.gcn_coeff))
    return ad.scatter_add_rows(scaled, structure.gcn_dst, structure.n)


def gcn_layer(h: Tensor, structure: GraphStructure, w: Tensor, b: Tensor,
              gain: Tensor | None = None, ln_bias: Tensor | None = None) -> Tensor:
    """ReLU(LayerNorm(A_hat H W + b)) + H with a learned affine after the norm."""
    z = ad.add(ad.matmul(_aggregate(h, structure), w), b)
    z = ad.layer_norm(z)
    if gain is not None:
        z = ad.mul(z, gain)
    if ln_bias is not None:
        z = ad.add(z, ln_bias)
    return ad.add(ad.relu(z), h)


def encode_edges(e_raw: Tensor, w_e: Tensor, b_e: Tensor) -> Tensor:
    """Row-wise ReLU(E_raw W_e^T + b_e)."""
    if e_raw.shape[0] == 0:
        return Tensor(np.zeros((0, w_e.shape[0])))
    out = ad.matmul(e_raw, ad.transpose2d(w_e))
    return ad.relu(ad.add(out, b_e))


def gat_layer(h: Tensor, structure: GraphStructure, e_enc: Tensor,
              params: dict[str, Tensor], prefix: str, heads: int,
              slope: float = 0.2) -> Tensor:
    """Edge-aware multi-head attention; output is ReLU(LayerNorm(concat heads)).

    Every node gets a self-loop whose edge embedding is the learned
    ``self_edge`` row, so isolated nodes still attend to themselves.
    """
    n = structure.n
    m_dir = structure.edge_dup.shape[0]
    # per-directed-edge features: duplicated real edges then self-loops
    self_rows = ad.matmul(Tensor(np.ones((n, 1))), params[f"{prefix}.self_edge"])
    if m_dir > 0:
        e_dir = ad.concat([ad.gather_rows(e_enc, structure.edge_dup), self_rows], axis=0)
    else:
        e_dir = self_rows
    loop = np.arange(n, dtype=np.int64)
    src = np.concatenate([structure.gat_src, loop])
    dst = np.concatenate([structure.gat_dst, loop])

    head_outputs = []
    for k in range(heads):
        wh = ad.matmul(h, params[f"{prefix}.h{k}.W"])
        s_src = ad.sum_reduce(ad.mul(ad.gather_rows(wh, src), params[f"{prefix}.h{k}.a_src"]), axis=1)
        s_dst = ad.sum_reduce(ad.mul(ad.gather_rows(wh, dst), params[f"{prefix}.h{k}.a_dst"]), axis=1)
        s_edge = ad.sum_reduce(ad.mul(e_dir, params[f"{prefix}.h{k}.a_edge"]), axis=1)
        scores = ad.leaky_relu(ad.add(ad.add(s_src, s_dst), s_edge), slope)
        alpha = ad.softmax_over_segments(scores, dst, n)
        weighted = ad.mul(ad.gather_rows(wh, src), ad.reshape(alpha, (-1, 1)))
        head_outputs.append(ad.scatter_add_rows(weighted, dst, n))
    z = ad.concat(head_outputs, axis=1) if heads > 1 else head_outputs[0]
    z = ad.layer_norm(z)
    z = ad.add(ad.mul(z, params[f"{prefix}.gain"]), params[f"{prefix}.bias"])
    return ad.relu(z)


@dataclass
class PoolResult:
    kept: np.ndarray           # kept node ids (ascending)
    h_pooled: Tensor           # gated features of kept nodes
    structure: GraphStructure  # induced subgraph structure
    kept_edge_rows: np.ndarray  # undirected edge rows that survived


def topk_pool(h: Tensor, structure: GraphStructure, ratio: float,
              p: Tensor) -> PoolResult:
    """Keep the ceil(ratio*N) nodes with the highest normalized scores
    H p / ||p||; ties break toward the lower node id. Kept features are
    gated by sigmoid(score) so p receives gradient."""
    n = structure.n
    norm = ad.sqrt(ad.sum_reduce(ad.square(p)))
    scores = ad.div(ad.matmul(h, p), ad.add(norm, Tensor(np.array(1e-12))))
    flat = scores.data.reshape(-1)
    k = int(math.ceil(ratio * n))
    order = np.argsort(-flat, kind="stable")  # stable: ties fall to lower id
    kept = np.sort(order[:k])
    gate = ad.sigmoid(ad.gather_rows(scores, kept))
    h_pooled = ad.mul(ad.gather_rows(h, kept), gate)

    keep_mask = np.zeros(n, dtype=bool)
    keep_mask[kept] = True
    remap = np.full(n, -1, dtype=np.int64)
    remap[kept] = np.arange(k)
    pairs = structure.pairs
    row_mask = keep_mask[pairs[:, 0]] & keep_mask[pairs[:, 1]] if pairs.size else np.zeros(0, bool)
    kept_rows = np.nonzero(row_mask)[0]
    sub_pairs = remap[pairs[kept_rows]] if kept_rows.size else np.zeros((0, 2), dtype=np.int64)
    return PoolResult(
        kept=kept,
        h_pooled=h_pooled,
        structure=build_structure(k, sub_pairs),
        kept_edge_rows=kept_rows,
    )


def global_readout(h: Tensor) -> Tensor:
    """concat(mean over rows, max over rows) -> vector of length 2h."""
    if h.shape[0] == 0:
        raise EmptyPooledGraph("readout of an empty node set")
    return ad.concat([ad.mean_reduce(h, axis=0), ad.max_reduce(h, axis=0)], axis=0)


# --------------------------------------------------------------------------
# Full forward pass
# --------------------------------------------------------------------------

@dataclass
class ForwardResult:
    y_hat: Tensor         # (n, 1)
    node_emb: Tensor      # (n, h), pre-pooling attention output
    kept: np.ndarray      # nodes surviving the pooling stage


def forward(params: dict[str, Tensor], graph: NetworkGraph,
            config: ModelConfig,
            structure: GraphStructure | None = None) -> ForwardResult:
    if graph.d != params["in_proj.W"].shape[0]:
        raise ShapeMismatch(
            f"graph feature width {graph.d} != model width {params['in_proj.W'].shape[0]}"
        )
    st = structure if structure is not None else graph_structure(graph)
    x = Tensor(graph.X)
    h = ad.add(ad.matmul(x, params["in_proj.W"]), params["in_proj.b"])

    if config.use_gcn:
        for i in range(1, config.gcn_layers + 1):
            h = gcn_layer(h, st, params[f"gcn{i}.W"], params[f"gcn{i}.b"],
                          params[f"gcn{i}.gain"], params[f"gcn{i}.bias"])

    e_enc = None
    if config.use_gat:
        e_raw = Tensor(graph.edge_attrs if graph.d_e > 0
                       else np.zeros((len(graph.edges), 1)))
        e_enc = encode_edges(e_raw, params["edge_enc.W"], params["edge_enc.b"])
        h = gat_layer(h, st, e_enc, params, "gat1", config.gat_heads,
                      config.leaky_slope)

    node_emb = h

    pool = topk_pool(h, st, config.topk_ratio, params["pool.p"])
    hp = pool.h_pooled
    if config.use_gcn:
        hp = gcn_layer(hp, pool.structure, params["gcn_pool.W"], params["gcn_pool.b"],
                       params["gcn_pool.gain"], params["gcn_pool.bias"])
    if config.use_gat:
        e_sub = ad.gather_rows(e_enc, pool.kept_edge_rows)
        hp = gat_layer(hp, pool.structure, e_sub, params, "gat2",
                       config.gat_heads, config.leaky_slope)

    g = global_readout(hp)                              # (2h,)
    g_rows = ad.matmul(Tensor(np.ones((st.n, 1))), ad.reshape(g, (1, -1)))
    z = ad.concat([node_emb, g_rows], axis=1)           # (n, 3h)
    hidden = ad.relu(ad.add(ad.matmul(z, params["head.W1"]), params["head.b1"]))
    y_hat = ad.add(ad.matmul(hidden, params["head.W2"]), params["head.b2"])
    return ForwardResult(y_hat=y_hat, node_emb=node_emb, kept=pool.kept)


def predict(params: dict[str, Tensor], graph: NetworkGraph,
            config: ModelConfig,
            structure: GraphStructure | None = None) -> np.ndarray:
    """Deterministic forward pass, gradients off; returns ŷ of length N."""
    with no_grad():
        return forward(params, graph, config, structure).y_hat.data.reshape(-1)


def node_embeddings(params: dict[str, Tensor], graph: NetworkGraph,
                    config: ModelConfig,
                    structure: GraphStructure | None = None) -> np.ndarray:
    """Pre-pooling attention embeddings, one row per node."""
    with no_grad():
        return forward(params, graph, config, structure).node_emb.data.copy()


def mse_on(y_hat: np.ndarray, y: np.ndarray, ids: Sequence[int]) -> float:
    idx = sorted(ids)
    diff = y_hat[idx] - y[idx]
    return float(np.mean(diff * diff))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainReport:
    epochs_run: int
    best_val_mse: float
    train_curve: list  # (train_mse, val_mse) per epoch
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_val_mse": self.best_val_mse,
            "train_curve": [[a, b] for a, b in self.train_curve],
            "wall_seconds": self.wall_seconds,
        }


def _train_loss(fwd: ForwardResult, graph: NetworkGraph, ids: list[int]) -> Tensor:
    pred = ad.gather_rows(fwd.y_hat, np.array(ids, dtype=np.int64))
    target = Tensor(graph.y[ids].reshape(-1, 1))
    return ad.mean_reduce(ad.square(ad.sub(pred, target)))


def train(params: dict[str, Tensor], graph: NetworkGraph,
          split: SplitAssignment, config: ModelConfig
          ) -> tuple[dict[str, Tensor], TrainReport]:
    """Full-batch Adam with early stopping on validation MSE.

    Each epoch evaluates the current parameters (train and val MSE from
    one shared forward pass), snapshots them when validation improves,
    then applies one optimizer step. Returns the best-validation
    checkpoint, never the final iterate.
    """
    if not split.train:
        raise EmptyTrainSet("cannot train on an empty train set")
    config.validate()
    t0 = time.perf_counter()
    train_ids = sorted(split.train)
    val_ids = sorted(split.val)
    st = graph_structure(graph)
    opt = Adam(lr=config.learning_rate)
    best_val = math.inf
    best_params = clone_params(params)
    curve: list[tuple[float, float]] = []
    stale = 0

    for _epoch in range(config.max_epochs):
        fwd = forward(params, graph, config, st)
        y_hat = fwd.y_hat.data.reshape(-1)
        train_mse = mse_on(y_hat, graph.y, train_ids)
        val_mse = mse_on(y_hat, graph.y, val_ids) if val_ids else train_mse
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise NonFiniteLoss(f"epoch {_epoch}: train={train_mse} val={val_mse}")
        curve.append((train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_params = clone_params(params)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        loss = _train_loss(fwd, graph, train_ids)
        grads = backward(loss)
        named = {name: grads[t] for name, t in params.items() if t in grads}
        params = opt.step(params, named)

    report = TrainReport(
        epochs_run=len(curve),
        best_val_mse=best_val,
        train_curve=curve,
        wall_seconds=time.perf_counter() - t0,
    )
    return best_params, report


def warm_finetune(params: dict[str, Tensor], graph: NetworkGraph,
                  split: SplitAssignment, epochs: int,
                  config: ModelConfig,
                  structure: GraphStructure | None = None) -> dict[str, Tensor]:
    """Exactly ``epochs`` Adam steps from the given parameters (fresh
    optimizer state); no early stopping, no snapshotting."""
    if not split.train:
        raise EmptyTrainSet("cannot fine-tune on an empty train set")
    if epochs == 0:
        return params
    train_ids = sorted(split.train)
    st = structure if structure is not None else graph_structure(graph)
    opt = Adam(lr=config.learning_rate)
    for _ in range(epochs):
        fwd = forward(params, graph, config, st)
        loss = _train_loss(fwd, graph, train_ids)
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss("fine-tune loss is not finite")
        grads = backward(loss)
        named = {name: grads[t] for name, t in params.items() if t in grads}
        params = opt.step(params, named)
    return params


# --------------------------------------------------------------------------
# Estimator wrapper
# --------------------------------------------------------------------------

try:
    from sklearn.base import BaseEstimator
except ImportError:  # pragma: no cover
    class BaseEstimator:  # type: ignore
        def get_params(self, deep=True):
            return {k: v for k, v in vars(self).items() if not k.endswith("_")}

        def set_params(self, **kw):
            for k, v in kw.items():
                setattr(self, k, v)
            return self

from .errors import NotFitted


class HybridGNNRegressor(BaseEstimator):
    """Estimator facade over the functional training loop.

    fit(graph, split) trains from a fresh initialization; predict(graph)
    returns per-node volume estimates. Hyperparameters mirror ModelConfig.
    """

    def __init__(self, hidden_dim=64, gcn_layers=2, gat_heads=4,
                 topk_ratio=0.5, head_hidden=64, edge_dim=16,
                 learning_rate=1e-3, max_epochs=300, patience=30,
                 use_gcn=True, use_gat=True, leaky_slope=0.2, seed=0):
        self.hidden_dim = hidden_dim
        self.gcn_layers = gcn_layers
        self.gat_heads = gat_heads
        self.topk_ratio = topk_ratio
        self.head_hidden = head_hidden
        self.edge_dim = edge_dim
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.use_gcn = use_gcn
        self.use_gat = use_gat
        self.leaky_slope = leaky_slope
        self.seed = seed

    def _config(self) -> ModelConfig:
        return ModelConfig(
            hidden_dim=self.hidden_dim, gcn_layers=self.gcn_layers,
            gat_heads=self.gat_heads, topk_ratio=self.topk_ratio,
            head_hidden=self.head_hidden, edge_dim=self.edge_dim,
            learning_rate=self.learning_rate, max_epochs=self.max_epochs,
            patience=self.patience, use_gcn=self.use_gcn,
            use_gat=self.use_gat, leaky_slope=self.leaky_slope,
            seed=self.seed,
        )

    def fit(self, graph: NetworkGraph, split: SplitAssignment):
        config = self._config()
        params = init_params(config, graph.d, graph.d_e)
        self.params_, self.report_ = train(params, graph, split, config)
        self.config_ = config
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFitted("call fit before predict")

    def predict(self, graph: NetworkGraph) -> np.ndarray:
        self._check_fitted()
        return predict(self.params_, graph, self.config_)

    def node_embeddings(self, graph: NetworkGraph) -> np.ndarray:
        self._check_fitted()
        return node_embeddings(self.params_, graph, self.config_)

    def finetune(self, graph: NetworkGraph, split: SplitAssignment, epochs: int):
        self._check_fitted()
        self.params_ = warm_finetune(self.params_, graph, split, epochs, self.config_)
        return self

    def mse(self, graph: NetworkGraph, ids) -> float:
        self._check_fitted()
        y_hat = predict(self.params_, graph, self.config_)
        return mse_on(y_hat, graph.y, sorted(ids))
