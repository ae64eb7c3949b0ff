"""Rule-based placement policies and feature-only regression baselines.

Centralities use unweighted (hop count) shortest paths on the
segment-as-node graph. Betweenness follows Brandes' dependency
accumulation; closeness applies the component-size correction so scores
stay comparable on disconnected graphs.
"""

from __future__ import annotations

import csv
import enum
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward
from .errors import (
    BudgetTooLarge,
    DegenerateDesignMatrix,
    InvalidConfig,
    IoError,
    MissingActivityVector,
)
from .graph import NetworkGraph, SensorPartition


class CentralityKind(enum.Enum):
    Betweenness = "Betweenness"
    Closeness = "Closeness"


@dataclass(frozen=True)
class CentralityScores:
    kind: CentralityKind
    values: np.ndarray  # one non-negative score per node

    def top_ids(self) -> np.ndarray:
        """Node ids ordered by descending score, ties toward lower id."""
        ids = np.arange(self.values.shape[0])
        return ids[np.lexsort((ids, -self.values))]


def betweenness(graph: NetworkGraph) -> CentralityScores:
    """Brandes' algorithm; undirected pair contributions divided by 2,
    unnormalized. Paths between different components contribute nothing."""
    n = graph.n
    adj = graph.neighbors()
    score = np.zeros(n)
    for s in range(n):
        # single-source shortest paths with path counts
        stack: list[int] = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = np.full(n, -1)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                score[w] += delta[w]
    return CentralityScores(CentralityKind.Betweenness, score / 2.0)


def closeness(graph: NetworkGraph) -> CentralityScores:
    """(|R|-1)/sum(d) scaled by (|R|-1)/(N-1); isolated nodes score 0."""
    n = graph.n
    adj = graph.neighbors()
    score = np.zeros(n)
    for s in range(n):
        dist = np.full(n, -1)
        dist[s] = 0
        queue = deque([s])
        total = 0
        reach = 1
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    total += dist[w]
                    reach += 1
                    queue.append(w)
        if reach > 1 and n > 1:
            score[s] = ((reach - 1) / total) * ((reach - 1) / (n - 1))
    return CentralityScores(CentralityKind.Closeness, score)


def save_scores(scores: CentralityScores, path) -> None:
    """Export as two-column CSV (id, score)."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "score"])
            for i, v in enumerate(scores.values):
                w.writerow([i, repr(float(v))])
    except OSError as exc:
        raise IoError(str(exc)) from exc


# --------------------------------------------------------------------------
# Placement strategies
# --------------------------------------------------------------------------

class StrategyKind(enum.Enum):
    Random = "Random"
    Betweenness = "Betweenness"
    Closeness = "Closeness"
    ObservedActivity = "ObservedActivity"
    RLGreedy = "RLGreedy"


@dataclass(frozen=True)
class PlacementStrategy:
    kind: StrategyKind
    seed: int = 0


def select_by_strategy(graph: NetworkGraph, partition: SensorPartition,
                       strategy: PlacementStrategy, k: int,
                       activity: np.ndarray | None = None,
                       exclude: frozenset = frozenset()) -> list[int]:
    """Pick K unlabeled nodes by the strategy's ranking.

    ``exclude`` removes nodes (typically validation/test holdouts) from
    the candidate pool. Ties break toward the lower node id. Never
    returns a labeled node.
    """
    if strategy.kind is StrategyKind.RLGreedy:
        raise InvalidConfig("RLGreedy placements come from a trained agent, "
                            "not select_by_strategy")
    candidates = np.array(sorted(partition.unlabeled - exclude), dtype=np.int64)
    if k > candidates.shape[0]:
        raise BudgetTooLarge(f"budget {k} exceeds {candidates.shape[0]} candidates")
    if k == 0:
        return []
    if strategy.kind is StrategyKind.Random:
        rng = np.random.default_rng(strategy.seed)
        picks = rng.choice(candidates, size=k, replace=False)
        return [int(i) for i in picks]
    if strategy.kind is StrategyKind.ObservedActivity:
        if activity is None:
            raise MissingActivityVector("ObservedActivity needs a per-node activity vector")
        values = np.asarray(activity, dtype=np.float64)
        if values.shape != (graph.n,):
            raise MissingActivityVector(f"activity has shape {values.shape}, want ({graph.n},)")
    elif strategy.kind is StrategyKind.Betweenness:
        values = betweenness(graph).values
    else:
        values = closeness(graph).values
    cand_vals = values[candidates]
    order = np.lexsort((candidates, -cand_vals))
    return [int(candidates[i]) for i in order[:k]]


# --------------------------------------------------------------------------
# Feature-only regressors
# --------------------------------------------------------------------------

class TabularKind(enum.Enum):
    Linear = "Linear"
    MLP = "MLP"


@dataclass
class TabularModel:
    kind: TabularKind
    predict_fn: object

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.predict_fn(np.asarray(features, dtype=np.float64))


def _fit_linear(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6):
    xa = np.column_stack([x, np.ones(x.shape[0])])
    gram = xa.T @ xa + ridge * np.eye(xa.shape[1])
    try:
        theta = np.linalg.solve(gram, xa.T @ y)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDesignMatrix(str(exc)) from exc
    if not np.isfinite(theta).all():
        raise DegenerateDesignMatrix("non-finite least-squares solution")

    def predict_fn(features):
        return np.column_stack([features, np.ones(features.shape[0])]) @ theta

    return predict_fn, theta


def _fit_mlp(x: np.ndarray, y: np.ndarray, hidden: int = 64,
             epochs: int = 300, lr: float = 3e-3, seed: int = 0):
    # standardize internally so Adam step sizes fit any label scale
    x_mean, x_std = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-12)
    y_mean, y_std = y.mean(), max(y.std(), 1e-12)
    xs = (x - x_mean) / x_std
    ys = ((y - y_mean) / y_std).reshape(-1, 1)

    rng = np.random.default_rng(seed)
    d = x.shape[1]

    def glorot(fan_in, fan_out):
        sd = np.sqrt(2.0 / (fan_in + fan_out))
        return Tensor(rng.normal(0.0, sd, size=(fan_in, fan_out)), requires_grad=True)

    params = {
        "W1": glorot(d, hidden), "b1": Tensor(np.zeros((1, hidden)), requires_grad=True),
        "W2": glorot(hidden, hidden), "b2": Tensor(np.zeros((1, hidden)), requires_grad=True),
        "W3": glorot(hidden, 1), "b3": Tensor(np.zeros((1, 1)), requires_grad=True),
    }
    xt = Tensor(xs)
    yt = Tensor(ys)
    opt = Adam(lr=lr)
    for _ in range(epochs):
        h1 = ad.relu(ad.add(ad.matmul(xt, params["W1"]), params["b1"]))
        h2 = ad.relu(ad.add(ad.matmul(h1, params["W2"]), params["b2"]))
        out = ad.add(ad.matmul(h2, params["W3"]), params["b3"])
        loss = ad.mean_reduce(ad.square(ad.sub(out, yt)))
        grads = backward(loss)
        named = {name: grads[t] for name, t in params.items() if t in grads}
        params = opt.step(params, named)

    frozen = {k: v.data.copy() for k, v in params.items()}

    def predict_fn(features):
        z = (features - x_mean) / x_std
        h1 = np.maximum(z @ frozen["W1"] + frozen["b1"], 0.0)
        h2 = np.maximum(h1 @ frozen["W2"] + frozen["b2"], 0.0)
        return (h2 @ frozen["W3"] + frozen["b3"]).reshape(-1) * y_std + y_mean

    return predict_fn


def train_tabular(kind: TabularKind, features: np.ndarray, labels: np.ndarray,
                  seed: int = 0) -> TabularModel:
    """Fit a structure-blind regressor on (features, labels) rows."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],) or x.shape[0] < 1:
        raise InvalidConfig(f"bad tabular shapes {x.shape} / {y.shape}")
    if kind is TabularKind.Linear:
        predict_fn, _ = _fit_linear(x, y)
    else:
        predict_fn = _fit_mlp(x, y, seed=seed)
    return TabularModel(kind=kind, predict_fn=predict_fn)


try:
    from sklearn.base import BaseEstimator, RegressorMixin
except ImportError:  # pragma: no cover
    from .model import BaseEstimator  # type: ignore

    class RegressorMixin:  # type: ignore
        pass

from .errors import NotFitted


class LinearBaseline(RegressorMixin, BaseEstimator):
    """Closed-form ridge regression on node features only."""

    def __init__(self, ridge=1e-6):
        self.ridge = ridge

    def fit(self, X, y):
        x = np.asarray(X, dtype=np.float64)
        self.predict_fn_, self.coef_ = _fit_linear(x, np.asarray(y, dtype=np.float64),
                                                   ridge=self.ridge)
        return self

    def predict(self, X):
        if not hasattr(self, "predict_fn_"):
            raise NotFitted("call fit before predict")
        return self.predict_fn_(np.asarray(X, dtype=np.float64))


class MLPBaseline(RegressorMixin, BaseEstimator):
    """Two-hidden-layer ReLU network on node features only."""

    def __init__(self, hidden=64, epochs=300, learning_rate=3e-3, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        self.predict_fn_ = _fit_mlp(
            np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64),
            hidden=self.hidden, epochs=self.epochs, lr=self.learning_rate,
            seed=self.seed,
        )
        return self

    def predict(self, X):
        if not hasattr(self, "predict_fn_"):
            raise NotFitted("call fit before predict")
        return self.predict_fn_(np.asarray(X, dtype=np.float64))
