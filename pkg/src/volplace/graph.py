"""Road-network data model: graphs, file io, synthetic generation, partitions, splits.

A road/path segment is a node; two segments that share an endpoint are
joined by an undirected edge. Node labels are daily rider volumes, known
only on sensor-equipped nodes. Everything here is immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    DanglingEdgeEndpoint,
    DuplicateEdge,
    DuplicateNodeId,
    EmptyGraph,
    InvalidConfig,
    InvalidFraction,
    InvalidGraph,
    IoError,
    MissingFile,
    ParseError,
    TooFewUnlabeled,
)


class RoadClass(enum.Enum):
    """Infrastructure class of a road/path segment (six categories)."""

    ProtectedBikeLane = "ProtectedBikeLane"
    PaintedLaneArterialCollector = "PaintedLaneArterialCollector"
    OffRoadPath = "OffRoadPath"
    LocalMixed = "LocalMixed"
    ArterialMixed = "ArterialMixed"
    Other = "Other"


#: Fixed ordering used for one-hot features and report rows.
ROAD_CLASSES: tuple[RoadClass, ...] = tuple(RoadClass)


@dataclass(frozen=True, eq=False)
class RoadNode:
    """One road segment: feature vector, ground-truth volume, class."""

    id: int
    features: np.ndarray
    true_volume: float
    road_class: RoadClass

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        if self.features.ndim != 1:
            raise InvalidGraph(f"node {self.id}: features must be a flat vector")
        if not math.isfinite(self.true_volume) or self.true_volume < 0:
            raise InvalidGraph(f"node {self.id}: volume must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class RoadEdge:
    """Undirected edge between two distinct segments, with attribute vector."""

    u: int
    v: int
    attrs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "attrs", np.asarray(self.attrs, dtype=np.float64))
        if self.attrs.ndim != 1:
            raise InvalidGraph(f"edge ({self.u},{self.v}): attrs must be a flat vector")
        if self.u == self.v:
            raise InvalidGraph(f"edge ({self.u},{self.v}): endpoints must be distinct")

    @property
    def key(self) -> frozenset:
        return frozenset((self.u, self.v))


class NetworkGraph:
    """Validated undirected road network.

    Node ids must be 0..N-1 with no gaps; all feature vectors share one
    width ``d`` and all edge attribute vectors share one width ``d_e``.
    """

    def __init__(self, nodes: Sequence[RoadNode], edges: Sequence[RoadEdge]):
        nodes = list(nodes)
        edges = list(edges)
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise DuplicateNodeId("duplicate node ids")
        if nodes and sorted(ids) != list(range(len(nodes))):
            raise InvalidGraph("node ids must be 0..N-1 with no gaps")
        nodes.sort(key=lambda n: n.id)

        widths = {n.features.shape[0] for n in nodes}
        if len(widths) > 1:
            raise InvalidGraph(f"inconsistent feature widths: {sorted(widths)}")
        self.d = widths.pop() if widths else 0

        n = len(nodes)
        seen: set[frozenset] = set()
        e_widths = {e.attrs.shape[0] for e in edges}
        if len(e_widths) > 1:
            raise InvalidGraph(f"inconsistent edge attr widths: {sorted(e_widths)}")
        self.d_e = e_widths.pop() if e_widths else 0
        for e in edges:
            if not (0 <= e.u < n) or not (0 <= e.v < n):
                raise DanglingEdgeEndpoint(f"edge ({e.u},{e.v}) references a missing node")
            if e.key in seen:
                raise DuplicateEdge(f"duplicate edge ({e.u},{e.v})")
            seen.add(e.key)

        self.nodes = nodes
        self.edges = edges
        self.X = np.stack([nd.features for nd in nodes]) if nodes else np.zeros((0, 0))
        self.y = np.array([nd.true_volume for nd in nodes], dtype=np.float64)
        self.classes = np.array([ROAD_CLASSES.index(nd.road_class) for nd in nodes], dtype=np.int64)
        self.edge_index = (
            np.array([[e.u, e.v] for e in edges], dtype=np.int64)
            if edges else np.zeros((0, 2), dtype=np.int64)
        )
        self.edge_attrs = (
            np.stack([e.attrs for e in edges]) if edges else np.zeros((0, self.d_e))
        )

    @property
    def n(self) -> int:
        return len(self.nodes)

    def neighbors(self) -> list[list[int]]:
        """Adjacency lists (sorted), one per node."""
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edge_index:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return [sorted(a) for a in adj]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for u, v in self.edge_index:
            deg[u] += 1
            deg[v] += 1
        return deg

    def equals(self, other: "NetworkGraph") -> bool:
        """Field-by-field equality (used by round-trip tests)."""
        return (
            self.n == other.n
            and self.d == other.d
            and self.d_e == other.d_e
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.edge_index, other.edge_index)
            and np.array_equal(self.edge_attrs, other.edge_attrs)
        )


@dataclass(frozen=True)
class SensorPartition:
    """Disjoint node sets: existing sensors, agent-added sensors, the rest."""

    existing: frozenset[int]
    new: frozenset[int]
    unlabeled: frozenset[int]

    def __post_init__(self):
        if self.existing & self.new or self.existing & self.unlabeled or self.new & self.unlabeled:
            raise InvalidGraph("partition sets must be pairwise disjoint")
        if not (self.existing | self.new):
            raise InvalidGraph("train set (existing + new) must be non-empty")

    @property
    def train_ids(self) -> frozenset[int]:
        return self.existing | self.new

    @property
    def n(self) -> int:
        return len(self.existing) + len(self.new) + len(self.unlabeled)

    def with_new_sensor(self, node: int) -> "SensorPartition":
        """Move one unlabeled node into the ``new`` set (returns a fresh partition)."""
        if node not in self.unlabeled:
            raise InvalidGraph(f"node {node} is not unlabeled")
        return SensorPartition(
            existing=self.existing,
            new=self.new | {node},
            unlabeled=self.unlabeled - {node},
        )


@dataclass(frozen=True)
class SplitAssignment:
    """Train/val/test node-id sets. Val and test come from unlabeled nodes only."""

    train: frozenset[int]
    val: frozenset[int]
    test: frozenset[int]

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise InvalidGraph("split sets must be pairwise disjoint")


def check_partition(graph: NetworkGraph, partition: SensorPartition) -> None:
    """Raise unless the partition covers exactly the graph's node ids."""
    covered = partition.existing | partition.new | partition.unlabeled
    if covered != frozenset(range(graph.n)):
        raise InvalidGraph("partition does not cover the graph's node ids exactly")


# --------------------------------------------------------------------------
# File io
# --------------------------------------------------------------------------

_NODE_FIXED = ("id", "road_class", "volume")
_EDGE_FIXED = ("u", "v")


def _feature_header(prefix: str, width: int) -> list[str]:
    return [f"{prefix}_{i}" for i in range(width)]


def load_graph(node_path, edge_path) -> NetworkGraph:
    """Load a graph from the canonical two-CSV schema.

    Node columns: id, road_class, volume, f_0..f_{d-1}.
    Edge columns: u, v, e_0..e_{d_e-1}. Feature widths come from the headers.
    """
    node_path, edge_path = Path(node_path), Path(edge_path)
    for p in (node_path, edge_path):
        if not p.exists():
            raise MissingFile(str(p))

    nodes: list[RoadNode] = []
    with open(node_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "missing header row")
        if tuple(header[:3]) != _NODE_FIXED or header[3:] != _feature_header("f", len(header) - 3):
            raise ParseError(1, f"bad node header {header!r}")
        d = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + d:
                raise ParseError(lineno, f"expected {3 + d} columns, got {len(row)}")
            try:
                rc = RoadClass(row[1])
            except ValueError:
                raise ParseError(lineno, f"unknown road class {row[1]!r}") from None
            try:
                nodes.append(
                    RoadNode(
                        id=int(row[0]),
                        road_class=rc,
                        true_volume=float(row[2]),
                        features=np.array([float(x) for x in row[3:]]),
                    )
                )
            except (ValueError, InvalidGraph) as exc:
                raise ParseError(lineno, str(exc)) from None

    edges: list[RoadEdge] = []
    with open(edge_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "missing header row")
        if tuple(header[:2]) != _EDGE_FIXED or header[2:] != _feature_header("e", len(header) - 2):
            raise ParseError(1, f"bad edge header {header!r}")
        d_e = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 + d_e:
                raise ParseError(lineno, f"expected {2 + d_e} columns, got {len(row)}")
            try:
                edges.append(
                    RoadEdge(
                        u=int(row[0]),
                        v=int(row[1]),
                        attrs=np.array([float(x) for x in row[2:]]),
                    )
                )
            except (ValueError, InvalidGraph) as exc:
                raise ParseError(lineno, str(exc)) from None

    return NetworkGraph(nodes, edges)


def save_graph(graph: NetworkGraph, node_path, edge_path) -> None:
    """Write the two-CSV schema that :func:`load_graph` reads back exactly."""
    if graph.n == 0:
        raise EmptyGraph("refusing to save a graph with no nodes")
    try:
        with open(node_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(_NODE_FIXED) + _feature_header("f", graph.d))
            for nd in graph.nodes:
                w.writerow(
                    [nd.id, nd.road_class.value, repr(nd.true_volume)]
                    + [repr(float(x)) for x in nd.features]
                )
        with open(edge_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(_EDGE_FIXED) + _feature_header("e", graph.d_e))
            for e in graph.edges:
                w.writerow([e.u, e.v] + [repr(float(x)) for x in e.attrs])
    except OSError as exc:
        raise IoError(str(exc)) from exc


def save_graph_json(graph: NetworkGraph, path) -> None:
    """JSON mirror of the CSV schema (single file, keys "nodes" and "edges")."""
    if graph.n == 0:
        raise EmptyGraph("refusing to save a graph with no nodes")
    payload = {
        "schema_version": 1,
        "d": graph.d,
        "d_e": graph.d_e,
        "nodes": [
            {
                "id": nd.id,
                "road_class": nd.road_class.value,
                "volume": nd.true_volume,
                "features": [float(x) for x in nd.features],
            }
            for nd in graph.nodes
        ],
        "edges": [
            {"u": e.u, "v": e.v, "attrs": [float(x) for x in e.attrs]}
            for e in graph.edges
        ],
    }
    try:
        Path(path).write_text(json.dumps(payload), encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_graph_json(path) -> NetworkGraph:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    try:
        nodes = [
            RoadNode(
                id=int(nd["id"]),
                road_class=RoadClass(nd["road_class"]),
                true_volume=float(nd["volume"]),
                features=np.array(nd["features"], dtype=np.float64),
            )
            for nd in payload["nodes"]
        ]
        edges = [
            RoadEdge(u=int(e["u"]), v=int(e["v"]), attrs=np.array(e["attrs"], dtype=np.float64))
            for e in payload["edges"]
        ]
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(0, f"bad json graph payload: {exc}") from None
    return NetworkGraph(nodes, edges)


# --------------------------------------------------------------------------
# Synthetic generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VolumeProcess:
    """Hidden process that plants spatially autocorrelated volumes.

    ``source_count`` seed nodes get intensities drawn uniformly from
    ``intensity_range``; ``diffusion_steps`` rounds of closed-neighborhood
    averaging spread them; Gaussian noise (sd ``noise_sd``) is added at the
    end and the result is clamped at zero.
    """

    diffusion_steps: int = 8
    source_count: int = 6
    noise_sd: float = 2.0
    intensity_range: tuple[float, float] = (100.0, 600.0)


@dataclass(frozen=True)
class SyntheticConfig:
    n_nodes: int = 200
    avg_degree: float = 4.0
    class_mix: tuple[float, ...] = (0.18, 0.16, 0.16, 0.22, 0.18, 0.10)
    volume_process: VolumeProcess = field(default_factory=VolumeProcess)
    # noise on the two volume-correlated node covariates; high enough that
    # single-node features underdetermine volume and neighborhoods matter
    covariate_noise_sd: float = 1.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise InvalidConfig("n_nodes must be >= 2")
        if len(self.class_mix) != len(ROAD_CLASSES):
            raise InvalidConfig(f"class_mix needs {len(ROAD_CLASSES)} probabilities")
        if abs(sum(self.class_mix) - 1.0) > 1e-9 or any(p < 0 for p in self.class_mix):
            raise InvalidConfig("class_mix must be non-negative and sum to 1")
        if self.avg_degree < 0:
            raise InvalidConfig("avg_degree must be >= 0")
        if self.covariate_noise_sd < 0:
            raise InvalidConfig("covariate_noise_sd must be >= 0")
        vp = self.volume_process
        if vp.diffusion_steps < 0 or vp.noise_sd < 0:
            raise InvalidConfig("diffusion_steps and noise_sd must be >= 0")
        if not (1 <= vp.source_count <= self.n_nodes):
            raise InvalidConfig("source_count must be in [1, n_nodes]")
        if vp.intensity_range[0] > vp.intensity_range[1] or vp.intensity_range[0] < 0:
            raise InvalidConfig("intensity_range must be ordered and non-negative")


def _minimum_spanning_edges(dist: np.ndarray) -> list[tuple[int, int]]:
    """Prim's algorithm on a dense distance matrix (deterministic tie-break)."""
    n = dist.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = dist[0].copy()
    best[0] = np.inf
    best_from = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        j = int(np.argmin(np.where(in_tree, np.inf, best)))
        edges.append((int(best_from[j]), j))
        in_tree[j] = True
        closer = dist[j] < best
        best_from[closer] = j
        best = np.minimum(best, dist[j])
        best[in_tree] = np.inf
    return edges


def generate_synthetic(config: SyntheticConfig) -> NetworkGraph:
    """Generate a connected geometric road network with planted volumes.

    Nodes are points in the unit square; the edge set is a minimum
    spanning tree topped up with the shortest remaining pairs until the
    edge count reaches round(n * avg_degree / 2), so the empirical mean
    degree matches ``avg_degree`` up to rounding. Node features are the
    road-class one-hot plus two noisy volume-correlated covariates.
    Pure function of the config (fixed seed -> identical graph).
    """
    config.validate()
    n = config.n_nodes
    rng = np.random.default_rng(config.seed)

    pos = rng.random((n, 2))
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)

    mst = {frozenset(e) for e in _minimum_spanning_edges(dist)}
    target_m = max(n - 1, int(round(n * config.avg_degree / 2)))
    iu, ju = np.triu_indices(n, k=1)
    order = np.argsort(dist[iu, ju], kind="stable")
    chosen = set(mst)
    for idx in order:
        if len(chosen) >= target_m:
            break
        chosen.add(frozenset((int(iu[idx]), int(ju[idx]))))
    edge_pairs = sorted((min(e), max(e)) for e in chosen)

    classes = rng.choice(len(ROAD_CLASSES), size=n, p=np.asarray(config.class_mix))

    vp = config.volume_process
    sources = rng.choice(n, size=vp.source_count, replace=False)
    lo, hi = vp.intensity_range
    intensities = rng.uniform(lo, hi, size=vp.source_count)
    y = np.zeros(n)
    y[sources] = intensities

    if vp.diffusion_steps > 0:
        rows = [u for u, v in edge_pairs] + [v for u, v in edge_pairs] + list(range(n))
        cols = [v for u, v in edge_pairs] + [u for u, v in edge_pairs] + list(range(n))
        avg = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        avg = avg.multiply(1.0 / avg.sum(axis=1)).tocsr()
        for _ in range(vp.diffusion_steps):
            y = avg @ y
    if vp.noise_sd > 0:
        y = y + rng.normal(0.0, vp.noise_sd, size=n)
    y = np.maximum(y, 0.0)

    z = (y - y.mean()) / max(y.std(), 1e-12)
    cov1 = z + rng.normal(0.0, config.covariate_noise_sd, size=n)
    zl = np.log1p(y)
    zl = (zl - zl.mean()) / max(zl.std(), 1e-12)
    cov2 = zl + rng.normal(0.0, config.covariate_noise_sd, size=n)

    one_hot = np.zeros((n, len(ROAD_CLASSES)))
    one_hot[np.arange(n), classes] = 1.0
    X = np.column_stack([one_hot, cov1, cov2])

    max_d = dist[np.isfinite(dist)].max() if n > 1 else 1.0
    nodes = [
        RoadNode(id=i, features=X[i], true_volume=float(y[i]), road_class=ROAD_CLASSES[classes[i]])
        for i in range(n)
    ]
    edges = []
    for u, v in edge_pairs:
        d_uv = float(dist[u, v] / max_d)
        dx, dy = pos[v] - pos[u]
        orient = abs(math.cos(math.atan2(dy, dx)))
        edges.append(RoadEdge(u=u, v=v, attrs=np.array([d_uv, orient])))
    return NetworkGraph(nodes, edges)


# --------------------------------------------------------------------------
# Partitions, splits, derived operators
# --------------------------------------------------------------------------

def make_partition(graph: NetworkGraph, existing_fraction: float, seed: int) -> SensorPartition:
    """Sample the existing-sensor set uniformly without replacement.

    ``round(existing_fraction * N)`` nodes become ``existing``; ``new`` starts
    empty; everything else is unlabeled.
    """
    if not (0.0 < existing_fraction <= 1.0):
        raise InvalidFraction(f"existing_fraction must be in (0, 1], got {existing_fraction}")
    size = int(round(existing_fraction * graph.n))
    if size < 1:
        raise InvalidFraction("existing_fraction selects zero nodes")
    rng = np.random.default_rng(seed)
    existing = frozenset(int(i) for i in rng.choice(graph.n, size=size, replace=False))
    unlabeled = frozenset(range(graph.n)) - existing
    return SensorPartition(existing=existing, new=frozenset(), unlabeled=unlabeled)


def make_splits(
    graph: NetworkGraph,
    partition: SensorPartition,
    val_frac: float = 0.15,
    test_frac: float = 0.15,
    seed: int = 0,
) -> SplitAssignment:
    """Draw disjoint val/test samples from the unlabeled set.

    Sizes are floor(frac * |unlabeled|); train is existing + new. Raises
    ``TooFewUnlabeled`` when a split would be empty (evaluation impossible).
    """
    if val_frac + test_frac >= 1.0:
        raise InvalidConfig("val_frac + test_frac must be < 1")
    check_partition(graph, partition)
    pool = sorted(partition.unlabeled)
    n_val = int(math.floor(val_frac * len(pool)))
    n_test = int(math.floor(test_frac * len(pool)))
    if n_val == 0 or n_test == 0:
        raise TooFewUnlabeled(
            f"unlabeled pool of {len(pool)} gives val={n_val}, test={n_test}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(np.array(pool, dtype=np.int64))
    val = frozenset(int(i) for i in perm[:n_val])
    test = frozenset(int(i) for i in perm[n_val:n_val + n_test])
    return SplitAssignment(train=partition.train_ids, val=val, test=test)


def normalized_adjacency(graph: NetworkGraph) -> sp.csr_matrix:
    """Symmetric degree-normalized adjacency with self-loops.

    Returns D^{-1/2} (A + I) D^{-1/2} as a sparse CSR matrix; its spectrum
    lies in [-1, 1] and isolated nodes get a diagonal entry of 1.
    """
    n = graph.n
    u = graph.edge_index[:, 0]
    v = graph.edge_index[:, 1]
    rows = np.concatenate([u, v, np.arange(n)])
    cols = np.concatenate([v, u, np.arange(n)])
    a = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
    deg = np.asarray(a.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    d_mat = sp.diags(d_inv_sqrt)
    return (d_mat @ a @ d_mat).tocsr()


def sparsity(partition: SensorPartition) -> float:
    """Fraction of nodes without a sensor (unlabeled / N)."""
    return len(partition.unlabeled) / partition.n
