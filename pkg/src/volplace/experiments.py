"""Config-driven experiment harness: strategy comparisons, model baselines,
ablations, and sensor-coverage reports over multiple seeds.

One comparison run, per seed: build a graph, sample the existing-sensor
set, fix val/test nodes, pretrain the regressor, let every placement
strategy rank max(budgets) candidate nodes, then for each budget retrain
from scratch on existing + the strategy's first `budget` picks and score
the fixed test set. Retraining from identical initializations keeps the
comparison about *which nodes got sensors* and nothing else.

All emitted files are versioned with ``schema_version``. Timestamps and
wall-clock times live only in the manifest so report payloads are
byte-reproducible for a given (config, seed).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .agent import (
    ExplorationPolicy,
    PlacementEnv,
    PolicyKind,
    final_placement,
    save_episodes,
    train_agent,
)
from .baselines import (
    PlacementStrategy,
    StrategyKind,
    TabularKind,
    select_by_strategy,
    train_tabular,
)
from .errors import GraphMismatch, InvalidConfig, InvalidGraph, IoError
from .graph import (
    ROAD_CLASSES,
    NetworkGraph,
    SensorPartition,
    SplitAssignment,
    SyntheticConfig,
    VolumeProcess,
    check_partition,
    generate_synthetic,
    load_graph,
    make_splits,
)
from .metrics import Metrics, aggregate, compute_metrics
from .model import ModelConfig, init_params, predict, train

SCHEMA_VERSION = 1

HEURISTIC_STRATEGIES = {
    "random": StrategyKind.Random,
    "betweenness": StrategyKind.Betweenness,
    "closeness": StrategyKind.Closeness,
    "observed-activity": StrategyKind.ObservedActivity,
}

RL_VARIANTS = {
    "standard": PolicyKind.Standard,
    "adaptive-epsilon": PolicyKind.AdaptiveEpsilon,
    "curiosity": PolicyKind.Curiosity,
}

METRIC_FIELDS = ("mse", "rmse", "mae", "mape_pct")

ABLATION_ARMS = ("full", "no-rl", "gcn-only", "gat-only")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentSettings:
    """Hyperparameters for the placement agent's training loop."""

    episodes: int = 12
    finetune_epochs: int = 5
    batch_size: int = 16
    gamma: float = 0.95
    buffer_capacity: int = 10000
    q_hidden: int = 32
    q_learning_rate: float = 1e-3
    sync_period: int = 25

    def validate(self) -> None:
        for name in ("episodes", "finetune_epochs", "batch_size",
                     "buffer_capacity", "q_hidden", "sync_period"):
            if getattr(self, name) < (0 if name == "finetune_epochs" else 1):
                raise InvalidConfig(f"agent.{name} out of range")
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidConfig("agent.gamma must be in [0, 1]")
        if self.q_learning_rate <= 0:
            raise InvalidConfig("agent.q_learning_rate must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one comparison/ablation run needs, JSON-serializable."""

    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    nodes_csv: str | None = None
    edges_csv: str | None = None
    base_sensor_count: int = 20
    budgets: tuple = (10, 20, 40)
    strategies: tuple = ("random", "betweenness", "closeness", "observed-activity")
    rl_variants: tuple = ("curiosity",)
    seeds: tuple = (0, 1, 2, 3, 4)
    val_frac: float = 0.15
    test_frac: float = 0.15
    activity_noise_sd: float = 10.0
    mape_floor: float = 1.0
    ablation_budget: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentSettings = field(default_factory=AgentSettings)
    out_dir: str = "results"

    def validate(self) -> None:
        has_files = self.nodes_csv is not None and self.edges_csv is not None
        if (self.nodes_csv is None) != (self.edges_csv is None):
            raise InvalidConfig("nodes_csv and edges_csv must be given together")
        if self.synthetic is None and not has_files:
            raise InvalidConfig("config needs a synthetic block or csv paths")
        if self.synthetic is not None:
            self.synthetic.validate()
        if self.base_sensor_count < 1:
            raise InvalidConfig("base_sensor_count must be >= 1")
        if not self.budgets:
            raise InvalidConfig("budgets must be non-empty")
        if list(self.budgets) != sorted(self.budgets):
            raise InvalidConfig("budgets must be sorted ascending")
        if any(b < 0 for b in self.budgets):
            raise InvalidConfig("budgets must be >= 0")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise InvalidConfig("seeds must be distinct and non-empty")
        for s in self.strategies:
            if s not in HEURISTIC_STRATEGIES:
                raise InvalidConfig(f"unknown strategy {s!r}")
        for v in self.rl_variants:
            if v not in RL_VARIANTS:
                raise InvalidConfig(f"unknown rl variant {v!r}")
        if not (0 < self.val_frac < 1 and 0 < self.test_frac < 1):
            raise InvalidConfig("val_frac and test_frac must be in (0, 1)")
        if self.activity_noise_sd < 0:
            raise InvalidConfig("activity_noise_sd must be >= 0")
        if self.ablation_budget is not None and self.ablation_budget < 0:
            raise InvalidConfig("ablation_budget must be >= 0")
        self.model.validate()
        self.agent.validate()

    def strategy_names(self) -> list:
        """All strategy columns in report order: heuristics then rl variants."""
        return list(self.strategies) + [f"rl-{v}" for v in self.rl_variants]


def _dataclass_from(cls, payload: dict, label: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise InvalidConfig(f"unknown {label} keys: {sorted(unknown)}")
    return payload


def config_to_dict(config: ExperimentConfig) -> dict:
    """JSON form of the config; out_dir is deliberately excluded so report
    payloads do not vary with where they are written."""
    graph_block: dict = {}
    if config.synthetic is not None:
        vp = config.synthetic.volume_process
        graph_block["synthetic"] = {
            "n_nodes": config.synthetic.n_nodes,
            "avg_degree": config.synthetic.avg_degree,
            "class_mix": list(config.synthetic.class_mix),
            "covariate_noise_sd": config.synthetic.covariate_noise_sd,
            "seed": config.synthetic.seed,
            "volume_process": {
                "diffusion_steps": vp.diffusion_steps,
                "source_count": vp.source_count,
                "noise_sd": vp.noise_sd,
                "intensity_range": list(vp.intensity_range),
            },
        }
    if config.nodes_csv is not None:
        graph_block["nodes_csv"] = config.nodes_csv
        graph_block["edges_csv"] = config.edges_csv
    return {
        "schema_version": SCHEMA_VERSION,
        "graph": graph_block,
        "base_sensor_count": config.base_sensor_count,
        "budgets": list(config.budgets),
        "strategies": list(config.strategies),
        "rl_variants": list(config.rl_variants),
        "seeds": list(config.seeds),
        "val_frac": config.val_frac,
        "test_frac": config.test_frac,
        "activity_noise_sd": config.activity_noise_sd,
        "mape_floor": config.mape_floor,
        "ablation_budget": config.ablation_budget,
        "model": dataclasses.asdict(config.model),
        "agent": dataclasses.asdict(config.agent),
    }


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise InvalidConfig("config payload must be a JSON object")
    payload = dict(payload)
    version = payload.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported config schema_version {version}")
    out_dir = payload.pop("out_dir", "results")
    graph_block = dict(payload.pop("graph", {"synthetic": {}}))

    synthetic = None
    if "synthetic" in graph_block:
        synth = dict(graph_block.pop("synthetic"))
        vp_payload = dict(synth.pop("volume_process", {}))
        _dataclass_from(VolumeProcess, vp_payload, "volume_process")
        if "intensity_range" in vp_payload:
            vp_payload["intensity_range"] = tuple(vp_payload["intensity_range"])
        vp = VolumeProcess(**vp_payload)
        _dataclass_from(SyntheticConfig, {**synth, "volume_process": {}}, "synthetic")
        if "class_mix" in synth:
            synth["class_mix"] = tuple(synth["class_mix"])
        synthetic = SyntheticConfig(volume_process=vp, **synth)
    nodes_csv = graph_block.pop("nodes_csv", None)
    edges_csv = graph_block.pop("edges_csv", None)
    if graph_block:
        raise InvalidConfig(f"unknown graph keys: {sorted(graph_block)}")

    model_payload = _dataclass_from(ModelConfig, dict(payload.pop("model", {})), "model")
    agent_payload = _dataclass_from(AgentSettings, dict(payload.pop("agent", {})), "agent")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {
        "synthetic", "nodes_csv", "edges_csv", "model", "agent", "out_dir"}
    unknown = set(payload) - known
    if unknown:
        raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
    for key in ("budgets", "strategies", "rl_variants", "seeds"):
        if key in payload:
            payload[key] = tuple(payload[key])
    config = ExperimentConfig(
        synthetic=synthetic,
        nodes_csv=nodes_csv,
        edges_csv=edges_csv,
        model=ModelConfig(**model_payload),
        agent=AgentSettings(**agent_payload),
        out_dir=out_dir,
        **payload,
    )
    config.validate()
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from None
    return config_from_dict(payload)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def derive_seed(base: int, tag: str) -> int:
    """Stable per-purpose substream seed (independent of numpy versions)."""
    digest = hashlib.sha256(f"{base}:{tag}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


# --------------------------------------------------------------------------
# Per-seed building blocks
# --------------------------------------------------------------------------

def build_graph(config: ExperimentConfig, seed: int) -> NetworkGraph:
    """Synthetic runs draw a fresh graph per seed; file runs reuse one."""
    if config.synthetic is not None:
        return generate_synthetic(
            replace(config.synthetic, seed=config.synthetic.seed + seed))
    return load_graph(config.nodes_csv, config.edges_csv)


def sample_partition(graph: NetworkGraph, count: int, seed: int) -> SensorPartition:
    if not (1 <= count < graph.n):
        raise InvalidConfig(
            f"base_sensor_count {count} out of range for a {graph.n}-node graph")
    rng = np.random.default_rng(seed)
    existing = frozenset(int(i) for i in rng.choice(graph.n, size=count, replace=False))
    return SensorPartition(existing=existing, new=frozenset(),
                           unlabeled=frozenset(range(graph.n)) - existing)


def _activity_proxy(graph: NetworkGraph, noise_sd: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return graph.y + rng.normal(0.0, noise_sd, size=graph.n)


def _apply_placements(partition: SensorPartition, nodes) -> SensorPartition:
    for node in nodes:
        partition = partition.with_new_sensor(node)
    return partition


def ranked_placement(name: str, graph: NetworkGraph, partition: SensorPartition,
                     split: SplitAssignment, pretrained, config: ExperimentConfig,
                     seed: int, k_max: int):
    """Rank ``k_max`` placement candidates under one strategy.

    Returns (ordered node list, episode traces or None). Budgets below
    k_max are evaluated on prefixes of this single ranking.
    """
    exclude = frozenset(split.val | split.test)
    if name in HEURISTIC_STRATEGIES:
        kind = HEURISTIC_STRATEGIES[name]
        activity = None
        if kind is StrategyKind.ObservedActivity:
            activity = _activity_proxy(graph, config.activity_noise_sd,
                                       derive_seed(seed, "activity"))
        strategy = PlacementStrategy(kind, seed=derive_seed(seed, f"strategy:{name}"))
        picks = select_by_strategy(graph, partition, strategy, k_max,
                                   activity=activity, exclude=exclude)
        return picks, None
    variant = name.removeprefix("rl-")
    if variant not in RL_VARIANTS:
        raise InvalidConfig(f"unknown strategy {name!r}")
    policy = ExplorationPolicy(RL_VARIANTS[variant])
    a = config.agent
    qnet, episodes = train_agent(
        graph, partition, split, budget=k_max, policy=policy,
        episodes=a.episodes, seed=derive_seed(seed, f"agent:{name}"),
        config=config.model, pretrained=pretrained,
        finetune_epochs=a.finetune_epochs, batch_size=a.batch_size,
        gamma=a.gamma, buffer_capacity=a.buffer_capacity, q_hidden=a.q_hidden,
        q_learning_rate=a.q_learning_rate, sync_period=a.sync_period)
    env = PlacementEnv(graph, partition, split, config.model, pretrained,
                       budget=k_max, finetune_epochs=a.finetune_epochs)
    return final_placement(qnet, env, k_max), episodes


def evaluate_placement(graph: NetworkGraph, partition: SensorPartition,
                       split: SplitAssignment, s_new, model: ModelConfig,
                       eval_seed: int, mape_floor: float) -> Metrics:
    """Retrain from scratch with the given sensors added, score the test set."""
    placed = _apply_placements(partition, s_new)
    eval_split = SplitAssignment(train=placed.train_ids, val=split.val,
                                 test=split.test)
    cfg = replace(model, seed=eval_seed)
    params, _ = train(init_params(cfg, graph.d, graph.d_e), graph, eval_split, cfg)
    y_hat = predict(params, graph, cfg)
    test_ids = sorted(split.test)
    return compute_metrics(graph.y[test_ids], y_hat[test_ids], mape_floor)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-cell metrics plus per-(strategy, budget) aggregates."""

    cells: list
    aggregates: list
    placements: dict

    def mean(self, strategy: str, budget: int, metric: str = "mse") -> float:
        for row in self.aggregates:
            if (row["strategy"] == strategy and row["budget"] == budget
                    and row["metric"] == metric):
                return row["mean"]
        raise KeyError(f"no aggregate for ({strategy}, {budget}, {metric})")

    def seed_values(self, strategy: str, budget: int, metric: str = "mse") -> list:
        return [c[metric] for c in self.cells
                if c["strategy"] == strategy and c["budget"] == budget]

    def to_dict(self, config: ExperimentConfig) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "comparison",
            "config": config_to_dict(config),
            "cells": self.cells,
            "aggregates": self.aggregates,
            "placements": self.placements,
        }


def _check_cell_identities(m: Metrics) -> None:
    # every emitted cell must satisfy the metric identities
    if abs(m.rmse * m.rmse - m.mse) > 1e-9:
        raise AssertionError(f"rmse^2 != mse in cell: {m}")
    if m.mae > m.rmse + 1e-12:
        raise AssertionError(f"mae > rmse in cell: {m}")


def _aggregate_rows(cells, group_keys, metrics=METRIC_FIELDS) -> list:
    groups: dict = {}
    order: list = []
    for cell in cells:
        key = tuple(cell[k] for k in group_keys)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(cell)
    rows = []
    for key in order:
        for metric in metrics:
            stats = aggregate([c[metric] for c in groups[key]])
            rows.append({**dict(zip(group_keys, key)), "metric": metric, **stats})
    return rows


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _write_tidy_csv(path: Path, cells, id_fields) -> None:
    lines = [",".join(list(id_fields) + ["metric", "value"])]
    for cell in cells:
        prefix = ",".join(str(cell[f]) for f in id_fields)
        for metric in METRIC_FIELDS:
            lines.append(f"{prefix},{metric},{cell[metric]!r}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def write_manifest(out_dir: Path, kind: str, config: ExperimentConfig,
                   started_at: str, wall_seconds: float, status: str = "ok",
                   error: str | None = None) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "status": status,
        "config_hash": config_hash(config),
        "seeds": list(config.seeds),
        "out_dir": str(out_dir),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "started_at": started_at,
        "wall_seconds": wall_seconds,
    }
    if error is not None:
        payload["error"] = error
    _write_json(out_dir / "manifest.json", payload)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


# --------------------------------------------------------------------------
# Comparison run
# --------------------------------------------------------------------------

def run_comparison(config: ExperimentConfig, out_dir=None) -> MetricsReport:
    """Strategy-by-budget-by-seed study; writes report.json + cells.csv.

    On failure, whatever cells finished are flushed with a failed-status
    manifest before the error propagates.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started, t0 = _utcnow(), time.perf_counter()
    names = config.strategy_names()
    k_max = max(config.budgets)
    cells: list = []
    placements: dict = {name: {} for name in names}
    episodes_by_variant: dict = {f"rl-{v}": {} for v in config.rl_variants}

    try:
        for seed in config.seeds:
            graph = build_graph(config, seed)
            partition = sample_partition(graph, config.base_sensor_count,
                                         derive_seed(seed, "partition"))
            split = make_splits(graph, partition, config.val_frac,
                                config.test_frac, derive_seed(seed, "split"))
            pre_cfg = replace(config.model, seed=derive_seed(seed, "pretrain"))
            pretrained, _ = train(init_params(pre_cfg, graph.d, graph.d_e),
                                  graph, split, pre_cfg)
            for name in names:
                ranked, episodes = ranked_placement(
                    name, graph, partition, split, pretrained, config, seed, k_max)
                placements[name][str(seed)] = [int(i) for i in ranked]
                if episodes is not None:
                    episodes_by_variant[name][str(seed)] = [
                        e.to_dict() for e in episodes]
                for budget in config.budgets:
                    m = evaluate_placement(
                        graph, partition, split, ranked[:budget], config.model,
                        derive_seed(seed, f"eval:{budget}"), config.mape_floor)
                    _check_cell_identities(m)
                    cells.append({"strategy": name, "budget": int(budget),
                                  "seed": int(seed), **m.to_dict()})
    except Exception as exc:
        report = MetricsReport(cells=cells, aggregates=_aggregate_rows(
            cells, ("strategy", "budget")), placements=placements)
        _write_json(out / "report.json", report.to_dict(config))
        write_manifest(out, "comparison", config, started,
                       time.perf_counter() - t0, status="failed", error=str(exc))
        raise

    report = MetricsReport(
        cells=cells,
        aggregates=_aggregate_rows(cells, ("strategy", "budget")),
        placements=placements,
    )
    _write_json(out / "report.json", report.to_dict(config))
    _write_tidy_csv(out / "cells.csv", cells, ("strategy", "budget", "seed"))
    _write_json(out / "placements.json",
                {"schema_version": SCHEMA_VERSION, "placements": placements})
    for variant, by_seed in episodes_by_variant.items():
        _write_json(out / f"episodes-{variant}.json",
                    {"schema_version": SCHEMA_VERSION, "episodes_by_seed": by_seed})
    write_manifest(out, "comparison", config, started, time.perf_counter() - t0)
    return report


# --------------------------------------------------------------------------
# Model comparison (graph model vs feature-only baselines)
# --------------------------------------------------------------------------

MODEL_ARMS = ("hybrid-gnn", "linear", "mlp")


def run_model_comparison(config: ExperimentConfig, out_dir=None) -> list:
    """Per-seed test metrics for the graph model vs tabular baselines.

    Returns cell dicts (arm, seed, metrics); writes models.json/models.csv.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for seed in config.seeds:
        graph = build_graph(config, seed)
        partition = sample_partition(graph, config.base_sensor_count,
                                     derive_seed(seed, "partition"))
        split = make_splits(graph, partition, config.val_frac,
                            config.test_frac, derive_seed(seed, "split"))
        train_ids = sorted(split.train)
        test_ids = sorted(split.test)
        cfg = replace(config.model, seed=derive_seed(seed, "pretrain"))
        params, _ = train(init_params(cfg, graph.d, graph.d_e), graph, split, cfg)
        preds = {
            "hybrid-gnn": predict(params, graph, cfg)[test_ids],
            "linear": train_tabular(
                TabularKind.Linear, graph.X[train_ids], graph.y[train_ids],
            ).predict(graph.X[test_ids]),
            "mlp": train_tabular(
                TabularKind.MLP, graph.X[train_ids], graph.y[train_ids],
                seed=derive_seed(seed, "mlp"),
            ).predict(graph.X[test_ids]),
        }
        for arm in MODEL_ARMS:
            m = compute_metrics(graph.y[test_ids], preds[arm], config.mape_floor)
            _check_cell_identities(m)
            cells.append({"arm": arm, "seed": int(seed), **m.to_dict()})
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "models",
        "config": config_to_dict(config),
        "arms": list(MODEL_ARMS),
        "cells": cells,
        "aggregates": _aggregate_rows(cells, ("arm",)),
    }
    _write_json(out / "models.json", payload)
    _write_tidy_csv(out / "models.csv", cells, ("arm", "seed"))
    return cells


# --------------------------------------------------------------------------
# Ablation run
# --------------------------------------------------------------------------

def _arm_model(arm: str, model: ModelConfig) -> ModelConfig:
    if arm == "gcn-only":
        return replace(model, use_gat=False)
    if arm == "gat-only":
        return replace(model, use_gcn=False)
    return model


def run_ablation(config: ExperimentConfig, out_dir=None) -> dict:
    """Four fixed arms at one budget: full, no-rl, gcn-only, gat-only.

    RL arms place sensors with a Curiosity agent under the arm's own
    architecture; the no-rl arm places the same budget at random. Random
    streams are keyed by treatment, so the full and no-rl cells line up
    with a comparison run's rl-curiosity and random cells when the
    budget matches that run's largest budget.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started, t0 = _utcnow(), time.perf_counter()
    budget = (config.ablation_budget if config.ablation_budget is not None
              else config.budgets[0])
    cells: list = []

    try:
        for seed in config.seeds:
            graph = build_graph(config, seed)
            partition = sample_partition(graph, config.base_sensor_count,
                                         derive_seed(seed, "partition"))
            split = make_splits(graph, partition, config.val_frac,
                                config.test_frac, derive_seed(seed, "split"))
            for arm in ABLATION_ARMS:
                model = _arm_model(arm, config.model)
                if arm == "no-rl":
                    strategy = PlacementStrategy(
                        StrategyKind.Random, seed=derive_seed(seed, "strategy:random"))
                    s_new = select_by_strategy(
                        graph, partition, strategy, budget,
                        exclude=frozenset(split.val | split.test))
                else:
                    pre_cfg = replace(model, seed=derive_seed(seed, "pretrain"))
                    pretrained, _ = train(
                        init_params(pre_cfg, graph.d, graph.d_e), graph, split, pre_cfg)
                    a = config.agent
                    # exploration stream keyed by treatment, not arm label:
                    # arms share the noise, and with a matching budget the
                    # full arm reproduces a comparison run's rl-curiosity cells
                    qnet, _eps = train_agent(
                        graph, partition, split, budget=budget,
                        policy=ExplorationPolicy(PolicyKind.Curiosity),
                        episodes=a.episodes,
                        seed=derive_seed(seed, "agent:rl-curiosity"),
                        config=model, pretrained=pretrained,
                        finetune_epochs=a.finetune_epochs,
                        batch_size=a.batch_size, gamma=a.gamma,
                        buffer_capacity=a.buffer_capacity, q_hidden=a.q_hidden,
                        q_learning_rate=a.q_learning_rate,
                        sync_period=a.sync_period)
                    env = PlacementEnv(graph, partition, split, model, pretrained,
                                       budget=budget,
                                       finetune_epochs=a.finetune_epochs)
                    s_new = final_placement(qnet, env, budget)
                m = evaluate_placement(graph, partition, split, s_new, model,
                                       derive_seed(seed, f"eval:{budget}"),
                                       config.mape_floor)
                _check_cell_identities(m)
                cells.append({"arm": arm, "seed": int(seed),
                              "budget": int(budget), **m.to_dict()})
    except Exception as exc:
        write_manifest(out, "ablation", config, started,
                       time.perf_counter() - t0, status="failed", error=str(exc))
        raise

    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ablation",
        "config": config_to_dict(config),
        "budget": int(budget),
        "arms": list(ABLATION_ARMS),
        "cells": cells,
        "aggregates": _aggregate_rows(cells, ("arm",)),
    }
    _write_json(out / "ablation.json", payload)
    _write_tidy_csv(out / "ablation.csv", cells, ("arm", "seed"))
    write_manifest(out, "ablation", config, started, time.perf_counter() - t0)
    return payload


# --------------------------------------------------------------------------
# Coverage report
# --------------------------------------------------------------------------

@dataclass
class CoverageReport:
    """Sensor counts by road class, before vs after each budget."""

    classes: list
    segment_counts: list
    sensors_before: list
    budgets: list
    sensors_after: dict   # budget -> per-class counts

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "coverage",
            "classes": self.classes,
            "segment_counts": self.segment_counts,
            "sensors_before": self.sensors_before,
            "budgets": self.budgets,
            "sensors_after": {str(b): self.sensors_after[b] for b in self.budgets},
        }

    def to_csv(self) -> str:
        header = ["road_class", "segments", "sensors_before"] + [
            f"sensors_after_budget_{b}" for b in self.budgets]
        lines = [",".join(header)]
        for i, cls in enumerate(self.classes):
            row = [cls, str(self.segment_counts[i]), str(self.sensors_before[i])]
            row += [str(self.sensors_after[b][i]) for b in self.budgets]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _class_counts(graph: NetworkGraph, ids) -> list:
    counts = [0] * len(ROAD_CLASSES)
    for i in ids:
        counts[int(graph.classes[i])] += 1
    return counts


def coverage_report(graph: NetworkGraph, partition_before: SensorPartition,
                    partition_after, budgets=None) -> CoverageReport:
    """Cross-tab sensors by road class before vs after each budget.

    ``partition_after`` is either one partition or a {budget: partition}
    mapping; every partition must cover the same graph.
    """
    try:
        check_partition(graph, partition_before)
    except InvalidGraph as exc:
        raise GraphMismatch(str(exc)) from None
    if isinstance(partition_after, SensorPartition):
        partition_after = {len(partition_after.new): partition_after}
    for part in partition_after.values():
        try:
            check_partition(graph, part)
        except InvalidGraph as exc:
            raise GraphMismatch(str(exc)) from None
        if part.existing != partition_before.existing:
            raise GraphMismatch("after-partition has a different existing set")
    budgets = sorted(partition_after) if budgets is None else list(budgets)
    for b in budgets:
        if b not in partition_after:
            raise GraphMismatch(f"no partition supplied for budget {b}")

    return CoverageReport(
        classes=[c.value for c in ROAD_CLASSES],
        segment_counts=_class_counts(graph, range(graph.n)),
        sensors_before=_class_counts(graph, partition_before.train_ids),
        budgets=budgets,
        sensors_after={b: _class_counts(graph, partition_after[b].train_ids)
                       for b in budgets},
    )


def save_coverage(report: CoverageReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "coverage.json", report.to_dict())
    try:
        (out / "coverage.csv").write_text(report.to_csv(), encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


# --------------------------------------------------------------------------
# Urban-network coverage fixture
# --------------------------------------------------------------------------

#: Existing-sensor counts per road class for the 1000-node fixture:
#: heavily skewed toward protected infrastructure, nearly absent from
#: local mixed-traffic streets.
FIXTURE_SENSORS = {
    "ProtectedBikeLane": 67,
    "PaintedLaneArterialCollector": 15,
    "OffRoadPath": 45,
    "LocalMixed": 1,
    "ArterialMixed": 10,
    "Other": 3,
}


def coverage_fixture(seed: int = 0):
    """1000-node graph with 141 existing sensors allocated per
    FIXTURE_SENSORS; returns (graph, partition)."""
    graph = generate_synthetic(SyntheticConfig(n_nodes=1000, seed=seed))
    rng = np.random.default_rng(derive_seed(seed, "fixture"))
    existing: set = set()
    for cls_index, cls in enumerate(ROAD_CLASSES):
        want = FIXTURE_SENSORS[cls.value]
        pool = np.nonzero(graph.classes == cls_index)[0]
        if len(pool) < want:
            raise InvalidConfig(
                f"fixture graph has only {len(pool)} {cls.value} segments")
        existing.update(int(i) for i in rng.choice(pool, size=want, replace=False))
    partition = SensorPartition(
        existing=frozenset(existing), new=frozenset(),
        unlabeled=frozenset(range(graph.n)) - frozenset(existing))
    return graph, partition
