"""Command-line entry point.

Subcommands::

    volplace generate --config c.json [--out DIR] [--seed S]
    volplace train    --config c.json [--out DIR] [--seed S]
    volplace place    --config c.json [--out DIR] [--seed S] [--budget K]
    volplace compare  --config c.json [--out DIR] [--seed S] [--budget K] [--models]
    volplace ablate   --config c.json [--out DIR] [--seed S] [--budget K]
    volplace coverage --config c.json [--out DIR] [--strategy NAME | --fixture]
    volplace report   --in report.json [--metric NAME]

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. Every
run that writes files also writes a manifest (config hash, versions,
timestamps); report payloads themselves carry no timestamps.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from .autodiff import save_checkpoint
from .errors import InvalidConfig, UnknownSubcommand, VolplaceError
from .experiments import (
    ExperimentConfig,
    build_graph,
    config_from_dict,
    coverage_fixture,
    coverage_report,
    derive_seed,
    load_config,
    ranked_placement,
    run_ablation,
    run_comparison,
    run_model_comparison,
    sample_partition,
    save_coverage,
    write_manifest,
    _apply_placements,
    _utcnow,
    _write_json,
    SCHEMA_VERSION,
)
from .baselines import StrategyKind, betweenness, closeness, save_scores
from .graph import make_splits, save_graph, save_graph_json
from .metrics import compute_metrics
from .model import init_params, predict, train


class _UsageExit(Exception):
    def __init__(self, usage: str, message: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on bad flags; we want 1 + usage."""

    def error(self, message):
        raise _UsageExit(self.format_usage(), message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="volplace",
                     description="Road-network volume estimation and sensor placement")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, budget=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None,
                       help="replace the config's seed list with this one seed")
        if budget:
            p.add_argument("--budget", type=int, default=None,
                           help="replace the config's budget list")

    common(sub.add_parser("generate", help="write a synthetic graph as CSV/JSON"),
           budget=False)
    common(sub.add_parser("train", help="train the volume model on one seed"),
           budget=False)
    common(sub.add_parser("place", help="rank sensor placements per strategy"))
    cmp_p = sub.add_parser("compare", help="full strategy-by-budget study")
    common(cmp_p)
    cmp_p.add_argument("--models", action="store_true",
                       help="also compare against feature-only baselines")
    common(sub.add_parser("ablate", help="four-arm ablation at one budget"))
    cov = sub.add_parser("coverage", help="sensor counts by road class")
    common(cov)
    cov.add_argument("--strategy", default=None,
                     help="strategy whose placements to cover (default: first)")
    cov.add_argument("--fixture", action="store_true",
                     help="report on the built-in 1000-node fixture instead")
    rep = sub.add_parser("report", help="print a summary of an emitted report")
    rep.add_argument("--in", dest="in_path", required=True,
                     help="path to report.json / ablation.json / models.json")
    rep.add_argument("--metric", default="mse",
                     choices=["mse", "rmse", "mae", "mape_pct"])
    return parser


def _load_with_overrides(args) -> ExperimentConfig:
    config = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if getattr(args, "budget", None) is not None:
        updates["budgets"] = (args.budget,)
        updates["ablation_budget"] = None
    if args.out is not None:
        updates["out_dir"] = args.out
    if updates:
        config = dataclasses.replace(config, **updates)
        config.validate()
    return config


# --------------------------------------------------------------------------
# Subcommand bodies
# --------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    config = _load_with_overrides(args)
    if config.synthetic is None:
        raise InvalidConfig("generate requires a synthetic graph block")
    started, t0 = _utcnow(), time.perf_counter()
    seed = config.seeds[0]
    graph = build_graph(config, seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out / "nodes.csv", out / "edges.csv")
    save_graph_json(graph, out / "graph.json")
    write_manifest(out, "generate", config, started, time.perf_counter() - t0)
    print(f"wrote {graph.n}-node graph to {out}/nodes.csv, edges.csv, graph.json")
    return 0


def _prepare(config: ExperimentConfig, seed: int):
    graph = build_graph(config, seed)
    partition = sample_partition(graph, config.base_sensor_count,
                                 derive_seed(seed, "partition"))
    split = make_splits(graph, partition, config.val_frac, config.test_frac,
                        derive_seed(seed, "split"))
    return graph, partition, split


def _cmd_train(args) -> int:
    config = _load_with_overrides(args)
    started, t0 = _utcnow(), time.perf_counter()
    seed = config.seeds[0]
    graph, partition, split = _prepare(config, seed)
    cfg = dataclasses.replace(config.model, seed=derive_seed(seed, "pretrain"))
    params, report = train(init_params(cfg, graph.d, graph.d_e), graph, split, cfg)
    y_hat = predict(params, graph, cfg)
    test_ids = sorted(split.test)
    metrics = compute_metrics(graph.y[test_ids], y_hat[test_ids], config.mape_floor)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.json")
    _write_json(out / "train_report.json", {
        "schema_version": SCHEMA_VERSION,
        "kind": "train",
        "seed": seed,
        "epochs_run": report.epochs_run,
        "best_val_mse": report.best_val_mse,
        "test_metrics": metrics.to_dict(),
    })
    write_manifest(out, "train", config, started, time.perf_counter() - t0)
    print(f"trained {report.epochs_run} epochs; val mse {report.best_val_mse:.4f}; "
          f"test mse {metrics.mse:.4f}; checkpoint in {out}")
    return 0


def _cmd_place(args) -> int:
    config = _load_with_overrides(args)
    started, t0 = _utcnow(), time.perf_counter()
    seed = config.seeds[0]
    graph, partition, split = _prepare(config, seed)
    cfg = dataclasses.replace(config.model, seed=derive_seed(seed, "pretrain"))
    pretrained, _ = train(init_params(cfg, graph.d, graph.d_e), graph, split, cfg)
    k_max = max(config.budgets)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    placements = {}
    for name in config.strategy_names():
        ranked, _episodes = ranked_placement(
            name, graph, partition, split, pretrained, config, seed, k_max)
        placements[name] = [int(i) for i in ranked]
        if name == "betweenness":
            save_scores(betweenness(graph), out / "scores-betweenness.csv")
        if name == "closeness":
            save_scores(closeness(graph), out / "scores-closeness.csv")
    _write_json(out / "placements.json", {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "budget": k_max,
        "placements": placements,
    })
    write_manifest(out, "place", config, started, time.perf_counter() - t0)
    print(f"ranked {k_max} placements for {len(placements)} strategies in {out}")
    return 0


def _cmd_compare(args) -> int:
    config = _load_with_overrides(args)
    report = run_comparison(config)
    if args.models:
        run_model_comparison(config)
    print(f"wrote {len(report.cells)} cells to {config.out_dir}/report.json")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_with_overrides(args)
    payload = run_ablation(config)
    print(f"wrote {len(payload['cells'])} ablation cells to "
          f"{config.out_dir}/ablation.json")
    return 0


def _cmd_coverage(args) -> int:
    config = _load_with_overrides(args)
    started, t0 = _utcnow(), time.perf_counter()
    out = Path(config.out_dir)
    if args.fixture:
        graph, partition = coverage_fixture(config.seeds[0])
        report = coverage_report(graph, partition, {0: partition})
    else:
        seed = config.seeds[0]
        graph, partition, split = _prepare(config, seed)
        name = args.strategy or config.strategy_names()[0]
        if name not in config.strategy_names():
            raise InvalidConfig(f"strategy {name!r} not in config")
        pretrained = None
        if name.startswith("rl-"):
            cfg = dataclasses.replace(config.model, seed=derive_seed(seed, "pretrain"))
            pretrained, _ = train(init_params(cfg, graph.d, graph.d_e),
                                  graph, split, cfg)
        k_max = max(config.budgets)
        ranked, _eps = ranked_placement(
            name, graph, partition, split, pretrained, config, seed, k_max)
        after = {b: _apply_placements(partition, ranked[:b])
                 for b in config.budgets}
        report = coverage_report(graph, partition, after, list(config.budgets))
    save_coverage(report, out)
    write_manifest(out, "coverage", config, started, time.perf_counter() - t0)
    print(f"wrote coverage report to {out}/coverage.json")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.in_path)
    if not path.exists():
        raise InvalidConfig(f"no such report: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"report is not valid JSON: {exc}") from None
    rows = [r for r in payload.get("aggregates", []) if r["metric"] == args.metric]
    if not rows:
        raise InvalidConfig(f"report has no aggregates for {args.metric!r}")
    id_keys = [k for k in ("strategy", "arm", "budget") if k in rows[0]]
    header = id_keys + [f"{args.metric}_mean", f"{args.metric}_std", "n"]
    print("\t".join(header))
    for r in rows:
        cells = [str(r[k]) for k in id_keys]
        cells += [f"{r['mean']:.4f}", f"{r['std']:.4f}", str(r["n"])]
        print("\t".join(cells))
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "place": _cmd_place,
    "compare": _cmd_compare,
    "ablate": _cmd_ablate,
    "coverage": _cmd_coverage,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(exc.usage, file=sys.stderr, end="")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    handler = _HANDLERS.get(args.command)
    if handler is None:
        raise UnknownSubcommand(args.command)
    try:
        return handler(args)
    except VolplaceError as exc:
        category = "validation" if isinstance(exc, ValueError) else "runtime"
        print(f"error ({category}): {exc}", file=sys.stderr)
        return 1 if isinstance(exc, ValueError) else 2
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error (runtime): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
