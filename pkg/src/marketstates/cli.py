"""Command-line entry point: one subcommand per stage plus ``pipeline``.

Stages read and write fixed file names inside the output directory, so they can
be run one at a time or chained::

    marketstates synth --out run
    marketstates pipeline --prices run/prices.csv --sector-map run/sectors.csv --out run

Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from . import aggregate as agg
from . import clustering, ingest, preprocess, relevance, surrogate, synth
from .config import ConfigError, PipelineConfig, build_config, write_config
from .errors import PipelineError

logger = logging.getLogger("marketstates")

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2

FILES = {
    "prices": "prices.csv",
    "sectors": "sectors.csv",
    "sector_prices": "sector_prices.csv",
    "returns": "returns.csv",
    "features": "features.csv",
    "model": "model.json",
    "assignments": "assignments.csv",
    "relevance": "relevance.csv",
    "aggregates": "aggregates.csv",
    "top_features": "top_features.json",
    "changepoints": "changepoints.json",
    "mask": "relevant_mask.csv",
    "runs": "surrogate_runs.csv",
    "summary": "surrogate_summary.json",
    "network": "surrogate_network.json",
    "config": "effective_config.json",
}


def _path(out: Path, key: str) -> Path:
    return out / FILES[key]


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(f"cli.{stage}", f"missing input {path}; run the earlier stage first")
    return path


def _dump_json(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- stages ----------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, out: Path) -> None:
    config = synth.SyntheticPriceConfig(
        tickers_per_sector=cfg.synth_tickers_per_sector,
        days=cfg.synth_days,
        missing_probability=cfg.synth_missing_probability,
        seed=cfg.stage_seed("synth"),
    )
    table, sector_map = synth.generate_prices(config)
    ingest.write_prices(table, _path(out, "prices"))
    ingest.write_sector_map(sector_map, _path(out, "sectors"))


def stage_ingest(cfg: PipelineConfig, out: Path) -> None:
    prices_path = Path(cfg.prices) if cfg.prices else _require(_path(out, "prices"), "ingest")
    map_path = Path(cfg.sector_map) if cfg.sector_map else _require(_path(out, "sectors"), "ingest")
    raw = ingest.load_prices(prices_path)
    sector_map = ingest.load_sector_map(map_path)
    kept = ingest.filter_coverage(raw, cfg.min_coverage)
    filled = ingest.interpolate_missing(kept)
    sectors = ingest.aggregate_sectors(filled, sector_map)
    returns = ingest.compute_returns(sectors)
    sectors.to_frame().to_csv(_path(out, "sector_prices"), index=False)
    returns.to_frame().to_csv(_path(out, "returns"), index=False)
    logger.info("ingest: kept %d of %d tickers, %d days", len(kept.tickers), len(raw.tickers), len(raw.dates))


def stage_preprocess(cfg: PipelineConfig, out: Path) -> None:
    returns = ingest.load_returns(_require(_path(out, "returns"), "preprocess"))
    table = preprocess.feature_table(returns, cfg.n, cfg.tau)
    preprocess.write_features(table, _path(out, "features"))


def stage_cluster(cfg: PipelineConfig, out: Path) -> None:
    features = preprocess.load_features(_require(_path(out, "features"), "cluster"))
    model = clustering.fit_kmeans(
        features.values,
        k=cfg.k,
        seed=cfg.stage_seed("cluster"),
        max_iter=cfg.kmeans_max_iter,
        tol=cfg.kmeans_tol,
        init=cfg.kmeans_init,
        feature_names=features.names,
    )
    clustering.save_model(model, _path(out, "model"))
    ids, dist = clustering.assign_all(model, features.values)
    clustering.write_assignments(features.dates, ids, dist, _path(out, "assignments"))


def stage_explain(cfg: PipelineConfig, out: Path) -> None:
    features = preprocess.load_features(_require(_path(out, "features"), "explain"))
    model = clustering.load_model(_require(_path(out, "model"), "explain"))
    table = relevance.relevance_table(
        model, features.values, dates=features.dates, beta_scope=cfg.beta_scope,
        feature_names=features.names,
    )
    relevance.write_relevance(table, _path(out, "relevance"))


def stage_aggregate(cfg: PipelineConfig, out: Path) -> None:
    table = relevance.load_relevance(_require(_path(out, "relevance"), "aggregate"))
    names = list(table.feature_names)
    all_aggs, top = [], {}
    for method in agg.METHODS:
        aggs = agg.aggregate_clusters(table.rho, table.cluster_ids, method, cfg.k)
        all_aggs.extend(aggs)
        top[method] = [names[i] for i in agg.top_feature_per_cluster(aggs)]
    agg.write_aggregates(all_aggs, names, _path(out, "aggregates"))
    _dump_json(top, _path(out, "top_features"))


def stage_changepoint(cfg: PipelineConfig, out: Path, curve: str | None = None) -> None:
    if curve is not None:
        values = pd.read_csv(curve, header=None, float_precision="round_trip").to_numpy(dtype=float).ravel()
        aggregate = agg.AggregatedRelevance(0, "curve", values, None)
        result = agg.bayesian_changepoint(agg.sort_curve(aggregate))
        names = [str(i) for i in range(len(values))]
        _dump_json(agg.changepoint_document([result], names), out / "changepoint_curve.json")
        return
    aggregates, names = agg.load_aggregates(_require(_path(out, "aggregates"), "changepoint"))
    elbow_dir = out / "elbow"
    elbow_dir.mkdir(exist_ok=True)
    results = []
    for a in aggregates:
        result = agg.bayesian_changepoint(agg.sort_curve(a))
        results.append(result)
        agg.write_elbow(result, names, elbow_dir / f"elbow_c{a.cluster_id}_{a.method}.csv")
    agg.write_changepoints(results, names, _path(out, "changepoints"))
    chosen = sorted((r for r in results if r.curve.method == cfg.method), key=lambda r: r.curve.cluster_id)
    mask = pd.DataFrame([r.relevant_mask.astype(int) for r in chosen], columns=names)
    mask.insert(0, "cluster_id", [r.curve.cluster_id for r in chosen])
    mask.to_csv(_path(out, "mask"), index=False)


def stage_surrogate(cfg: PipelineConfig, out: Path) -> None:
    features = preprocess.load_features(_require(_path(out, "features"), "surrogate"))
    labels = clustering.load_assignments(_require(_path(out, "assignments"), "surrogate"))
    top = json.loads(_require(_path(out, "top_features"), "surrogate").read_text())
    names = list(features.names)
    mode_cols = [names.index(f) for f in top["mode-mode"]]
    median_cols = [names.index(f) for f in top["median"]]
    if len(mode_cols) != len(median_cols):
        raise PipelineError("cli.surrogate", "mode-mode and median selections differ in size")
    spec = surrogate.surrogate_spec(len(mode_cols), cfg.k, cfg.width_divisor)
    optimizer = surrogate.OptimizerConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size)
    y = labels["cluster_id"].to_numpy(dtype=int)
    reports = surrogate.compare_selections(
        features.values, y, mode_cols, median_cols, runs=cfg.runs, spec=spec, epochs=cfg.epochs,
        optimizer=optimizer, jobs=cfg.jobs, seed_base=cfg.stage_seed("surrogate") % 2**31,
    )
    rows = [
        (method, seed, float(acc))
        for method, report in reports.items()
        for seed, acc in zip(report.seeds, report.accuracies)
    ]
    pd.DataFrame(rows, columns=["method", "seed", "accuracy"]).to_csv(_path(out, "runs"), index=False)
    summary = {
        method: {
            "mean": r.mean,
            "std": r.std,
            "runs": len(r.accuracies),
            "features": sorted({names[c] for sel in r.selections for c in sel})
            if method == "random" else [names[c] for c in r.selections[0]],
        }
        for method, r in reports.items()
    }
    _dump_json(summary, _path(out, "summary"))
    first = reports["mode-mode"].seeds[0]
    net, _ = surrogate.train(spec, features.values[:, mode_cols], y, seed=first, epochs=cfg.epochs,
                             optimizer=optimizer)
    surrogate.save_network(net, _path(out, "network"))


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "preprocess": stage_preprocess,
    "cluster": stage_cluster,
    "explain": stage_explain,
    "aggregate": stage_aggregate,
    "changepoint": stage_changepoint,
    "surrogate": stage_surrogate,
}
PIPELINE = ("ingest", "preprocess", "cluster", "explain", "aggregate", "changepoint", "surrogate")


def run_subcommand(name: str, cfg: PipelineConfig, **extra) -> int:
    """Run one stage (or the whole chain) and return the process exit code."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, _path(out, "config"))
    if name == "pipeline":
        order = PIPELINE if cfg.prices else ("synth",) + PIPELINE
    else:
        order = (name,)
    for stage in order:
        logger.info("stage %s", stage)
        try:
            if stage == "changepoint":
                STAGES[stage](cfg, out, curve=extra.get("curve"))
            else:
                STAGES[stage](cfg, out)
        except PipelineError as exc:
            print(f"error: stage {stage} failed in {exc}", file=sys.stderr)
            return EXIT_STAGE
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: stage {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_STAGE
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--prices", help="price CSV (date column + one column per ticker)")
    common.add_argument("--sector-map", dest="sector_map", help="ticker,sector CSV")
    common.add_argument("--n", type=int, help="normalisation window (trading days)")
    common.add_argument("--tau", type=int, help="correlation window (trading days)")
    common.add_argument("--k", type=int, help="number of market states")
    common.add_argument("--method", choices=agg.METHODS, help="aggregation for the relevance mask")
    common.add_argument("--runs", type=int, help="surrogate trainings per selection")
    common.add_argument("--epochs", type=int, help="surrogate training epochs")
    common.add_argument("--width-divisor", dest="width_divisor", type=int,
                        help="divide every hidden layer width of the surrogate")
    common.add_argument("--jobs", type=int, help="parallel surrogate trainings")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="marketstates", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in list(STAGES) + ["pipeline"]:
        p = sub.add_parser(name, parents=[common])
        if name == "changepoint":
            p.add_argument("--curve", help="CSV of values to scan instead of the aggregates file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "out", "prices", "sector_map", "n", "tau", "k", "method", "runs",
                    "epochs", "width_divisor", "jobs")
    }
    try:
        cfg = build_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run_subcommand(args.command, cfg, curve=getattr(args, "curve", None))


if __name__ == "__main__":
    sys.exit(main())
