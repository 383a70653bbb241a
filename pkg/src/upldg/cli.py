"""Command-line entry point: ``upldg <command> [--config FILE] [--set key=value ...] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, reference
from .averaging import VARIANTS
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, from_flat, load_config, parse_overrides
from .data import export_table
from .metrics import feature_dump, top1_accuracy, write_csv
from .nn import predict
from .reports import build_manifest, emit_reports, read_manifest, write_manifest

log = logging.getLogger("upldg")


def _finish(command, config, out: Path, options, started, results=None, trials=(), extra_files=None,
            checkpoints=False, extra=None):
    manifest = build_manifest(command, config, options, {"total": time.perf_counter() - started})
    if extra:
        manifest.update(extra)
    files = emit_reports(results, manifest, out, trials, gate_logs=config.gate_logs, checkpoints=checkpoints)
    if extra_files:
        manifest = read_manifest(out / "manifest.json")
        manifest["outputs"].update(extra_files)
        write_manifest(out / "manifest.json", manifest)
    return files


def cmd_gen_data(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    domains = harness.build_benchmark(config)
    export_table(out / "benchmark.csv", domains)
    print(f"wrote {sum(len(d) for d in domains)} rows for {len(domains)} domains to {out / 'benchmark.csv'}")
    _finish("gen-data", config, out, options, started, extra_files={"data": "benchmark.csv"})


def cmd_train(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    row, trials = harness.run_trials(config, gate_log=config.gate_logs)
    table = harness.ResultsTable([row])
    _finish("train", config, out, options, started, table, trials, checkpoints=True)
    print(f"{row.target} {row.method}: {row.mean:.2f} +/- {row.std:.2f} over seeds {list(config.seeds)}")


def cmd_evaluate(config: ExperimentConfig, out: Path, options: dict):
    spec, params, _ = load_checkpoint(options["checkpoint"])
    domains = harness.build_benchmark(config)
    if options.get("domain"):
        domains = [d for d in domains if d.domain_id == options["domain"]]
        if not domains:
            raise SystemExit(f"no domain {options['domain']!r} in the data")
    rows = []
    for d in domains:
        labelled = d.y >= 0
        if not labelled.any():
            continue
        acc = top1_accuracy(predict(spec, params, d.x[labelled]), d.y[labelled])
        rows.append((d.domain_id, acc))
        print(f"{d.domain_id}: {acc:.2f}")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "evaluation.csv", ("domain", "accuracy"), rows)
    if options.get("features"):
        feature_dump(spec, params, domains, options["features"])


def cmd_grid_search(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    best, scores = harness.grid_search_eta(config, options.get("values"))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eta_grid.csv", ("eta", "mean_val_acc"), scores)
    for eta, acc in scores:
        print(f"eta={eta:g}: val {acc:.2f}")
    print(f"best eta: {best:g}")
    _finish("grid-search", config, out, options, started, extra_files={"eta_grid": "eta_grid.csv"},
            extra={"best_eta": best, "reference_optimal_eta": reference.OPTIMAL_ETA})


def cmd_ablate_mu(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    rows = harness.ablate_mu(config, options.get("values"))
    values = options.get("values") or config.mu_values
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "mu_sweep.csv", ("mu", "mean_acc", "std_acc", "reference_acc"),
              [(mu, r.mean, r.std, reference.MU_SWEEP_PACS.get(mu)) for mu, r in zip(values, rows)])
    for mu, r in zip(values, rows):
        print(f"mu={mu}: {r.mean:.2f} +/- {r.std:.2f}")
    _finish("ablate-mu", config, out, options, started, extra_files={"mu_sweep": "mu_sweep.csv"})


def ablate_ma_table(config: ExperimentConfig) -> list[list]:
    """Seven-variant accuracies per seed, plus a mean row."""
    domains = harness.build_benchmark(config)
    rows = []
    for s in config.seeds:
        trial = harness.run_single(config, s, domains)
        _, target = harness.leave_one_domain_out(domains, config.target, s, config.train.labels_per_class,
                                                 config.train.train_fraction)
        accs = harness.ablate_ma_variants(trial.spec, trial.result.triple, target)
        rows.append([str(s)] + [accs[v] for v in VARIANTS])
    mean = np.mean(np.array([r[1:] for r in rows], dtype=np.float64), axis=0)
    rows.append(["mean"] + [float(m) for m in mean])
    return rows


def cmd_ablate_ma(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    rows = ablate_ma_table(config)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ma_variants.csv", ("seed",) + VARIANTS, rows)
    print("seed  " + "  ".join(f"{v:>9}" for v in VARIANTS))
    for r in rows:
        print(f"{r[0]:>4}  " + "  ".join(f"{a:9.2f}" for a in r[1:]))
    _finish("ablate-ma", config, out, options, started, extra_files={"ma_variants": "ma_variants.csv"},
            extra={"reference_pacs": reference.MA_VARIANTS_PACS})


def cmd_timing(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    rows = harness.measure_mc_overhead(config, options.get("values"), timed=options.get("iterations") or 50)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "timing.csv", ("mc_passes", "ms_per_iteration", "reference_ms"),
              [(r.mc_passes, r.ms_per_iteration, r.reference_ms) for r in rows])
    for r in rows:
        print(f"N={r.mc_passes}: {r.ms_per_iteration:.3f} ms/iter")
    _finish("timing", config, out, options, started, extra_files={"timing": "timing.csv"})


def cmd_report(config: ExperimentConfig, out: Path, options: dict):
    started = time.perf_counter()
    table, trials = harness.run_benchmark(config, gate_log=config.gate_logs)
    _finish("report", config, out, options, started, table, trials)
    methods = table.methods()
    print("target        " + "  ".join(f"{m:>14}" for m in methods))
    for t in dict.fromkeys(r.target for r in table.rows):
        cells = {r.method: r for r in table.rows if r.target == t}
        print(f"{t:<12}  " + "  ".join(f"{cells[m].mean:7.2f}+/-{cells[m].std:5.2f}" for m in methods))
    print(f"{'average':<12}  " + "  ".join(f"{table.average(m):14.2f}" for m in methods))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid-search": cmd_grid_search,
    "ablate-ma": cmd_ablate_ma,
    "ablate-mu": cmd_ablate_mu,
    "timing": cmd_timing,
    "report": cmd_report,
}


def replay(manifest_path, out_dir=None) -> Path:
    """Re-run the command recorded in a manifest with its resolved config."""
    manifest = read_manifest(manifest_path)
    config = from_flat(manifest["config"])
    out = Path(out_dir) if out_dir else config.resolved_output_dir()
    COMMANDS[manifest["command"]](config, out, manifest.get("options", {}))
    return out


def _values(text, kind):
    if text is None:
        return None
    return [kind(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upldg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (default: output_dir key, $UPLDG_OUTPUT_ROOT, ./runs)")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--domain")
            p.add_argument("--features", help="also dump penultimate features to this CSV")
        if name in ("grid-search", "ablate-mu", "timing"):
            p.add_argument("--values", help="comma-separated sweep values")
        if name == "timing":
            p.add_argument("--iterations", type=int, default=50, help="timed iterations per value")
        if name == "report":
            p.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a manifest")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "replay", None):
            out = replay(args.replay, args.out)
            print(f"replayed {args.replay} into {out}")
            return 0
        config = load_config(args.config, parse_overrides(args.set))
        out = Path(args.out) if args.out else config.resolved_output_dir()
        options: dict = {}
        if args.command == "evaluate":
            options = {"checkpoint": args.checkpoint, "domain": args.domain, "features": args.features}
        elif args.command in ("grid-search", "ablate-mu", "timing"):
            kind = float if args.command == "grid-search" else int
            options["values"] = _values(args.values, kind)
            if args.command == "timing":
                options["iterations"] = args.iterations
        COMMANDS[args.command](config, out, options)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
