"""Writing results tables, per-run metrics, calibration series, gate logs and manifests.

Output directory layout::

    results.csv                 target,method,mean_acc,std_acc,n (+ one average row per method)
    manifest.json               resolved config, seeds, version, timings, output paths
    metrics/<run>.csv           per-epoch metrics
    series/<run>.csv            mean_uncertainty,mean_ece sorted by uncertainty
    gatelogs/<run>.csv          example_id,pseudo_label,confidence,certainty,selected
    checkpoints/<run>_<which>.ckpt   best / last / ema / avg parameters

``<run>`` is ``<target>_<method>_seed<k>``. Floats are written with ``repr``
so identical runs give byte-identical CSVs.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from . import __version__
from .averaging import model_average
from .checkpoint import save_checkpoint
from .metrics import GATE_LOG_HEADER, write_csv, write_metrics_csv, write_series_csv


class ReportError(OSError):
    pass


def run_name(trial) -> str:
    return f"{trial.target}_{trial.method}_seed{trial.seed}"


def write_results_csv(path, results) -> Path:
    from .harness import RESULTS_HEADER

    return write_csv(path, RESULTS_HEADER, results.csv_rows() if results is not None else [])


def _ensure_dir(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"output directory {out} is not writable: {exc}") from exc
    return out


def emit_reports(results, manifest: dict, out_dir, trials: Sequence = (), *, gate_logs: bool = False,
                 checkpoints: bool = False) -> dict[str, str]:
    """Write every report file; returns ``{label: relative path}`` (also recorded in the manifest)."""
    out = _ensure_dir(Path(out_dir))
    files = {"results": "results.csv"}
    write_results_csv(out / "results.csv", results)
    for t in trials:
        name = run_name(t)
        files[f"metrics:{name}"] = f"metrics/{name}.csv"
        write_metrics_csv(out / files[f"metrics:{name}"], t.result.history)
        if t.collector.batch_variances:
            files[f"series:{name}"] = f"series/{name}.csv"
            write_series_csv(out / files[f"series:{name}"], t.collector.calibration_series())
        if gate_logs and t.collector.gate_log:
            files[f"gatelog:{name}"] = f"gatelogs/{name}.csv"
            write_csv(out / files[f"gatelog:{name}"], GATE_LOG_HEADER, t.collector.gate_log)
        if checkpoints:
            triple = t.result.triple
            avg = model_average(triple)
            for which, params in (("best", triple.best), ("last", triple.last), ("ema", triple.ema), ("avg", avg)):
                rel = f"checkpoints/{name}_{which}.ckpt"
                save_checkpoint(out / rel, t.result.spec, params, {"run": name, "checkpoint": which})
                files[f"checkpoint:{name}:{which}"] = rel
    manifest = dict(manifest)
    manifest.setdefault("artifact_version", __version__)
    manifest["outputs"] = files
    write_manifest(out / "manifest.json", manifest)
    return files


def build_manifest(command: str, config, options: dict | None = None, timings: dict | None = None) -> dict:
    return {
        "artifact_version": __version__,
        "command": command,
        "options": dict(options or {}),
        "config": config.to_flat(),
        "seeds": list(config.seeds),
        "timings_s": dict(timings or {}),
    }


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
