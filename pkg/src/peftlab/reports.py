"""Plot-ready CSV/JSON emission for one or many runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .training import RunReport


def write_run_report(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    """Single-run artifacts: report JSON plus a step/loss/metric history CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    history_path = out / "history.csv"
    with open(history_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "metric", "trainable_count"])
        for row in report.history:
            writer.writerow([row["step"], row["loss"], row["metric"],
                             row["trainable_count"]])
    return {"report": report_path, "history": history_path}


def emit_reports(reports: list[RunReport], out_dir: str | Path) -> dict[str, Path]:
    """Aggregate artifacts across runs.

    per_layer_selection.csv: selected fraction of the att/mlp pools per block.
    budget_vs_metric.csv: one row per run, sorted by budget ascending.
    step_size_sweep.csv: one row per run keyed by selection step size.
    """
    if not reports:
        raise ValueError("emit_reports needs at least one run report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    path = out / "per_layer_selection.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "layer", "att_selected", "att_pool", "att_fraction",
                         "mlp_selected", "mlp_pool", "mlp_fraction"])
        for i, rep in enumerate(reports):
            for row in rep.per_layer_selection:
                writer.writerow([_run_id(rep, i), row["layer"],
                                 row["att_selected"], row["att_pool"], row["att_fraction"],
                                 row["mlp_selected"], row["mlp_pool"], row["mlp_fraction"]])
    paths["per_layer_selection"] = path

    path = out / "budget_vs_metric.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["beta", "kind", "seed", "steps", "metric_name", "final_metric",
                         "adapter_params", "selected_params", "budget_ceiling"])
        for rep in sorted(reports, key=lambda r: (r.beta, r.kind, r.seed)):
            writer.writerow([rep.beta, rep.kind, rep.seed, rep.steps, rep.metric_name,
                             rep.final_metric, rep.trainable_counts.get("adapter", 0),
                             rep.trainable_counts.get("backbone_selected", 0),
                             rep.budget_ceiling if rep.budget_ceiling is not None else ""])
    paths["budget_vs_metric"] = path

    path = out / "step_size_sweep.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step_size", "rounds", "seed", "beta", "final_metric"])
        for rep in reports:
            step = rep.step_size if rep.step_size is not None else "single"
            writer.writerow([step, len(rep.round_steps), rep.seed, rep.beta,
                             rep.final_metric])
    paths["step_size_sweep"] = path
    return paths


def _run_id(report: RunReport, index: int) -> str:
    return f"{index}:{report.kind}:seed{report.seed}"
