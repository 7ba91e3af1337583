"""Self-contained run descriptions, executable in parallel worker processes.

A RunJob carries everything a fresh process needs (task spec, checkpoint
path, train config, run mode), so seed sweeps can fan out across cores
without sharing state; results come back as plain dicts.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .selection import SelectionMask, SelectionPool
from .serialization import load_checkpoint, export_delta, save_checkpoint
from .tasks import TaskSpec
from .training import (
    AdaptationResult,
    RunReport,
    TaskData,
    TrainConfig,
    adapt_with_mask,
    pretrain,
    run_adaptation,
    run_baseline,
)

MODE_ADAPT = "adapt"
MODE_BASELINE = "baseline"
MODE_TRANSFER = "transfer"
MODE_PRETRAIN = "pretrain"


@dataclass
class RunJob:
    label: str
    mode: str
    task: dict
    config: dict
    checkpoint: str | None = None
    backbone: dict | None = None       # pretrain only
    baseline_kind: str | None = None   # baseline only
    mask_manifest: dict | None = None  # transfer only
    out_checkpoint: str | None = None
    out_delta: str | None = None


def execute_job(job: RunJob) -> dict:
    spec = TaskSpec.from_dict(job.task)
    config = TrainConfig.from_dict(job.config)
    data = TaskData.from_task(spec)

    if job.mode == MODE_PRETRAIN:
        backbone = BackboneConfig.from_dict(job.backbone)
        result = pretrain(backbone, data, config)
    else:
        ckpt = load_checkpoint(job.checkpoint)
        base = ckpt.to_model()
        if job.mode == MODE_ADAPT:
            result = run_adaptation(base, data, config)
        elif job.mode == MODE_BASELINE:
            result = run_baseline(base, data, config, job.baseline_kind)
        elif job.mode == MODE_TRANSFER:
            result = adapt_with_mask(base, data, config, job.mask_manifest)
        else:
            raise ValueError(f"unknown job mode {job.mode!r}")

    out = {"label": job.label, "report": result.report.to_dict(),
           "mask_manifest": result.mask.to_manifest() if result.mask else None}
    if job.out_checkpoint:
        save_checkpoint(job.out_checkpoint, result.model.store, result.model.config,
                        adapter=result.model.adapter_config,
                        mask_manifest=out["mask_manifest"])
        out["checkpoint"] = job.out_checkpoint
    if job.out_delta:
        if job.mode == MODE_PRETRAIN:
            raise ValueError("pretraining has no base to diff against")
        base_ckpt = load_checkpoint(job.checkpoint)
        mask = result.mask
        if mask is None:
            mask = SelectionMask(SelectionPool(result.model.store))
        export_delta(job.out_delta, result.model.store, mask, base_ckpt,
                     result.model.config, result.model.adapter_config)
        out["delta"] = job.out_delta
    return out


def run_jobs(jobs: list[RunJob], workers: int | None = None) -> list[dict]:
    """Execute jobs (in parallel processes when workers > 1), preserving order."""
    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)
    if workers <= 1 or len(jobs) <= 1:
        return [execute_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute_job, jobs))
