"""Command-line surface tying the lab together.

Subcommands: pretrain, adapt, baseline, transfer-mask, eval, sweep,
selftest, report. A JSON --config file may carry {"task": {...},
"train": {...}, "backbone": {...}} sections; explicit flags win over the
file. Exit codes: 0 ok, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .experiments import (
    MODE_ADAPT,
    MODE_BASELINE,
    MODE_PRETRAIN,
    MODE_TRANSFER,
    RunJob,
    run_jobs,
)
from .gradcheck import TOLERANCE, check_all_ops
from .reports import emit_reports, write_run_report
from .selection import CRITERIA
from .serialization import (
    export_delta,
    load_checkpoint,
    mask_from_delta,
    save_checkpoint,
)
from .tasks import TASK_NAMES, TaskSpec, task_preset
from .training import BASELINE_KINDS, RunReport, TaskData, TrainConfig, evaluate

BUDGET_GRID = (0.01, 0.02, 0.05, 0.10, 0.15, 0.20)
DIM_GRID = (2, 4, 8, 16, 32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peftlab",
        description="Budgeted adaptation lab for frozen toy vision transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--task", default="seg-target-a",
                       help=f"task preset, one of {', '.join(TASK_NAMES)}")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--step-size", type=int)
        p.add_argument("--criterion", choices=CRITERIA)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--out", type=Path, required=True)
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True,
                           help="base checkpoint produced by `peftlab pretrain`")

    p = sub.add_parser("pretrain", help="train the source backbone from scratch")
    common(p, checkpoint=False)
    p.set_defaults(task="seg-source", steps_default=3000)

    p = sub.add_parser("adapt", help="adapt a frozen checkpoint under a budget")
    common(p)
    p.add_argument("--adapter-style",
                   choices=("sequential_residual", "parallel_scaled"))
    p.add_argument("--single-shot", action="store_true",
                   help="one selection round at step 1 instead of the schedule")

    p = sub.add_parser("baseline", help="reference runs with components disabled")
    common(p)
    p.add_argument("--kind", choices=BASELINE_KINDS, required=True)

    p = sub.add_parser("transfer-mask", help="reuse a mask selected on another task")
    common(p)
    p.add_argument("--from-delta", type=Path, required=True,
                   help="delta file whose mask to import")

    p = sub.add_parser("eval", help="evaluate a checkpoint (optionally + delta)")
    p.add_argument("--config", type=Path)
    p.add_argument("--task", default="seg-target-a")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--delta", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sweep", help="grid experiments mirroring the ablations")
    p.add_argument("axis", choices=("budget", "dim", "step-size", "criterion"))
    common(p)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("selftest", help="gradient checks and invariant suite")
    p.add_argument("--draws", type=int, default=20)

    p = sub.add_parser("report", help="aggregate run reports into CSVs")
    p.add_argument("--runs", type=Path, nargs="+", required=True,
                   help="directories containing report.json files")
    p.add_argument("--out", type=Path, required=True)

    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"task", "train", "backbone"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return cfg


def _task_spec(args, file_cfg: dict) -> TaskSpec:
    overrides = dict(file_cfg.get("task", {}))
    name = overrides.pop("preset", args.task)
    return task_preset(name, seed=overrides.pop("seed", args.seed), **overrides)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    fields = dict(file_cfg.get("train", {}))
    for flag, key in (("steps", "steps"), ("beta", "beta"), ("rho", "rho"),
                      ("step_size", "step_size"), ("criterion", "criterion"),
                      ("batch_size", "batch_size"), ("lr", "lr"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            fields[key] = value
    if getattr(args, "adapter_style", None):
        fields["adapter_style"] = args.adapter_style
    if getattr(args, "single_shot", False):
        fields["single_shot_selection"] = True
    fields.setdefault("steps", getattr(args, "steps_default", 1000))
    fields.setdefault("seed", args.seed)
    return TrainConfig(**fields)


def _backbone_config(file_cfg: dict, task: TaskSpec) -> BackboneConfig:
    fields = dict(file_cfg.get("backbone", {}))
    fields.setdefault("image_size", task.image_size)
    fields.setdefault("head_kind", task.label_kind)
    if task.label_kind == "segmentation":
        fields.setdefault("num_classes", task.num_classes)
    return BackboneConfig(**fields)


def _finish_run(out: Path, result: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport.from_dict(result["report"])
    write_run_report(report, out)
    print(json.dumps({"kind": report.kind, "final_metric": report.final_metric,
                      "metric": report.metric_name,
                      "trainable": report.trainable_counts}, indent=2))


def _cmd_pretrain(args) -> int:
    file_cfg = _load_config_file(args.config)
    task = _task_spec(args, file_cfg)
    backbone = _backbone_config(file_cfg, task)
    config = _train_config(args, file_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    job = RunJob(label="pretrain", mode=MODE_PRETRAIN, task=task.to_dict(),
                 config=config.to_dict(), backbone=backbone.to_dict(),
                 out_checkpoint=str(out / "base.ckpt"))
    result = run_jobs([job], workers=1)[0]
    _finish_run(out, result)
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _run_single(args, mode: str, **job_kw) -> int:
    file_cfg = _load_config_file(args.config)
    task = _task_spec(args, file_cfg)
    config = _train_config(args, file_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    job = RunJob(label=args.command, mode=mode, task=task.to_dict(),
                 config=config.to_dict(), checkpoint=str(args.checkpoint),
                 out_delta=str(out / "adapted.delta"), **job_kw)
    result = run_jobs([job], workers=1)[0]
    _finish_run(out, result)
    print(f"delta: {result['delta']}")
    return 0


def _cmd_adapt(args) -> int:
    return _run_single(args, MODE_ADAPT)


def _cmd_baseline(args) -> int:
    return _run_single(args, MODE_BASELINE, baseline_kind=args.kind)


def _cmd_transfer(args) -> int:
    manifest = mask_from_delta(args.from_delta)
    return _run_single(args, MODE_TRANSFER, mask_manifest=manifest)


def _cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    task = _task_spec(args, file_cfg)
    ckpt = load_checkpoint(args.checkpoint)
    if args.delta is not None:
        from .serialization import apply_delta
        model, _ = apply_delta(ckpt, args.delta)
    else:
        model = ckpt.to_model()
    data = TaskData.from_task(task)
    metric = evaluate(model, data.val_images, data.val_labels,
                      data.label_kind, data.num_classes)
    payload = {"task": args.task, "metric_name": "miou" if data.label_kind ==
               "segmentation" else "rmse", "metric": metric}
    print(json.dumps(payload, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(payload, indent=2))
    return 0


def _sweep_jobs(args, task: TaskSpec, config: TrainConfig, seeds: list[int]) -> list[RunJob]:
    jobs = []

    def job(label, cfg, mode=MODE_ADAPT, **kw):
        jobs.append(RunJob(label=label, mode=mode, task=task.to_dict(),
                           config=cfg.to_dict(), checkpoint=str(args.checkpoint), **kw))

    base = config.to_dict()
    for seed in seeds:
        if args.axis == "budget":
            for beta in BUDGET_GRID:
                cfg = TrainConfig.from_dict({**base, "beta": beta, "seed": seed})
                job(f"beta{beta}-seed{seed}", cfg)
        elif args.axis == "dim":
            for dim in DIM_GRID:
                cfg = TrainConfig.from_dict({**base, "adapter_dim": dim, "seed": seed,
                                             "rho": 1.0, "beta": 1.0})
                job(f"dim{dim}-seed{seed}", cfg, mode=MODE_BASELINE,
                    baseline_kind="external_only")
        elif args.axis == "step-size":
            cfg = TrainConfig.from_dict({**base, "seed": seed,
                                         "single_shot_selection": True})
            job(f"single-seed{seed}", cfg)
            steps = cfg.steps
            for s in sorted({max(1, steps // 10), max(1, steps // 5), max(1, steps // 2)}):
                cfg = TrainConfig.from_dict({**base, "step_size": s, "seed": seed})
                job(f"s{s}-seed{seed}", cfg)
        else:
            for criterion in CRITERIA:
                cfg = TrainConfig.from_dict({**base, "criterion": criterion,
                                             "seed": seed})
                job(f"{criterion}-seed{seed}", cfg)
    return jobs


def _cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    task = _task_spec(args, file_cfg)
    config = _train_config(args, file_cfg)
    seeds = [int(s) for s in str(args.seeds).split(",") if s != ""]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = _sweep_jobs(args, task, config, seeds)
    results = run_jobs(jobs, workers=args.workers)
    reports = []
    for job, result in zip(jobs, results):
        report = RunReport.from_dict(result["report"])
        reports.append(report)
        write_run_report(report, out / "runs" / job.label)
    paths = emit_reports(reports, out)
    print(json.dumps({name: str(p) for name, p in paths.items()}, indent=2))
    return 0


def _cmd_selftest(args) -> int:
    failures = 0
    print(f"gradient checks ({args.draws} draws/op, tolerance {TOLERANCE:g}):")
    for op, err in check_all_ops(draws=args.draws).items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        if err > TOLERANCE:
            failures += 1
        print(f"  {op:24s} max rel err {err:.3e}  {status}")

    from .adapters import AdapterConfig, attach_adapters
    from .backbone import build_backbone

    cfg = BackboneConfig(image_size=(16, 16), patch_size=4, embed_dim=8,
                         num_blocks=2, num_heads=2, mlp_ratio=2, num_classes=3)
    plain = build_backbone(cfg, seed=0)
    adapted = build_backbone(cfg, seed=0)
    attach_adapters(adapted, AdapterConfig(middle_dim=2), seed=0)
    rng = np.random.default_rng(0)
    identical = all(
        adapted.forward(batch).data.tobytes() == plain.forward(batch).data.tobytes()
        for batch in (rng.random((2, 16, 16, 3), dtype=np.float32) for _ in range(5)))
    print(f"  identity-at-init        {'ok' if identical else 'FAIL'}")
    failures += 0 if identical else 1

    from .selection import rank_select
    ok = True
    for trial in range(50):
        scores = rng.integers(0, 5, size=200).astype(float)
        selected = rng.random(200) < 0.25
        quota = int(rng.integers(0, 60))
        expected = [i for _, i in sorted(
            (-s, i) for i, s in enumerate(scores) if not selected[i])[:quota]]
        if rank_select(scores, selected, quota).tolist() != expected:
            ok = False
            break
    print(f"  rank-select vs oracle   {'ok' if ok else 'FAIL'}")
    failures += 0 if ok else 1

    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / "t.ckpt", plain.store, cfg)
        loaded = load_checkpoint(path)
        round_ok = all(loaded.arrays[n].tobytes() == plain.store[n].data.tobytes()
                       for n in plain.store.names())
    print(f"  checkpoint roundtrip    {'ok' if round_ok else 'FAIL'}")
    failures += 0 if round_ok else 1

    print("selftest:", "PASS" if failures == 0 else f"FAIL ({failures})")
    return 0 if failures == 0 else 1


def _cmd_report(args) -> int:
    reports = []
    for run_dir in args.runs:
        for path in sorted(Path(run_dir).rglob("report.json")):
            reports.append(RunReport.from_dict(json.loads(path.read_text())))
    if not reports:
        raise FileNotFoundError("no report.json files found under --runs")
    paths = emit_reports(reports, args.out)
    print(json.dumps({name: str(p) for name, p in paths.items()}, indent=2))
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "baseline": _cmd_baseline,
    "transfer-mask": _cmd_transfer,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "selftest": _cmd_selftest,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # run failure -> exit 1 with diagnostic
        print(f"peftlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
