"""Budgeted adaptation of a frozen backbone, end to end.

The loop trains adapters + head densely while per-parameter gradient
magnitudes accumulate; at scheduled rounds the selection engine promotes
top-scored backbone scalars into the trainable mask. Unselected backbone
parameters are never touched by the optimizer, so they stay bit-identical
to the loaded checkpoint. Baselines reuse the same loop with components
switched off.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from . import adapters as adapters_mod
from . import autodiff as ad
from .adapters import AdapterConfig, ConfigurationError
from .backbone import BackboneConfig, DenseViT, build_backbone
from .optim import MaskedAdamW, make_optimizer
from .selection import (
    CRITERION_GRADIENT,
    SelectionEngine,
    SelectionMask,
    SelectionPool,
    SelectionSchedule,
)
from .store import (
    BACKBONE_GROUPS,
    GROUP_ADAPTER,
    GROUP_HEAD,
    ParameterStore,
)
from .tasks import TaskSpec, materialize, miou, rmse

BASELINE_KINDS = ("frozen", "full_finetune", "external_only", "internal_only",
                  "adaptformer_style")


class TrainingDiverged(RuntimeError):
    pass


class BudgetViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class BudgetPlan:
    beta: float
    rho: float
    total_params: int
    beta_e: float
    beta_i: float
    external_budget: int
    internal_budget: int
    ceiling: int

    @classmethod
    def create(cls, beta: float, rho: float, total_params: int) -> "BudgetPlan":
        if not 0.0 <= beta <= 1.0:
            raise ConfigurationError(f"beta must be in [0, 1], got {beta}")
        if not 0.0 <= rho <= 1.0:
            raise ConfigurationError(f"rho must be in [0, 1], got {rho}")
        beta_e = rho * beta
        beta_i = beta - beta_e  # exact complement, so beta_e + beta_i == beta
        return cls(beta=beta, rho=rho, total_params=total_params,
                   beta_e=beta_e, beta_i=beta_i,
                   external_budget=int(beta_e * total_params),
                   internal_budget=int(beta_i * total_params),
                   ceiling=int(beta * total_params))


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    optimizer: str = "adamw"
    seed: int = 0
    beta: float = 0.1
    rho: float = 0.5
    step_size: int | None = None
    single_shot_selection: bool = False
    criterion: str = CRITERION_GRADIENT
    adapter_style: str = adapters_mod.STYLE_SEQUENTIAL
    adapter_scale: float = 0.1
    adapter_dim: int | None = None
    eval_every: int | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def resolved_step_size(self) -> int:
        return self.step_size if self.step_size is not None else max(50, self.steps // 5)

    def schedule(self) -> SelectionSchedule:
        if self.single_shot_selection:
            return SelectionSchedule.single_shot(self.steps)
        return SelectionSchedule.from_step_size(self.steps, self.resolved_step_size())

    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.steps)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TaskData:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    label_kind: str  # "segmentation" | "regression"
    num_classes: int

    @classmethod
    def from_task(cls, spec: TaskSpec) -> "TaskData":
        xt, yt = materialize(spec, "train")
        xv, yv = materialize(spec, "val")
        return cls(xt, yt, xv, yv, spec.label_kind, spec.num_classes)

    @classmethod
    def from_arrays(cls, x_train, y_train, x_val, y_val, label_kind, num_classes):
        return cls(np.asarray(x_train), np.asarray(y_train), np.asarray(x_val),
                   np.asarray(y_val), label_kind, num_classes)


@dataclass
class RunReport:
    kind: str
    seed: int
    steps: int
    beta: float
    rho: float
    metric_name: str
    final_metric: float
    final_loss: float
    history: list[dict] = field(default_factory=list)
    trainable_counts: dict[str, int] = field(default_factory=dict)
    budget_ceiling: int | None = None
    total_backbone_params: int = 0
    adapter_middle_dim: int | None = None
    step_size: int | None = None
    round_steps: list[int] = field(default_factory=list)
    criterion: str | None = None
    per_layer_selection: list[dict] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def total_trainable(self) -> int:
        return sum(self.trainable_counts.values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


@dataclass
class AdaptationResult:
    model: DenseViT
    mask: SelectionMask | None
    report: RunReport


def clone_model(base: DenseViT) -> DenseViT:
    """Independent copy sharing nothing with the original."""
    if base.adapter_config is not None:
        raise ConfigurationError("clone_model expects a backbone without adapters")
    model = build_backbone(base.config, seed=0)
    model.store.restore(base.store.snapshot())
    return model


def collect_gradients(store: ParameterStore) -> dict[str, np.ndarray]:
    """Gradient per parameter; parameters unreached by the loss get zeros."""
    out = {}
    for name, tensor in store.items():
        out[name] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    return out


def compute_loss(model: DenseViT, images: np.ndarray, labels: np.ndarray,
                 label_kind: str) -> ad.Tensor:
    logits = model.forward(images)
    if label_kind == "segmentation":
        return ad.softmax_cross_entropy(logits, labels)
    pred = ad.reshape(logits, logits.shape[:-1])
    return ad.mean_squared_error(pred, labels)


def masked_step(model: DenseViT, images: np.ndarray, labels: np.ndarray,
                label_kind: str, optimizer, t: int) -> tuple[float, dict[str, np.ndarray]]:
    """One forward/backward/update; returns the loss and all gradients.

    Gradients are computed for every parameter (scoring needs them); the
    optimizer applies updates only to its dense and mask-selected entries.
    """
    loss = compute_loss(model, images, labels, label_kind)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {t}")
    model.store.zero_grads()
    loss.backward()
    grads = collect_gradients(model.store)
    optimizer.step(grads, t)
    return value, grads


def evaluate(model: DenseViT, images: np.ndarray, labels: np.ndarray,
             label_kind: str, num_classes: int) -> float:
    """mIoU for segmentation, RMSE for regression; deterministic."""
    if images.shape[0] == 0:
        raise ValueError("evaluate: empty validation set")
    pred = model.predict(images)
    if label_kind == "segmentation":
        return miou(pred, labels, num_classes)
    return rmse(pred, labels)


def _backbone_param_total(store: ParameterStore) -> int:
    return store.count(*BACKBONE_GROUPS)


def _run_loop(model: DenseViT, data: TaskData, config: TrainConfig, *,
              dense_names: list[str], engine: SelectionEngine | None,
              fixed_mask: SelectionMask | None, plan: BudgetPlan | None,
              kind: str) -> AdaptationResult:
    if config.steps < 1:
        raise ConfigurationError("training runs need steps >= 1")
    store = model.store
    opt_mask = engine.mask if engine is not None else fixed_mask
    optimizer = make_optimizer(config.optimizer, store, dense_names, opt_mask,
                               lr=config.lr, weight_decay=config.weight_decay,
                               warmup_steps=config.warmup_steps())
    rng = np.random.default_rng([config.seed, 0xBA7C])
    n_train = data.train_images.shape[0]
    eval_every = config.eval_every or config.resolved_step_size()

    def check_budget(step):
        if plan is None:
            return
        used = store.count(GROUP_ADAPTER) + (opt_mask.count if opt_mask else 0)
        if used > plan.ceiling:
            raise BudgetViolation(
                f"step {step}: trainable backbone-side count {used} exceeds "
                f"ceiling {plan.ceiling} (beta={plan.beta})")

    check_budget(0)
    started = time.perf_counter()
    history: list[dict] = []
    loss_value = float("nan")
    # One BLAS thread per run: small-matrix gemms gain nothing from
    # threading here, worker spin-waits fight the interpreter, and a fixed
    # thread count keeps reductions bit-stable across machines.
    with threadpool_limits(limits=1, user_api="blas"):
        for t in range(1, config.steps + 1):
            batch = rng.integers(0, n_train, size=config.batch_size)
            loss_value, grads = masked_step(
                model, data.train_images[batch], data.train_labels[batch],
                data.label_kind, optimizer, t)
            if engine is not None:
                engine.observe(grads, t)
                if engine.is_round_step(t):
                    engine.run_round(t)
                    check_budget(t)
            if t % eval_every == 0 or t == config.steps:
                metric = evaluate(model, data.val_images, data.val_labels,
                                  data.label_kind, data.num_classes)
                trainable = (store.count(GROUP_ADAPTER, GROUP_HEAD)
                             + (opt_mask.count if opt_mask else 0)
                             + (store.count(*BACKBONE_GROUPS) if kind == "full_finetune" else 0))
                history.append({"step": t, "loss": loss_value, "metric": metric,
                                "trainable_count": trainable})

    mask_for_report = opt_mask if opt_mask is not None else SelectionMask(SelectionPool(store))
    counts = {
        "adapter": store.count(GROUP_ADAPTER),
        "head": store.count(GROUP_HEAD),
        "backbone_selected": opt_mask.count if opt_mask else 0,
        "backbone_dense": store.count(*BACKBONE_GROUPS) if kind == "full_finetune" else 0,
    }
    adapter_dim = model.adapter_config.middle_dim if model.adapter_config else None
    report = RunReport(
        kind=kind,
        seed=config.seed,
        steps=config.steps,
        beta=config.beta,
        rho=config.rho,
        metric_name="miou" if data.label_kind == "segmentation" else "rmse",
        final_metric=history[-1]["metric"],
        final_loss=loss_value,
        history=history,
        trainable_counts=counts,
        budget_ceiling=plan.ceiling if plan else None,
        total_backbone_params=_backbone_param_total(store),
        adapter_middle_dim=adapter_dim,
        step_size=(engine.schedule.step_size if engine else config.resolved_step_size()),
        round_steps=list(engine.schedule.round_steps) if engine else [],
        criterion=engine.criterion if engine else None,
        per_layer_selection=mask_for_report.per_layer_counts(),
        wall_clock_seconds=time.perf_counter() - started,
    )
    return AdaptationResult(model=model, mask=opt_mask, report=report)


def _adapter_config_for(config: TrainConfig, middle_dim: int) -> AdapterConfig:
    if config.adapter_style == adapters_mod.STYLE_PARALLEL:
        return AdapterConfig.parallel(middle_dim, scale=config.adapter_scale)
    return AdapterConfig(middle_dim=middle_dim, style=config.adapter_style,
                         scale=config.adapter_scale)


def run_adaptation(base: DenseViT, data: TaskData, config: TrainConfig, *,
                   external: bool = True, internal: bool = True,
                   imported_mask: dict | None = None,
                   kind: str | None = None) -> AdaptationResult:
    """Adapt a pretrained backbone under the configured parameter budget.

    `external` attaches budget-sized bottleneck adapters; `internal` runs
    progressive selection of backbone weights. An `imported_mask` manifest
    (from another run on an identically shaped backbone) replaces selection
    entirely. The head always trains and is excluded from the budget.
    """
    model = clone_model(base)
    total = _backbone_param_total(model.store)
    plan = BudgetPlan.create(config.beta, config.rho, total)

    if kind is None:
        kind = "adaptation" if (external or internal or imported_mask) else "frozen"

    if external:
        sites = 1 if config.adapter_style == adapters_mod.STYLE_PARALLEL else 2
        if config.adapter_dim is not None:
            middle_dim = config.adapter_dim
        else:
            middle_dim = adapters_mod.solve_middle_dim(
                plan.external_budget, model.config.embed_dim,
                model.config.num_blocks, sites)
        adapter_cfg = _adapter_config_for(config, middle_dim)
        adapters_mod.attach_adapters(model, adapter_cfg, seed=config.seed)
        used = model.store.count(GROUP_ADAPTER)
        if used > plan.external_budget:
            raise ConfigurationError(
                f"adapter parameters {used} exceed external budget {plan.external_budget}")

    engine = None
    fixed_mask = None
    if imported_mask is not None:
        if internal:
            raise ConfigurationError("imported mask replaces internal selection")
        fixed_mask = SelectionMask.from_manifest(SelectionPool(model.store), imported_mask)
        if fixed_mask.count > plan.internal_budget:
            raise ConfigurationError(
                f"imported mask size {fixed_mask.count} exceeds internal budget "
                f"{plan.internal_budget}")
    elif internal:
        engine = SelectionEngine(model.store, plan.internal_budget, config.schedule(),
                                 criterion=config.criterion, seed=config.seed)

    dense_names = model.store.names_in(GROUP_ADAPTER, GROUP_HEAD)
    return _run_loop(model, data, config, dense_names=dense_names, engine=engine,
                     fixed_mask=fixed_mask, plan=plan, kind=kind)


def run_baseline(base: DenseViT, data: TaskData, config: TrainConfig,
                 kind: str) -> AdaptationResult:
    """Reference runs with one or both adaptation components disabled."""
    if kind not in BASELINE_KINDS:
        raise ConfigurationError(f"unknown baseline {kind!r}; expected {BASELINE_KINDS}")
    if kind == "frozen":
        cfg = _replace(config, beta=0.0)
        return run_adaptation(base, data, cfg, external=False, internal=False, kind="frozen")
    if kind == "full_finetune":
        model = clone_model(base)
        dense = model.store.names()
        return _run_loop(model, data, config, dense_names=dense, engine=None,
                         fixed_mask=None, plan=None, kind="full_finetune")
    if kind == "external_only":
        cfg = _replace(config, rho=1.0)
        return run_adaptation(base, data, cfg, external=True, internal=False,
                              kind="external_only")
    if kind == "internal_only":
        cfg = _replace(config, rho=0.0)
        return run_adaptation(base, data, cfg, external=False, internal=True,
                              kind="internal_only")
    # adaptformer_style: parallel scaled side-path beside the MLP, no selection.
    cfg = _replace(config, rho=1.0, adapter_style=adapters_mod.STYLE_PARALLEL)
    return run_adaptation(base, data, cfg, external=True, internal=False,
                          kind="adaptformer_style")


def adapt_with_mask(base: DenseViT, data: TaskData, config: TrainConfig,
                    mask_manifest: dict) -> AdaptationResult:
    """Reuse a mask selected on another task: no re-selection happens."""
    return run_adaptation(base, data, config, external=True, internal=False,
                          imported_mask=mask_manifest, kind="imported_mask")


def pretrain(backbone_config: BackboneConfig, data: TaskData,
             config: TrainConfig) -> AdaptationResult:
    """Full-model training from scratch; produces the base checkpoint."""
    model = build_backbone(backbone_config, seed=config.seed)
    if config.steps == 0:
        metric = evaluate(model, data.val_images, data.val_labels,
                          data.label_kind, data.num_classes)
        report = RunReport(kind="pretrain", seed=config.seed, steps=0,
                           beta=0.0, rho=0.0,
                           metric_name="miou" if data.label_kind == "segmentation" else "rmse",
                           final_metric=metric, final_loss=float("nan"),
                           total_backbone_params=_backbone_param_total(model.store))
        return AdaptationResult(model=model, mask=None, report=report)
    dense = model.store.names()
    return _run_loop(model, data, config, dense_names=dense, engine=None,
                     fixed_mask=None, plan=None, kind="pretrain")


def _replace(config: TrainConfig, **kw) -> TrainConfig:
    d = config.to_dict()
    d.update(kw)
    return TrainConfig.from_dict(d)
