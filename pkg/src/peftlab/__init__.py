"""Desk-scale lab for budgeted adaptation of frozen vision transformers.

Two complementary mechanisms share one trainable-parameter budget:
bottleneck adapters inserted after each attention/MLP sub-layer, and a
progressively selected subset of backbone weights chosen by accumulated
gradient magnitude. Everything runs on a small numpy autodiff engine so
runs are deterministic and checkpoint deltas stay bit-exact.
"""

from .adapters import AdapterConfig, attach_adapters, solve_middle_dim
from .autodiff import Tensor
from .backbone import BackboneConfig, DenseViT, build_backbone
from .estimators import AdaptedDepthRegressor, AdaptedSegmenter
from .selection import (
    SelectionEngine,
    SelectionMask,
    SelectionPool,
    SelectionSchedule,
)
from .serialization import (
    Checkpoint,
    apply_delta,
    export_delta,
    load_checkpoint,
    mask_from_delta,
    save_checkpoint,
)
from .tasks import TaskSpec, miou, rmse, task_preset
from .training import (
    AdaptationResult,
    BudgetPlan,
    RunReport,
    TaskData,
    TrainConfig,
    adapt_with_mask,
    evaluate,
    pretrain,
    run_adaptation,
    run_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptationResult",
    "AdaptedDepthRegressor",
    "AdaptedSegmenter",
    "AdapterConfig",
    "BackboneConfig",
    "BudgetPlan",
    "Checkpoint",
    "DenseViT",
    "RunReport",
    "SelectionEngine",
    "SelectionMask",
    "SelectionPool",
    "SelectionSchedule",
    "TaskData",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "adapt_with_mask",
    "apply_delta",
    "attach_adapters",
    "build_backbone",
    "evaluate",
    "export_delta",
    "load_checkpoint",
    "mask_from_delta",
    "miou",
    "pretrain",
    "rmse",
    "run_adaptation",
    "run_baseline",
    "save_checkpoint",
    "solve_middle_dim",
    "task_preset",
    "__version__",
]
