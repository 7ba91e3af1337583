"""Residual bottleneck adapters inserted into a frozen backbone.

The default style adds a down-project / ReLU / up-project branch with a
residual connection after the attention and MLP sub-layers of every
block. The up-projection starts at zero, so a freshly attached adapter
is exactly the identity. A parallel style (scaled side path beside the
MLP, attention site unused) is kept for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .store import GROUP_ADAPTER, ParameterStore

STYLE_SEQUENTIAL = "sequential_residual"
STYLE_PARALLEL = "parallel_scaled"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    middle_dim: int
    style: str = STYLE_SEQUENTIAL
    scale: float = 0.1
    after_att: bool = True
    after_mlp: bool = True

    def __post_init__(self):
        if self.middle_dim < 1:
            raise ConfigurationError(f"middle_dim must be >= 1, got {self.middle_dim}")
        if self.style not in (STYLE_SEQUENTIAL, STYLE_PARALLEL):
            raise ConfigurationError(f"unknown adapter style {self.style!r}")
        if self.style == STYLE_PARALLEL and (self.after_att or not self.after_mlp):
            raise ConfigurationError("parallel_scaled attaches beside the MLP only")
        if not (self.after_att or self.after_mlp):
            raise ConfigurationError("adapter needs at least one site per block")

    @classmethod
    def parallel(cls, middle_dim: int, scale: float = 0.1) -> "AdapterConfig":
        return cls(middle_dim=middle_dim, style=STYLE_PARALLEL, scale=scale,
                   after_att=False, after_mlp=True)

    @property
    def sites_per_block(self) -> int:
        return int(self.after_att) + int(self.after_mlp)

    def site_prefixes(self, block: int) -> list[str]:
        out = []
        if self.after_att:
            out.append(f"block{block}.adapter_att")
        if self.after_mlp:
            out.append(f"block{block}.adapter_mlp")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(**d)


def params_per_site(embed_dim: int, middle_dim: int) -> int:
    # w_down (D, d) + b_down (d) + w_up (d, D) + b_up (D)
    return 2 * embed_dim * middle_dim + middle_dim + embed_dim


def adapter_param_count(embed_dim: int, middle_dim: int, num_blocks: int,
                        sites_per_block: int) -> int:
    return num_blocks * sites_per_block * params_per_site(embed_dim, middle_dim)


def solve_middle_dim(budget: int, embed_dim: int, num_blocks: int,
                     sites_per_block: int = 2) -> int:
    """Largest middle dim whose total adapter parameters fit the budget."""
    if budget < 0:
        raise ConfigurationError(f"adapter budget must be >= 0, got {budget}")
    sites = num_blocks * sites_per_block
    minimum = adapter_param_count(embed_dim, 1, num_blocks, sites_per_block)
    if budget < minimum:
        raise ConfigurationError(
            f"adapter budget {budget} below minimum {minimum} "
            f"(middle_dim 1, {sites} sites, width {embed_dim})")
    return (budget // sites - embed_dim) // (2 * embed_dim + 1)


def bottleneck_branch(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    down = ad.linear(x, store[f"{prefix}.w_down"], store[f"{prefix}.b_down"])
    return ad.linear(ad.relu(down), store[f"{prefix}.w_up"], store[f"{prefix}.b_up"])


def apply_sequential(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return ad.add(x, bottleneck_branch(store, prefix, x))


def attach_adapters(model, config: AdapterConfig, seed: int = 0) -> None:
    """Register adapter weights into the model's store and enable the sites.

    Up-projections are zero-initialized, so the model's outputs are
    bit-identical to the un-adapted model until training moves them.
    """
    if model.adapter_config is not None:
        raise ConfigurationError("adapters already attached")
    d = model.config.embed_dim
    mid = config.middle_dim
    rng = np.random.default_rng([seed, 0xADA])
    bound = 1.0 / np.sqrt(d)
    for i in range(model.config.num_blocks):
        for prefix in config.site_prefixes(i):
            w_down = rng.uniform(-bound, bound, size=(d, mid)).astype(np.float32)
            model.store.add(f"{prefix}.w_down", Tensor(w_down, requires_grad=True), GROUP_ADAPTER)
            model.store.add(f"{prefix}.b_down", Tensor(np.zeros(mid, dtype=np.float32),
                                                       requires_grad=True), GROUP_ADAPTER)
            model.store.add(f"{prefix}.w_up", Tensor(np.zeros((mid, d), dtype=np.float32),
                                                     requires_grad=True), GROUP_ADAPTER)
            model.store.add(f"{prefix}.b_up", Tensor(np.zeros(d, dtype=np.float32),
                                                     requires_grad=True), GROUP_ADAPTER)
    model.adapter_config = config
