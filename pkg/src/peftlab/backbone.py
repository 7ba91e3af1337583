"""Toy vision transformer for dense prediction.

Patch embedding, pre-norm blocks (attention + MLP), and a per-token
linear head whose logits are replicated to pixel resolution by
nearest-neighbor upsampling. Bottleneck adapters, once attached, hook
into each block after the attention and MLP residual adds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import adapters as adapters_mod
from . import autodiff as ad
from .autodiff import Tensor
from .store import GROUP_ATT, GROUP_HEAD, GROUP_MLP, GROUP_OTHER, ParameterStore

HEAD_KINDS = ("segmentation", "regression")


@dataclass(frozen=True)
class BackboneConfig:
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    head_kind: str = "segmentation"
    num_classes: int = 5

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}")
        if self.num_blocks < 1 or self.mlp_ratio < 1:
            raise ValueError("num_blocks and mlp_ratio must be >= 1")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind == "segmentation" and self.num_classes < 2:
            raise ValueError("segmentation needs num_classes >= 2")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def num_tokens(self) -> int:
        hp, wp = self.grid
        return hp * wp

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.head_kind == "segmentation" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class DenseViT:
    """Backbone + head over a shared ParameterStore."""

    def __init__(self, config: BackboneConfig, store: ParameterStore):
        self.config = config
        self.store = store
        self.adapter_config: adapters_mod.AdapterConfig | None = None

    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        h, w = cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (h, w, cfg.in_channels):
            raise ad.ShapeError("patchify", images.shape, (-1, h, w, cfg.in_channels))
        b = images.shape[0]
        p = cfg.patch_size
        hp, wp = cfg.grid
        x = images.astype(np.float32, copy=False).reshape(b, hp, p, wp, p, cfg.in_channels)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x).reshape(b, hp * wp, p * p * cfg.in_channels)

    def forward(self, images: np.ndarray) -> Tensor:
        """Images (B, H, W, C) in [0, 1] -> dense logits (B, H, W, out)."""
        cfg = self.config
        s = self.store
        patches = Tensor(self.patchify(images))
        x = ad.linear(patches, s["patch_embed.w"], s["patch_embed.b"])
        x = ad.add(x, s["pos_embed"])
        for i in range(cfg.num_blocks):
            x = self._block(i, x)
        x = ad.layer_norm(x, s["final_norm.gamma"], s["final_norm.beta"])
        logits = ad.linear(x, s["head.w"], s["head.b"])
        hp, wp = cfg.grid
        grid = ad.reshape(logits, (images.shape[0], hp, wp, cfg.out_channels))
        return ad.upsample_nearest(grid, cfg.patch_size)

    def _block(self, i: int, x: Tensor) -> Tensor:
        s = self.store
        p = f"block{i}"
        ac = self.adapter_config

        normed = ad.layer_norm(x, s[f"{p}.norm1.gamma"], s[f"{p}.norm1.beta"])
        att = ad.multi_head_attention(
            normed,
            s[f"{p}.att.wq"], s[f"{p}.att.bq"],
            s[f"{p}.att.wk"], s[f"{p}.att.bk"],
            s[f"{p}.att.wv"], s[f"{p}.att.bv"],
            s[f"{p}.att.wo"], s[f"{p}.att.bo"],
            self.config.num_heads)
        u = ad.add(x, att)
        if ac is not None and ac.style == adapters_mod.STYLE_SEQUENTIAL and ac.after_att:
            u = adapters_mod.apply_sequential(s, f"{p}.adapter_att", u)

        normed2 = ad.layer_norm(u, s[f"{p}.norm2.gamma"], s[f"{p}.norm2.beta"])
        hidden = ad.gelu(ad.linear(normed2, s[f"{p}.mlp.w1"], s[f"{p}.mlp.b1"]))
        branch = ad.linear(hidden, s[f"{p}.mlp.w2"], s[f"{p}.mlp.b2"])
        if ac is not None and ac.style == adapters_mod.STYLE_PARALLEL:
            side = adapters_mod.bottleneck_branch(s, f"{p}.adapter_mlp", normed2)
            branch = ad.add(branch, ad.mul(side, ac.scale))
        y = ad.add(u, branch)
        if ac is not None and ac.style == adapters_mod.STYLE_SEQUENTIAL and ac.after_mlp:
            y = adapters_mod.apply_sequential(s, f"{p}.adapter_mlp", y)
        return y

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Class map (B, H, W) for segmentation, depth map for regression."""
        outs = []
        for start in range(0, images.shape[0], batch_size):
            logits = self.forward(images[start:start + batch_size]).data
            if self.config.head_kind == "segmentation":
                outs.append(logits.argmax(axis=-1))
            else:
                outs.append(logits[..., 0])
        return np.concatenate(outs, axis=0)


def build_backbone(config: BackboneConfig, seed: int) -> DenseViT:
    """Deterministic construction: same config and seed give bit-identical stores."""
    rng = np.random.default_rng([seed, 0x0B])
    store = ParameterStore()
    d = config.embed_dim
    patch_dim = config.patch_size * config.patch_size * config.in_channels

    def param(name, arr, group):
        store.add(name, Tensor(arr, requires_grad=True), group)

    param("patch_embed.w", _uniform_fan_in(rng, (patch_dim, d)), GROUP_OTHER)
    param("patch_embed.b", np.zeros(d, dtype=np.float32), GROUP_OTHER)
    param("pos_embed", rng.uniform(-0.02, 0.02, size=(config.num_tokens, d)).astype(np.float32),
          GROUP_OTHER)
    for i in range(config.num_blocks):
        p = f"block{i}"
        param(f"{p}.norm1.gamma", np.ones(d, dtype=np.float32), GROUP_OTHER)
        param(f"{p}.norm1.beta", np.zeros(d, dtype=np.float32), GROUP_OTHER)
        for proj in ("q", "k", "v", "o"):
            param(f"{p}.att.w{proj}", _uniform_fan_in(rng, (d, d)), GROUP_ATT)
            param(f"{p}.att.b{proj}", np.zeros(d, dtype=np.float32), GROUP_ATT)
        param(f"{p}.norm2.gamma", np.ones(d, dtype=np.float32), GROUP_OTHER)
        param(f"{p}.norm2.beta", np.zeros(d, dtype=np.float32), GROUP_OTHER)
        hidden = config.mlp_ratio * d
        param(f"{p}.mlp.w1", _uniform_fan_in(rng, (d, hidden)), GROUP_MLP)
        param(f"{p}.mlp.b1", np.zeros(hidden, dtype=np.float32), GROUP_MLP)
        param(f"{p}.mlp.w2", _uniform_fan_in(rng, (hidden, d)), GROUP_MLP)
        param(f"{p}.mlp.b2", np.zeros(d, dtype=np.float32), GROUP_MLP)
    param("final_norm.gamma", np.ones(d, dtype=np.float32), GROUP_OTHER)
    param("final_norm.beta", np.zeros(d, dtype=np.float32), GROUP_OTHER)
    param("head.w", _uniform_fan_in(rng, (d, config.out_channels)), GROUP_HEAD)
    param("head.b", np.zeros(config.out_channels, dtype=np.float32), GROUP_HEAD)
    return DenseViT(config, store)
