"""Optimizers that update only the trainable subset of a parameter store.

Dense groups (adapters, head, or everything under full fine-tuning) get
ordinary updates; backbone pool tensors are touched only at mask-selected
flat indices, and moment state exists only for those entries, so optimizer
memory scales with the budget rather than the model. Newly selected
entries join mid-run with fresh state and their own bias-correction age.
"""

from __future__ import annotations

import numpy as np

from .selection import SelectionMask
from .store import ParameterStore


class _MaskedOptimizer:
    def __init__(self, store: ParameterStore, dense_names: list[str],
                 mask: SelectionMask | None = None, lr: float = 1e-3,
                 warmup_steps: int = 0):
        self.store = store
        self.dense_names = list(dense_names)
        self.mask = mask
        self.lr = lr
        self.warmup_steps = warmup_steps
        overlap = set(self.dense_names) & set(mask.pool.names if mask else [])
        if mask is not None and any(n in overlap for n in self.dense_names):
            raise ValueError("dense names overlap the masked pool")

    def lr_at(self, t: int) -> float:
        if self.warmup_steps > 0 and t < self.warmup_steps:
            return self.lr * t / self.warmup_steps
        return self.lr

    def step(self, grads: dict[str, np.ndarray], t: int) -> None:
        raise NotImplementedError


class MaskedSGD(_MaskedOptimizer):
    """Plain gradient descent on the trainable subset."""

    def step(self, grads: dict[str, np.ndarray], t: int) -> None:
        lr = np.float32(self.lr_at(t))
        for name in self.dense_names:
            self.store[name].data -= lr * grads[name]
        if self.mask is None:
            return
        for name in self.mask.pool.names:
            idx = self.mask.indices(name)
            if idx.size == 0:
                continue
            flat = self.store[name].data.reshape(-1)
            flat[idx] = flat[idx] - lr * grads[name].reshape(-1)[idx]


class MaskedAdamW(_MaskedOptimizer):
    """Adam with decoupled weight decay; decay skips 1-d tensors (norms, biases)."""

    def __init__(self, store, dense_names, mask=None, lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01, warmup_steps=0):
        super().__init__(store, dense_names, mask, lr, warmup_steps)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._dense_state = {
            n: (np.zeros_like(store[n].data), np.zeros_like(store[n].data))
            for n in self.dense_names}
        self._masked_state: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._t = 0

    def masked_state_entries(self) -> int:
        return sum(m.size for m, _, _ in self._masked_state.values())

    def _decay(self, name: str) -> float:
        return self.weight_decay if self.store[name].data.ndim >= 2 else 0.0

    def step(self, grads: dict[str, np.ndarray], t: int) -> None:
        self._t += 1
        lr = np.float32(self.lr_at(t))
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)

        c1 = np.float32(1.0 - self.beta1 ** self._t)
        c2 = np.float32(1.0 - self.beta2 ** self._t)
        for name in self.dense_names:
            g = grads[name]
            m, v = self._dense_state[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + np.float32(self.eps))
            wd = self._decay(name)
            if wd:
                update = update + np.float32(wd) * self.store[name].data
            self.store[name].data -= lr * update

        if self.mask is None:
            return
        for name in self.mask.pool.names:
            idx = self.mask.indices(name)
            if idx.size == 0:
                continue
            state = self._masked_state.get(name)
            if state is None:
                state = (np.zeros(0, np.float32), np.zeros(0, np.float32),
                         np.zeros(0, np.int64))
            m, v, age = state
            if m.size < idx.size:
                grow = idx.size - m.size
                m = np.concatenate([m, np.zeros(grow, np.float32)])
                v = np.concatenate([v, np.zeros(grow, np.float32)])
                age = np.concatenate([age, np.zeros(grow, np.int64)])
            age += 1
            g = grads[name].reshape(-1)[idx].astype(np.float32)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** age).astype(np.float32)
            vhat = v / (1 - b2 ** age).astype(np.float32)
            update = mhat / (np.sqrt(vhat) + np.float32(self.eps))
            flat = self.store[name].data.reshape(-1)
            wd = self._decay(name)
            if wd:
                update = update + np.float32(wd) * flat[idx]
            flat[idx] = flat[idx] - lr * update
            self._masked_state[name] = (m, v, age)


def make_optimizer(kind: str, store, dense_names, mask=None, *, lr, weight_decay,
                   warmup_steps) -> _MaskedOptimizer:
    if kind == "adamw":
        return MaskedAdamW(store, dense_names, mask, lr=lr, weight_decay=weight_decay,
                           warmup_steps=warmup_steps)
    if kind == "sgd":
        return MaskedSGD(store, dense_names, mask, lr=lr, warmup_steps=warmup_steps)
    raise ValueError(f"unknown optimizer {kind!r}")
