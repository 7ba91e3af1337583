"""Named, grouped parameter tensors with snapshot/restore.

The store is the single source of truth for parameter counting: every
scalar belongs to exactly one group, and (name, row-major flat index)
addresses every scalar. Iteration order is insertion order.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

GROUP_ATT = "backbone-att"
GROUP_MLP = "backbone-mlp"
GROUP_OTHER = "backbone-other"
GROUP_ADAPTER = "adapter"
GROUP_HEAD = "head"

BACKBONE_GROUPS = (GROUP_ATT, GROUP_MLP, GROUP_OTHER)
ALL_GROUPS = BACKBONE_GROUPS + (GROUP_ADAPTER, GROUP_HEAD)

Snapshot = dict[str, np.ndarray]


class ParameterStore:
    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in ALL_GROUPS:
            raise ValueError(f"unknown group {group!r} for {name!r}")
        tensor.name = name
        self._entries[name] = tensor
        self._groups[name] = group
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def names_in(self, *groups: str) -> list[str]:
        wanted = set(groups)
        return [n for n, g in self._groups.items() if g in wanted]

    def count(self, *groups: str) -> int:
        """Exact scalar-parameter count, over all groups when none given."""
        if not groups:
            return sum(t.size for t in self._entries.values())
        wanted = set(groups)
        return sum(self._entries[n].size for n, g in self._groups.items() if g in wanted)

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def snapshot(self, *groups: str) -> Snapshot:
        names = self.names_in(*groups) if groups else self.names()
        return {n: self._entries[n].data.copy() for n in names}

    def restore(self, snap: Snapshot, *groups: str) -> None:
        """Copy snapshot values back in place, bit-exactly.

        With groups given, only parameters in those groups are touched
        (each must exist in the snapshot); otherwise the snapshot and
        store must cover the same name set.
        """
        if groups:
            names = self.names_in(*groups)
            missing = [n for n in names if n not in snap]
            if missing:
                raise KeyError(f"snapshot missing parameters: {missing[:3]}")
        else:
            if set(snap) != set(self._entries):
                only_store = sorted(set(self._entries) - set(snap))[:3]
                only_snap = sorted(set(snap) - set(self._entries))[:3]
                raise KeyError(
                    f"snapshot/store name-set mismatch (store-only {only_store}, "
                    f"snapshot-only {only_snap})")
            names = self.names()
        for n in names:
            t = self._entries[n]
            if t.data.shape != snap[n].shape:
                raise ValueError(f"shape mismatch restoring {n!r}")
            np.copyto(t.data, snap[n])
