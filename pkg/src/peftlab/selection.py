"""Progressive discovery of trainable backbone parameters.

Scores accumulate per scalar as |gradient| sums over a window of steps;
every `step_size` steps a selection round promotes the top-quota scored
scalars (excluding earlier picks) into the trainable mask, then resets
the accumulator. Alternative criteria (random, weight magnitude,
layer-equalized) exist for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import GROUP_ATT, GROUP_MLP, ParameterStore

CRITERION_GRADIENT = "accumulated_gradient"
CRITERION_RANDOM = "random_uniform"
CRITERION_MAGNITUDE = "weight_magnitude"
CRITERION_LAYERWISE = "layer_wise_accumulated_gradient"
CRITERIA = (CRITERION_GRADIENT, CRITERION_RANDOM, CRITERION_MAGNITUDE, CRITERION_LAYERWISE)


class ScheduleError(RuntimeError):
    """Selection invoked at a step that is not a scheduled round."""


class NonFiniteGradient(RuntimeError):
    pass


class SelectionPool:
    """Deterministic ordering of all selectable scalars (att + mlp groups)."""

    def __init__(self, store: ParameterStore):
        self.names: list[str] = store.names_in(GROUP_ATT, GROUP_MLP)
        if not self.names:
            raise ValueError("selection pool is empty (no att/mlp parameters)")
        self.sizes = {n: store[n].size for n in self.names}
        self.layers = {n: _layer_of(n) for n in self.names}
        offsets = np.cumsum([0] + [self.sizes[n] for n in self.names])
        self.offsets = {n: int(offsets[i]) for i, n in enumerate(self.names)}
        self._starts = offsets[:-1]
        self.total = int(offsets[-1])

    def split_positions(self, positions: np.ndarray) -> dict[str, np.ndarray]:
        """Map flat pool positions to per-tensor local flat indices."""
        if positions.size and (positions.min() < 0 or positions.max() >= self.total):
            raise ValueError(f"pool position outside [0, {self.total})")
        which = np.searchsorted(self._starts, positions, side="right") - 1
        out: dict[str, np.ndarray] = {}
        for i, name in enumerate(self.names):
            local = positions[which == i] - self.offsets[name]
            if local.size:
                out[name] = local.astype(np.int64)
        return out

    def layer_positions(self, layer: int) -> np.ndarray:
        chunks = [np.arange(self.offsets[n], self.offsets[n] + self.sizes[n])
                  for n in self.names if self.layers[n] == layer]
        return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)

    @property
    def num_layers(self) -> int:
        return max(self.layers.values()) + 1


def _layer_of(name: str) -> int:
    if not name.startswith("block"):
        raise ValueError(f"pool tensor {name!r} has no block index")
    return int(name.split(".", 1)[0][len("block"):])


class SelectionMask:
    """Cumulative (tensor, flat index) picks with per-index round provenance.

    Indices are kept in selection order (append-only) so optimizer state
    stays aligned; sorted views are derived for serialization.
    """

    def __init__(self, pool: SelectionPool):
        self.pool = pool
        self._selected = {n: np.zeros(pool.sizes[n], dtype=bool) for n in pool.names}
        self._order = {n: np.empty(0, dtype=np.int64) for n in pool.names}
        self._rounds = {n: np.empty(0, dtype=np.int64) for n in pool.names}

    @property
    def count(self) -> int:
        return sum(a.size for a in self._order.values())

    def selected(self, name: str) -> np.ndarray:
        return self._selected[name]

    def indices(self, name: str) -> np.ndarray:
        return self._order[name]

    def rounds(self, name: str) -> np.ndarray:
        return self._rounds[name]

    def selected_concat(self) -> np.ndarray:
        return np.concatenate([self._selected[n] for n in self.pool.names])

    def add_positions(self, positions: np.ndarray, round_index: int) -> None:
        for name, local in self.pool.split_positions(positions).items():
            if self._selected[name][local].any():
                raise ValueError(f"re-selecting already chosen indices in {name}")
            self._selected[name][local] = True
            self._order[name] = np.concatenate([self._order[name], local])
            self._rounds[name] = np.concatenate(
                [self._rounds[name], np.full(local.size, round_index, dtype=np.int64)])

    def per_layer_counts(self) -> list[dict]:
        rows = []
        for layer in range(self.pool.num_layers):
            att_sel = att_pool = mlp_sel = mlp_pool = 0
            for n in self.pool.names:
                if self.pool.layers[n] != layer:
                    continue
                sel = int(self._selected[n].sum())
                if ".att." in n:
                    att_sel, att_pool = att_sel + sel, att_pool + self.pool.sizes[n]
                else:
                    mlp_sel, mlp_pool = mlp_sel + sel, mlp_pool + self.pool.sizes[n]
            rows.append({
                "layer": layer,
                "att_selected": att_sel, "att_pool": att_pool,
                "att_fraction": att_sel / att_pool if att_pool else 0.0,
                "mlp_selected": mlp_sel, "mlp_pool": mlp_pool,
                "mlp_fraction": mlp_sel / mlp_pool if mlp_pool else 0.0,
            })
        return rows

    def to_manifest(self) -> dict:
        """Sorted-index view: {tensor: {"indices": [...], "rounds": [...]}}."""
        out = {}
        for n in self.pool.names:
            if self._order[n].size == 0:
                continue
            order = np.argsort(self._order[n], kind="stable")
            out[n] = {"indices": self._order[n][order].tolist(),
                      "rounds": self._rounds[n][order].tolist()}
        return out

    @classmethod
    def from_manifest(cls, pool: SelectionPool, manifest: dict) -> "SelectionMask":
        mask = cls(pool)
        for name, rec in manifest.items():
            if name not in pool.sizes:
                raise ValueError(f"mask tensor {name!r} not in selection pool")
            idx = np.asarray(rec["indices"], dtype=np.int64)
            rounds = np.asarray(rec["rounds"], dtype=np.int64)
            if idx.size != rounds.size:
                raise ValueError(f"mask record for {name!r} misaligned")
            if idx.size and (idx.min() < 0 or idx.max() >= pool.sizes[name]):
                raise ValueError(f"mask index out of range for {name!r}")
            if np.unique(idx).size != idx.size:
                raise ValueError(f"duplicate mask indices for {name!r}")
            mask._selected[name][idx] = True
            mask._order[name] = idx
            mask._rounds[name] = rounds
        return mask


class ScoreAccumulator:
    """Sum of |gradient| per unselected pool scalar since the last round."""

    def __init__(self, pool: SelectionPool):
        self.pool = pool
        self.scores = {n: np.zeros(pool.sizes[n], dtype=np.float64) for n in pool.names}

    def accumulate(self, grads: dict[str, np.ndarray], mask: SelectionMask, step: int) -> None:
        for name in self.pool.names:
            g = grads[name].ravel()
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient in {name!r} at step {step}")
            self.scores[name] += np.abs(g) * ~mask.selected(name)

    def reset(self) -> None:
        for arr in self.scores.values():
            arr[:] = 0.0

    def concat(self) -> np.ndarray:
        return np.concatenate([self.scores[n] for n in self.pool.names])


@dataclass(frozen=True)
class SelectionSchedule:
    total_steps: int
    round_steps: tuple[int, ...]
    step_size: int | None = None

    def __post_init__(self):
        last = 0
        for s in self.round_steps:
            if not last < s < self.total_steps:
                raise ValueError(
                    f"round step {s} outside (0, {self.total_steps}) or out of order")
            last = s

    @classmethod
    def from_step_size(cls, total_steps: int, step_size: int) -> "SelectionSchedule":
        if step_size < 1 or total_steps < 1:
            raise ValueError("step_size and total_steps must be >= 1")
        n = (total_steps - 1) // step_size
        return cls(total_steps, tuple(step_size * (i + 1) for i in range(n)), step_size)

    @classmethod
    def single_shot(cls, total_steps: int, at_step: int = 1) -> "SelectionSchedule":
        return cls(total_steps, (at_step,), None)

    @property
    def num_rounds(self) -> int:
        return len(self.round_steps)

    def quotas(self, budget: int) -> list[int]:
        """Per-round absolute quotas; the remainder folds into the last round
        so the cumulative total is exactly `budget`."""
        n = self.num_rounds
        if n == 0:
            return []
        base = budget // n
        return [base] * (n - 1) + [budget - base * (n - 1)]


def rank_select(scores: np.ndarray, selected: np.ndarray, quota: int) -> np.ndarray:
    """Positions of the `quota` highest-score unselected entries.

    Ties break toward the earlier position. Returns min(quota, remaining)
    positions, in rank order.
    """
    if quota < 0:
        raise ValueError("quota must be >= 0")
    remaining = int((~selected).sum())
    quota = min(quota, remaining)
    if quota == 0:
        return np.empty(0, dtype=np.int64)
    if scores.size and scores.min() < 0:
        raise ValueError("scores must be non-negative")
    keyed = np.where(selected, -1.0, scores)
    order = np.argsort(-keyed, kind="stable")
    return order[:quota].astype(np.int64)


class SelectionEngine:
    """Ties accumulator, mask, schedule, and criterion into the train loop."""

    def __init__(self, store: ParameterStore, budget: int, schedule: SelectionSchedule,
                 criterion: str = CRITERION_GRADIENT, seed: int = 0):
        if criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
        if budget < 0:
            raise ValueError("internal budget must be >= 0")
        self.store = store
        self.pool = SelectionPool(store)
        self.mask = SelectionMask(self.pool)
        self.accumulator = ScoreAccumulator(self.pool)
        self.schedule = schedule
        self.criterion = criterion
        self.quotas = schedule.quotas(budget)
        self.rounds_done = 0
        self._random_scores = None
        if criterion == CRITERION_RANDOM:
            rng = np.random.default_rng([seed, 0x5C0])
            self._random_scores = rng.uniform(0.0, 1.0, size=self.pool.total)

    def observe(self, grads: dict[str, np.ndarray], step: int) -> None:
        self.accumulator.accumulate(grads, self.mask, step)

    def is_round_step(self, step: int) -> bool:
        return (self.rounds_done < len(self.quotas)
                and step == self.schedule.round_steps[self.rounds_done])

    def _scores(self) -> np.ndarray:
        if self.criterion == CRITERION_RANDOM:
            return self._random_scores
        if self.criterion == CRITERION_MAGNITUDE:
            return np.concatenate(
                [np.abs(self.store[n].data.ravel()).astype(np.float64)
                 for n in self.pool.names])
        return self.accumulator.concat()

    def run_round(self, step: int) -> int:
        """Fire the scheduled round at `step`; returns how many were added."""
        if not self.is_round_step(step):
            raise ScheduleError(
                f"selection round called off-schedule at step {step} "
                f"(expected {self.schedule.round_steps})")
        quota = self.quotas[self.rounds_done]
        round_index = self.rounds_done + 1
        scores = self._scores()
        selected = self.mask.selected_concat()
        if self.criterion == CRITERION_LAYERWISE:
            per_layer = quota // self.pool.num_layers  # surplus dropped
            picks = []
            for layer in range(self.pool.num_layers):
                pos = self.pool.layer_positions(layer)
                local = rank_select(scores[pos], selected[pos], per_layer)
                picks.append(pos[local])
            positions = np.concatenate(picks) if picks else np.empty(0, np.int64)
        else:
            positions = rank_select(scores, selected, quota)
        self.mask.add_positions(positions, round_index)
        self.accumulator.reset()
        self.rounds_done += 1
        return int(positions.size)
