import numpy as np
import pytest

from peftlab.adapters import AdapterConfig, attach_adapters
from peftlab.backbone import BackboneConfig, build_backbone
from peftlab.selection import (
    CRITERION_GRADIENT,
    CRITERION_LAYERWISE,
    CRITERION_MAGNITUDE,
    CRITERION_RANDOM,
    NonFiniteGradient,
    ScheduleError,
    ScoreAccumulator,
    SelectionEngine,
    SelectionMask,
    SelectionPool,
    SelectionSchedule,
    rank_select,
)
from peftlab.store import GROUP_ADAPTER


def pool_model(num_blocks=1, embed_dim=8, mlp_ratio=4):
    cfg = BackboneConfig(image_size=(16, 16), patch_size=4, embed_dim=embed_dim,
                         num_blocks=num_blocks, num_heads=2, mlp_ratio=mlp_ratio,
                         num_classes=3)
    return build_backbone(cfg, seed=0)


def zero_grads(store):
    return {n: np.zeros(store[n].data.shape, dtype=np.float32) for n in store.names()}


def test_pool_size_worked_example():
    # L=1, D=8, r=4: att 4*(64+8)=288, mlp (8*32+32)+(32*8+8)=288+264, total 840.
    pool = SelectionPool(pool_model().store)
    assert pool.total == 840


def test_pool_excludes_adapters_and_order_is_stable():
    m1 = pool_model()
    attach_adapters(m1, AdapterConfig(middle_dim=2), seed=0)
    pool = SelectionPool(m1.store)
    adapter_names = set(m1.store.names_in(GROUP_ADAPTER))
    assert not (set(pool.names) & adapter_names)
    m2 = pool_model()
    assert pool.names == SelectionPool(m2.store).names


def test_accumulate_two_steps_and_reset():
    model = pool_model()
    pool = SelectionPool(model.store)
    mask = SelectionMask(pool)
    acc = ScoreAccumulator(pool)
    rng = np.random.default_rng(0)
    g1 = {n: rng.standard_normal(model.store[n].data.shape).astype(np.float32)
          for n in model.store.names()}
    g2 = {n: rng.standard_normal(model.store[n].data.shape).astype(np.float32)
          for n in model.store.names()}
    acc.accumulate(g1, mask, step=1)
    acc.accumulate(g2, mask, step=2)
    name = pool.names[0]
    np.testing.assert_allclose(
        acc.scores[name],
        (np.abs(g1[name]) + np.abs(g2[name])).ravel().astype(np.float64), rtol=1e-6)
    acc.reset()
    assert all((v == 0).all() for v in acc.scores.values())


def test_accumulate_skips_selected():
    model = pool_model()
    pool = SelectionPool(model.store)
    mask = SelectionMask(pool)
    mask.add_positions(np.array([0, 5]), round_index=1)
    acc = ScoreAccumulator(pool)
    grads = zero_grads(model.store)
    grads[pool.names[0]][:] = 1.0
    acc.accumulate(grads, mask, step=1)
    flat = acc.scores[pool.names[0]]
    assert flat[0] == 0.0 and flat[5] == 0.0
    assert flat[1] == 1.0


def test_accumulate_rejects_non_finite():
    model = pool_model()
    pool = SelectionPool(model.store)
    acc = ScoreAccumulator(pool)
    grads = zero_grads(model.store)
    bad = pool.names[2]
    grads[bad].ravel()[3] = np.nan
    with pytest.raises(NonFiniteGradient, match=f"{bad}.*step 7"):
        acc.accumulate(grads, SelectionMask(pool), step=7)


def test_rank_select_exclusion_and_ties():
    scores = np.array([0.9, 0.5, 0.5, 0.1])
    selected = np.array([True, False, False, False])
    picks = rank_select(scores, selected, quota=2)
    assert picks.tolist() == [1, 2]


def test_rank_select_quota_zero_and_clamp():
    scores = np.array([1.0, 2.0])
    none = np.zeros(2, dtype=bool)
    assert rank_select(scores, none, 0).size == 0
    assert sorted(rank_select(scores, none, 10).tolist()) == [0, 1]


def _sort_oracle(scores, selected, quota):
    candidates = [(-s, i) for i, s in enumerate(scores) if not selected[i]]
    candidates.sort()
    return [i for _, i in candidates[:quota]]


def test_rank_select_matches_sort_oracle():
    rng = np.random.default_rng(42)
    for trial in range(120):
        n = int(rng.integers(1, 10_000))
        # Quantized scores force plenty of ties.
        scores = rng.integers(0, 7, size=n).astype(np.float64) / 3.0
        selected = rng.random(n) < 0.3
        quota = int(rng.integers(0, n + 1))
        got = rank_select(scores, selected, quota).tolist()
        assert got == _sort_oracle(scores, selected, quota), f"trial {trial}"


def test_rank_select_scale_invariance():
    rng = np.random.default_rng(3)
    scores = rng.random(500)
    selected = rng.random(500) < 0.2
    base = rank_select(scores, selected, 40).tolist()
    for c in (1e-6, 3.7, 1e6):
        assert rank_select(scores * c, selected, 40).tolist() == base


def test_schedule_round_steps_and_quotas():
    sched = SelectionSchedule.from_step_size(1000, 200)
    assert sched.round_steps == (200, 400, 600, 800)
    assert all(s < 1000 for s in sched.round_steps)
    assert sched.quotas(10) == [2, 2, 2, 4]
    assert SelectionSchedule.from_step_size(2000, 400).round_steps == (400, 800, 1200, 1600)
    # T divisible by s never schedules a round at T itself.
    assert SelectionSchedule.from_step_size(800, 400).round_steps == (400,)
    assert SelectionSchedule.single_shot(100).round_steps == (1,)
    with pytest.raises(ValueError):
        SelectionSchedule(100, (0, 50))
    with pytest.raises(ValueError):
        SelectionSchedule(100, (100,))


def run_engine_rounds(engine, store, grad_fn):
    for step in range(1, engine.schedule.total_steps + 1):
        engine.observe(grad_fn(step), step)
        if engine.is_round_step(step):
            engine.run_round(step)


def test_engine_full_run_disjoint_monotone_budget():
    model = pool_model(num_blocks=2)
    store = model.store
    pool_total = SelectionPool(store).total
    budget = 101
    engine = SelectionEngine(store, budget, SelectionSchedule.from_step_size(50, 10))
    rng = np.random.default_rng(0)

    seen = set()
    counts = []

    def grad_fn(step):
        return {n: rng.standard_normal(store[n].data.shape).astype(np.float32)
                for n in store.names()}

    for step in range(1, 51):
        engine.observe(grad_fn(step), step)
        if engine.is_round_step(step):
            before = engine.mask.count
            engine.run_round(step)
            counts.append(engine.mask.count)
            assert engine.mask.count <= budget
            assert engine.mask.count > before
            manifest = engine.mask.to_manifest()
            new = {(n, i) for n, rec in manifest.items() for i in rec["indices"]} - seen
            assert len(new) == engine.mask.count - before  # disjoint additions
            seen |= new
            assert all(v == 0.0 for a in engine.accumulator.scores.values() for v in a)

    assert engine.mask.count == budget  # remainder folded into final round
    assert counts == sorted(counts)
    assert budget <= pool_total


def test_engine_quota_remainder_on_last_round():
    model = pool_model()
    engine = SelectionEngine(model.store, 10, SelectionSchedule.from_step_size(50, 10))
    assert engine.quotas == [2, 2, 2, 4]


def test_engine_off_schedule_errors():
    model = pool_model()
    engine = SelectionEngine(model.store, 10, SelectionSchedule.from_step_size(50, 10))
    with pytest.raises(ScheduleError, match="off-schedule"):
        engine.run_round(5)


def test_layerwise_equal_budget_per_layer():
    model = pool_model(num_blocks=4)
    store = model.store
    engine = SelectionEngine(store, 103, SelectionSchedule.from_step_size(20, 19),
                             criterion=CRITERION_LAYERWISE)
    rng = np.random.default_rng(1)
    grads = {n: rng.standard_normal(store[n].data.shape).astype(np.float32)
             for n in store.names()}
    engine.observe(grads, 19)
    added = engine.run_round(19)
    # quota 103, 4 layers -> floor(103/4) = 25 per layer, surplus dropped.
    assert added == 4 * 25
    for row in engine.mask.per_layer_counts():
        assert row["att_selected"] + row["mlp_selected"] == 25


def test_random_criterion_is_seed_deterministic():
    model = pool_model()
    sched = SelectionSchedule.from_step_size(20, 10)

    def run(seed):
        engine = SelectionEngine(model.store, 20, sched,
                                 criterion=CRITERION_RANDOM, seed=seed)
        for step in (10,):
            engine.observe(zero_grads(model.store), step)
            engine.run_round(step)
        return engine.mask.to_manifest()

    assert run(5) == run(5)
    assert run(5) != run(6)


def test_magnitude_criterion_picks_largest_weights():
    model = pool_model()
    store = model.store
    pool = SelectionPool(store)
    name = pool.names[0]
    store[name].data.ravel()[7] = 100.0  # clearly the largest magnitude
    engine = SelectionEngine(store, 1, SelectionSchedule.from_step_size(20, 10),
                             criterion=CRITERION_MAGNITUDE)
    engine.observe(zero_grads(store), 10)
    engine.run_round(10)
    assert engine.mask.to_manifest() == {name: {"indices": [7], "rounds": [1]}}


def test_mask_manifest_roundtrip_and_validation():
    model = pool_model()
    pool = SelectionPool(model.store)
    mask = SelectionMask(pool)
    mask.add_positions(np.array([3, 1, 800]), round_index=1)
    mask.add_positions(np.array([2]), round_index=2)
    manifest = mask.to_manifest()
    rebuilt = SelectionMask.from_manifest(pool, manifest)
    assert rebuilt.to_manifest() == manifest
    assert rebuilt.count == 4

    with pytest.raises(ValueError, match="not in selection pool"):
        SelectionMask.from_manifest(pool, {"nope": {"indices": [0], "rounds": [1]}})
    name = pool.names[0]
    with pytest.raises(ValueError, match="out of range"):
        SelectionMask.from_manifest(pool, {name: {"indices": [10**6], "rounds": [1]}})
    with pytest.raises(ValueError, match="duplicate"):
        SelectionMask.from_manifest(pool, {name: {"indices": [1, 1], "rounds": [1, 1]}})


def test_gradient_criterion_prefers_high_gradient_params():
    model = pool_model()
    store = model.store
    pool = SelectionPool(store)
    target = pool.names[1]
    engine = SelectionEngine(store, 3, SelectionSchedule.from_step_size(20, 10),
                             criterion=CRITERION_GRADIENT)
    grads = zero_grads(store)
    grads[target].ravel()[:3] = np.array([5.0, -7.0, 6.0])
    engine.observe(grads, 10)
    engine.run_round(10)
    manifest = engine.mask.to_manifest()
    assert set(manifest) == {target}
    assert manifest[target]["indices"] == [0, 1, 2]
