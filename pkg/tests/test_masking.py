from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmae.masking import (CapacityError, MaskPlan, PatchGrid, dirichlet_counts, duplicate_positions,
                          largest_remainder, mae_mask_plan, make_rng, mask_all_plan, mask_one_plan,
                          mmae_mask_plan, patchify, plan_statistics, unpatchify, visible_count)


def test_grid_geometry():
    g = PatchGrid(224, 16)
    assert (g.stride, g.grid_side, g.num_positions, g.token_dim()) == (16, 14, 196, 768)
    d = PatchGrid(32, 8)
    assert (d.num_positions, d.token_dim()) == (16, 192)
    with pytest.raises(ValueError):
        PatchGrid(30, 8)


def test_patchify_shapes_and_constant_image():
    g = PatchGrid(224, 16)
    assert patchify(np.zeros((3, 224, 224)), g).shape == (196, 768)
    t = patchify(np.full((3, 32, 32), 0.25), PatchGrid(32, 8))
    assert t.shape == (16, 192)
    assert np.all(t == t[0])


def test_patchify_order():
    g = PatchGrid(4, 2)
    img = np.arange(3 * 16, dtype=np.float64).reshape(3, 4, 4)
    t = patchify(img, g)
    # token 1 is the top-right patch; first pixel (0, 2) in all channels, then (0, 3)
    assert t[1, :6].tolist() == [img[0, 0, 2], img[1, 0, 2], img[2, 0, 2],
                                 img[0, 0, 3], img[1, 0, 3], img[2, 0, 3]]


def test_patchify_wrong_size():
    with pytest.raises(ValueError):
        patchify(np.zeros((3, 16, 16)), PatchGrid(32, 8))


@settings(max_examples=30, deadline=None)
@given(side=st.sampled_from([1, 2, 4]), p=st.sampled_from([1, 2, 4]), c=st.integers(1, 3),
       seed=st.integers(0, 2**32 - 1))
def test_patchify_roundtrip(side, p, c, seed):
    g = PatchGrid(side * p, p)
    img = np.random.default_rng(seed).standard_normal((c, side * p, side * p))
    assert np.array_equal(unpatchify(patchify(img, g), g, c), img)
    tok = np.random.default_rng(seed + 1).standard_normal((g.num_positions, p * p * c))
    assert np.array_equal(patchify(unpatchify(tok, g, c), g), tok)


# -- MAE --------------------------------------------------------------------------
def test_mae_counts():
    g = PatchGrid(224, 16)
    assert len(mae_mask_plan(g, 0.75, 0).visible["rgb"]) == 49
    assert len(mae_mask_plan(g, 0.15, 0).visible["rgb"]) == 167
    assert {len(mae_mask_plan(g, 0.75, s).visible["rgb"]) for s in range(50)} == {49}


def test_mae_determinism():
    g = PatchGrid(32, 8)
    a, b, c = mae_mask_plan(g, 0.5, 1), mae_mask_plan(g, 0.5, 1), mae_mask_plan(g, 0.5, 2)
    assert a.visible == b.visible
    assert a.visible != c.visible
    assert len(a.visible["rgb"]) == 8 and a.visible["rgb"] == sorted(a.visible["rgb"])


def test_mae_degenerate_ratio():
    g = PatchGrid(32, 8)
    for ratio in (0.0, 1.0, 0.99, 0.01):
        with pytest.raises(ValueError):
            mae_mask_plan(g, ratio, 0)


# -- Dirichlet allocation ----------------------------------------------------------
def test_largest_remainder_examples():
    assert largest_remainder([0.8, 0.1, 0.1], 190) == (152, 19, 19)
    assert largest_remainder([1 / 3, 1 / 3, 1 / 3], 2) == (1, 1, 0)
    assert sum(largest_remainder([0.501, 0.25, 0.249], 7)) == 7


def test_dirichlet_mean_fraction():
    rng = make_rng(0)
    counts = np.array([dirichlet_counts((8, 1, 1), 190, rng) for _ in range(10_000)])
    assert np.all(counts.sum(axis=1) == 190)
    assert abs(counts[:, 0].mean() / 190 - 0.8) <= 0.01


def test_dirichlet_symmetric_small_budget():
    rng = make_rng(1)
    counts = np.array([dirichlet_counts((1, 1, 1), 3, rng) for _ in range(20_000)])
    assert np.all(counts.sum(axis=1) == 3)
    assert np.allclose(counts.mean(axis=0), 1.0, atol=0.05)


def test_dirichlet_errors():
    with pytest.raises(CapacityError):
        dirichlet_counts((8, 1, 1), 197, make_rng(0), num_positions=196)
    with pytest.raises(ValueError):
        dirichlet_counts((8, 0, 1), 10, make_rng(0))


# -- mask-one / mask-all ------------------------------------------------------------
def test_mask_one_full_budget():
    plan = mask_one_plan(PatchGrid(2, 1), (2, 1, 1), make_rng(0))
    union = sorted(sum(plan.visible.values(), []))
    assert union == [0, 1, 2, 3]
    assert duplicate_positions(plan) == 0


def test_mask_one_190_tokens():
    plan = mask_one_plan(PatchGrid(14, 1), (152, 19, 19), make_rng(3))
    assert plan.counts() == (152, 19, 19) and plan.budget == 190
    union = set(sum(plan.visible.values(), []))
    assert len(union) == 190 and 196 - len(union) == 6


def test_mask_one_capacity():
    with pytest.raises(CapacityError):
        mask_one_plan(PatchGrid(2, 1), (3, 1, 1), make_rng(0))


@settings(max_examples=200, deadline=None)
@given(side=st.integers(1, 14), seed=st.integers(0, 2**32 - 1), data=st.data())
def test_mask_one_disjoint_property(side, seed, data):
    M = side * side
    budget = data.draw(st.integers(0, M))
    alphas = data.draw(st.tuples(*[st.floats(0.05, 20.0)] * 3))
    plan = mmae_mask_plan(PatchGrid(side, 1), budget, alphas, make_rng(seed))
    assert sum(plan.counts()) == budget
    assert duplicate_positions(plan) == 0
    for idx in plan.visible.values():
        assert all(0 <= i < M for i in idx) and idx == sorted(idx)


def test_mask_one_ten_thousand_plans():
    stats = plan_statistics((8, 1, 1), 190, 14, 10_000, seed=0)
    assert stats["duplicate_positions"] == 0
    assert stats["count_sum_violations"] == 0
    assert abs(stats["mean_fraction"][0] - 0.80) <= 0.01


def test_mask_all_full_budget():
    full = mask_all_plan(PatchGrid(3, 1), (9, 9, 9), make_rng(0))
    assert all(v == list(range(9)) for v in full.visible.values())


def test_mask_all_duplicate_frequency():
    two = SimpleNamespace(num_positions=2)
    rng = make_rng(5)
    n = 20_000
    pairs = np.zeros(3)
    for _ in range(n):
        v = mask_all_plan(two, (1, 1, 1), rng).visible
        pairs += [v["rgb"] == v["h"] == [0], v["rgb"] == v["e"] == [0], v["h"] == v["e"] == [0]]
    assert np.all(np.abs(pairs / n - 0.25) < 0.01)


def test_mask_all_determinism():
    g = PatchGrid(14, 1)
    assert mask_all_plan(g, (50, 20, 20), make_rng(4)).visible == \
        mask_all_plan(g, (50, 20, 20), make_rng(4)).visible


def test_mmae_plan_is_deterministic_and_strategy_checked():
    g = PatchGrid(14, 1)
    a = mmae_mask_plan(g, 190, (8, 1, 1), make_rng(9, 1, 2))
    b = mmae_mask_plan(g, 190, (8, 1, 1), make_rng(9, 1, 2))
    assert a.visible == b.visible
    with pytest.raises(ValueError):
        mmae_mask_plan(g, 10, (8, 1, 1), make_rng(0), strategy="mask_some")


def test_plan_text_roundtrip():
    plan = mask_one_plan(PatchGrid(4, 1), (5, 3, 2), 17)
    again = MaskPlan.from_text(plan.to_text())
    assert again.visible == plan.visible and again.num_positions == 16 and again.seed == 17


def test_visible_count_formula():
    assert visible_count(196, 0.75) == 49
    assert visible_count(16, 0.75) == 4
    assert visible_count(196, 0.15) == 167
