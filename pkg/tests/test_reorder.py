"""Permutations, reorder plans, and functional equivalence of OGR."""

import numpy as np
import pytest

from qeft.calibration import GlobalWeakColumns, select_global
from qeft.errors import ShapeError
from qeft.model import forward, init_model, named_params
from qeft.reorder import (
    Permutation, apply_ogr, build_plan, identity_plan, invert_plan,
    permute_hessian, weak_to_tail,
)
from .conftest import SMALL_CONFIG


def _random_gwc(rng, config, k):
    return GlobalWeakColumns(
        k=k,
        resid_indices=np.sort(rng.choice(config.d_model, k, replace=False)),
        ffn_indices=[np.sort(rng.choice(config.d_ff, k, replace=False))
                     for _ in range(config.n_blocks)],
        wo_indices=[np.sort(rng.choice(config.d_model, k, replace=False))
                    for _ in range(config.n_blocks)],
        s_global=np.zeros(config.d_model))


class TestPermutation:
    def test_non_bijection_rejected(self):
        with pytest.raises(ShapeError):
            Permutation(np.array([0, 0, 2]))

    def test_inverse_composes_to_identity(self):
        p = Permutation(np.array([2, 0, 3, 1]))
        inv = p.inverse()
        x = np.arange(4.0)
        assert np.array_equal(inv.apply_vec(p.apply_vec(x)), x)

    def test_weak_to_tail_example(self):
        assert weak_to_tail(4, np.array([1])).perm.tolist() == [0, 2, 3, 1]

    def test_weak_already_trailing_is_identity(self):
        assert weak_to_tail(5, np.array([3, 4])).is_identity()

    def test_full_set_is_identity(self):
        assert weak_to_tail(4, np.arange(4)).is_identity()

    def test_out_of_range_weak(self):
        with pytest.raises(ShapeError):
            weak_to_tail(4, np.array([4]))

    def test_relative_order_preserved(self):
        p = weak_to_tail(6, np.array([1, 4]))
        assert p.perm.tolist() == [0, 2, 3, 5, 1, 4]


class TestApplyOgr:
    def test_identity_plan_bit_identical(self, small_model):
        out = apply_ogr(small_model, identity_plan(SMALL_CONFIG))
        for (n1, a), (_, b) in zip(named_params(small_model),
                                   named_params(out)):
            assert np.array_equal(a, b), n1

    def test_functional_equivalence_100_sequences(self, small_model):
        rng = np.random.default_rng(1)
        plan = build_plan(_random_gwc(rng, SMALL_CONFIG, 4), SMALL_CONFIG)
        reordered = apply_ogr(small_model, plan)
        worst = 0.0
        for _ in range(100):
            toks = rng.integers(0, SMALL_CONFIG.vocab_size,
                                size=rng.integers(1, SMALL_CONFIG.max_seq))
            a = forward(small_model, toks)
            b = forward(reordered, toks)
            rel = np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)))
            worst = max(worst, rel)
        assert worst <= 1e-5

    def test_inverse_round_trip_bit_exact(self, small_model):
        rng = np.random.default_rng(2)
        plan = build_plan(_random_gwc(rng, SMALL_CONFIG, 6), SMALL_CONFIG)
        back = apply_ogr(apply_ogr(small_model, plan), invert_plan(plan))
        for (n1, a), (_, b) in zip(named_params(small_model),
                                   named_params(back)):
            assert np.array_equal(a, b), n1

    def test_input_model_unchanged(self, small_model):
        rng = np.random.default_rng(3)
        before = small_model.embedding.copy()
        apply_ogr(small_model,
                  build_plan(_random_gwc(rng, SMALL_CONFIG, 4), SMALL_CONFIG))
        assert np.array_equal(small_model.embedding, before)

    def test_dimension_mismatch_rejected(self, small_model):
        bad = identity_plan(SMALL_CONFIG)
        bad.p_resid = Permutation(np.arange(16))
        with pytest.raises(ShapeError):
            apply_ogr(small_model, bad)

    def test_wo_input_columns_untouched(self, small_model):
        rng = np.random.default_rng(4)
        plan = build_plan(_random_gwc(rng, SMALL_CONFIG, 4), SMALL_CONFIG)
        reordered = apply_ogr(small_model, plan)
        # wo rows are permuted by the residual plan, columns are not
        want = small_model.blocks[0].wo[plan.p_resid.perm, :]
        assert np.array_equal(reordered.blocks[0].wo, want)


class TestBuildPlan:
    def test_plan_places_selection_at_tail(self, small_model, small_hessian):
        gwc = select_global(small_hessian.diag(), 4, n_blocks=2)
        plan = build_plan(gwc, SMALL_CONFIG)
        d = SMALL_CONFIG.d_model
        assert np.array_equal(np.sort(plan.p_resid.perm[d - 4:]),
                              gwc.resid_indices)
        for i in range(2):
            f = SMALL_CONFIG.d_ff
            assert np.array_equal(np.sort(plan.p_ffn[i].perm[f - 4:]),
                                  gwc.ffn_indices[i])

    def test_permute_hessian_consistent(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 20))
        h = 2.0 * x @ x.T
        p = weak_to_tail(6, np.array([1, 4]))
        hp = permute_hessian(h, p)
        xp = x[p.perm]
        assert np.allclose(hp, 2.0 * xp @ xp.T)
