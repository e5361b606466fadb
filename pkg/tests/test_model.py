import dataclasses

import numpy as np
import pytest

from fusionrank import (
    FusionBranch,
    ModelConfig,
    SeededRng,
    backward_pair,
    forward_pair,
    init_params,
    init_tt_from_it,
    score_matrix,
    sigmoid,
)
from fusionrank.errors import ConfigError, ShapeMismatchError
from fusionrank.model import branch_from_dict, branch_to_dict

from conftest import make_branch


def params_equal(a, b) -> bool:
    da, db = branch_to_dict(a), branch_to_dict(b)
    return da.keys() == db.keys() and all(np.array_equal(da[k], db[k]) for k in da)


class TestInit:
    def test_same_seed_same_params(self):
        cfg = ModelConfig()
        p1 = init_params(cfg, SeededRng(5))
        p2 = init_params(cfg, SeededRng(5))
        assert params_equal(p1.image_text, p2.image_text)
        assert params_equal(p1.text_text, p2.text_text)

    def test_reference_scale_config_accepted(self):
        cfg = ModelConfig(d_raw_img=8, d_raw_txt=8, d_img=8, d_txt=8,
                          d_fused=1024, rank=20)
        p = init_params(cfg, SeededRng(0))
        assert p.image_text.rank == 20
        assert p.image_text.d_fused == 1024

    def test_zero_rank_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(rank=0)

    def test_scale_follows_fan_in(self):
        cfg = ModelConfig(d_raw_img=400, d_raw_txt=400, d_img=4, d_txt=4,
                          d_fused=4, rank=1)
        p = init_params(cfg, SeededRng(1))
        bound = 1.0 / np.sqrt(400)
        w = p.image_text.w_in_a
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > 0.5 * bound  # actually fills the range


class TestForward:
    def test_zero_factors_give_half(self):
        b = make_branch()
        zeros = tuple(np.zeros_like(f) for f in b.factors_a)
        b = dataclasses.replace(b, factors_a=zeros)
        score, cache = forward_pair(b, np.ones(4), np.ones(4))
        assert score == 0.5
        assert cache.logit == 0.0

    def test_rank_one_identity_hand_value(self):
        eye = np.eye(2)
        b = FusionBranch(eye, eye, (eye,), (eye,), np.array([[1.0, 1.0]]))
        score, cache = forward_pair(b, np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        assert cache.logit == 11.0
        assert abs(score - 0.9999832986) < 1e-9

    def test_zero_rank_term_is_noop(self):
        eye = np.eye(2)
        zero = np.zeros((2, 2))
        b1 = FusionBranch(eye, eye, (eye,), (eye,), np.array([[1.0, 1.0]]))
        b2 = FusionBranch(eye, eye, (eye, zero), (eye, zero), np.array([[1.0, 1.0]]))
        x, y = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        assert forward_pair(b1, x, y)[0] == forward_pair(b2, x, y)[0]

    def test_scores_strictly_inside_unit_interval(self):
        gen = np.random.default_rng(2)
        b = make_branch(seed=3)
        for _ in range(50):
            s, _ = forward_pair(b, gen.normal(size=4), gen.normal(size=4))
            assert 0.0 < s < 1.0

    def test_dim_mismatch_rejected(self):
        b = make_branch()
        with pytest.raises(ShapeMismatchError):
            forward_pair(b, np.ones(5), np.ones(4))


class TestScoreMatrix:
    def test_singleton_matches_forward_pair(self):
        b = make_branch(seed=7)
        x = np.arange(4.0)
        y = np.arange(4.0) + 1
        m = score_matrix(b, x[np.newaxis], y[np.newaxis])
        assert m.shape == (1, 1)
        assert m[0, 0] == forward_pair(b, x, y)[0]

    def test_duplicate_rows_identical(self):
        b = make_branch(seed=8)
        gen = np.random.default_rng(3)
        xs = gen.normal(size=(3, 4))
        xs[1] = xs[0]
        ys = gen.normal(size=(5, 4))
        m = score_matrix(b, xs, ys)
        assert np.array_equal(m[0], m[1])

    def test_matches_bruteforce_double_loop(self):
        b = make_branch(seed=9)
        gen = np.random.default_rng(4)
        xs = gen.normal(size=(4, 4))
        ys = gen.normal(size=(6, 4))
        m = score_matrix(b, xs, ys)
        brute = np.array([[forward_pair(b, x, y)[0] for y in ys] for x in xs])
        assert np.array_equal(m, brute)

    def test_worker_count_does_not_change_bits(self):
        b = make_branch(seed=10)
        gen = np.random.default_rng(5)
        xs = gen.normal(size=(7, 4))
        ys = gen.normal(size=(5, 4))
        assert np.array_equal(score_matrix(b, xs, ys, workers=1),
                              score_matrix(b, xs, ys, workers=4))

    def test_permutation_equivariance(self):
        b = make_branch(seed=11)
        gen = np.random.default_rng(6)
        xs = gen.normal(size=(6, 4))
        ys = gen.normal(size=(5, 4))
        perm = gen.permutation(6)
        assert np.array_equal(score_matrix(b, xs[perm], ys),
                              score_matrix(b, xs, ys)[perm])

    def test_empty_rejected(self):
        b = make_branch()
        with pytest.raises(ShapeMismatchError):
            score_matrix(b, np.empty((0, 4)), np.ones((2, 4)))


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        b = make_branch(seed=12)
        _, cache = forward_pair(b, np.ones(4), np.ones(4))
        g = backward_pair(b, cache, 0.0)
        assert not g.w_in_a.any() and not g.w_out.any()
        assert not any(f.any() for f in g.factors_a + g.factors_b)

    def test_w_out_grad_is_sigmoid_slope_times_fusion(self):
        b = make_branch(seed=13)
        gen = np.random.default_rng(7)
        _, cache = forward_pair(b, gen.normal(size=4), gen.normal(size=4))
        g = backward_pair(b, cache, 1.0)
        slope = cache.score * (1.0 - cache.score)
        assert np.allclose(g.w_out, slope * cache.fused[np.newaxis, :],
                           rtol=0, atol=0)

    def test_stale_cache_rejected(self):
        b1 = make_branch(seed=14)
        b2 = make_branch(seed=15)
        _, cache = forward_pair(b1, np.ones(4), np.ones(4))
        with pytest.raises(ConfigError):
            backward_pair(b2, cache, 1.0)


class TestWarmStart:
    def test_copy_semantics_bitwise(self):
        p = init_params(ModelConfig(rank=3), SeededRng(16))
        out = init_tt_from_it(p)
        assert np.array_equal(out.text_text.w_in_a, p.image_text.w_in_b)
        assert np.array_equal(out.text_text.w_in_b, p.image_text.w_in_b)
        for fa, fb, src in zip(out.text_text.factors_a, out.text_text.factors_b,
                               p.image_text.factors_b):
            assert np.array_equal(fa, src) and np.array_equal(fb, src)
        assert np.array_equal(out.text_text.w_out, p.image_text.w_out)

    def test_source_branch_unchanged(self):
        p = init_params(ModelConfig(), SeededRng(17))
        before = branch_to_dict(p.image_text)
        before = {k: v.copy() for k, v in before.items()}
        init_tt_from_it(p)
        after = branch_to_dict(p.image_text)
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_differing_fusion_dims_reinitialize_deterministically(self):
        cfg = ModelConfig(d_fused=8, d_fused_tt=4, d_img=8, d_txt=8,
                          d_raw_img=8, d_raw_txt=8)
        p = init_params(cfg, SeededRng(18))
        o1 = init_tt_from_it(p)
        o2 = init_tt_from_it(p)
        assert params_equal(o1.text_text, o2.text_text)
        assert o1.text_text.d_fused == 4
        assert np.array_equal(o1.text_text.w_in_a, p.image_text.w_in_b)
        # fresh output layer, not a copy
        assert o1.text_text.w_out.shape == (1, 4)

    def test_incompatible_text_dims_rejected(self):
        p = init_params(ModelConfig(), SeededRng(19))
        bad_tt = make_branch(seed=20, d_raw=5, d=4)
        p = dataclasses.replace(p, text_text=bad_tt)
        with pytest.raises(ShapeMismatchError):
            init_tt_from_it(p)


class TestDictViews:
    def test_round_trip(self):
        b = make_branch(seed=21, rank=3)
        again = branch_from_dict(branch_to_dict(b))
        assert params_equal(b, again)

    def test_bias_round_trip(self):
        b = make_branch(seed=22, output_bias=True)
        assert b.out_bias is not None
        again = branch_from_dict(branch_to_dict(b))
        assert again.out_bias is not None and np.array_equal(again.out_bias, b.out_bias)
