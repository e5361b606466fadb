import numpy as np
import pytest

from fusionrank import (
    AdamState,
    ModelConfig,
    SeededRng,
    SyntheticSpec,
    TrainConfig,
    adam_step,
    batch_loss_it,
    batch_loss_tt,
    gen_synthetic,
    grad_check,
    init_params,
    mine_hardest,
    train,
)
from fusionrank.errors import ConfigError, TrainingDivergedError
from fusionrank.model import backward_pair, branch_to_dict, forward_pair
from fusionrank.training import learning_rate

from conftest import make_branch
from test_model import params_equal

IDENT3 = np.arange(3)


def ident_pairs(n):
    return [(i, i) for i in range(n)], np.arange(n)


class TestMineHardest:
    def test_two_pairs_single_negative(self):
        sim = np.array([[0.9, 0.2], [0.1, 0.8]])
        pairs, groups = ident_pairs(2)
        assert mine_hardest(sim, 0, pairs, groups) == (1, 1)

    def test_row_argmax(self):
        sim = np.array([[0.9, 0.4, 0.7], [0.1, 0.8, 0.2], [0.3, 0.1, 0.9]])
        pairs, groups = ident_pairs(3)
        _, t_h = mine_hardest(sim, 0, pairs, groups)
        assert t_h == 2

    def test_tie_breaks_to_smallest_index(self):
        sim = np.array([[0.9, 0.4, 0.4], [0.1, 0.8, 0.2], [0.3, 0.1, 0.9]])
        pairs, groups = ident_pairs(3)
        _, t_h = mine_hardest(sim, 0, pairs, groups)
        assert t_h == 1

    def test_same_group_captions_excluded(self):
        # text 1 belongs to image 0's caption group, so despite its 0.99
        # score it cannot serve as a negative text for pair 0
        sim = np.array([[0.9, 0.99, 0.7], [0.1, 0.8, 0.2], [0.3, 0.1, 0.9]])
        pairs = [(0, 0), (5, 1), (6, 2)]
        groups = np.array([0, 0, 6])
        i_h, t_h = mine_hardest(sim, 0, pairs, groups)
        assert t_h == 2
        assert i_h == 2  # images 5 and 6 both eligible; column 0 peaks at row 2


class TestImageTextLoss:
    def test_satisfied_margin_zero_loss(self):
        sim = np.full((3, 3), 0.5)
        np.fill_diagonal(sim, 0.9)
        pairs, groups = ident_pairs(3)
        loss, dsim = batch_loss_it(sim, pairs, groups, 0.2)
        assert loss == 0.0
        assert not dsim.any()

    def test_hand_value(self):
        sim = np.array([[0.6, 0.55], [0.55, 0.6]])
        pairs, groups = ident_pairs(2)
        loss, _ = batch_loss_it(sim, pairs, groups, 0.2)
        assert abs(loss - 0.3) < 1e-12

    def test_equal_positive_and_negative_costs_two_margins(self):
        sim = np.full((4, 4), 0.7)
        pairs, groups = ident_pairs(4)
        loss, _ = batch_loss_it(sim, pairs, groups, 0.2)
        assert abs(loss - 0.4) < 1e-12

    def test_loss_nonnegative(self):
        gen = np.random.default_rng(0)
        pairs, groups = ident_pairs(5)
        for _ in range(50):
            sim = np.round(gen.uniform(size=(5, 5)), 4)
            loss, _ = batch_loss_it(sim, pairs, groups, 0.2)
            assert loss >= 0.0

    def test_subgradient_matches_directional_derivative(self):
        # distinct entries (gap 1/15) keep argmaxes strict, and the margin
        # offset keeps every hinge slack at least 3.7e-5 from its kink, so
        # a +-1e-7 probe never crosses a non-smooth point
        gen = np.random.default_rng(1)
        pairs, groups = ident_pairs(4)
        margin = 0.2 + 3.7e-5
        eps = 1e-7
        for _ in range(20):
            sim = gen.permutation(np.linspace(0.0, 1.0, 16)).reshape(4, 4)
            _, dsim = batch_loss_it(sim, pairs, groups, margin)
            for i in range(4):
                for j in range(4):
                    up = sim.copy()
                    up[i, j] += eps
                    down = sim.copy()
                    down[i, j] -= eps
                    lu, _ = batch_loss_it(up, pairs, groups, margin)
                    ld, _ = batch_loss_it(down, pairs, groups, margin)
                    num = (lu - ld) / (2 * eps)
                    assert abs(num - dsim[i, j]) <= 1e-4, (i, j)


class TestTextTextLoss:
    def test_saturated_positive_zero_loss(self):
        sim = np.array([
            [1.0, 1.0, 0.8, 0.7],
            [1.0, 1.0, 0.6, 0.5],
            [0.8, 0.6, 1.0, 1.0],
            [0.7, 0.5, 1.0, 1.0],
        ])
        groups = np.array([0, 0, 1, 1])
        loss, dsim = batch_loss_tt(sim, groups, 0.2)
        assert loss == 0.0 and not dsim.any()

    def test_hand_value(self):
        # anchor 0 with positive 1 at 0.5; hardest out-of-group 0.6
        sim = np.array([
            [1.0, 0.5, 0.6, 0.1],
            [0.5, 1.0, 0.9, 0.9],
            [0.6, 0.9, 1.0, 0.9],
            [0.1, 0.9, 0.9, 1.0],
        ])
        groups = np.array([0, 0, 1, 1])
        loss, _ = batch_loss_tt(sim, groups, 0.2)
        # pairs: (0,1): .2-.5+.6=.3  (1,0): .2-.5+.9=.6
        # (2,3): .2-.9+.9=.2        (3,2): .2-.9+.9=.2
        assert abs(loss - (0.3 + 0.6 + 0.2 + 0.2) / 4) < 1e-12

    def test_single_hinge_shape(self):
        # unlike the bidirectional loss, only the anchor-side hinge exists:
        # a sim where only the "image side" negative would fire stays at 0
        sim = np.array([
            [1.0, 0.9, 0.1, 0.1],
            [0.9, 1.0, 0.1, 0.1],
            [0.95, 0.1, 1.0, 0.9],
            [0.1, 0.1, 0.9, 1.0],
        ])
        groups = np.array([0, 0, 1, 1])
        loss, _ = batch_loss_tt(sim, groups, 0.2)
        # anchor 0: pos 0.9, hardest other-group 0.1 -> slack -0.6 -> 0;
        # sim[2,0]=0.95 (reverse direction) must not contribute
        assert loss == pytest.approx((0.2 - 0.9 + 0.95) / 4, abs=1e-12)

    def test_no_positive_pair_rejected(self):
        sim = np.eye(3)
        with pytest.raises(ConfigError):
            batch_loss_tt(sim, np.array([0, 1, 2]), 0.2)


class TestAdam:
    def test_zero_grad_fixed_point(self):
        params = {"w": np.array([[1.0, -2.0]])}
        state = AdamState()
        out = adam_step(params, {"w": np.zeros((1, 2))}, state, 0.1)
        assert np.array_equal(out["w"], params["w"])
        assert state.t == 1

    def test_first_step_closed_form(self):
        params = {"w": np.array([[0.0]])}
        state = AdamState()
        out = adam_step(params, {"w": np.array([[1.0]])}, state, 0.05)
        assert abs(out["w"][0, 0] + 0.05) < 1e-9

    def test_deterministic(self):
        def run():
            gen = np.random.default_rng(4)
            params = {"w": gen.normal(size=(3, 3))}
            state = AdamState()
            for _ in range(10):
                params = adam_step(params, {"w": gen.normal(size=(3, 3))},
                                   state, 0.01)
            return params["w"]

        assert np.array_equal(run(), run())

    def test_nan_grads_abort(self):
        params = {"w": np.zeros((2, 2))}
        with pytest.raises(TrainingDivergedError):
            adam_step(params, {"w": np.full((2, 2), np.nan)}, AdamState(), 0.1)


class TestSchedule:
    def test_decay_steps(self):
        cfg = TrainConfig(lr0=1e-4, decay_factor=2, decay_every=10)
        assert learning_rate(cfg, 0) == 1e-4
        assert learning_rate(cfg, 10) == 5e-5
        assert learning_rate(cfg, 20) == 2.5e-5

    def test_batch_size_one_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)


class TestGradCheck:
    def test_random_config_passes(self):
        branch = make_branch(seed=30, d_raw=4, d=4, d_fused=4, rank=2)
        gen = np.random.default_rng(5)
        err = grad_check(branch, gen.normal(size=4), gen.normal(size=4))
        assert err < 1e-4

    def test_bias_config_passes(self):
        branch = make_branch(seed=31, output_bias=True)
        gen = np.random.default_rng(6)
        err = grad_check(branch, gen.normal(size=4), gen.normal(size=4))
        assert err < 1e-4

    def test_zero_factors_zero_w_out_grad(self):
        import dataclasses

        branch = make_branch(seed=32)
        zeros = tuple(np.zeros_like(f) for f in branch.factors_a)
        branch = dataclasses.replace(branch, factors_a=zeros)
        _, cache = forward_pair(branch, np.ones(4), np.ones(4))
        g = backward_pair(branch, cache, 1.0)
        assert not g.w_out.any()
        assert grad_check(branch, np.ones(4), np.ones(4)) < 1e-4

    def test_detects_sign_flip(self):
        # the checker must catch a corrupted backward pass
        branch = make_branch(seed=33)
        gen = np.random.default_rng(7)
        x, y = gen.normal(size=4), gen.normal(size=4)
        _, cache = forward_pair(branch, x, y)
        g = backward_pair(branch, cache, 1.0)
        h = 1e-5
        weights = {k: v.copy() for k, v in branch_to_dict(branch).items()}
        from fusionrank.model import branch_from_dict

        idx = np.unravel_index(np.abs(g.w_out).argmax(), g.w_out.shape)
        orig = weights["w_out"][idx]
        weights["w_out"][idx] = orig + h
        plus, _ = forward_pair(branch_from_dict(weights), x, y)
        weights["w_out"][idx] = orig - h
        minus, _ = forward_pair(branch_from_dict(weights), x, y)
        numeric = (plus - minus) / (2 * h)
        flipped = -g.w_out[idx]
        err = abs(flipped - numeric) / max(1e-8, abs(flipped) + abs(numeric))
        assert err > 1e-2


def separable_dataset(seed=0, n_images=12, cpi=3):
    spec = SyntheticSpec(n_images=n_images, captions_per_image=cpi, d_img=8,
                         d_txt=8, noise_sigma=0.05, seed=seed)
    return gen_synthetic(spec)


def small_model_cfg():
    return ModelConfig(d_raw_img=8, d_raw_txt=8, d_img=8, d_txt=8, d_fused=8,
                       rank=2)


class TestTrain:
    def test_deterministic_weights(self):
        ds = separable_dataset()
        cfg = TrainConfig(batch_size=12, epochs=4, lr0=1e-2, seed=11,
                          branch="both", track_recall=False)
        p1 = train(ds, cfg, model_cfg=small_model_cfg()).params
        p2 = train(ds, cfg, model_cfg=small_model_cfg()).params
        assert params_equal(p1.image_text, p2.image_text)
        assert params_equal(p1.text_text, p2.text_text)

    def test_monotone_improvement_over_seeds(self):
        firsts, lasts = [], []
        for seed in range(10):
            ds = separable_dataset(seed=seed)
            cfg = TrainConfig(batch_size=12, epochs=20, lr0=1e-2, seed=seed,
                              branch="image-text", track_recall=False)
            log = train(ds, cfg, model_cfg=small_model_cfg()).log
            losses = [r.loss for r in log]
            firsts.append(np.median(losses[:10]))
            lasts.append(np.median(losses[-10:]))
        assert np.median(lasts) < np.median(firsts)

    def test_separable_data_reaches_high_recall(self):
        ds = separable_dataset(seed=3, n_images=16, cpi=3)
        cfg = TrainConfig(batch_size=16, epochs=40, lr0=1e-2, seed=3,
                          branch="image-text", track_recall=True)
        res = train(ds, cfg, model_cfg=small_model_cfg())
        assert res.log[-1].i2t_r1 >= 0.9
        assert res.log[-1].t2i_r1 >= 0.9

    def test_log_schema(self):
        ds = separable_dataset(seed=4)
        cfg = TrainConfig(batch_size=6, epochs=12, lr0=1e-2, seed=4,
                          branch="image-text", track_recall=True)
        log = train(ds, cfg, model_cfg=small_model_cfg()).log
        assert len(log) == 12
        assert log[0].lr == 1e-2 and log[10].lr == 5e-3
        assert all(r.loss >= 0 for r in log)
        assert all(0 <= r.i2t_r1 <= 1 for r in log)

    def test_text_text_phase_warm_starts(self):
        ds = separable_dataset(seed=5)
        cfg = TrainConfig(batch_size=8, epochs=3, lr0=1e-2, seed=5,
                          branch="both", track_recall=False)
        res = train(ds, cfg, model_cfg=small_model_cfg())
        branches = {r.branch for r in res.log}
        assert branches == {"image-text", "text-text"}

    def test_tt_needs_two_captions(self):
        ds = separable_dataset(seed=6, cpi=1)
        cfg = TrainConfig(batch_size=8, epochs=2, lr0=1e-2, seed=6,
                          branch="both", track_recall=False)
        with pytest.raises(ConfigError):
            train(ds, cfg, model_cfg=small_model_cfg())

    def test_dataset_model_dim_mismatch_rejected(self):
        ds = separable_dataset(seed=7)
        cfg = TrainConfig(batch_size=8, epochs=1, lr0=1e-2, seed=7,
                          branch="image-text", track_recall=False)
        params = init_params(ModelConfig(d_raw_img=5, d_raw_txt=8), SeededRng(0))
        from fusionrank.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            train(ds, cfg, params=params)
