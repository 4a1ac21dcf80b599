import math

import numpy as np
import pytest

from fedsim.numerics import (
    ModelSpec,
    NonFiniteError,
    NumericsError,
    TrainableMask,
    backward,
    count_params,
    cross_entropy,
    forward,
    init_params,
    loss_and_grad,
    sgd_step,
)
from oracles import central_diff_gradient, max_guarded_rel_err, mpmath_cross_entropy, naive_forward


class TestModelSpec:
    def test_linear_param_count(self):
        spec = ModelSpec("linear", input_dim=4, num_classes=3)
        assert spec.total_params == 4 * 3 + 3 == 15

    def test_mlp_param_count_by_hand(self):
        # 784*64 + 64 weights+bias, then 64*10 + 10.
        spec = ModelSpec("mlp", input_dim=784, num_classes=10, hidden_dims=(64,))
        assert spec.total_params == 784 * 64 + 64 + 64 * 10 + 10 == 50890

    def test_layer_ranges_partition_param_space(self):
        spec = ModelSpec("mlp", input_dim=5, num_classes=4, hidden_dims=(3, 2))
        ranges = spec.layer_ranges
        assert ranges[0][0] == 0
        for (a, b), (c, _d) in zip(ranges, ranges[1:]):
            assert b == c
        assert ranges[-1][1] == spec.total_params

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="cnn", input_dim=4, num_classes=3),
            dict(kind="linear", input_dim=4, num_classes=3, hidden_dims=(2,)),
            dict(kind="mlp", input_dim=4, num_classes=3),
            dict(kind="mlp", input_dim=0, num_classes=3, hidden_dims=(2,)),
            dict(kind="mlp", input_dim=4, num_classes=1, hidden_dims=(2,)),
            dict(kind="mlp", input_dim=4, num_classes=3, hidden_dims=(0,)),
            dict(kind="mlp", input_dim=4, num_classes=3, hidden_dims=(2,), activation="tanh"),
        ],
    )
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(NumericsError):
            ModelSpec(**kwargs)


class TestInitParams:
    def test_linear_biases_exactly_zero(self):
        spec = ModelSpec("linear", input_dim=4, num_classes=3)
        params = init_params(spec, 123)
        assert params.size == 15
        assert np.all(params[-3:] == 0.0)

    def test_same_seed_bitwise_identical(self, tiny_mlp):
        a = init_params(tiny_mlp, 7)
        b = init_params(tiny_mlp, 7)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self, tiny_mlp):
        assert not np.array_equal(init_params(tiny_mlp, 1), init_params(tiny_mlp, 2))

    def test_weights_within_fan_in_bound(self):
        spec = ModelSpec("mlp", input_dim=16, num_classes=5, hidden_dims=(9,))
        params = init_params(spec, 99)
        for (fan_in, fan_out), (start, _) in zip(spec.layer_shapes, spec.layer_ranges):
            w = params[start : start + fan_in * fan_out]
            b = params[start + fan_in * fan_out : start + fan_in * fan_out + fan_out]
            assert np.all(np.abs(w) <= 1.0 / math.sqrt(fan_in))
            assert np.all(b == 0.0)


class TestForward:
    def test_zero_params_zero_logits(self, tiny_mlp):
        batch = np.random.default_rng(0).normal(size=(6, 4))
        logits = forward(tiny_mlp, np.zeros(tiny_mlp.total_params), batch)
        assert logits.shape == (6, 3)
        assert np.all(logits == 0.0)

    def test_one_by_one_affine(self):
        # weight 2, bias 1, input 3 -> logit 7; second class stays at its bias.
        spec = ModelSpec("linear", input_dim=1, num_classes=2)
        params = np.array([2.0, 0.0, 1.0, 0.0])  # w=[2,0], b=[1,0]
        logits = forward(spec, params, np.array([[3.0]]))
        assert logits[0, 0] == 7.0

    def test_matches_naive_loop_oracle(self):
        spec = ModelSpec("mlp", input_dim=5, num_classes=4, hidden_dims=(3,))
        rng = np.random.default_rng(21)
        params = rng.normal(size=spec.total_params)
        batch = rng.normal(size=(4, 5))
        fast = forward(spec, params, batch)
        slow = np.array(naive_forward(spec, params, batch))
        assert np.max(np.abs(fast - slow)) < 1e-12

    def test_dimension_mismatch_raises(self, tiny_mlp):
        with pytest.raises(NumericsError):
            forward(tiny_mlp, np.zeros(tiny_mlp.total_params), np.zeros((2, 5)))
        with pytest.raises(NumericsError):
            forward(tiny_mlp, np.zeros(3), np.zeros((2, 4)))


class TestCrossEntropy:
    def test_uniform_logits_give_exact_ln_c(self):
        # Batch of 4 so the pairwise mean of identical values stays exact.
        logits = np.full((4, 10), 2.5)
        loss, acc = cross_entropy(logits, np.array([0, 3, 5, 9]))
        assert loss == math.log(10)

    def test_saturated_true_class(self):
        logits = np.zeros((3, 4))
        labels = np.array([1, 2, 0])
        logits[np.arange(3), labels] = 1000.0
        loss, acc = cross_entropy(logits, labels)
        assert loss < 1e-12
        assert acc == 1.0

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(scale=3.0, size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        loss, _ = cross_entropy(logits, labels)
        assert abs(loss - mpmath_cross_entropy(logits, labels)) < 1e-10

    def test_argmax_ties_break_to_lowest_class(self):
        logits = np.array([[1.0, 1.0, 0.0]])
        assert cross_entropy(logits, np.array([0]))[1] == 1.0
        assert cross_entropy(logits, np.array([1]))[1] == 0.0

    def test_out_of_range_label_raises(self):
        with pytest.raises(NumericsError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
        with pytest.raises(NumericsError):
            cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))

    def test_empty_batch_raises(self):
        with pytest.raises(NumericsError):
            cross_entropy(np.zeros((0, 3)), np.array([], dtype=int))

    def test_loss_nonnegative_random(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            logits = rng.normal(scale=5.0, size=(6, 4))
            labels = rng.integers(0, 4, size=6)
            loss, _ = cross_entropy(logits, labels)
            assert loss >= 0.0

    def test_nonuniform_rows_do_not_hit_ln_c(self):
        rng = np.random.default_rng(23)
        logits = rng.normal(size=(8, 5))
        loss, _ = cross_entropy(logits, rng.integers(0, 5, size=8))
        assert loss != math.log(5)


class TestBackward:
    def test_saturated_correct_predictions_zero_gradient(self):
        # Confident, correct linear model: softmax is one-hot, so the
        # gradient collapses.
        spec = ModelSpec("linear", input_dim=1, num_classes=2)
        params = np.array([500.0, -500.0, 0.0, 0.0])
        batch = np.array([[1.0], [-1.0]])
        labels = np.array([0, 1])
        grad = backward(spec, params, batch, labels)
        assert np.linalg.norm(grad) < 1e-6

    def test_feature_extract_zeroes_all_but_final_layer(self, tiny_mlp):
        mask = TrainableMask.for_mode("feature_extract", tiny_mlp)
        rng = np.random.default_rng(3)
        grad = backward(
            tiny_mlp,
            rng.normal(size=tiny_mlp.total_params),
            rng.normal(size=(3, 4)),
            rng.integers(0, 3, size=3),
            mask,
        )
        last_start = tiny_mlp.layer_ranges[-1][0]
        assert np.all(grad[:last_start] == 0.0)
        assert np.any(grad[last_start:] != 0.0)

    def test_matches_central_finite_differences(self, tiny_mlp):
        rng = np.random.default_rng(41)
        params = rng.normal(scale=0.7, size=tiny_mlp.total_params)
        batch = rng.normal(size=(3, 4))
        labels = rng.integers(0, 3, size=3)
        analytic = backward(tiny_mlp, params, batch, labels)
        numeric = central_diff_gradient(tiny_mlp, params, batch, labels, h=1e-5)
        assert max_guarded_rel_err(analytic, numeric) < 1e-4

    def test_gradient_check_across_random_architectures(self):
        rng = np.random.default_rng(4242)
        for _ in range(10):
            depth = int(rng.integers(0, 3))
            hidden = tuple(int(rng.integers(2, 7)) for _ in range(depth))
            kind = "mlp" if hidden else "linear"
            spec = ModelSpec(
                kind,
                input_dim=int(rng.integers(2, 8)),
                num_classes=int(rng.integers(2, 5)),
                hidden_dims=hidden,
            )
            params = rng.normal(scale=0.8, size=spec.total_params)
            batch = rng.normal(size=(4, spec.input_dim))
            labels = rng.integers(0, spec.num_classes, size=4)
            analytic = backward(spec, params, batch, labels)
            numeric = central_diff_gradient(spec, params, batch, labels)
            assert max_guarded_rel_err(analytic, numeric) < 1e-4

    def test_loss_and_grad_consistent_with_public_ops(self, tiny_mlp):
        rng = np.random.default_rng(9)
        params = rng.normal(size=tiny_mlp.total_params)
        batch = rng.normal(size=(5, 4))
        labels = rng.integers(0, 3, size=5)
        loss, acc, grad = loss_and_grad(tiny_mlp, params, batch, labels)
        ref_loss, ref_acc = cross_entropy(forward(tiny_mlp, params, batch), labels)
        assert loss == pytest.approx(ref_loss, abs=1e-12)
        assert acc == ref_acc
        assert np.array_equal(grad, backward(tiny_mlp, params, batch, labels))

    def test_pure_function_bitwise(self, tiny_mlp):
        rng = np.random.default_rng(13)
        params = rng.normal(size=tiny_mlp.total_params)
        batch = rng.normal(size=(3, 4))
        labels = rng.integers(0, 3, size=3)
        a = backward(tiny_mlp, params, batch, labels)
        b = backward(tiny_mlp, params, batch, labels)
        assert a.tobytes() == b.tobytes()


class TestSgdStep:
    def test_lr_zero_is_bitwise_identity(self):
        params = np.array([1.0, -0.0, 2.5])
        out = sgd_step(params, np.array([0.3, -0.4, 0.5]), 0.0)
        assert out.tobytes() == params.tobytes()

    def test_single_step_arithmetic(self):
        out = sgd_step(np.array([1.0, 2.0]), np.array([0.5, -0.5]), 0.1)
        assert out == pytest.approx([0.95, 2.05], abs=1e-15)

    def test_frozen_prefix_bitwise_constant_over_100_steps(self, tiny_mlp):
        mask = TrainableMask.for_mode("feature_extract", tiny_mlp)
        rng = np.random.default_rng(31)
        params = rng.normal(size=tiny_mlp.total_params)
        frozen_stop = tiny_mlp.layer_ranges[-1][0]
        before = params[:frozen_stop].tobytes()
        for _ in range(100):
            grad = rng.normal(size=tiny_mlp.total_params)
            params = sgd_step(params, grad, 0.05, mask)
        assert params[:frozen_stop].tobytes() == before

    def test_non_finite_gradient_raises(self):
        with pytest.raises(NonFiniteError):
            sgd_step(np.zeros(2), np.array([np.nan, 0.0]), 0.1)
        with pytest.raises(NonFiniteError):
            sgd_step(np.zeros(2), np.array([np.inf, 0.0]), 0.1)

    def test_length_mismatch_raises(self):
        with pytest.raises(NumericsError):
            sgd_step(np.zeros(3), np.zeros(2), 0.1)

    def test_negative_lr_raises(self):
        with pytest.raises(NumericsError):
            sgd_step(np.zeros(2), np.zeros(2), -0.1)


class TestMaskAndCounts:
    def test_scratch_counts(self):
        spec = ModelSpec("mlp", input_dim=784, num_classes=10, hidden_dims=(64,))
        report = count_params(spec, TrainableMask.for_mode("scratch", spec))
        assert (report.trainable, report.non_trainable, report.total) == (50890, 0, 50890)

    def test_feature_extract_counts(self):
        spec = ModelSpec("mlp", input_dim=784, num_classes=10, hidden_dims=(64,))
        report = count_params(spec, TrainableMask.for_mode("feature_extract", spec))
        assert report.trainable == 64 * 10 + 10 == 650
        assert report.non_trainable == 50240
        assert report.trainable + report.non_trainable == report.total

    def test_linear_feature_extract_everything_trainable(self):
        # A single-layer model *is* its classification layer.
        spec = ModelSpec("linear", input_dim=8, num_classes=4)
        report = count_params(spec, TrainableMask.for_mode("feature_extract", spec))
        assert report.trainable == report.total
        assert report.non_trainable == 0

    def test_accounting_sums_for_random_specs(self):
        rng = np.random.default_rng(77)
        for _ in range(20):
            depth = int(rng.integers(0, 3))
            hidden = tuple(int(rng.integers(1, 9)) for _ in range(depth))
            spec = ModelSpec(
                "mlp" if hidden else "linear",
                input_dim=int(rng.integers(1, 12)),
                num_classes=int(rng.integers(2, 6)),
                hidden_dims=hidden,
            )
            for mode in ("scratch", "finetune", "feature_extract"):
                report = count_params(spec, TrainableMask.for_mode(mode, spec))
                assert report.trainable + report.non_trainable == report.total == spec.total_params

    def test_scratch_mask_rejects_frozen_ranges(self):
        with pytest.raises(NumericsError):
            TrainableMask(mode="scratch", frozen_ranges=((0, 3),))
