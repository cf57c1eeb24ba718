import math

import numpy as np
import pytest

from segforge.autodiff import ShapeError, Tape, Tensor
from segforge.data import Sample
from segforge.training import (
    EpochStats,
    TrainConfig,
    TrainData,
    adam_step,
    bce_loss,
    dice_binary,
    evaluate,
    format_history_line,
    history_header,
    init_adam,
    iou_binary,
    soft_dice_loss,
    train,
    write_history,
)
from segforge.unet import ConfigError, UNetConfig, build

from grad_utils import assert_grad_close, numeric_gradient


def dice_counting_oracle(pred, truth):
    """Brute-force pixel counting, independent of the library implementation."""
    inter = 0
    a = 0
    b = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = bool(pred[i, j])
            t = bool(truth[i, j])
            inter += p and t
            a += p
            b += t
    if a + b == 0:
        return 1.0
    return 2.0 * inter / (a + b)


class TestDiceBinary:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), dtype=bool)
        m[1:3, 1:3] = True
        assert dice_binary(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dice_binary(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, :4] = True  # |A| = 4
        b[0, 2:] = True
        b[1, :2] = True  # |B| = 4, overlap 2
        assert dice_binary(a, b) == 0.5

    def test_both_empty_convention(self):
        empty = np.zeros((3, 3), dtype=bool)
        assert dice_binary(empty, empty) == 1.0
        assert iou_binary(empty, empty) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_binary(np.zeros((2, 2), bool), np.zeros((3, 3), bool))

    def test_matches_counting_oracle_on_random_masks(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            a = rng.random((32, 32)) > rng.uniform(0.2, 0.8)
            b = rng.random((32, 32)) > rng.uniform(0.2, 0.8)
            assert abs(dice_binary(a, b) - dice_counting_oracle(a, b)) < 1e-12

    def test_dice_iou_identity(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            a = rng.random((16, 16)) > 0.5
            b = rng.random((16, 16)) > 0.5
            dice = dice_binary(a, b)
            iou = iou_binary(a, b)
            assert abs(dice - 2 * iou / (1 + iou)) < 1e-9
            assert dice >= iou


class TestSoftDice:
    def test_perfect_prediction_zero_loss(self):
        ones = np.ones((1, 1, 4, 4))
        loss = soft_dice_loss(Tensor(ones), ones)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_evaluated_value(self):
        # prob 0.5 on 16 pixels, truth all ones: 1 - (16+1)/(8+16+1) = 0.32
        prob = Tensor(np.full((1, 1, 4, 4), 0.5))
        truth = np.ones((1, 1, 4, 4))
        assert soft_dice_loss(prob, truth).item() == pytest.approx(0.32)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 4, 4)))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(21)
        p_data = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
        truth = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        prob = Tensor(p_data, requires_grad=True)
        with Tape() as tape:
            loss = soft_dice_loss(prob, truth)
        grads = tape.backward(loss)
        numeric = numeric_gradient(
            lambda: soft_dice_loss(Tensor(p_data), truth).item(), p_data
        )
        assert_grad_close(grads[prob], numeric, label="soft_dice")


class TestBce:
    def test_half_probability_is_ln2(self):
        prob = Tensor(np.full((1, 1, 4, 4), 0.5))
        truth = (np.random.default_rng(0).random((1, 1, 4, 4)) > 0.5).astype(float)
        assert bce_loss(prob, truth).item() == pytest.approx(math.log(2.0))

    def test_exact_prediction_is_tiny(self):
        truth = np.zeros((1, 1, 2, 2))
        truth[0, 0, 0, 0] = 1.0
        loss = bce_loss(Tensor(truth.copy()), truth)
        assert loss.item() <= 1e-6

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(22)
        p_data = rng.uniform(0.05, 0.95, size=(2, 1, 3, 3))
        truth = (rng.random((2, 1, 3, 3)) > 0.5).astype(np.float64)
        prob = Tensor(p_data, requires_grad=True)
        with Tape() as tape:
            loss = bce_loss(prob, truth)
        grads = tape.backward(loss)
        numeric = numeric_gradient(lambda: bce_loss(Tensor(p_data), truth).item(), p_data)
        assert_grad_close(grads[prob], numeric, label="bce")


def tiny_params():
    return build(UNetConfig(depth=1, base_channels=2, input_size=(8, 8)), seed=0)


class TestAdam:
    def test_first_step_magnitude(self):
        # with a constant gradient g the bias-corrected first step is
        # -lr * g / (|g| + eps), i.e. almost exactly -lr
        params = tiny_params()
        state = init_adam(params)
        config = TrainConfig(learning_rate=1e-4)
        before = {name: arr.copy() for name, arr in params.named_arrays()}
        grads = {name: np.full_like(arr, 0.3) for name, arr in params.named_arrays()}
        adam_step(params, grads, state, config)
        for name, arr in params.named_arrays():
            delta = arr - before[name]
            expected = -1e-4 * 0.3 / (0.3 + 1e-8)
            np.testing.assert_allclose(delta, expected, rtol=1e-9)
        assert state.t == 1

    def test_zero_gradient_leaves_params_unchanged(self):
        params = tiny_params()
        state = init_adam(params)
        config = TrainConfig()
        before = {name: arr.copy() for name, arr in params.named_arrays()}
        zeros = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
        for _ in range(5):
            adam_step(params, zeros, state, config)
        for name, arr in params.named_arrays():
            np.testing.assert_array_equal(arr, before[name])

    def test_update_opposes_first_moment(self):
        params = tiny_params()
        state = init_adam(params)
        config = TrainConfig()
        rng = np.random.default_rng(3)
        grads = {name: rng.normal(size=arr.shape) for name, arr in params.named_arrays()}
        before = {name: arr.copy() for name, arr in params.named_arrays()}
        adam_step(params, grads, state, config)
        for name, arr in params.named_arrays():
            delta = arr - before[name]
            m_hat = state.m[name] / (1 - config.adam_beta1)
            moved = m_hat != 0
            assert (np.sign(delta[moved]) == -np.sign(m_hat[moved])).all()

    def test_moments_mirror_param_shapes_and_v_nonnegative(self):
        params = tiny_params()
        state = init_adam(params)
        config = TrainConfig()
        rng = np.random.default_rng(4)
        grads = {name: rng.normal(size=arr.shape) for name, arr in params.named_arrays()}
        adam_step(params, grads, state, config)
        for name, arr in params.named_arrays():
            assert state.m[name].shape == arr.shape
            assert state.v[name].shape == arr.shape
            assert (state.v[name] >= 0).all()

    def test_shape_mismatch_rejected(self):
        params = tiny_params()
        state = init_adam(params)
        grads = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
        first = next(iter(grads))
        grads[first] = np.zeros((1, 1, 1, 1))
        with pytest.raises(ShapeError):
            adam_step(params, grads, state, TrainConfig())


class TestTrainConfig:
    def test_defaults_match_training_regime(self):
        cfg = TrainConfig()
        assert cfg.epochs == 50
        assert cfg.batch_size == 2
        assert cfg.adam_beta1 == 0.9
        assert cfg.adam_beta2 == 0.999
        assert cfg.loss_kind == "bce_plus_dice"

    @pytest.mark.parametrize(
        "bad",
        [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0),
         dict(adam_beta1=1.0), dict(loss_kind="hinge")],
    )
    def test_invalid_rejected(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def synthetic_samples(count, seed, size=8):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        mask = np.zeros((size, size), dtype=bool)
        cy, cx = rng.integers(2, size - 2), rng.integers(2, size - 2)
        mask[cy - 1 : cy + 2, cx - 1 : cx + 2] = True
        image = np.clip(mask * 0.7 + rng.normal(0, 0.08, (size, size)) + 0.15, 0, 1)
        samples.append(Sample(image=image, mask=mask, id=f"s{i}"))
    return samples


class TestTrainLoop:
    def test_history_length_equals_epochs(self):
        samples = synthetic_samples(4, seed=0)
        params = build(UNetConfig(depth=1, base_channels=2, input_size=(8, 8)), seed=0)
        _, history = train(params, TrainData(train=samples), TrainConfig(epochs=3, seed=0))
        assert [h.epoch for h in history] == [1, 2, 3]

    def test_determinism_same_seed_same_history(self):
        samples = synthetic_samples(4, seed=1)
        histories = []
        for _ in range(2):
            params = build(UNetConfig(depth=1, base_channels=2, input_size=(8, 8)), seed=1)
            _, history = train(
                params,
                TrainData(train=samples, val=samples[:2]),
                TrainConfig(epochs=2, seed=7),
            )
            histories.append([format_history_line(h) for h in history])
        assert histories[0] == histories[1]

    def test_empty_dataset_rejected(self):
        params = build(UNetConfig(depth=1, base_channels=2, input_size=(8, 8)), seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(params, TrainData(train=[]), TrainConfig(epochs=1))

    def test_loss_decreases_on_easy_problem(self):
        samples = synthetic_samples(2, seed=2)
        params = build(UNetConfig(depth=1, base_channels=4, input_size=(8, 8)), seed=2)
        _, history = train(
            params,
            TrainData(train=samples),
            TrainConfig(epochs=30, batch_size=2, learning_rate=1e-3, seed=2),
        )
        assert history[-1].mean_loss < history[0].mean_loss

    def test_history_file_format(self, tmp_path):
        path = tmp_path / "history.csv"
        write_history(path, [EpochStats(1, 0.5, 0.25, 0.375)])
        lines = path.read_text().splitlines()
        assert lines[0] == history_header() == "epoch,mean_loss,val_dice_raw,val_dice_post"
        assert lines[1] == "1,0.500000,0.250000,0.375000"


class TestEvaluate:
    def test_perfect_stub_scores_one(self):
        # feed the ground truth through an identity "model": build samples whose
        # image rounds to the mask, and a params stub via monkeypatching is
        # overkill; instead check the metric path with evaluate on a trained-free
        # prediction by constructing prob == mask through a tiny wrapper
        samples = synthetic_samples(3, seed=5)
        rows_raw, rows_post = [], []
        from segforge import morphology

        pc = morphology.PostprocessConfig(pipeline=(), keep_largest=2)
        for s in samples:
            prob = s.mask.astype(float)
            raw = morphology.binarize(prob, pc.threshold)
            post = morphology.postprocess(prob, pc)
            rows_raw.append(dice_binary(raw, s.mask))
            rows_post.append(dice_binary(post, s.mask))
        assert rows_raw == [1.0] * 3
        assert rows_post == [1.0] * 3

    def test_report_counts_and_identity(self):
        samples = synthetic_samples(5, seed=6)
        params = build(UNetConfig(depth=1, base_channels=2, input_size=(8, 8)), seed=3)
        raw, post = evaluate(params, samples)
        assert raw.count == post.count == 5
        assert raw.stage == "raw" and post.stage == "postprocessed"
        for report in (raw, post):
            for row in report.rows:
                assert 0.0 <= row.iou <= row.dice <= 1.0
                assert abs(row.dice - 2 * row.iou / (1 + row.iou)) < 1e-9

    def test_pooled_aggregate_differs_from_mean(self):
        samples = synthetic_samples(4, seed=7, size=8) + synthetic_samples(2, seed=8, size=8)
        params = build(UNetConfig(depth=1, base_channels=2, input_size=(8, 8)), seed=4)
        per_image, _ = evaluate(params, samples)
        pooled, _ = evaluate(params, samples, pooled=True)
        assert per_image.rows == pooled.rows  # rows stay per-image
        assert isinstance(pooled.mean_dice, float)
