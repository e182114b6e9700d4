from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsicnet.augment import AugmentConfig
from rsicnet.model import Classifier, ConvBlockSpec, ModelSpec
from rsicnet.train import (Adam, OptimizerState, TrainConfig, adam_step, evaluate, evaluate_predictions, train,
                           transfer, trainable_parameters)
from rsicnet.tensor import Tensor

TOY = ModelSpec(blocks=[ConvBlockSpec(4), ConvBlockSpec(8)], taps=[1, 2], head_hidden=16, num_classes=3,
                input_size=(8, 8), num_heads=2, key_dim=3, attention="SE")
NOAUG = AugmentConfig(crop_reduction=0, erase_extent=0)


def _toy_data(n=24, seed=0):
    g = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    x = g.uniform(0, 0.3, size=(n, 8, 8, 3)).astype(np.float32)
    x[np.arange(n), :, :, labels] += 0.6  # class shows up as the dominant colour channel
    return x, labels


def _weights(model):
    return [p.data.copy() for p in model.parameters()]


# ---------------------------------------------------------------- Adam

def test_first_adam_step_moves_each_coordinate_by_lr():
    p = np.array([1.0, -2.0, 3.0])
    adam_step([p], [np.array([0.5, -4.0, 1e-3])], OptimizerState.zeros_like([p]), lr=0.01)
    assert np.allclose(p, [0.99, -1.99, 2.99], atol=1e-6)


def test_zero_gradient_leaves_parameters():
    p = np.array([1.0, 2.0])
    state = OptimizerState.zeros_like([p])
    for _ in range(3):
        adam_step([p], [np.zeros(2)], state, lr=0.1)
    assert p.tolist() == [1.0, 2.0] and state.t == 3


def test_adam_against_hand_rolled_loop():
    g = np.random.default_rng(0)
    p = g.normal(size=4)
    ref = p.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = OptimizerState.zeros_like([p])
    for t in range(1, 6):
        grad = g.normal(size=4)
        adam_step([p], [grad], state, lr=0.05)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad ** 2
        ref -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p, ref, atol=1e-12)


def test_quadratic_loss_decreases():
    w = Tensor([3.0, -2.0], requires_grad=True, dtype=np.float64)
    opt = Adam([w])
    losses = []
    for _ in range(20):
        loss = (w * w).sum()
        opt.zero_grad()
        loss.backward()
        opt.step(0.1)
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_adam_is_elementwise(k, seed):
    # updating tensors separately or as one flat vector gives the same result
    g = np.random.default_rng(seed)
    sizes = g.integers(1, 5, size=k)
    parts = [g.normal(size=s) for s in sizes]
    flat = np.concatenate(parts)
    s_parts, s_flat = OptimizerState.zeros_like(parts), OptimizerState.zeros_like([flat])
    for _ in range(3):
        grads = [g.normal(size=s) for s in sizes]
        adam_step(parts, grads, s_parts, 0.01)
        adam_step([flat], [np.concatenate(grads)], s_flat, 0.01)
    assert np.allclose(np.concatenate(parts), flat, atol=1e-12)


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step([p], [], OptimizerState.zeros_like([p]), 0.1)


# ---------------------------------------------------------------- training loop

def test_zero_epochs_is_a_no_op():
    model = Classifier(TOY, seed=1)
    before = _weights(model)
    x, y = _toy_data()
    res = train(model, x, y, TrainConfig(phase1_epochs=0, phase2_epochs=0))
    assert res.history == []
    assert all(np.array_equal(a, b.data) for a, b in zip(before, model.parameters()))


def test_loss_falls_on_a_fixed_batch():
    model = Classifier(TOY, seed=0)
    x, y = _toy_data(12)
    res = train(model, x, y, TrainConfig(phase1_epochs=0, phase2_epochs=50, phase2_lr=1e-2, batch_size=12))
    losses = [r["loss"] for r in res.history]
    assert losses[-1] < 0.5 * losses[0]


def test_learns_separable_toy_task():
    x, y = _toy_data(48)
    model = Classifier(TOY, seed=0)
    train(model, x, y, TrainConfig(phase1_epochs=8, phase2_epochs=2, phase1_lr=1e-2, phase2_lr=1e-4, batch_size=12),
          NOAUG)
    xt, yt = _toy_data(30, seed=5)
    assert evaluate(model, xt, yt).accuracy >= 0.9


def test_online_batches_are_tripled():
    x, y = _toy_data(60)
    res = train(Classifier(TOY), x, y, TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=60),
                NOAUG)
    # train accuracy is counted over the samples actually seen
    assert res.history[0]["train_acc"] * 180 == pytest.approx(round(res.history[0]["train_acc"] * 180))
    assert res.history[1]["train_acc"] * 60 == pytest.approx(round(res.history[1]["train_acc"] * 60))


def test_phase_two_draws_no_augmentation():
    x, y = _toy_data()
    res = train(Classifier(TOY), x, y, TrainConfig(phase1_epochs=2, phase2_epochs=3, batch_size=12),
                NOAUG)
    draws = res.augment_draws
    assert draws[0] > 0 and draws[1] > draws[0]
    assert draws[2] == draws[3] == draws[4] == draws[1]
    assert [r["phase"] for r in res.history] == [1, 1, 2, 2, 2]


def test_training_is_bitwise_reproducible():
    x, y = _toy_data()
    cfg = TrainConfig(phase1_epochs=2, phase2_epochs=1, batch_size=8, seed=3)
    runs = []
    for _ in range(2):
        m = Classifier(TOY, seed=3)
        res = train(m, x, y, cfg, AugmentConfig(crop_reduction=1, erase_extent=2, seed=3))
        runs.append((_weights(m), res.history))
    assert runs[0][1] == runs[1][1]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(runs[0][0], runs[1][0]))


def test_early_stop_hook():
    x, y = _toy_data()
    res = train(Classifier(TOY), x, y, TrainConfig(phase1_epochs=5, phase2_epochs=5, batch_size=12),
                NOAUG, on_epoch=lambda rec, m: rec["epoch"] == 2)
    assert len(res.history) == 2


def test_freeze_backbone_keeps_convs():
    x, y = _toy_data()
    model = Classifier(TOY, seed=2)
    before = [c.w.data.copy() for c in model.backbone]
    head_before = model.head.fc1.w.data.copy()
    train(model, x, y, TrainConfig(phase1_epochs=1, phase2_epochs=0, batch_size=12, freeze_backbone=True), NOAUG)
    assert all(np.array_equal(b, c.w.data) for b, c in zip(before, model.backbone))
    assert not np.array_equal(head_before, model.head.fc1.w.data)
    assert len(trainable_parameters(model, True)) < len(trainable_parameters(model))


def test_train_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train(Classifier(TOY), np.zeros((0, 8, 8, 3)), np.zeros(0, int), TrainConfig())
    with pytest.raises(ValueError):
        train(Classifier(TOY), np.zeros((2, 8, 8, 3)), np.zeros(3, int), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(phase1_lr=0)


# ---------------------------------------------------------------- transfer

def test_transfer_copies_backbone_and_attention():
    up = Classifier(TOY, seed=1)
    down = transfer(up, TOY, seed=9)
    src = dict(up.named_parameters())
    for name, p in down.named_parameters():
        if name.startswith("head"):
            if name.endswith(".w"):  # biases start at zero on both sides
                assert not np.array_equal(p.data, src[name].data)
        else:
            assert p.data.tobytes() == src[name].data.tobytes()


def test_transfer_changes_head_width():
    up = Classifier(replace(TOY, num_classes=10), seed=1)
    down = transfer(up, TOY)
    assert down.head.fc2.w.shape[1] == 3 and up.head.fc2.w.shape[1] == 10
    assert np.array_equal(down.backbone[0].w.data, up.backbone[0].w.data)


def test_transfer_skips_attention_of_other_kind():
    up = Classifier(TOY, seed=1)
    down = transfer(up, replace(TOY, attention="CBAM"), seed=2)
    assert np.array_equal(down.backbone[1].w.data, up.backbone[1].w.data)


def test_transfer_mismatch_raises():
    up = Classifier(TOY)
    with pytest.raises(ValueError):
        transfer(up, replace(TOY, blocks=[ConvBlockSpec(4), ConvBlockSpec(16)]))
    with pytest.raises(ValueError):
        transfer(up, replace(TOY, input_size=(16, 16)))


# ---------------------------------------------------------------- evaluation

def test_ties_go_to_lowest_class():
    res = evaluate_predictions(np.full((6, 3), 1 / 3), np.array([0, 0, 1, 1, 2, 2]))
    assert res.accuracy == pytest.approx(1 / 3)
    assert res.confusion[:, 0].tolist() == [2, 2, 2]


def test_perfect_predictions_give_diagonal_confusion():
    labels = np.array([2, 0, 1, 1])
    res = evaluate_predictions(np.eye(3)[labels], labels)
    assert res.accuracy == 1.0 and np.array_equal(res.confusion, np.diag([1, 2, 1]))


@given(st.integers(1, 30), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_confusion_counts_every_sample(n, c, seed):
    g = np.random.default_rng(seed)
    res = evaluate_predictions(g.uniform(size=(n, c)), g.integers(0, c, n))
    assert res.confusion.sum() == n
    assert res.accuracy == pytest.approx(np.trace(res.confusion) / n)


def test_empty_evaluation_rejected():
    with pytest.raises(ValueError):
        evaluate_predictions(np.zeros((0, 3)), np.zeros(0, int))
