"""Adam, the two-phase training schedule, transfer learning and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, Batch, OnlineAugmenter, one_hot
from .model import Classifier, LossConfig, ModelSpec, kl_l2_loss
from .tensor import ShapeError, Tensor


@dataclass
class TrainConfig:
    phase1_epochs: int = 25
    phase2_epochs: int = 5
    phase1_lr: float = 1e-4
    phase2_lr: float = 1e-6
    batch_size: int = 60
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_lambda: float = 1e-4
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        g = g.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState.zeros_like([p.data for p in self.params])

    def step(self, lr: float):
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainResult:
    model: Classifier
    history: list[dict] = field(default_factory=list)
    augment_draws: list[int] = field(default_factory=list)


def trainable_parameters(model: Classifier, freeze_backbone: bool = False) -> list[Tensor]:
    frozen = {id(p) for c in model.backbone for p in c.parameters()} if freeze_backbone else set()
    return [p for p in model.parameters() if id(p) not in frozen]


def train(model: Classifier, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          aug: AugmentConfig | None = None,
          on_epoch: Callable[[dict, Classifier], bool | None] | None = None) -> TrainResult:
    """Two-phase training on an already rotation-expanded set.

    Phase 1 runs with the online augmentation pipeline (each loader batch of
    ``batch_size`` becomes ``3 * batch_size`` after mixup); phase 2 uses the
    plain batches at the lower learning rate. ``images`` are float [0, 1],
    ``labels`` integer class ids. ``on_epoch`` sees each history record and
    may return True to end training early.
    """
    n = len(images)
    if n == 0:
        raise ValueError("training set is empty")
    if len(labels) != n:
        raise ValueError(f"{n} images but {len(labels)} labels")
    aug = aug or AugmentConfig(seed=cfg.seed)
    augmenter = OnlineAugmenter(aug)
    targets = one_hot(np.asarray(labels), model.spec.num_classes)
    images = np.asarray(images, dtype=np.float32)
    params = trainable_parameters(model, cfg.freeze_backbone)
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loss_cfg = LossConfig(cfg.l2_lambda, cfg.batch_size)
    result = TrainResult(model)

    schedule = [(1, cfg.phase1_epochs, cfg.phase1_lr, True), (2, cfg.phase2_epochs, cfg.phase2_lr, False)]
    epoch = 0
    for phase, epochs, lr, online in schedule:
        for _ in range(epochs):
            order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)
            total_loss = 0.0
            correct = seen = 0
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                batch = Batch(images[idx], targets[idx])
                if online and len(idx) >= 2:
                    batch = augmenter(batch, epoch, bi)
                drop_rng = np.random.default_rng([cfg.seed, 11, epoch, bi])
                pred = model.forward(batch.images, training=True, rng=drop_rng)
                loss = kl_l2_loss(pred, batch.labels, params, loss_cfg)
                opt.zero_grad()
                T.backward(loss)
                opt.step(lr)
                total_loss += loss.item()
                correct += int((pred.data.argmax(1) == batch.labels.argmax(1)).sum())
                seen += len(batch)
            epoch += 1
            record = {"epoch": epoch, "phase": phase, "lr": lr,
                      "loss": total_loss / seen, "train_acc": correct / seen}
            result.history.append(record)
            result.augment_draws.append(augmenter.draws)
            if on_epoch is not None and on_epoch(record, model):
                return result
    return result


def transfer(pretrained: Classifier, downstream: ModelSpec, seed: int = 0) -> Classifier:
    """New model for ``downstream`` reusing the pretrained backbone.

    Attention weights are reused too when kind and taps agree; the head is
    always freshly initialised for the downstream class count.
    """
    up = pretrained.spec
    if tuple(up.input_size) != tuple(downstream.input_size) or up.input_channels != downstream.input_channels:
        raise ValueError(f"input mismatch: pretrained {up.input_size}x{up.input_channels}, "
                         f"downstream {downstream.input_size}x{downstream.input_channels}")
    model = Classifier(downstream, seed=seed)
    src = dict(pretrained.named_parameters())
    reuse_attention = up.attention == downstream.attention and up.taps == downstream.taps
    for name, p in model.named_parameters():
        part = name.split(".", 1)[0]
        if part == "head" or (part == "attention" and not reuse_attention):
            continue
        if name not in src:
            raise ValueError(f"architecture mismatch: pretrained model has no tensor {name!r}")
        if src[name].shape != p.shape:
            raise ValueError(f"architecture mismatch at {name!r}: pretrained {src[name].shape}, "
                             f"downstream {p.shape}")
        p.data = src[name].data.copy()
    extra = [n for n in src if n.startswith("backbone.") and n not in dict(model.named_parameters())]
    if extra:
        raise ValueError(f"architecture mismatch: downstream model lacks tensor {extra[0]!r}")
    return model


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist()}


def evaluate_predictions(probs: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> EvalResult:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("evaluation set is empty")
    c = num_classes or probs.shape[1]
    pred = np.argmax(probs, axis=1)  # ties resolve to the lowest class index
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return EvalResult(float(np.trace(confusion) / len(labels)), confusion)


def evaluate(model, images: np.ndarray, labels: np.ndarray) -> EvalResult:
    if len(images) == 0:
        raise ValueError("evaluation set is empty")
    return evaluate_predictions(model.predict(np.asarray(images, dtype=np.float32)), labels,
                                model.spec.num_classes)
