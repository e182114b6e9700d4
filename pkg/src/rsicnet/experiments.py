"""Desk-scale experiment protocols shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attention import AttentionKind
from .augment import AugmentConfig, rotate_dataset
from .data import render_dataset, stratified_indices
from .model import Classifier, ModelSpec, param_count
from .train import TrainConfig, evaluate, train, transfer

VARIANTS = ("none", "SE", "CBAM", "TRIAXIS")


@dataclass
class Protocol:
    """Synthetic-data training protocol.

    Learning rates and the crop/erase extents are scaled for 32-pixel images
    trained from scratch; see the README for the reasoning.
    """

    classes: int = 6
    per_class: int = 100
    image_size: int = 32
    train_fraction: float = 0.2
    seed: int = 0
    phase1_epochs: int = 25
    phase2_epochs: int = 5
    phase1_lr: float = 3e-3
    phase2_lr: float = 3e-5
    crop_reduction: int = 2
    erase_extent: int = 3
    model: dict = field(default_factory=dict)  # ModelSpec overrides

    def train_config(self) -> TrainConfig:
        return TrainConfig(phase1_epochs=self.phase1_epochs, phase2_epochs=self.phase2_epochs,
                           phase1_lr=self.phase1_lr, phase2_lr=self.phase2_lr, seed=self.seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(crop_reduction=self.crop_reduction, erase_extent=self.erase_extent, seed=self.seed)

    def model_spec(self, attention: str | None) -> ModelSpec:
        spec = ModelSpec(num_classes=self.classes, input_size=(self.image_size, self.image_size), **self.model)
        return variant_spec(spec, attention)

    def to_dict(self) -> dict:
        return asdict(self)


def variant_spec(spec: ModelSpec, attention: str | None) -> ModelSpec:
    """``spec`` with the given attention; the no-attention baseline reads only the last block."""
    if attention in (None, "none"):
        return replace(spec, attention=None, taps=[len(spec.blocks)])
    return replace(spec, attention=AttentionKind(attention))


@dataclass
class SplitData:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def synthetic_split(classes: int, per_class: int, size: int, train_fraction: float, seed: int,
                    rotate: bool = True) -> SplitData:
    """Render, split and (optionally) rotation-expand the training part, all in memory."""
    images, labels = render_dataset(classes, per_class, size, seed)
    x = images.astype(np.float32) / 255.0
    tr, te = stratified_indices(labels, train_fraction, seed)
    xtr, ytr = x[tr], labels[tr]
    if rotate:
        xtr, ytr = rotate_dataset(xtr, ytr)
    return SplitData(xtr, ytr, x[te], labels[te])


def protocol_data(p: Protocol) -> SplitData:
    return synthetic_split(p.classes, p.per_class, p.image_size, p.train_fraction, p.seed)


def nearest_neighbour_accuracy(data: SplitData) -> float:
    """1-NN on raw pixels, un-rotated training images only."""
    n = len(data.train_images) // 4 if len(data.train_images) % 4 == 0 else len(data.train_images)
    a = data.train_images[:n].reshape(n, -1).astype(np.float64)
    b = data.test_images.reshape(len(data.test_images), -1).astype(np.float64)
    d = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None, :]
    return float((data.train_labels[:n][d.argmin(1)] == data.test_labels).mean())


@dataclass
class RunResult:
    attention: str
    accuracy: float
    parameters: int
    history: list[dict]
    test_curve: list[float]
    model: Classifier = field(repr=False)


def run_variant(p: Protocol, attention: str | None, data: SplitData | None = None,
                track_test: bool = False, log=None) -> RunResult:
    data = data or protocol_data(p)
    model = Classifier(p.model_spec(attention), seed=p.seed)
    curve = []

    def on_epoch(rec, m):
        if track_test:
            curve.append(evaluate(m, data.test_images, data.test_labels).accuracy)
        if log is not None:
            log(f"[{attention or 'none'} seed={p.seed}] {rec}")

    res = train(model, data.train_images, data.train_labels, p.train_config(), p.augment_config(), on_epoch)
    acc = evaluate(model, data.test_images, data.test_labels).accuracy
    return RunResult(attention or "none", acc, param_count(model)["total"], res.history, curve, model)


def compare_attention(p: Protocol, variants=VARIANTS, log=None) -> list[dict]:
    """Train each variant under one protocol; rows of attention, accuracy, parameters."""
    data = protocol_data(p)
    rows = []
    for v in variants:
        r = run_variant(p, v, data, log=log)
        rows.append({"attention": r.attention, "accuracy": r.accuracy, "parameters": r.parameters})
    return rows


@dataclass
class TransferResult:
    scratch_accuracy: float
    scratch_epochs: int
    upstream_accuracy: float
    epochs_to_match: int | None  # None: not reached within the budget
    transfer_curve: list[float]

    @property
    def passed(self) -> bool:
        return self.epochs_to_match is not None and self.epochs_to_match <= self.scratch_epochs // 2


def transfer_experiment(p: Protocol, upstream_classes: int = 10, upstream_seed_offset: int = 1000,
                        scratch: RunResult | None = None, attention: str = "TRIAXIS",
                        log=None) -> TransferResult:
    """Pretrain on a wider synthetic task, fine-tune on ``p``'s task and count epochs.

    The fine-tuned model is evaluated after every epoch of the usual
    schedule and stops once it reaches the from-scratch final accuracy or
    after half the scratch epoch budget.
    """
    data = protocol_data(p)
    if scratch is None:
        scratch = run_variant(p, attention, data, log=log)
    total = p.phase1_epochs + p.phase2_epochs

    up = replace(p, classes=upstream_classes, seed=p.seed + upstream_seed_offset)
    up_run = run_variant(up, attention, log=log)

    model = transfer(up_run.model, p.model_spec(attention), seed=p.seed)
    curve: list[float] = []
    reached: list[int] = []

    def on_epoch(rec, m):
        acc = evaluate(m, data.test_images, data.test_labels).accuracy
        curve.append(acc)
        if log is not None:
            log(f"[transfer seed={p.seed}] {rec} test={acc:.4f}")
        if acc >= scratch.accuracy and not reached:
            reached.append(rec["epoch"])
        return bool(reached) or rec["epoch"] >= total // 2

    train(model, data.train_images, data.train_labels, p.train_config(), p.augment_config(), on_epoch)
    return TransferResult(scratch.accuracy, total, up_run.accuracy, reached[0] if reached else None, curve)
