"""Tapped-block CNN classifier with per-tap attention and an MLP head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionKind, make_attention
from .layers import Conv2D, Dense, Module
from .tensor import ShapeError, Tensor


@dataclass
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")


def _default_blocks():
    return [ConvBlockSpec(c) for c in (8, 16, 32, 64)]


@dataclass
class ModelSpec:
    """Architecture description. Tap indices are 1-based block numbers."""

    blocks: list[ConvBlockSpec] = field(default_factory=_default_blocks)
    taps: list[int] = field(default_factory=lambda: [2, 3, 4])
    attention: AttentionKind | None = AttentionKind.TRIAXIS
    head_hidden: int = 512
    dropout_rate: float = 0.3
    num_classes: int = 6
    input_size: tuple[int, int] = (32, 32)
    input_channels: int = 3
    se_reduction: int = 4
    num_heads: int = 32
    key_dim: int = 8

    def __post_init__(self):
        self.blocks = [b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b) for b in self.blocks]
        self.taps = sorted(int(t) for t in self.taps)
        self.input_size = tuple(self.input_size)
        if self.attention is not None:
            self.attention = AttentionKind(self.attention)
        if not self.blocks:
            raise ValueError("model needs at least one block")
        if not self.taps:
            raise ValueError("taps must be non-empty")
        bad = [t for t in self.taps if not 1 <= t <= len(self.blocks)]
        if bad:
            raise ValueError(f"taps {bad} are not valid block numbers 1..{len(self.blocks)}")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError(f"duplicate taps {self.taps}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if min(self.input_size) < 1:
            raise ValueError(f"invalid input size {self.input_size}")

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.input_size
        shapes = []
        for b in self.blocks:
            h, w = T.conv_output_size(h, b.kernel, b.stride, "same"), T.conv_output_size(w, b.kernel, b.stride, "same")
            shapes.append((h, w, b.out_channels))
        return shapes

    def head_input_width(self) -> int:
        return sum(self.blocks[t - 1].out_channels for t in self.taps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = None if self.attention is None else self.attention.value
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class LossConfig:
    lam: float = 1e-4
    batch_size: int = 60

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


class Head(Module):
    def __init__(self, d_in: int, hidden: int, num_classes: int, rng: np.random.Generator):
        self.fc1 = Dense(d_in, hidden, rng)
        self.fc2 = Dense(hidden, num_classes, rng)


class Classifier(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng_backbone = np.random.default_rng([seed, 0])
        rng_attention = np.random.default_rng([seed, 1])
        c_in = spec.input_channels
        self.backbone = []
        for b in spec.blocks:
            self.backbone.append(Conv2D(c_in, b.out_channels, b.kernel, rng_backbone, stride=b.stride))
            c_in = b.out_channels
        shapes = spec.feature_shapes()
        self.attention = []
        if spec.attention is not None:
            for t in spec.taps:
                h, w, c = shapes[t - 1]
                self.attention.append(make_attention(
                    spec.attention, h, w, c, rng_attention,
                    reduction=spec.se_reduction, num_heads=spec.num_heads, key_dim=spec.key_dim))
        self.reset_head(seed)

    def reset_head(self, seed: int):
        s = self.spec
        self.head = Head(s.head_input_width(), s.head_hidden, s.num_classes, np.random.default_rng([seed, 2]))

    def features(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        expect = tuple(self.spec.input_size) + (self.spec.input_channels,)
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ShapeError(f"model expects [N, {expect[0]}, {expect[1]}, {expect[2]}] images, got {x.shape}")
        taps = []
        for i, conv in enumerate(self.backbone, start=1):
            x = T.relu(conv(x))
            if i in self.spec.taps:
                taps.append(x)
        if self.attention:
            taps = [att(f) for att, f in zip(self.attention, taps)]
        return T.concat([T.mean(f, (1, 2)) for f in taps], axis=-1)

    def forward(self, images, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        z = self.features(images)
        h = T.relu(self.head.fc1(z))
        h = T.dropout(h, self.spec.dropout_rate, training, rng)
        return T.softmax(self.head.fc2(h), axis=-1)

    __call__ = forward

    def predict(self, images, batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes), np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        if strict and set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in state.items():
            p = params[name]
            if p.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=np.float32)


def kl_l2_loss(pred: Tensor, target, theta, cfg: LossConfig | None = None) -> Tensor:
    """Summed KL(target || pred) over the batch plus ``lam/2 * sum(theta**2)``."""
    cfg = cfg or LossConfig()
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {y.shape}")
    # 0 * log(0 / q) contributes nothing
    entropy_term = float(np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0).sum())
    loss = entropy_term - T.sum(Tensor(y, dtype=pred.data.dtype) * T.log(pred))
    if cfg.lam > 0:
        theta = list(theta)
        if theta:
            l2 = T.sum(T.concat([T.reshape(T.square(p), (-1,)) for p in theta], axis=0))
            loss = loss + l2 * (cfg.lam / 2)
    return loss


def param_count(model: Classifier) -> dict[str, int]:
    counts = {
        "backbone": sum(c.num_parameters() for c in model.backbone),
        "attention": sum(a.num_parameters() for a in model.attention),
        "head": model.head.num_parameters(),
    }
    counts["total"] = sum(counts.values())
    return counts
