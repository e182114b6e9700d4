"""Finite-difference checks over every layer type and a full small model."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionKind, make_attention
from .gradcheck import GradCheckReport, grad_check
from .layers import Conv2D, Dense
from .model import Classifier, ConvBlockSpec, LossConfig, ModelSpec, kl_l2_loss
from .tensor import Tensor


@dataclass
class SuiteEntry:
    name: str
    report: GradCheckReport

    def to_dict(self) -> dict:
        r = self.report
        return {"name": self.name, "passed": r.passed, "fraction_within": r.fraction_within,
                "max_rel_error": r.max_error, "coords": int(r.rel_errors.size)}


def _probe(rng, shape):
    # fixed random projection: a scalar objective sensitive to every output
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _scalar(y: Tensor, r: Tensor) -> Tensor:
    return T.sum(y * r)


def _check(name, fn, tensors, rng, **kw) -> SuiteEntry:
    with T.no_grad():
        shape = fn().shape
    r = _probe(rng, shape)
    return SuiteEntry(name, grad_check(lambda: _scalar(fn(), r), tensors, **kw))


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def smooth_model(spec: ModelSpec, seed: int = 0, bias: float = 0.5) -> Classifier:
    """Model whose ReLU pre-activations sit away from zero at init.

    Positive backbone and hidden biases keep finite differences from
    straddling a kink, which would make the check measure the
    non-differentiable point rather than the gradient.
    """
    model = Classifier(spec, seed=seed)
    for conv in model.backbone:
        conv.b.data[:] = bias
    model.head.fc1.b.data[:] = bias
    return model


def layer_checks(seed: int = 0, h: float = 1e-3, tol: float = 1e-3) -> list[SuiteEntry]:
    rng = np.random.default_rng(seed)
    kw = dict(h=h, tol=tol)
    out = []

    x = _param(rng, 4, 5)
    dense = Dense(5, 3, rng)
    out.append(_check("dense", lambda: dense(x), [x, dense.w, dense.b], rng, **kw))

    img = _param(rng, 2, 7, 7, 3)
    for stride, pad in [(1, "same"), (2, "same"), (2, "valid")]:
        conv = Conv2D(3, 4, 3, rng, stride=stride)
        conv.b.data[:] = rng.normal(size=4)
        out.append(_check(f"conv2d_s{stride}_{pad}",
                          lambda conv=conv, pad=pad: T.conv2d(img, conv.w, conv.b, conv.stride, pad),
                          [img, conv.w, conv.b], rng, **kw))

    a = _param(rng, 3, 4)
    b = _param(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    # at least 0.1 from the kink, far beyond any sensible step h
    off_kink = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    out.append(_check("add_mul_sub", lambda: (a * b - a) + b, [a, b], rng, **kw))
    out.append(_check("div", lambda: a / pos, [a, pos], rng, **kw))
    out.append(_check("exp_log", lambda: T.exp(a) + T.log(pos), [a, pos], rng, **kw))
    out.append(_check("relu", lambda: T.relu(off_kink), [off_kink], rng, **kw))
    out.append(_check("sigmoid", lambda: T.sigmoid(a), [a], rng, **kw))
    out.append(_check("softmax", lambda: T.softmax(a, axis=-1), [a], rng, **kw))
    out.append(_check("reduce_sum_mean", lambda: T.sum(a, 0) + T.mean(a, 0), [a], rng, **kw))
    out.append(_check("reduce_max", lambda: T.max(a, 1), [a], rng, **kw))

    m1 = _param(rng, 2, 1, 3, 4)
    m2 = _param(rng, 5, 4, 2)
    out.append(_check("matmul_broadcast", lambda: T.matmul(m1, m2), [m1, m2], rng, **kw))
    out.append(_check("layout", lambda: T.concat([T.transpose(a, (1, 0)), T.reshape(b, (4, 3))], axis=1),
                      [a, b], rng, **kw))
    out.append(_check("dropout", lambda: T.dropout(a, 0.3, True, np.random.default_rng(5)), [a], rng, **kw))

    fmap = _param(rng, 5, 6, 8, scale=0.5)
    for kind in AttentionKind:
        layer = make_attention(kind, 5, 6, 8, rng, reduction=4, num_heads=3, key_dim=4)
        out.append(_check(f"attention_{kind.value}", lambda layer=layer: layer(fmap),
                          [fmap] + layer.parameters(), rng, **kw))

    logits = _param(rng, 3, 4)
    target = np.full((3, 4), 0.1)
    target[np.arange(3), [0, 2, 1]] = 0.7
    theta = [_param(rng, 2, 3), _param(rng, 5)]
    out.append(SuiteEntry("kl_l2_loss", grad_check(
        lambda: kl_l2_loss(T.softmax(logits, -1), target, theta, LossConfig(lam=1e-4)),
        [logits] + theta, h=h, tol=tol)))
    return out


def model_check(seed: int = 0, attention: str | None = "TRIAXIS", h: float = 1e-3, tol: float = 1e-3,
                max_coords: int | None = 600) -> SuiteEntry:
    """loss(forward(x)) of a 2-block model against all its parameters."""
    spec = ModelSpec(blocks=[ConvBlockSpec(4), ConvBlockSpec(8)], taps=[1, 2], attention=attention,
                     head_hidden=16, num_classes=3, input_size=(8, 8), num_heads=2, key_dim=3)
    model = smooth_model(spec, seed)
    rng = np.random.default_rng([seed, 99])
    images = rng.uniform(size=(2, 8, 8, 3))
    target = np.eye(3)[[0, 2]]
    params = model.parameters()

    def f():
        return kl_l2_loss(model.forward(images, training=True, rng=np.random.default_rng(3)),
                          target, params, LossConfig(lam=1e-4))

    return SuiteEntry(f"model_loss_{attention or 'none'}",
                      grad_check(f, params, h=h, tol=tol, max_coords=max_coords, seed=seed))


def run_suite(seed: int = 0, h: float = 1e-3, tol: float = 1e-3) -> dict:
    t0 = time.perf_counter()
    entries = layer_checks(seed, h, tol)
    entries += [model_check(seed, kind, h, tol) for kind in (None, "SE", "CBAM", "TRIAXIS")]
    return {"passed": all(e.report.passed for e in entries),
            "seconds": time.perf_counter() - t0,
            "checks": [e.to_dict() for e in entries]}
