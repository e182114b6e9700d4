"""Post-training per-tensor affine int8 quantization of stored weights.

Activations stay fp32: quantized models are dequantized on load and run
through the ordinary forward pass. What shrinks is the stored footprint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Classifier, ModelSpec
from .tensor import Tensor

QMIN, QMAX = -128, 127


@dataclass
class QuantTensor:
    shape: tuple[int, ...]
    q: np.ndarray  # int8
    scale: float  # float64
    zero_point: int  # may fall outside int8 for one-signed tensors
    constant: float | None = None  # set for constant tensors, reconstructed exactly

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        if self.constant is not None:
            return np.full(self.shape, self.constant, dtype=dtype)
        return (np.float64(self.scale) * (self.q.astype(np.float64) - self.zero_point)).astype(dtype)

    def meta(self) -> dict:
        d = {"scale": float(self.scale), "zero_point": int(self.zero_point)}
        if self.constant is not None:
            d["constant"] = float(self.constant)
        return d


def quantize_tensor(x) -> QuantTensor:
    """Per-tensor affine int8 code with ``s = (max - min) / 255``.

    Scale and zero point live in the file header as JSON numbers, so both
    are kept at full precision: a float32 scale would shift ties and move
    code values. The zero point is not clamped to int8, since a tensor whose
    values all share one sign would otherwise lose the top of its range.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize a tensor containing NaN or Inf")
    shape = tuple(x.shape)
    if x.size == 0:
        return QuantTensor(shape, np.zeros(shape, np.int8), 1.0, 0)
    xd = x.astype(np.float64)
    lo, hi = float(xd.min()), float(xd.max())
    if lo == hi:
        return QuantTensor(shape, np.zeros(shape, np.int8), 1.0, 0, constant=float(x.reshape(-1)[0]))
    s = (hi - lo) / (QMAX - QMIN)
    z = int(np.rint(QMIN - lo / s))
    q = np.clip(np.rint(xd / s + z), QMIN, QMAX).astype(np.int8)
    return QuantTensor(shape, q, s, z)


def quantize_array_from_meta(q: np.ndarray, meta: dict) -> QuantTensor:
    return QuantTensor(tuple(q.shape), q, float(meta["scale"]), int(meta["zero_point"]), meta.get("constant"))


@dataclass
class QuantizedModel:
    spec: ModelSpec
    tensors: dict[str, QuantTensor]

    @property
    def payload_bytes(self) -> int:
        return int(sum(t.q.size for t in self.tensors.values()))

    @property
    def footprint_bytes(self) -> int:
        return len(self.to_bytes())

    def to_bytes(self, meta: dict | None = None) -> bytes:
        from .modelfile import pack

        return pack(self.spec, [(n, t.q, t.meta()) for n, t in self.tensors.items()], meta)

    @classmethod
    def from_container(cls, spec: ModelSpec, header: dict, arrays: dict) -> "QuantizedModel":
        tensors = {}
        for entry in header["tensors"]:
            name = entry["name"]
            if entry["dtype"] != "INT8" or "quant" not in entry:
                raise ValueError(f"tensor {name!r} in a quantized file lacks INT8 quantization metadata")
            tensors[name] = quantize_array_from_meta(arrays[name], entry["quant"])
        return cls(spec, tensors)

    def dequantize(self) -> Classifier:
        model = Classifier(self.spec)
        model.load_state_dict({n: t.dequantize() for n, t in self.tensors.items()})
        return model


def quantize_model(model: Classifier) -> QuantizedModel:
    return QuantizedModel(model.spec, {n: quantize_tensor(p.data) for n, p in model.named_parameters()})


def dequantized_forward(qmodel: QuantizedModel, images) -> np.ndarray:
    return qmodel.dequantize().predict(images)


def footprint_report(model: Classifier, qmodel: QuantizedModel | None = None) -> dict:
    from .modelfile import model_bytes

    qmodel = qmodel or quantize_model(model)
    params = model.num_parameters()
    fp32_file = len(model_bytes(model))
    int8_file = qmodel.footprint_bytes
    return {
        "parameters": params,
        "fp32_payload_bytes": 4 * params,
        "int8_payload_bytes": qmodel.payload_bytes,
        "payload_ratio": qmodel.payload_bytes / (4 * params),
        "fp32_file_bytes": fp32_file,
        "int8_file_bytes": int8_file,
        "file_ratio": int8_file / fp32_file,
    }
