"""The ATNF binary model container.

Layout: ``b"ATNF"``, one version byte, a little-endian u32 header length, the
UTF-8 JSON header, then the raw little-endian tensor payload. The header
carries the model spec and a tensor table (name, shape, dtype, offset,
length and, for INT8 tensors, quantization metadata). Offsets are relative
to the payload start.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes
from .model import Classifier, ModelSpec

MAGIC = b"ATNF"
VERSION = 1
_DTYPES = {"F32": np.dtype("<f4"), "INT8": np.dtype("i1")}


class ModelFileError(Exception):
    pass


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedPayloadError(ModelFileError):
    pass


class OverlappingOffsetsError(ModelFileError):
    pass


class HeaderError(ModelFileError):
    pass


def pack(spec: ModelSpec, tensors: list[tuple[str, np.ndarray, dict | None]], meta: dict | None = None) -> bytes:
    """Serialise ``(name, array, quant_meta)`` triples; arrays must be float32 or int8."""
    table = []
    chunks = []
    offset = 0
    for name, arr, quant in tensors:
        arr = np.asarray(arr)
        if arr.dtype == np.int8:
            dtype = "INT8"
        elif arr.dtype == np.float32:
            dtype = "F32"
        else:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "length": len(raw)}
        if quant is not None:
            entry["quant"] = quant
        table.append(entry)
        chunks.append(raw)
        offset += len(raw)
    header = {"spec": spec.to_dict(), "tensors": table}
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def unpack(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container; returns ``(header, {name: array})`` or raises a ModelFileError."""
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 9:
        raise TruncatedPayloadError("file ends inside the fixed preamble")
    if raw[4] != VERSION:
        raise VersionMismatchError(f"container version {raw[4]}, this reader supports {VERSION}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise TruncatedPayloadError(f"header declares {hlen} bytes, only {len(raw) - 9} present")
    try:
        header = json.loads(raw[9:9 + hlen])
        table = header["tensors"]
        header["spec"]
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"unreadable header: {exc}") from None
    payload = memoryview(raw)[9 + hlen:]

    spans = sorted((t["offset"], t["offset"] + t["length"], t["name"]) for t in table)
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingOffsetsError(f"tensors {n0!r} and {n1!r} overlap at byte {s1}")
    for start, end, name in spans:
        if start < 0 or end < start:
            raise HeaderError(f"tensor {name!r} has invalid span {start}..{end}")
        if end > len(payload):
            raise TruncatedPayloadError(f"tensor {name!r} needs bytes {start}..{end}, payload has {len(payload)}")

    arrays = {}
    for t in table:
        dt = _DTYPES.get(t["dtype"])
        if dt is None:
            raise HeaderError(f"tensor {t['name']!r} has unknown dtype {t['dtype']!r}")
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * dt.itemsize != t["length"]:
            raise HeaderError(f"tensor {t['name']!r}: shape {t['shape']} does not fill {t['length']} bytes")
        buf = payload[t["offset"]:t["offset"] + t["length"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
    return header, arrays


def model_bytes(model: Classifier, meta: dict | None = None) -> bytes:
    return pack(model.spec, [(n, p.data, None) for n, p in model.named_parameters()], meta)


def save_model(path, model, meta: dict | None = None) -> int:
    """Write an fp32 ``Classifier`` or a ``QuantizedModel``; returns the file size."""
    from .quant import QuantizedModel

    raw = model.to_bytes(meta) if isinstance(model, QuantizedModel) else model_bytes(model, meta)
    atomic_write_bytes(path, raw)
    return len(raw)


def load_model(path):
    """Read a container: a ``Classifier`` for fp32 files, a ``QuantizedModel`` for INT8 files."""
    from .quant import QuantizedModel

    raw = Path(path).read_bytes()
    header, arrays = unpack(raw)
    spec = ModelSpec.from_dict(header["spec"])
    if any(t["dtype"] == "INT8" for t in header["tensors"]):
        return QuantizedModel.from_container(spec, header, arrays)
    model = Classifier(spec)
    model.load_state_dict(arrays)
    return model
