"""Dense tensors with reverse-mode autodiff over a dynamic tape.

Every differentiable op appends one node to the current thread's tape. Nodes
are appended after their inputs exist, so insertion order is already a
topological order and ``backward`` just walks the tape in reverse.

Layout convention: images and feature maps are ``[H, W, C]`` (optionally with a
leading batch axis), row-major.
"""
from __future__ import annotations

import builtins
import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12
ACC = np.float64  # accumulator dtype for matmul / conv / reductions


class ShapeError(ValueError):
    pass


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops for one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0
        self.enabled = True

    def record(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_gen")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=np.float32 if dtype is None else dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._gen = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        if self.requires_grad:
            return True
        return self.node_id is not None and self._gen == get_tape().generation

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, axes, "sum", keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, axes, "mean", keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce(self, axes, "max", keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(x, dtype=dtype)


def _result_dtype(*arrays: np.ndarray):
    return np.result_type(*arrays)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable, dtype=None) -> Tensor:
    if dtype is None:
        dtype = _result_dtype(*(t.data for t in inputs))
    out = Tensor(data, dtype=dtype)
    tape = get_tape()
    if tape.enabled and any(t.tracked for t in inputs):
        out.node_id = tape.record(_Node(op, tuple(inputs), backward_fn))
        out._gen = tape.generation
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def elementwise(op_kind: str, a, b) -> Tensor:
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return _ELEMENTWISE[op_kind](a, b)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad = a.data
    # keep the sign of the denominator, push its magnitude away from zero
    bd = np.where(b.data < 0, np.minimum(b.data, -EPS), np.maximum(b.data, EPS)).astype(b.data.dtype)

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), "div", bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    """Natural log with the argument clamped to at least ``EPS``."""
    xd = x.data
    safe = np.maximum(xd, EPS)
    live = xd >= EPS
    return _make(np.log(safe), (x,), "log", lambda g: (np.where(live, g / safe, 0.0),))


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # branch on sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _make(y, (x,), "sigmoid", lambda g: (g * y * (1 - y),))


def softmax(x: Tensor, axis: int) -> Tensor:
    xd = x.data.astype(ACC)
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        g = g.astype(ACC)
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), "softmax", bw, dtype=x.data.dtype)


def activation(x: Tensor, kind: str, axis: int | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax requires an axis")
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({a % ndim if -ndim <= a < ndim else _bad_axis(a, ndim) for a in axes}))
    if not axes:
        raise ValueError("reduce needs a non-empty axis set")
    return axes


def _bad_axis(a, ndim):
    raise ShapeError(f"axis {a} out of range for rank {ndim}")


def reduce(x: Tensor, axes=None, mode: str = "mean", keepdims: bool = False) -> Tensor:
    """Sum/mean/max over ``axes`` (all axes when ``None``).

    The max gradient goes to the first maximal element in row-major order.
    """
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        raise ValueError("reduce needs a non-empty axis set")
    axes = _norm_axes(axes, x.ndim)
    in_shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
    out_shape = kept if keepdims else tuple(n for i, n in enumerate(in_shape) if i not in axes)
    xd = x.data

    if mode in ("sum", "mean"):
        acc = xd.astype(ACC).sum(axis=axes)
        count = int(np.prod([in_shape[a] for a in axes]))
        scale = 1.0 / count if mode == "mean" else 1.0
        y = (acc * scale).reshape(out_shape)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) * scale, in_shape),)

        return _make(y, (x,), mode, bw, dtype=xd.dtype)

    if mode == "max":
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = np.transpose(xd, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].reshape(out_shape)

        def bw(g):
            gflat = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(rest + axes)),)

        return _make(y, (x,), "max", bw)

    raise ValueError(f"unknown reduce mode {mode!r}")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce(x, axes, "mean", keepdims)


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, axes, "sum", keepdims)


def max(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, axes, "max", keepdims)


# ---------------------------------------------------------------- layout

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {in_shape} to {tuple(shape)}") from None
    return _make(y, (x,), "reshape", lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, tensors, "concat", bw)


# ---------------------------------------------------------------- linear algebra

def _matmul_grad(other: np.ndarray, g: np.ndarray, target_shape: tuple[int, ...], wrt: str) -> np.ndarray:
    """Gradient of one matmul operand with broadcast batch axes folded into the contraction."""
    nb = g.ndim - 2
    batch = g.shape[:-2]
    other = np.broadcast_to(other, batch + other.shape[-2:])
    tb = (1,) * (nb - (len(target_shape) - 2)) + tuple(target_shape[:-2])
    keep = [i for i in range(nb) if tb[i] == batch[i]]
    red = [i for i in range(nb) if tb[i] != batch[i]]
    kp = int(np.prod([batch[i] for i in keep]))
    rp = int(np.prod([batch[i] for i in red]))
    if wrt == "b":
        # dB[K, k, n] = sum_{R, m} A[K, R, m, k] dY[K, R, m, n]
        a = np.transpose(other, keep + red + [nb, nb + 1]).reshape(kp, rp * other.shape[-2], other.shape[-1])
        gg = np.transpose(g, keep + red + [nb, nb + 1]).reshape(kp, rp * g.shape[-2], g.shape[-1])
        out = np.swapaxes(a, -1, -2) @ gg
    else:
        # dA[K, m, k] = sum_{R, n} dY[K, R, m, n] B[K, R, k, n]
        gg = np.transpose(g, keep + [nb] + red + [nb + 1]).reshape(kp, g.shape[-2], rp * g.shape[-1])
        b = np.transpose(other, keep + red + [nb + 1, nb]).reshape(kp, rp * other.shape[-1], other.shape[-2])
        out = gg @ b
    return out.reshape(target_shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data.astype(ACC), b.data.astype(ACC)
    y = ad @ bd

    def bw(g):
        g = g.astype(ACC)
        return _matmul_grad(bd, g, a.shape, "a"), _matmul_grad(ad, g, b.shape, "b")

    return _make(y, (a, b), "matmul", bw, dtype=_result_dtype(a.data, b.data))


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = builtins.max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``[N,]H,W,Cin`` input with a ``kh,kw,Cin,Cout`` kernel."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d expects [N,]H,W,C input and 4-d kernel, got {x.shape} and {w.shape}")
    xd = x.data[None] if squeeze else x.data
    n, h, wd, cin = xd.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(wd, kw, stride)
    else:
        pt = pb = pl = pr = 0
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    if kh > h + pt + pb or kw > wd + pl + pr:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{wd + pl + pr}")

    xp = np.pad(xd.astype(ACC), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: [n, Hp-kh+1, Wp-kw+1, cin, kh, kw] -> strided, reorder to [n, ho, wo, kh, kw, cin]
    cols = win[:, ::stride, ::stride][:, :ho, :wo].transpose(0, 1, 2, 4, 5, 3)
    wk = w.data.astype(ACC)
    y = np.tensordot(cols, wk, axes=([3, 4, 5], [0, 1, 2]))
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match Cout={cout}")
        y = y + b.data
    out_dtype = _result_dtype(x.data, w.data, *(() if b is None else (b.data,)))

    def bw(g):
        g4 = (g[None] if squeeze else g).astype(ACC)
        gw = np.tensordot(cols, g4, axes=([0, 1, 2], [0, 1, 2]))
        gcols = np.tensordot(g4, wk, axes=([3], [3]))  # [n, ho, wo, kh, kw, cin]
        gxp = np.zeros(xp.shape, dtype=ACC)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pt:pt + h, pl:pl + wd, :]
        if squeeze:
            gx = gx[0]
        grads = (gx, gw)
        if b is not None:
            grads += (g4.sum(axis=(0, 1, 2)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _make(y[0] if squeeze else y, inputs, "conv2d", bw, dtype=out_dtype)


# ---------------------------------------------------------------- backward

def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from scalar ``root``.

    Consumes the current tape: it is cleared afterwards.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = get_tape()
    if root.requires_grad and root.node_id is None:
        root.grad = _accumulate(root.grad, np.ones(root.shape, dtype=root.data.dtype))
        return
    if not root.tracked:
        raise ValueError("root is not connected to any tracked tensor")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape, dtype=ACC)}
    nodes = tape.nodes
    gen = tape.generation
    for nid in range(root.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if t.node_id is not None and t._gen == gen:
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
            elif t.requires_grad:
                t.grad = _accumulate(t.grad, np.asarray(gi, dtype=t.data.dtype).reshape(t.shape))
    tape.clear()


def _accumulate(prev: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    return g.copy() if prev is None else prev + g


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
