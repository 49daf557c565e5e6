"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the toolkit goes through
:func:`forward_op`. When a :class:`Tape` is active (``with Tape() as tape:``)
each op whose inputs require gradients appends a :class:`TapeNode`, and
:func:`backward` walks those nodes once in reverse order.

Arrays are NCHW. Tensors are immutable: their buffers are read-only numpy
arrays, so they can be shared freely between threads. Tapes are
thread-local.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "ShapeError",
    "NonFiniteError",
    "forward_op",
    "backward",
    "grad_check",
    "GradCheckReport",
    "OPS",
    "conv2d",
    "dense",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "add",
    "flatten",
    "reshape",
    "softmax_cross_entropy",
    "mean",
    "sum_all",
    "std_dispersion",
    "gather_pad",
]


class ShapeError(ValueError):
    """Input shapes are incompatible with an op's shape rule."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached (or left) an op."""


# Probe precision is only switched to float64 by grad_check's numeric side.
_state = threading.local()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def _probe_precision(dtype: type) -> Iterator[None]:
    prev = _dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Immutable n-dimensional float array.

    ``requires_grad`` marks a leaf whose gradient :func:`backward` should
    report. Tensors produced by ops inherit it from their inputs.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_dtype(), copy=True, order="C")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal: arr is freshly allocated and owned by the new tensor
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=_dtype())
        arr.setflags(write=False)
        t._data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def tolist(self) -> Any:
        return self._data.tolist()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data.copy())

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return self._data.shape[0] if self._data.ndim else 1

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Mapping[str, Any]
    cache: Any = None


@dataclass
class Tape:
    """Ordered record of the ops executed while the tape is active."""

    nodes: List[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# op registry
#
# forward(arrays, attrs) -> (out, cache)
# backward(g, arrays, out, cache, attrs, needs) -> tuple of grads (None where
# the input does not need one)


@dataclass(frozen=True)
class OpDef:
    name: str
    arity: int
    forward: Callable[..., Tuple[np.ndarray, Any]]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]
    check: Callable[[Sequence[Tuple[int, ...]], Mapping[str, Any]], None]


OPS: Dict[str, OpDef] = {}


def _register(name: str, arity: int, check: Callable) -> Callable:
    def deco(cls: Any) -> Any:
        OPS[name] = OpDef(name, arity, cls.forward, cls.backward, check)
        return cls

    return deco


def _need_rank(shape: Tuple[int, ...], rank: int, what: str) -> None:
    if len(shape) != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {shape}")


def _int_attr(attrs: Mapping[str, Any], key: str, default: int, low: int) -> int:
    val = attrs.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, np.integer)) or val < low:
        raise ValueError(f"attr {key!r} must be an integer >= {low}, got {val!r}")
    return int(val)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(shapes, attrs):
    x, w, b = shapes
    _need_rank(x, 4, "conv2d input")
    _need_rank(w, 4, "conv2d kernel")
    _need_rank(b, 1, "conv2d bias")
    stride = _int_attr(attrs, "stride", 1, 1)
    pad = _int_attr(attrs, "padding", 0, 0)
    if x[1] != w[1]:
        raise ShapeError(f"conv2d channel dimension (dim 1): input has {x[1]}, kernel expects {w[1]}")
    if b[0] != w[0]:
        raise ShapeError(f"conv2d bias dimension 0 is {b[0]}, kernel has {w[0]} output channels")
    for axis, (n, k) in enumerate(zip(x[2:], w[2:]), start=2):
        if n + 2 * pad < k:
            raise ShapeError(f"conv2d spatial dim {axis}: padded size {n + 2 * pad} smaller than kernel {k}")
    del stride


@_register("conv2d", 3, _check_conv)
class _Conv2d:
    @staticmethod
    def forward(arrays, attrs):
        x, w, b = arrays
        stride = int(attrs.get("stride", 1))
        pad = int(attrs.get("padding", 0))
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = cols @ w.reshape(o, -1).T
        out += b
        out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        return out, cols

    @staticmethod
    def backward(g, arrays, out, cols, attrs, needs):
        x, w, b = arrays
        stride = int(attrs.get("stride", 1))
        pad = int(attrs.get("padding", 0))
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho, wo = g.shape[2], g.shape[3]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if needs[1]:
            gw = (g2.T @ cols).reshape(w.shape)
        if needs[2]:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if needs[0]:
            dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb


def _check_dense(shapes, attrs):
    x, w, b = shapes
    _need_rank(x, 2, "dense input")
    _need_rank(w, 2, "dense weight")
    _need_rank(b, 1, "dense bias")
    if x[1] != w[0]:
        raise ShapeError(f"dense inner dimension: input dim 1 is {x[1]}, weight dim 0 is {w[0]}")
    if b[0] != w[1]:
        raise ShapeError(f"dense bias dimension 0 is {b[0]}, weight dim 1 is {w[1]}")


@_register("dense", 3, _check_dense)
class _Dense:
    @staticmethod
    def forward(arrays, attrs):
        x, w, b = arrays
        out = x @ w
        out += b
        return out, None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        x, w, _ = arrays
        gx = g @ w.T if needs[0] else None
        gw = x.T @ g if needs[1] else None
        gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if needs[2] else None
        return gx, gw, gb


def _scalar(g: np.ndarray) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def _check_any(shapes, attrs):
    pass


@_register("relu", 1, _check_any)
class _Relu:
    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        return np.maximum(x, 0), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        (x,) = arrays
        return (g * (x > 0),)


def _check_pool(shapes, attrs):
    (x,) = shapes
    _need_rank(x, 4, "pool input")
    k = _int_attr(attrs, "size", 2, 1)
    for axis in (2, 3):
        if x[axis] < k:
            raise ShapeError(f"pool spatial dim {axis} is {x[axis]}, smaller than window {k}")


def _pool_view(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    return x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)


@_register("maxpool2d", 1, _check_pool)
class _MaxPool:
    """Non-overlapping k x k max pooling; trailing rows/cols are dropped."""

    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        k = int(attrs.get("size", 2))
        v = _pool_view(x, k)
        n, c, ho, _, wo, _ = v.shape
        flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, arg

    @staticmethod
    def backward(g, arrays, out, arg, attrs, needs):
        (x,) = arrays
        k = int(attrs.get("size", 2))
        n, c, ho, wo = g.shape
        # ties route the gradient to the first maximal element only
        flat = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
        block = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        gx = np.zeros_like(x)
        gx[:, :, : ho * k, : wo * k] = block
        return (gx,)


@_register("avgpool2d", 1, _check_pool)
class _AvgPool:
    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        k = int(attrs.get("size", 2))
        out = _pool_view(x, k).mean(axis=(3, 5), dtype=np.float64)
        return out.astype(x.dtype), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        (x,) = arrays
        k = int(attrs.get("size", 2))
        n, c, ho, wo = g.shape
        block = np.broadcast_to((g / (k * k))[:, :, :, None, :, None], (n, c, ho, k, wo, k))
        gx = np.zeros_like(x)
        gx[:, :, : ho * k, : wo * k] = block.reshape(n, c, ho * k, wo * k)
        return (gx,)


def _check_add(shapes, attrs):
    a, b = shapes
    if len(a) != len(b):
        raise ShapeError(f"add needs equal ranks, got {a} and {b}")
    for axis, (p, q) in enumerate(zip(a, b)):
        if p != q:
            raise ShapeError(f"add dimension {axis} mismatch: {p} vs {q}")


@_register("add", 2, _check_add)
class _Add:
    @staticmethod
    def forward(arrays, attrs):
        a, b = arrays
        return a + b, None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        return (g if needs[0] else None, g if needs[1] else None)


def _check_flatten(shapes, attrs):
    (x,) = shapes
    if len(x) < 2:
        raise ShapeError(f"flatten needs rank >= 2 (batch first), got shape {x}")


@_register("flatten", 1, _check_flatten)
class _Flatten:
    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        return x.reshape(x.shape[0], -1).copy(), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        return (g.reshape(arrays[0].shape),)


def _resolve_shape(src: Tuple[int, ...], shape: Sequence[int]) -> Tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    total = int(np.prod(src))
    if shape.count(-1) == 1:
        known = int(np.prod([d for d in shape if d != -1]))
        if known > 0 and total % known == 0:
            shape = tuple(total // known if d == -1 else d for d in shape)
    if any(d < 1 for d in shape) or int(np.prod(shape)) != total:
        raise ShapeError(f"cannot reshape {src} ({total} elements) to {shape}")
    return shape


def _check_reshape(shapes, attrs):
    _resolve_shape(shapes[0], attrs.get("shape", ()))


@_register("reshape", 1, _check_reshape)
class _Reshape:
    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        return x.reshape(_resolve_shape(x.shape, attrs["shape"])).copy(), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        return (g.reshape(arrays[0].shape),)


def _labels_attr(attrs: Mapping[str, Any]) -> np.ndarray:
    labels = attrs.get("labels")
    if labels is None:
        raise ValueError("softmax_cross_entropy needs a 'labels' attr")
    return np.asarray(labels, dtype=np.int64).reshape(-1)


def _check_xent(shapes, attrs):
    (z,) = shapes
    _need_rank(z, 2, "softmax_cross_entropy logits")
    labels = _labels_attr(attrs)
    if labels.shape[0] != z[0]:
        raise ShapeError(f"softmax_cross_entropy dimension 0: {z[0]} logit rows vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= z[1]):
        raise ValueError(f"labels must lie in [0, {z[1]}), got range [{labels.min()}, {labels.max()}]")
    if attrs.get("reduction", "mean") not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {attrs.get('reduction')!r}")


@_register("softmax_cross_entropy", 1, _check_xent)
class _SoftmaxXent:
    @staticmethod
    def forward(arrays, attrs):
        (z,) = arrays
        labels = _labels_attr(attrs)
        z64 = z.astype(np.float64)
        shifted = z64 - z64.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        nll = -logp[np.arange(z.shape[0]), labels]
        total = nll.sum()
        if attrs.get("reduction", "mean") == "mean":
            total /= z.shape[0]
        return np.asarray(total, dtype=z.dtype), logp

    @staticmethod
    def backward(g, arrays, out, logp, attrs, needs):
        (z,) = arrays
        labels = _labels_attr(attrs)
        grad = np.exp(logp)
        grad[np.arange(z.shape[0]), labels] -= 1.0
        if attrs.get("reduction", "mean") == "mean":
            grad /= z.shape[0]
        return ((grad * _scalar(g)).astype(z.dtype),)


@_register("mean", 1, _check_any)
class _Mean:
    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        return np.asarray(x.mean(dtype=np.float64), dtype=x.dtype), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        (x,) = arrays
        return (np.full(x.shape, _scalar(g) / x.size, dtype=x.dtype),)


@_register("sum", 1, _check_any)
class _Sum:
    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        return np.asarray(x.sum(dtype=np.float64), dtype=x.dtype), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        (x,) = arrays
        return (np.full(x.shape, _scalar(g), dtype=x.dtype),)


def _check_std(shapes, attrs):
    (x,) = shapes
    per_sample = bool(attrs.get("per_sample", False))
    if per_sample:
        if len(x) < 2:
            raise ShapeError(f"per-sample std_dispersion needs rank >= 2, got shape {x}")
        count = int(np.prod(x[1:]))
    else:
        count = int(np.prod(x))
    if count < 2:
        raise ShapeError(f"std_dispersion needs at least 2 elements per reduction, shape is {x}")


@_register("std_dispersion", 1, _check_std)
class _StdDispersion:
    """Sample standard deviation (N-1 denominator) over the whole tensor.

    With ``per_sample=True`` the reduction runs over every axis but the first,
    giving one dispersion value per batch item.
    """

    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        per_sample = bool(attrs.get("per_sample", False))
        t = x.reshape(x.shape[0], -1) if per_sample else x.reshape(1, -1)
        t = t.astype(np.float64)
        centred = t - t.mean(axis=1, keepdims=True)
        ss = np.einsum("ij,ij->i", centred, centred)
        std = np.sqrt(ss / (t.shape[1] - 1))
        out = std if per_sample else std[0]
        return np.asarray(out, dtype=x.dtype), (centred, ss)

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        (x,) = arrays
        centred, ss = cache
        n = centred.shape[1]
        denom = np.sqrt(n - 1) * np.sqrt(ss)
        # zero variance: subgradient 0
        scale = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
        gv = np.asarray(g, dtype=np.float64).reshape(-1)
        grad = centred * (scale * gv)[:, None]
        return (grad.reshape(x.shape).astype(x.dtype),)


def _check_gather(shapes, attrs):
    (x,) = shapes
    _need_rank(x, 4, "gather_pad input")
    idx = np.asarray(attrs.get("index"))
    if idx.ndim != 2 or idx.shape[0] != x[0] or idx.shape[1] != x[2] * x[3]:
        raise ShapeError(f"gather_pad index must have shape ({x[0]}, {x[2] * x[3]}), got {idx.shape}")
    if idx.size and (idx.max() >= x[2] * x[3] or idx.min() < -1):
        raise ValueError("gather_pad index entries must lie in [-1, H*W)")


@_register("gather_pad", 1, _check_gather)
class _GatherPad:
    """Per-sample spatial gather: out[n, c, p] = x[n, c, index[n, p]], or 0 where index is -1.

    Expresses resize-and-pad input transforms as a differentiable op.
    """

    @staticmethod
    def forward(arrays, attrs):
        (x,) = arrays
        idx = np.asarray(attrs["index"], dtype=np.int64)
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        safe = np.where(idx < 0, 0, idx)
        out = np.take_along_axis(flat, safe[:, None, :].repeat(c, axis=1), axis=2)
        out[np.broadcast_to((idx < 0)[:, None, :], out.shape)] = 0
        return out.reshape(x.shape), None

    @staticmethod
    def backward(g, arrays, out, cache, attrs, needs):
        (x,) = arrays
        idx = np.asarray(attrs["index"], dtype=np.int64)
        n, c, h, w = x.shape
        gflat = g.reshape(n, c, h * w)
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        for i in range(n):
            keep = idx[i] >= 0
            np.add.at(gx[i], (slice(None), idx[i][keep]), gflat[i][:, keep])
        return (gx.reshape(x.shape),)


# ---------------------------------------------------------------------------


def forward_op(op: str, inputs: Sequence[Tensor], attrs: Optional[Mapping[str, Any]] = None) -> Tensor:
    """Run one registered op and record it on the active tape."""
    try:
        opdef = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known ops: {sorted(OPS)}") from None
    attrs = dict(attrs or {})
    inputs = tuple(inputs)
    if len(inputs) != opdef.arity:
        raise ValueError(f"{op} takes {opdef.arity} inputs, got {len(inputs)}")
    for i, t in enumerate(inputs):
        if not isinstance(t, Tensor):
            raise TypeError(f"{op} input {i} is {type(t).__name__}, expected Tensor")
    opdef.check([t.shape for t in inputs], attrs)
    for i, t in enumerate(inputs):
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op} input {i} contains NaN or Inf")
    arrays = tuple(t.data for t in inputs)
    with np.errstate(over="ignore", invalid="ignore"):
        out_arr, cache = opdef.forward(arrays, attrs)
    if not np.isfinite(out_arr).all():
        raise NonFiniteError(f"{op} produced NaN or Inf from finite inputs (overflow)")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=needs_grad)
    tape = _active_tape()
    if tape is not None and needs_grad:
        tape.nodes.append(TapeNode(op, inputs, out, attrs, cache))
    return out


def backward(tape: Tape, root: Tensor) -> Dict[Tensor, Tensor]:
    """Gradients of scalar ``root`` for every leaf on ``tape`` that requires grad.

    Leaves that never fed the recorded computation are simply absent.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.data.dtype)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        arrays = tuple(t.data for t in node.inputs)
        opdef = OPS[node.op]
        in_grads = opdef.backward(g, arrays, node.output.data, node.cache, node.attrs, needs)
        for t, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {t: Tensor._wrap(np.asarray(grads[k]).copy()) for k, t in leaves.items() if k in grads}


# ---------------------------------------------------------------------------
# convenience wrappers


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return forward_op("conv2d", (x, w, b), {"stride": stride, "padding": padding})


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return forward_op("dense", (x, w, b))


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", (x,))


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    return forward_op("maxpool2d", (x,), {"size": size})


def avgpool2d(x: Tensor, size: int = 2) -> Tensor:
    return forward_op("avgpool2d", (x,), {"size": size})


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", (a, b))


def flatten(x: Tensor) -> Tensor:
    return forward_op("flatten", (x,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", (x,), {"shape": tuple(shape)})


def softmax_cross_entropy(logits: Tensor, labels: Any, reduction: str = "mean") -> Tensor:
    return forward_op("softmax_cross_entropy", (logits,), {"labels": labels, "reduction": reduction})


def mean(x: Tensor) -> Tensor:
    return forward_op("mean", (x,))


def sum_all(x: Tensor) -> Tensor:
    return forward_op("sum", (x,))


def std_dispersion(x: Tensor, per_sample: bool = False) -> Tensor:
    return forward_op("std_dispersion", (x,), {"per_sample": per_sample})


def gather_pad(x: Tensor, index: np.ndarray) -> Tensor:
    return forward_op("gather_pad", (x,), {"index": index})


# ---------------------------------------------------------------------------
# finite-difference checker


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    unverifiable: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        ok = ~self.unverifiable
        return float(self.rel_error[ok].max()) if ok.any() else 0.0

    @property
    def failures(self) -> np.ndarray:
        """Flat indices of verifiable elements whose error exceeds ``tol``."""
        return np.flatnonzero(~self.unverifiable & (self.rel_error > self.tol))

    @property
    def passed(self) -> bool:
        return self.failures.size == 0


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Any,
    eps: float = 1e-3,
    tol: float = 1e-3,
    floor: float = 1e-6,
    kink_tol: float = 0.05,
    dtype: type = np.float64,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``fn`` at ``point``.

    Both sides run in ``dtype`` (float64 by default): float32 rounding would
    otherwise swamp the difference quotient and any cancelling gradient
    element. Pass ``dtype=np.float32`` to check the working precision. An element is
    reported unverifiable when a probe is non-finite, or when the two
    one-sided differences disagree by more than ``kink_tol`` (relative), which
    means a kink lies inside the probe interval.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with _probe_precision(dtype):
        x = Tensor(base, requires_grad=True)
        with Tape() as tape:
            y = fn(x)
        if y.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
        grads = backward(tape, y)
    analytic = grads[x].data.astype(np.float64).reshape(-1) if x in grads else np.zeros(base.size)

    def probe(arr: np.ndarray) -> float:
        with _probe_precision(dtype):
            try:
                val = fn(Tensor(arr)).item()
            except NonFiniteError:
                return float("nan")
        return val

    flat = base.reshape(-1)
    numeric = np.zeros(flat.size)
    unverifiable = np.zeros(flat.size, dtype=bool)
    f0 = probe(base)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = probe(plus.reshape(base.shape))
        fm = probe(minus.reshape(base.shape))
        if not np.isfinite([fp, fm, f0]).all():
            unverifiable[i] = True
            numeric[i] = np.nan
            continue
        numeric[i] = (fp - fm) / (2 * eps)
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
            unverifiable[i] = True
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(np.nan_to_num(numeric))), floor)
    rel = np.abs(analytic - np.nan_to_num(numeric)) / denom
    rel[unverifiable] = np.nan
    return GradCheckReport(
        analytic=analytic.reshape(base.shape),
        numeric=numeric.reshape(base.shape),
        rel_error=rel.reshape(-1),
        unverifiable=unverifiable,
        tol=tol,
    )
