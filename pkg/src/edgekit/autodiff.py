"""Small reverse-mode autodiff engine on top of numpy.

Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
are recorded in execution order, which is already a topological order.
Outside a tape the same functions just compute values, so inference code
pays no bookkeeping cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "iub" and requires_grad:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict:
        return gradients(self, loss, wrt)


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        return Tensor(arr)
    return Tensor(arr.astype(_DEFAULT_DTYPE))


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    if out.dtype.kind == "f" and not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    res = Tensor(out)
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        tape.records.append(Record(op, inputs, res, backward))
    return res


def _shape_guard(op: str, fn, *tensors: Tensor):
    try:
        return fn()
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{op}: incompatible shapes {shapes}") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _shape_guard("add", lambda: a.data + b.data, a, b)
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _shape_guard("sub", lambda: a.data - b.data, a, b)
    return _emit("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = _shape_guard("mul", lambda: a.data * b.data, a, b)
    return _emit("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _shape_guard("matmul", lambda: np.matmul(a.data, b.data), a, b)

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = _shape_guard("concat", lambda: np.concatenate([t.data for t in ts], axis=axis), *ts)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", ts, out, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = _shape_guard("stack", lambda: np.stack([t.data for t in ts], axis=axis), *ts)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, k, axis=ax) for k in range(len(ts)))

    return _emit("stack", ts, out, backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _emit("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def _masked_logits(data: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return data
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, data, -np.inf)


def _stable_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(z, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax where ``mask`` (True = allowed) pins excluded entries to exactly 0.

    A row with no allowed entry yields all zeros.
    """
    x = as_tensor(x)
    if mask is not None and np.broadcast_shapes(np.shape(mask), x.shape) != x.shape:
        raise ShapeError(f"softmax: mask shape {np.shape(mask)} does not fit {x.shape}")
    y = _stable_softmax(_masked_logits(x.data, mask), axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


def log_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Masked log-softmax; excluded entries come out as 0 (not -inf) to stay finite."""
    x = as_tensor(x)
    z = _masked_logits(x.data, mask)
    top = np.max(z, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = z - top
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    allowed = np.isfinite(out)
    out = np.where(allowed, out, 0.0)

    def backward(g):
        g = np.where(allowed, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, backward)


def nll_loss(scores, targets, mask=None, row_mask=None) -> Tensor:
    """Sum over rows of ``-log softmax(scores)[target]`` on the last axis.

    ``mask`` removes candidates, ``row_mask`` removes whole rows (padding).
    """
    scores = as_tensor(scores)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != scores.shape[:-1]:
        raise ShapeError(f"nll_loss: targets shape {targets.shape} does not match scores {scores.shape}")
    rows = np.ones(targets.shape, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    z = _masked_logits(scores.data, mask)
    top = np.max(z, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)
    picked = np.take_along_axis(z - top, targets[..., None], axis=-1)[..., 0] - np.log(np.where(s > 0, s, 1.0))[..., 0]
    if not np.isfinite(picked[rows]).all():
        raise FloatingPointError("nll_loss: gold target is masked out")
    out = np.asarray(-(np.where(rows, picked, 0.0)).sum())

    def backward(g):
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * rows[..., None],)

    return _emit("nll_loss", (scores,), out.astype(scores.dtype), backward)


def take(table, ids) -> Tensor:
    """Embedding gather: rows of ``table`` at integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take: ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _emit("take", (table,), out, backward)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = _shape_guard("index", lambda: x.data[idx], x)
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("index", (x,), np.array(out, copy=True), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = _shape_guard("reshape", lambda: x.data.reshape(shape), x)
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, backward)


def max(x, axis: int = -1) -> Tensor:  # noqa: A001
    """Max-reduce along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit("max", (x,), out, backward)


def l2_normalize(x, axis: int = -1, eps: float = 0.0) -> Tensor:
    """``x / max(||x||, eps)``. With ``eps=0`` a zero vector is an error."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if eps <= 0 and (norm == 0).any():
        raise FloatingPointError("l2_normalize: zero vector")
    floored = np.maximum(norm, eps) if eps > 0 else norm
    y = x.data / floored
    clipped = norm < eps if eps > 0 else np.zeros_like(norm, dtype=bool)

    def backward(g):
        proj = g - y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g, proj) / floored,)

    return _emit("l2_normalize", (x,), y, backward)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def gradients(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict:
    """Reverse accumulation over ``tape``.

    Returns ``{name: grad}`` for ``wrt`` (zeros for unreached inputs), or
    ``{id(tensor): grad}`` for every reached tensor when ``wrt`` is None.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"gradients: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None) if rec.output is not loss else grads.get(id(loss))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if wrt is None:
        return grads
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step, in place. Parameters absent from ``grads`` are frozen."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_update: grad {g.shape} does not match param {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], c: float = 5.0) -> tuple[dict, float]:
    if c <= 0:
        raise ValueError("clip value must be positive")
    norm = global_norm(grads.values())
    if norm > c:
        scale = c / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm
