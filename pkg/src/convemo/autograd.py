"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the active thread's
:class:`ComputationTape` when one of its inputs requires a gradient.
:func:`backward` replays the tape in reverse, accumulating gradients
additively, then clears it.

Training runs in float32; gradient checks run in float64 (see
:func:`grad_check`).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_MASK_FILL = -1e30


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was used outside its contract."""


class EmptyLossError(ValueError):
    """Every frame was ignored, so the loss is undefined."""


class DeterminismError(RuntimeError):
    """Two forward passes of the same function disagreed."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ComputationTape:
    """Ordered record of operations for one forward/backward cycle."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append(_Node(out, inputs, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> ComputationTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that influenced ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.dtype)
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad = inp.grad + gi
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _result(y.astype(x.dtype, copy=False), (a,), bw)


# ---------------------------------------------------------------------------
# normalization, attention, losses


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax. ``mask`` (broadcastable bool) marks allowed entries."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, _MASK_FILL).astype(x.dtype, copy=False)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an N×M matrix."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


@dataclass
class AttentionDiag:
    output: Tensor
    weights: Tensor


def attention_unprojected(x: Tensor) -> AttentionDiag:
    """Projection-free dot-product self-attention over the rows of ``x``.

    weights = softmax(x xᵀ / √d) row-wise, output = weights · x.
    """
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"attention_unprojected expects N×d with N, d >= 1, got {x.shape}")
    d = x.shape[1]
    scores = mul(matmul(x, transpose(x)), 1.0 / np.sqrt(d))
    weights = softmax_rows(scores)
    return AttentionDiag(output=matmul(weights, x), weights=weights)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(y.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup; index -1 yields an exact zero row that receives no gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.max() >= table.shape[0] or idx.min() < -1):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    valid = idx >= 0
    out = np.zeros(idx.shape + table.shape[1:], dtype=table.dtype)
    out[valid] = table.data[idx[valid]]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx[valid], g[valid])
        return (gt,)

    return _result(out, (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, same-padded 1-D convolution over time.

    x: (B, L, C_in); weight: (K, C_in, C_out) with odd K; bias: (C_out,).
    """
    k, cin, cout = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d needs an odd kernel size, got {k}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} do not match weight {weight.shape}")
    half = k // 2
    batch, length = x.shape[0], x.shape[1]
    padded = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    # cols[b, t, j, c] = padded[b, t + j, c]
    cols = np.stack([padded[:, j : j + length] for j in range(k)], axis=2)
    flat = cols.reshape(batch, length, k * cin)
    wflat = weight.data.reshape(k * cin, cout)
    y = flat @ wflat
    if bias is not None:
        y = y + bias.data

    def bw(g):
        gw = np.einsum("blk,blo->ko", flat, g).reshape(weight.shape)
        gcols = (g @ wflat.T).reshape(batch, length, k, cin)
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[:, j : j + length] += gcols[:, :, j]
        gx = gpad[:, half : half + length]
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(y.astype(x.dtype, copy=False), inputs, bw)


def cross_entropy_masked(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over frames whose label is not ``ignore_index``."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    flat_logits = logits.data.reshape(-1, num_classes)
    flat_labels = labels.reshape(-1)
    keep = flat_labels != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise EmptyLossError("empty loss: every frame carries the ignore label")
    kept = flat_labels[keep]
    if kept.min() < 0 or kept.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes}) or equal {ignore_index}")
    z = flat_logits - flat_logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[keep, kept].sum() / n

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(len(flat_labels))[keep], kept] -= 1.0
        grad[~keep] = 0.0
        return ((grad * (g / n)).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must build its scalar output from ``params`` deterministically;
    every parameter must be float64.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters, got {p.dtype}")
    with no_grad():
        first = np.array(f().data, copy=True)
        second = np.array(f().data, copy=True)
    if not np.array_equal(first, second):
        raise DeterminismError("f produced different values on two identical forward passes")

    for p in params:
        p.requires_grad = True
        p.grad = None
    get_tape().clear()
    backward(f())

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                up = float(f().data)
                flat[i] = orig - epsilon
                down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
