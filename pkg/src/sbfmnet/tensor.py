"""Small reverse-mode autograd engine over float64 numpy arrays.

Only the operations needed by the MiniVGG backbone and the Sobel binary
feature module are provided.  Every op records its parents and a backward
rule on the output tensor; :func:`backward` replays them in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays of leaf tensors, so
    callers zero them between steps (``sgd_step`` does this).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def _bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), _bw, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    """Elementwise |a|; the derivative at 0 is taken as 0."""
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor._from_op(
        a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    if a.ndim < 2:
        raise DimensionError(f"flatten expects a batched tensor, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [B, D] tensors along the feature axis."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot concat shapes {a.shape} and {b.shape}")
    da = a.shape[1]

    def _bw(g):
        return g[:, :da], g[:, da:]

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), (a, b), _bw, "concat")


# ---------------------------------------------------------------- dense


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [D, M]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _bw, "linear")


# ---------------------------------------------------------------- conv / pool


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of a [B, C, H, W] input with [F, C, K, K] filters."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    B, C, H, W = x.shape
    F, Ck, KH, KW = kernel.shape
    if C != Ck:
        raise DimensionError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    if KH > H + 2 * padding or KW > W + 2 * padding:
        raise DimensionError(f"kernel {KH}x{KW} larger than padded input {H}x{W} (pad {padding})")
    if bias is not None and bias.shape != (F,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({F},)")

    Ho = conv_output_size(H, KH, stride, padding)
    Wo = conv_output_size(W, KW, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # [B, Ho, Wo, C, KH, KW] -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * KH * KW)
    wmat = kernel.data.reshape(F, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        grads: list[np.ndarray | None] = [None, None]
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, KH, KW)
            dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
            for i in range(KH):
                for j in range(KW):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            grads[0] = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        if kernel.requires_grad:
            grads[1] = (g2.T @ cols).reshape(kernel.shape)
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, _bw, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; ties route the gradient to the first element in row-major order."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-D input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    B, C, H, W = x.shape
    if window > H or window > W:
        raise DimensionError(f"pool window {window} exceeds spatial extent {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo].reshape(B, C, Ho, Wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        r = arg // window + (np.arange(Ho) * stride)[:, None]
        c = arg % window + (np.arange(Wo) * stride)[None, :]
        base = (np.arange(B * C) * (H * W)).reshape(B, C, 1, 1)
        flat = (base + r * W + c).ravel()
        dx = np.bincount(flat, weights=g.ravel(), minlength=B * C * H * W)
        return (dx.reshape(B, C, H, W),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), _bw, "maxpool2d")


# ---------------------------------------------------------------- loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, K], got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"labels must lie in [0, {K})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(B), labels]
    probs = np.exp(z - logsumexp[:, None])

    def _bw(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    return Tensor._from_op(nll.mean(), (logits,), _bw, "softmax_cross_entropy")


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class SGDState:
    buffers: dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Iterable[Tensor], config: OptimizerConfig, state: SGDState | None = None) -> SGDState:
    """One SGD-with-momentum update, then zero the gradients.

    ``buf = momentum * buf + grad + weight_decay * p``; ``p -= lr * buf``.
    """
    state = SGDState() if state is None else state
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient; call backward() first")
    for p in params:
        g = p.grad + config.weight_decay * p.data if config.weight_decay else p.grad
        key = id(p)
        if config.momentum:
            buf = state.buffers.get(key)
            buf = g.copy() if buf is None else config.momentum * buf + g
            state.buffers[key] = buf
        else:
            buf = g
        p.data -= config.learning_rate * buf
        p.grad = None
    return state


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4,
               indices: Sequence[int] | None = None) -> GradCheckReport:
    """Compare autograd against central finite differences.

    ``indices`` restricts the comparison to a subset of flat positions of
    ``x``; by default every element is probed.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic_full = np.zeros_like(x0) if xt.grad is None else xt.grad
    idx = np.arange(x0.size) if indices is None else np.asarray(indices)
    numeric = np.empty(idx.size)
    flat = x0.reshape(-1)
    with no_grad():
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(x0)).item()
            flat[i] = old - h
            fm = f(Tensor(x0)).item()
            flat[i] = old
            numeric[n] = (fp - fm) / (2 * h)
    analytic = analytic_full.reshape(-1)[idx]
    err = float(relative_error(analytic, numeric).max()) if idx.size else 0.0
    return GradCheckReport(err, tol, analytic, numeric)
