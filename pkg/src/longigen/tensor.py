"""Minimal reverse-mode autodiff over dense numpy arrays.

Every numeric primitive the model needs lives here: a Tensor wrapping a
float64 ndarray (float32 is tolerated for benchmark inputs), a tape built
from per-op backward closures, the two loss heads, and an AdamW step with
cosine learning-rate decay.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array with optional participation in the gradient tape.

    Data is immutable by convention once created (the optimizer mutates
    parameters only between tapes); `grad` is the one mutable buffer and is
    populated by `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _children=(), _op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _children if _GRAD_ENABLED else ()
        self._op = _op
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, children: tuple[Tensor, ...], op: str) -> Tensor:
        req = _GRAD_ENABLED and any(c.requires_grad for c in children)
        out = Tensor(data, requires_grad=req, _children=children if req else (), _op=op)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray, own: bool = False) -> None:
        # own=True promises g is freshly allocated, unaliased, and ours to keep
        if self.grad is None:
            self.grad = g if (own and g.dtype == self.data.dtype and g.shape == self.data.shape) \
                else np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- elementwise ops -------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError(f"add: shapes {self.shape} and {other.shape} do not broadcast")
        out = Tensor._from_op(data, (self, other), "add")
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.shape))
            out._backward = _bw
        return out

    def __radd__(self, other) -> Tensor:
        return self + other

    def __neg__(self) -> Tensor:
        return self * -1.0

    def __sub__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            data = self.data - other.data
        except ValueError:
            raise ShapeError(f"sub: shapes {self.shape} and {other.shape} do not broadcast")
        out = Tensor._from_op(data, (self, other), "sub")
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(-out.grad, other.shape))
            out._backward = _bw
        return out

    def __rsub__(self, other) -> Tensor:
        return Tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError(f"mul: shapes {self.shape} and {other.shape} do not broadcast")
        out = Tensor._from_op(data, (self, other), "mul")
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accum(_unbroadcast(other.data * out.grad, self.shape), own=True)
                if other.requires_grad:
                    other._accum(_unbroadcast(self.data * out.grad, other.shape), own=True)
            out._backward = _bw
        return out

    def __rmul__(self, other) -> Tensor:
        return self * other

    def scale(self, s: float) -> Tensor:
        out = Tensor._from_op(self.data * s, (self,), "scale")
        if out.requires_grad:
            def _bw():
                self._accum(out.grad * s, own=True)
            out._backward = _bw
        return out

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            return self.scale(1.0 / other)
        raise TypeError("tensor/tensor division not supported; use mul + reciprocal op")

    def exp(self) -> Tensor:
        data = np.exp(self.data)
        out = Tensor._from_op(data, (self,), "exp")
        if out.requires_grad:
            def _bw():
                self._accum(data * out.grad, own=True)
            out._backward = _bw
        return out

    def log(self) -> Tensor:
        out = Tensor._from_op(np.log(self.data), (self,), "log")
        if out.requires_grad:
            def _bw():
                self._accum(out.grad / self.data, own=True)
            out._backward = _bw
        return out

    def relu(self) -> Tensor:
        mask = self.data > 0
        out = Tensor._from_op(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:
            def _bw():
                self._accum(mask * out.grad, own=True)
            out._backward = _bw
        return out

    # -- matmul / reductions / shape ops ---------------------------------------

    def __matmul__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.ndim < 1 or other.ndim < 1 or self.shape[-1] != other.shape[-2 if other.ndim > 1 else -1]:
            raise ShapeError(f"matmul: inner dimensions disagree for {self.shape} and {other.shape}")
        try:
            data = self.data @ other.data
        except ValueError:
            raise ShapeError(f"matmul: shapes {self.shape} and {other.shape} incompatible")
        out = Tensor._from_op(data, (self, other), "matmul")
        if out.requires_grad:
            def _bw():
                g = out.grad
                if self.requires_grad:
                    self._accum(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.shape), own=True)
                if other.requires_grad:
                    other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape), own=True)
            out._backward = _bw
        return out

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        out = Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def _bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).copy(), own=True)
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = Tensor._from_op(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def _bw():
                self._accum(out.grad.reshape(old))
            out._backward = _bw
        return out

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor._from_op(self.data.transpose(axes), (self,), "transpose")
        if out.requires_grad:
            inv = np.argsort(axes)
            def _bw():
                self._accum(out.grad.transpose(inv))
            out._backward = _bw
        return out

    def swapaxes(self, a: int, b: int) -> Tensor:
        out = Tensor._from_op(np.swapaxes(self.data, a, b), (self,), "swapaxes")
        if out.requires_grad:
            def _bw():
                self._accum(np.swapaxes(out.grad, a, b))
            out._backward = _bw
        return out

    def narrow(self, axis: int, start: int, length: int) -> Tensor:
        """Contiguous slice [start, start+length) along one axis."""
        idx = [slice(None)] * self.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        out = Tensor._from_op(self.data[idx], (self,), "narrow")
        if out.requires_grad:
            def _bw():
                g = np.zeros_like(self.data)
                g[idx] = out.grad
                self._accum(g, own=True)
            out._backward = _bw
        return out

    # -- backward --------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-topological gradient sweep from a scalar loss.

        The tape is consumed: closures are released afterwards, so a second
        backward over the same graph raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor with no tape (requires_grad=False)")
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            # release the tape as we go
            node._backward = None
            node._prev = ()
        self._consumed = True


def backward(loss: Tensor) -> None:
    """Functional alias for Tensor.backward."""
    loss.backward()


# -- composite ops with dedicated analytic backward rules ----------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._from_op(data, tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        def _bw():
            offset = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * out.ndim
                    idx[axis] = slice(offset, offset + s)
                    t._accum(out.grad[tuple(idx)])
                offset += s
        out._backward = _bw
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)
    out = Tensor._from_op(data, tuple(tensors), "stack")
    if out.requires_grad:
        def _bw():
            gs = np.moveaxis(out.grad, axis, 0)
            for t, g in zip(tensors, gs):
                if t.requires_grad:
                    t._accum(g)
        out._backward = _bw
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    out = Tensor._from_op(table.data[ids], (table,), "embed")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
            table._accum(g, own=True)
        out._backward = _bw
    return out


def _ln_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, xhat, inv


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last dimension with affine rescaling."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    y, xhat, inv = _ln_forward(x.data, gamma.data, beta.data, eps)
    out = Tensor._from_op(y, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if gamma.requires_grad:
                gamma._accum((g * xhat).reshape(-1, d).sum(axis=0), own=True)
            if beta.requires_grad:
                beta._accum(g.reshape(-1, d).sum(axis=0), own=True)
            if x.requires_grad:
                gy = g * gamma.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                x._accum((gy - m1 - xhat * m2) * inv, own=True)
        out._backward = _bw
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-softmax of `targets` over unmasked rows.

    All-masked input is defined as zero loss with zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, v = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError(f"cross_entropy_logits: targets/mask must have shape ({n},)")
    if mask.any() and ((targets[mask] < 0).any() or (targets[mask] >= v).any()):
        raise ValueError(f"cross_entropy_logits: unmasked target outside [0, {v})")
    count = int(mask.sum())
    if count == 0:
        out = Tensor._from_op(np.zeros(()), (logits,), "ce")
        if out.requires_grad:
            out._backward = lambda: logits._accum(np.zeros_like(logits.data))
        return out

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    rows = np.arange(n)
    losses = lse - z[rows, targets]
    loss = (losses * mask).sum() / count
    out = Tensor._from_op(np.asarray(loss), (logits,), "ce")
    if out.requires_grad:
        softmax = ez / ez.sum(axis=1, keepdims=True)
        def _bw():
            g = softmax.copy()
            g[rows, targets] -= 1.0
            g *= (mask / count)[:, None]
            logits._accum(g * out.grad, own=True)
        out._backward = _bw
    return out


def binary_cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean stable BCE-with-logits over all entries; labels in {0,1}."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy_logits: labels shape {y.shape} != logits shape {logits.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary_cross_entropy_logits: labels must be binary")
    x = logits.data
    losses = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = Tensor._from_op(np.asarray(losses.mean()), (logits,), "bce")
    if out.requires_grad:
        def _bw():
            sig = 1.0 / (1.0 + np.exp(-x))
            logits._accum((sig - y) / y.size * out.grad, own=True)
        out._backward = _bw
    return out


# -- optimizer ------------------------------------------------------------------


def cosine_lr_scale(step: int, total_steps: int) -> float:
    """Cosine decay multiplier: 1 at step 0, 0 at step == total_steps."""
    if total_steps <= 0:
        return 1.0
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * (1.0 + math.cos(math.pi * t))


def adamw_step(
    params: dict[str, Tensor],
    state: dict[str, dict[str, np.ndarray]],
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    `step` is 1-based; `state` maps param name to moment buffers and is
    created lazily. Parameters are mutated in place between tapes.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        st = state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        mhat = st["m"] / (1 - b1 ** step)
        vhat = st["v"] / (1 - b2 ** step)
        p.data[...] = p.data - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)


class AdamW:
    """Stateful wrapper around `adamw_step` with a cosine schedule."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2, total_steps: int = 0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.step_count = 0

    def current_lr(self) -> float:
        return self.lr * cosine_lr_scale(self.step_count, self.total_steps)

    def step(self) -> float:
        lr = self.current_lr()
        self.step_count += 1
        adamw_step(self.params, self.state, self.step_count, lr,
                   self.betas, self.eps, self.weight_decay)
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
