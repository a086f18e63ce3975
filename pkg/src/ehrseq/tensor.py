"""Dense float tensors with taped reverse-mode differentiation.

Small on purpose: row-major numpy storage, a handful of primitives (enough
for an attention encoder with a token-prediction head), and an explicit
:class:`Tape` that records executed ops so :func:`backward` can traverse them
in exact reverse order. Ops record onto the innermost active tape of the
current thread; with no active tape they are plain forward computations.

Broadcasting is limited to leading batch dimensions (bias vectors, per-batch
masks); anything fancier raises. Every op output is checked for NaN/Inf
unless :func:`set_finite_checks` disabled it.

Typical use::

    with Tape() as tape:
        loss = cross_entropy(model_forward(x), targets)
    grads = backward(loss, tape, params=model_params.values())
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TensorError(RuntimeError):
    """Shape mismatch, non-finite values, or misuse of the tape."""


_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


class Tensor:
    """A dense float array plus a flag marking it as differentiable."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
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

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; context manager scoping the recording."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise TensorError(f"{op}: non-finite values in output")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-traverse the tape from a scalar loss; returns leaf gradients.

    When ``params`` is given the result has an entry for every parameter,
    zero-filled for parameters the loss does not depend on.
    """
    if loss.data.ndim != 0:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            acc = grads.get(t)
            grads[t] = ig if acc is None else acc + ig
    if params is not None:
        return {p: grads.get(p, np.zeros_like(p.data)) for p in params}
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise TensorError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _emit("scale", out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return (ga, gb)

    return _emit("matmul", out, (a, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _emit("transpose", out, (a,), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TensorError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}), got min={ids.min()} max={ids.max()}"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _emit("embedding_lookup", out, (table,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise TensorError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = ivar * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return (gx, ggamma, gbeta)

    return _emit("layer_norm", out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), bwd)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (the same tensor) when inactive."""
    if not (0.0 <= p < 1.0):
        raise TensorError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise TensorError("dropout: active dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * keep

    def bwd(g):
        return (g * keep,)

    return _emit("dropout", out, (x,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignored.

    Zero loss (and zero gradient) when every position is ignored.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise TensorError(
            f"cross_entropy: target shape {targets.shape} does not match logits {logits.shape}"
        )
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    sel = t != ignore_index
    n = int(sel.sum())
    if n == 0:
        def bwd_zero(g):
            return (np.zeros_like(logits.data),)

        return _emit("cross_entropy", np.asarray(0.0, dtype=logits.data.dtype), (logits,), bwd_zero)
    idx = np.nonzero(sel)[0]
    tt = t[idx]
    if tt.min() < 0 or tt.max() >= V:
        raise TensorError(f"cross_entropy: target id out of range [0, {V})")
    rows = flat[idx]
    m = rows.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True))
    logp = rows - lse
    loss = -logp[np.arange(n), tt].mean()

    def bwd(g):
        soft = np.exp(logp)
        soft[np.arange(n), tt] -= 1.0
        d = np.zeros_like(flat)
        d[idx] = soft * (g / n)
        return (d.reshape(logits.shape),)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(x * weights); handy for reducing to a test loss."""
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.shape:
        raise TensorError(f"weighted_sum: weight shape {weights.shape} does not match {x.shape}")
    out = np.asarray((x.data * weights).sum(), dtype=x.data.dtype)

    def bwd(g):
        return (g * weights,)

    return _emit("weighted_sum", out, (x,), bwd)
