"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op builds a fresh node that remembers its inputs and a closure that
maps the output gradient to input gradients. ``backward`` orders the graph
reachable from a scalar loss topologically and visits each node once in
reverse. Only what the speech-translation model needs is provided.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import ctc as _ctc

_MODE = threading.local()  # grad recording is per thread so parallel decoders cannot clobber it


def grad_enabled() -> bool:
    return getattr(_MODE, "enabled", True)


class DimensionError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = grad_enabled()
    _MODE.enabled = False
    try:
        yield
    finally:
        _MODE.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    _check_finite(data, op)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Graph:
    """Topologically ordered op records reachable from an output tensor."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    graph = Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accum(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in graph.nodes:
        node._backward = None if node._parents else node._backward
        node._parents = ()
    loss._consumed = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), "relu", lambda g: (np.where(pos, g, 0.0),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no rng is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ------------------------------------------------------------------ structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    vals = np.array([x.data.reshape(()) for x in xs])
    return _make(vals, tuple(xs), "stack", lambda g: tuple(g[i].reshape(xs[i].shape) for i in range(len(xs))))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for embedding table of size {weight.shape[0]}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.ravel(), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), "embedding", bw)


# ----------------------------------------------------------------- normalizers

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (x,), "log_softmax",
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), "softmax",
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", bw)


# ---------------------------------------------------------------------- losses

def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean token NLL over positions where ``mask`` is true.

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` share the leading
    shape. Masked positions get an exactly-zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(
            f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty loss support")
    V = logits.shape[-1]
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= V):
        raise IndexError(f"target id out of range for {V} classes")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -np.where(mask, picked, 0.0).sum() / count

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe_t[..., None],
                          np.take_along_axis(grad, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        grad = np.where(mask[..., None], grad * (float(g) / count), 0.0)
        return (grad,)

    return _make(np.asarray(loss), (logits,), "masked_cross_entropy", bw)


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """CTC negative log-likelihood for one sequence.

    ``log_probs`` is [T, V+1] frame log-posteriors with blank at column 0;
    ``target`` holds class indices in 1..V.
    """
    if log_probs.data.ndim != 2:
        raise DimensionError(f"ctc_loss expects [T, C] log-probs, got {log_probs.shape}")
    labels = np.asarray(target, dtype=np.int64)
    _check_ctc_feasible(log_probs.shape[0], labels)
    nll, grad = _ctc.forward_backward(np.ascontiguousarray(log_probs.data), labels)
    return _make(np.asarray(nll), (log_probs,), "ctc_loss", lambda g: (grad * float(g),))


def ctc_loss_batch(log_probs: Tensor, input_lengths: Sequence[int],
                   targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-example CTC NLLs for a padded [B, T, C] batch, returned as shape [B]."""
    B, T, C = log_probs.shape
    losses = np.zeros(B)
    grads = np.zeros_like(log_probs.data)
    for b in range(B):
        n = int(input_lengths[b])
        labels = np.asarray(targets[b], dtype=np.int64)
        _check_ctc_feasible(n, labels)
        nll, grad = _ctc.forward_backward(np.ascontiguousarray(log_probs.data[b, :n]), labels)
        losses[b] = nll
        grads[b, :n] = grad
    return _make(losses, (log_probs,), "ctc_loss_batch", lambda g: (grads * g[:, None, None],))


def ctc_min_frames(labels: np.ndarray) -> int:
    repeats = int(np.sum(labels[1:] == labels[:-1])) if len(labels) > 1 else 0
    return len(labels) + repeats


def _check_ctc_feasible(T: int, labels: np.ndarray) -> None:
    if labels.size and labels.min() < 1:
        raise ValueError("CTC labels must be >= 1 (0 is the blank)")
    if T < ctc_min_frames(labels):
        raise ValueError(f"target longer than input: T={T}, need {ctc_min_frames(labels)} frames")


# ---------------------------------------------------------------- verification

def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a tensor to a scalar tensor and must rebuild its graph on
    every call.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(Tensor(base.copy())).item()
            flat[i] = old - h
            fm = f(Tensor(base.copy())).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
