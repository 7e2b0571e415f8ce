"""Dense float64 tensors with taped reverse-mode gradients.

The differentiable surface is a fixed op set (matmul, add, concat,
stack_rows, transpose, activation, softmax, broadcast_scale, hadamard,
max_over_time, embed_windows, sum_all, cross_entropy) plus the Adadelta
update and the per-row max-norm projection, which run outside the tape.
Dropout masks are applied with `hadamard` against a constant mask tensor.

Every op is pure: identical inputs produce bit-identical outputs. Ops
record a backward closure on an optional GradTape; `backward` replays the
records once, in reverse execution order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "BackwardResult",
    "AdadeltaState",
    "matmul",
    "add",
    "concat",
    "stack_rows",
    "transpose",
    "activation",
    "softmax",
    "broadcast_scale",
    "hadamard",
    "max_over_time",
    "embed_windows",
    "sum_all",
    "cross_entropy",
    "backward",
    "adadelta_step",
    "max_norm_rescale",
    "sgd_step",
]


def _ensure_finite(data: np.ndarray) -> None:
    # Summing is enough: any NaN/Inf poisons the sum, and legitimate
    # values in this model are far too small to overflow the sum.
    if not math.isfinite(float(data.sum())):
        raise NonFiniteError("tensor contains NaN or Inf")


class Tensor:
    """Dense float64 array of rank 0..2, row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 2)")
        _ensure_finite(arr)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


class GradTape:
    """Execution-ordered record of ops for one forward pass.

    A tape is owned by a single training step and never shared between
    threads. Parameters are registered with `watch`; everything else on
    the tape is an intermediate.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable]] = []
        self._watched: list[tuple[Tensor, str]] = []

    def watch(self, tensor: Tensor, name: str = "") -> Tensor:
        self._watched.append((tensor, name or f"param{len(self._watched)}"))
        return tensor

    def record(self, out: Tensor, backward_fn: Callable) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


class BackwardResult:
    """Gradients for every watched parameter.

    Parameters that never appeared on the tape get a zero gradient and
    their names are collected in `missing`.
    """

    def __init__(self, grads, missing):
        self._grads = grads
        self.missing: list[str] = missing

    def __getitem__(self, param: Tensor) -> np.ndarray:
        return self._grads[id(param)]

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self._grads


def backward(tape: GradTape, loss: Tensor) -> BackwardResult:
    """Reverse-mode gradients of a scalar loss w.r.t. watched parameters."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    refs: dict[int, Tensor] = {id(loss): loss}

    def push(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g
            refs[key] = t

    # Reverse execution order guarantees every consumer of an output is
    # visited before its producer, so each record is replayed exactly once
    # with the fully-accumulated output gradient.
    for out, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        backward_fn(g, push)

    result: dict[int, np.ndarray] = {}
    missing: list[str] = []
    for param, name in tape._watched:
        g = grads.get(id(param))
        if g is None:
            g = np.zeros_like(param.data)
            missing.append(name)
        result[id(param)] = g
    return BackwardResult(result, missing)


# ---------------------------------------------------------------------------
# Differentiable ops


def matmul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Matrix/vector product with standard numpy contraction rules."""
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul needs rank >= 1 operands")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g, push):
            if ad.ndim == 1 and bd.ndim == 1:
                push(a, g * bd)
                push(b, g * ad)
            elif ad.ndim == 1:
                push(a, bd @ g)
                push(b, np.outer(ad, g))
            elif bd.ndim == 1:
                push(a, np.outer(g, bd))
                push(b, ad.T @ g)
            else:
                push(a, g @ bd.T)
                push(b, ad.T @ g)

        tape.record(out, bwd)
    return out


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Elementwise sum; also allows [m,n] + [n] row broadcast for biases."""
    row_broadcast = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not row_broadcast and a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:

        def bwd(g, push):
            push(a, g)
            push(b, g.sum(axis=0) if row_broadcast else g)

        tape.record(out, bwd)
    return out


def concat(parts: Sequence[Tensor], tape: GradTape | None = None) -> Tensor:
    """Concatenate rank-1 tensors into one vector."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat needs rank-1 parts, got shape {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts]))
    if tape is not None:
        sizes = [p.size for p in parts]

        def bwd(g, push):
            offset = 0
            for p, n in zip(parts, sizes):
                push(p, g[offset : offset + n])
                offset += n

        tape.record(out, bwd)
    return out


def stack_rows(rows: Sequence[Tensor], tape: GradTape | None = None) -> Tensor:
    """Stack equal-length rank-1 tensors as the rows of a matrix."""
    if not rows:
        raise ShapeError("stack_rows of zero tensors")
    width = rows[0].size
    for r in rows:
        if r.data.ndim != 1 or r.size != width:
            raise ShapeError(f"stack_rows needs uniform rank-1 rows, got {r.shape}")
    out = Tensor(np.stack([r.data for r in rows]))
    if tape is not None:

        def bwd(g, push):
            for i, r in enumerate(rows):
                push(r, g[i])

        tape.record(out, bwd)
    return out


def transpose(a: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    if tape is not None:

        def bwd(g, push):
            push(a, g.T)

        tape.record(out, bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable branch per sign: exp() only ever sees non-positive arguments.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
}


def activation(x: Tensor, kind: str, tape: GradTape | None = None) -> Tensor:
    """Elementwise sigmoid / tanh / relu."""
    try:
        fn, deriv = _ACTIVATIONS[kind]
    except KeyError:
        raise ShapeError(f"unknown activation kind {kind!r}") from None
    out = Tensor(fn(x.data))
    if tape is not None:
        xd, yd = x.data, out.data

        def bwd(g, push):
            push(x, g * deriv(xd, yd))

        tape.record(out, bwd)
    return out


def softmax(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Normalized exponentials of a rank-1 tensor, max-subtracted for stability."""
    if x.data.ndim != 1 or x.size == 0:
        raise ShapeError(f"softmax needs a non-empty rank-1 tensor, got {x.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    out = Tensor(e / e.sum())
    if tape is not None:
        s = out.data

        def bwd(g, push):
            push(x, s * (g - np.dot(g, s)))

        tape.record(out, bwd)
    return out


def broadcast_scale(v: Tensor, s, tape: GradTape | None = None) -> Tensor:
    """Multiply every element of v by a scalar (Tensor of size 1 or float)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale factor must be scalar, got shape {s.shape}")
        s_val = float(s.data.reshape(()))
    else:
        s_val = float(s)
        if not math.isfinite(s_val):
            raise NonFiniteError("scale factor is not finite")
    out = Tensor(v.data * s_val)
    if tape is not None:

        def bwd(g, push):
            push(v, g * s_val)
            if isinstance(s, Tensor):
                push(s, np.full_like(s.data, (g * v.data).sum()))

        tape.record(out, bwd)
    return out


def hadamard(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if tape is not None:

        def bwd(g, push):
            push(a, g * b.data)
            push(b, g * a.data)

        tape.record(out, bwd)
    return out


def max_over_time(m: Tensor, tape: GradTape | None = None) -> Tensor:
    """Per-row maximum of a [maps, T] matrix; ties route to the first index."""
    if m.data.ndim != 2 or m.shape[1] == 0:
        raise ShapeError(f"max_over_time needs a [maps, T>=1] matrix, got {m.shape}")
    idx = np.argmax(m.data, axis=1)
    out = Tensor(m.data[np.arange(m.shape[0]), idx])
    if tape is not None:

        def bwd(g, push):
            gm = np.zeros_like(m.data)
            gm[np.arange(m.shape[0]), idx] = g
            push(m, gm)

        tape.record(out, bwd)
    return out


def embed_windows(token_ids, emb: Tensor, window: int, tape: GradTape | None = None) -> Tensor:
    """Gather embedding rows and lay out all length-`window` token windows.

    Returns a [L-window+1, window*d] matrix whose row t is the
    concatenation of the embeddings of tokens t .. t+window-1. Gradients
    scatter back into the embedding matrix, accumulating over repeats.
    """
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"token ids must be rank 1, got shape {ids.shape}")
    if emb.data.ndim != 2:
        raise ShapeError(f"embedding matrix must be rank 2, got {emb.shape}")
    length = ids.shape[0]
    if length < window:
        raise ShapeError(f"sequence length {length} shorter than window {window}")
    rows = emb.data[ids]
    t = length - window + 1
    out = Tensor(np.concatenate([rows[i : i + t] for i in range(window)], axis=1))
    if tape is not None:
        d = emb.shape[1]

        def bwd(g, push):
            ge = np.zeros_like(emb.data)
            for i in range(window):
                np.add.at(ge, ids[i : i + t], g[:, i * d : (i + 1) * d])
            push(emb, ge)

        tape.record(out, bwd)
    return out


def sum_all(t: Tensor, tape: GradTape | None = None) -> Tensor:
    """Sum of all elements, as a rank-0 tensor."""
    out = Tensor(t.data.sum())
    if tape is not None:

        def bwd(g, push):
            push(t, np.full_like(t.data, float(g)))

        tape.record(out, bwd)
    return out


def cross_entropy(logits: Tensor, label: int, tape: GradTape | None = None) -> Tensor:
    """Negative log-probability of `label` under softmax(logits), fused for stability."""
    if logits.data.ndim != 1:
        raise ShapeError(f"logits must be rank 1, got shape {logits.shape}")
    if not 0 <= label < logits.size:
        raise ShapeError(f"label {label} out of range for {logits.size} classes")
    shifted = logits.data - logits.data.max()
    lse = math.log(np.exp(shifted).sum())
    out = Tensor(lse - shifted[label])
    if tape is not None:
        probs = np.exp(shifted) / np.exp(shifted).sum()

        def bwd(g, push):
            gl = probs.copy()
            gl[label] -= 1.0
            push(logits, gl * float(g))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Optimizer and constraints (outside the tape)


class AdadeltaState:
    """Running averages E[g^2] and E[dx^2] for one parameter."""

    __slots__ = ("sq_grad", "sq_delta", "rho", "epsilon")

    def __init__(self, param: Tensor, rho: float = 0.95, epsilon: float = 1e-6):
        if not 0.0 < rho < 1.0:
            raise ShapeError(f"rho must be in (0,1), got {rho}")
        if epsilon <= 0.0:
            raise ShapeError(f"epsilon must be positive, got {epsilon}")
        self.sq_grad = np.zeros_like(param.data)
        self.sq_delta = np.zeros_like(param.data)
        self.rho = rho
        self.epsilon = epsilon


def adadelta_step(param: Tensor, grad, state: AdadeltaState) -> None:
    """One in-place Adadelta update.

    E[g^2] <- rho E[g^2] + (1-rho) g^2
    dx      = -sqrt(E[dx^2]+eps)/sqrt(E[g^2]+eps) * g
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape:
        raise ShapeError(f"grad shape {g.shape} != param shape {param.shape}")
    _ensure_finite(g)
    rho, eps = state.rho, state.epsilon
    state.sq_grad *= rho
    state.sq_grad += (1.0 - rho) * g * g
    delta = -np.sqrt(state.sq_delta + eps) / np.sqrt(state.sq_grad + eps) * g
    state.sq_delta *= rho
    state.sq_delta += (1.0 - rho) * delta * delta
    param.data += delta


def sgd_step(param: Tensor, grad, lr: float) -> None:
    """Plain gradient step, kept for tests and sanity baselines."""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape:
        raise ShapeError(f"grad shape {g.shape} != param shape {param.shape}")
    param.data -= lr * g


def max_norm_rescale(w: Tensor, c: float) -> Tensor:
    """Scale every row with L2 norm above c down to norm c.

    Iterates to a fixed point so the result always satisfies the
    constraint and a second application is a bit-exact no-op.
    """
    if c <= 0:
        raise ShapeError(f"max-norm bound must be positive, got {c}")
    if w.data.ndim != 2:
        raise ShapeError(f"max_norm_rescale needs rank 2, got shape {w.shape}")
    out = w.data.copy()
    while True:
        norms = np.sqrt((out * out).sum(axis=1))
        over = norms > c
        if not over.any():
            break
        out[over] *= (c / norms[over])[:, None]
    return Tensor(out)
