"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = scale(sum(mul(w, w)), 0.5)
    ...     grads = tape.backward(loss)
    >>> w.grad
    array([1., 2.])
"""

from __future__ import annotations

import builtins
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
# Padding/self-exclusion bias. exp(MASK_VALUE - max) underflows to exactly 0.0.
MASK_VALUE = -1e9
NORM_EPS = 1e-12

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape may be differentiated once. Pass ``retain_graph=True`` to
    :meth:`backward` to allow another pass over the same records; otherwise
    a second call raises :class:`TapeError` until :meth:`reset`.
    """

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: Tensor, retain_graph: bool = False) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every leaf reachable in the tape.

        Leaf gradients are overwritten, never accumulated. Leaves that appear
        on the tape but do not influence ``loss`` receive zeros. Returns the
        leaf gradients keyed by ``node_id``.
        """
        if self.consumed:
            raise TapeError("tape already differentiated; call reset() or pass retain_graph=True")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise TapeError("tape is empty")

        produced = {r.output.node_id for r in self.records}
        leaves: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and t.node_id not in produced:
                    leaves.setdefault(t.node_id, t)

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for r in reversed(self.records):
            g = grads.get(r.output.node_id)
            if g is None:
                continue
            for t, gi in zip(r.inputs, r.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi

        out = {}
        for nid, leaf in leaves.items():
            g = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=DTYPE)
            out[nid] = leaf.grad
        if not retain_graph:
            self.consumed = True
        return out


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    _finite(data, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    if needs:
        tape.records.append(_Record(tuple(inputs), out, backward, op))
    return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (leading axes only)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    keep = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=keep, keepdims=True) if keep else g


# --- arithmetic ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes of ``a`` broadcast against a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    flat = B.ndim == 2 and A.ndim > 2

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ B.T).reshape(A.shape)
            if b.requires_grad:
                gb = A.reshape(-1, A.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ _swap(B)
        if b.requires_grad:
            gb = _swap(A) @ g
        return ga, gb

    out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[-1],)) if flat else A @ B
    return _make("matmul", out, (a, b), backward)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ValueError(f"{op} shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum. ``b`` may be a scalar or a row vector (bias)."""
    if not isinstance(a, Tensor):
        a, b = b, a
    b = as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return (g if a.requires_grad else None,
                _sum_to(g, sb) if b.requires_grad else None)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    _check_binary(a, b, "sub")
    sb = b.shape

    def backward(g):
        return (g if a.requires_grad else None,
                -_sum_to(g, sb) if b.requires_grad else None)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors (or tensor times row vector)."""
    b = as_tensor(b)
    _check_binary(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return (g * B if a.requires_grad else None,
                _sum_to(g * A, B.shape) if b.requires_grad else None)

    return _make("mul", A * B, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an attention mask), broadcasting allowed."""
    const = np.asarray(const, dtype=DTYPE)
    out = a.data + const
    if out.shape != a.shape:
        raise ValueError(f"add_const would change shape {a.shape} -> {out.shape}")
    return _make("add_const", out, (a,), lambda g: (g,))


def mul_const(a: Tensor, const: np.ndarray) -> Tensor:
    const = np.asarray(const, dtype=DTYPE)
    out = a.data * const
    if out.shape != a.shape:
        raise ValueError(f"mul_const would change shape {a.shape} -> {out.shape}")
    return _make("mul_const", out, (a,), lambda g: (g * const,))


# --- elementwise nonlinearities -------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _make("log", y, (a,), lambda g: (g / x,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make("gelu", y, (a,), backward)


# --- reductions and normalisers ---------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    y = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(y, dtype=DTYPE), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    shape = a.shape
    y = np.mean(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make("mean", np.asarray(y, dtype=DTYPE), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (a,), backward)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each last-axis vector to unit length. Zero vectors are rejected."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm < NORM_EPS):
        raise ValueError("l2_normalize of a (near-)zero vector")
    y = x / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    y = xhat * G + beta.data

    def backward(g):
        gx = None
        if a.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _sum_to(g * xhat, G.shape) if gamma.requires_grad else None
        gb = _sum_to(g, G.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make("layer_norm", y, (a, gamma, beta), backward)


# --- structural -------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make("concat", y, tensors, backward)


def slice_(a: Tensor, key) -> Tensor:
    shape = a.shape
    y = np.array(a.data[key], dtype=DTYPE)

    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in keys)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make("slice", y, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor; use swapaxes")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    y = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))
    return _make("swapaxes", y, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def detach(a: Tensor) -> Tensor:
    """Stop-gradient copy."""
    return Tensor(a.data)


# --- layers with state ----------------------------------------------------------


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of size {table.shape[0]}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make("embedding", table.data[ids], (table,), backward)


PRIMITIVES = builtins.dict(
    matmul=matmul, add=add, sub=sub, mul=mul, scale=scale, tanh=tanh, exp=exp,
    log=log, gelu=gelu, softmax=softmax, log_softmax=log_softmax, mean=mean,
    sum=sum, concat=concat, slice=slice_, transpose=transpose,
    l2_normalize=l2_normalize, dropout=dropout, layer_norm=layer_norm,
    embedding=embedding,
)
