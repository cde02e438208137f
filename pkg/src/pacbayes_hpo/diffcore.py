"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of the same differentiable
operations used in the forward pass, so ``grad(..., create_graph=True)``
returns :class:`Tensor` objects that can be differentiated again.  This is
what makes Hessian-vector products and mixed second partials (for
hypergradients through gradient steps) available without materializing a
Hessian.

Usage::

    with Tape() as tape:
        theta = tape.input([1.0, -2.0])
        loss = scale(sqnorm(theta), 0.5)
    (g,) = grad(loss, [theta])
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Tensor",
    "Tape",
    "const",
    "leaf",
    "no_grad",
    "add",
    "sub",
    "neg",
    "scale",
    "mul",
    "exp",
    "log",
    "tanh",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "segment",
    "pad",
    "tsum",
    "mean",
    "sqnorm",
    "dot",
    "softmax",
    "softmax_xent",
    "grad",
    "hvp",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of tapes: differentiating across tapes, non-scalar outputs, etc."""


_ids = itertools.count()
_generations = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = _grad_enabled()
    _local.grad_enabled = enabled
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    """Context manager that disables graph construction."""
    return _grad_mode(False)


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Tapes are thread-confined (the active-tape stack is thread local) and are
    meant to be short-lived: one per inner step or truncation window.
    """

    def __init__(self):
        self.generation = next(_generations)
        self.records: list[tuple] = []
        self._leaves: dict[int, np.ndarray] = {}

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def input(self, data, requires_grad: bool = True) -> Tensor:
        """Create a leaf tensor owned by this tape."""
        t = Tensor(data, requires_grad=requires_grad)
        t.tape = self
        self._leaves[t.node_id] = t.data
        return t

    def _record(self, op: str, inputs: Sequence[Tensor], out: Tensor, fn: Callable) -> None:
        for x in inputs:
            if x.tape is None and x.node_id not in self._leaves:
                # constants created outside the tape are captured by value
                self._leaves[x.node_id] = x.data
        self.records.append((op, tuple(x.node_id for x in inputs), out.node_id, fn))
        out.tape = self

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-run every recorded forward computation.

        ``overrides`` maps leaf node ids to replacement values; any leaf not
        overridden keeps its recorded value.  Returns the value of every node.
        """
        values = dict(self._leaves)
        if overrides:
            for k, v in overrides.items():
                if k not in self._leaves:
                    raise TapeError(f"node {k} is not a leaf of this tape")
                values[k] = np.asarray(v, dtype=np.float64)
        for _op, ins, out, fn in self.records:
            values[out] = fn(*(values[i] for i in ins))
        return values


class Tensor:
    """A node in the differentiation graph wrapping a float64 array."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "node_id", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value in tensor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"
        self.node_id = next(_ids)
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(data) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data, requires_grad=False)


def leaf(data) -> Tensor:
    """Differentiable leaf, attached to the active tape if there is one."""
    tape = _active_tape()
    if tape is not None:
        return tape.input(data, requires_grad=True)
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = next(_ids)
    out.op = op
    out.tape = None
    if _grad_enabled() and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out.parents = inputs
        out.vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    tape = _active_tape()
    if tape is not None:
        tape._record(op, inputs, out, fn)
    return out


def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as e:
        raise ShapeError(f"incompatible shapes {shapes}") from e


# -- structural helpers (differentiable, used by backward rules) ------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {src} to {shape}") from e
    return _emit("reshape", data, (a,), lambda g: (reshape(g, src),), lambda x: x.reshape(shape))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (transpose(g),), lambda x: x.T.copy())


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from e
    return _emit(
        "broadcast_to", data, (a,), lambda g: (sum_to(g, src),), lambda x: np.broadcast_to(x, shape).copy()
    )


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    out = x.sum(axis=tuple(range(lead))) if lead > 0 else x
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(a, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _emit(
        "sum_to", _sum_to_array(a.data, shape), (a,), lambda g: (broadcast_to(g, src),),
        lambda x: _sum_to_array(x, shape),
    )


def segment(a, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` of a vector."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"bad segment [{start}:{stop}] of shape {a.shape}")
    n = a.shape[0]
    return _emit(
        "segment", a.data[start:stop].copy(), (a,), lambda g: (pad(g, start, n),),
        lambda x: x[start:stop].copy(),
    )


def pad(a, start: int, total: int) -> Tensor:
    """Embed vector ``a`` into zeros of length ``total`` at offset ``start`` (adjoint of segment)."""
    a = _as_tensor(a)
    k = a.shape[0]
    if a.data.ndim != 1 or start < 0 or start + k > total:
        raise ShapeError(f"cannot pad shape {a.shape} into length {total} at {start}")

    def fn(x):
        out = np.zeros(total)
        out[start:start + k] = x
        return out

    return _emit("pad", fn(a.data), (a,), lambda g: (segment(g, start, start + k),), fn)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), np.add)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub", a.data - b.data, (a, b), lambda g: (sum_to(g, sa), neg(sum_to(g, sb))), np.subtract
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a non-differentiable real constant."""
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (scale(g, c),), lambda x: x * c)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(
        "mul", a.data * b.data, (a, b),
        lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), np.multiply,
    )


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data == 0):
        raise NonFiniteError("reciprocal of zero")

    def vjp(g):
        r = reciprocal(a)
        return (neg(mul(g, mul(r, r))),)

    return _emit("reciprocal", 1.0 / a.data, (a,), vjp, lambda x: 1.0 / x)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _emit("exp", data, (a,), lambda g: (mul(g, exp(a)),), np.exp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (mul(g, reciprocal(a)),), np.log)


def tanh(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        t = tanh(a)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _emit("tanh", np.tanh(a.data), (a,), vjp, np.tanh)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = const((a.data > 0).astype(np.float64))
    return _emit("relu", np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), lambda x: np.maximum(x, 0.0))


# -- linear algebra and reductions --------------------------------------------


def _mm2(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _emit("matmul", a.data @ b.data, (a, b), vjp, np.matmul)


def matmul(a, b) -> Tensor:
    """Matrix-matrix or matrix-vector product (vector operands promoted)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul supports vectors and matrices only")
    if a.data.ndim == 1 and b.data.ndim == 1:
        return dot(a, b)
    a2 = reshape(a, (1, a.shape[0])) if a.data.ndim == 1 else a
    b2 = reshape(b, (b.shape[0], 1)) if b.data.ndim == 1 else b
    out = _mm2(a2, b2)
    if a.data.ndim == 1:
        return reshape(out, (out.shape[1],))
    if b.data.ndim == 1:
        return reshape(out, (out.shape[0],))
    return out


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    if axis is None:
        kept = tuple(1 for _ in src)
    else:
        ax = axis % len(src)
        kept = tuple(1 if i == ax else n for i, n in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    def fn(x):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    return _emit("sum", fn(a.data), (a,), vjp, fn)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    return scale(tsum(a), 1.0 / a.size)


def sqnorm(a) -> Tensor:
    """Squared Euclidean norm of all entries."""
    a = _as_tensor(a)
    src = a.shape
    return _emit(
        "sqnorm", np.asarray(np.sum(a.data * a.data)), (a,),
        lambda g: (scale(mul(broadcast_to(g, src), a), 2.0),),
        lambda x: np.asarray(np.sum(x * x)),
    )


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    return _emit(
        "dot", np.asarray(a.data @ b.data), (a, b), lambda g: (mul(g, b), mul(g, a)),
        lambda x, y: np.asarray(x @ y),
    )


def _softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)

    def vjp(g):
        s = softmax(a)
        gs = mul(g, s)
        return (sub(gs, mul(s, tsum(gs, axis=-1, keepdims=True))),)

    return _emit("softmax", _softmax_array(a.data), (a,), vjp, _softmax_array)


def softmax_xent(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, C) or (C,) against integer labels."""
    logits = _as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError("label index out of range")
    n = z.shape[0]
    onehot = np.zeros_like(z)
    onehot[np.arange(n), labels] = 1.0
    onehot = onehot.reshape(logits.shape)

    def fn(x):
        x2 = x if x.ndim == 2 else x[None, :]
        m = x2.max(axis=1)
        lse = m + np.log(np.exp(x2 - m[:, None]).sum(axis=1))
        return np.asarray(np.mean(lse - x2[np.arange(n), labels]))

    def vjp(g):
        return (scale(mul(g, sub(softmax(logits), onehot)), 1.0 / n),)

    return _emit("softmax_xent", fn(logits.data), (logits,), vjp, fn)


# -- differentiation -----------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``.

    Returns numpy arrays, or differentiable tensors when ``create_graph``.
    Inputs that do not influence ``output`` receive zeros.
    """
    if output.size != 1:
        raise TapeError(f"grad needs a scalar output, got shape {output.shape}")
    for w in wrt:
        if not isinstance(w, Tensor) or not w.requires_grad:
            raise TapeError("every wrt entry must be a tensor with requires_grad set")
        if w.tape is not output.tape:
            raise TapeError("wrt tensor does not belong to the output's tape")
    if not output.requires_grad:
        zeros = [np.zeros_like(w.data) for w in wrt]
        return [const(z) for z in zeros] if create_graph else zeros

    grads: dict[int, Tensor] = {}
    keep = {w.node_id for w in wrt}
    with _grad_mode(create_graph):
        grads[output.node_id] = const(np.ones_like(output.data))
        for node in reversed(_toposort(output)):
            if node.vjp is None or node.node_id in keep:
                g = grads.get(node.node_id)
            else:
                g = grads.pop(node.node_id, None)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(w.node_id)
        if g is None:
            g = const(np.zeros_like(w.data))
        out.append(g if create_graph else g.data)
    return out


def hvp(fn: Callable[[Tensor], Tensor], theta, v) -> np.ndarray:
    """Hessian-vector product of scalar ``fn`` at ``theta`` via double backward."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ShapeError(f"v has shape {v.shape}, expected {theta.shape}")
    with Tape() as tape:
        th = tape.input(theta)
        (g,) = grad(fn(th), [th], create_graph=True)
        (hv,) = grad(dot(reshape(g, (g.size,)), const(v.ravel())), [th])
    return hv
