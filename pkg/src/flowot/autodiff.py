"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record onto an explicit :class:`Tape` while one is active on the
current thread; with no active tape they are plain numpy computations.  The
tape stores nodes in execution order, which is already a topological order,
so the backward pass is a single reverse sweep.  Gradients of leaves
accumulate additively over all paths.

Broadcasting is deliberately restricted: the only allowed shape coercion is
adding/subtracting a vector bias over the leading batch axis.  Everything
else must match exactly, which turns conditioner-wiring mistakes into
immediate errors instead of silently broadcast nonsense.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NonFiniteError, TapeReuseError

_tls = threading.local()


def _active_tape():
    stack = getattr(_tls, "stack", None)
    if stack:
        return stack[-1]
    return None


class Tensor:
    """A dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the functional ops below.
    def __add__(self, other):
        return scalar_add(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __sub__(self, other):
        return scalar_add(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scalar_mul(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.node = None
    return t


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp", "tape_id")

    def __init__(self, op, inputs, out, vjp, tape_id):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp
        self.tape_id = tape_id


class Tape:
    """Append-only record of differentiable operations on one thread."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._consumed = False

    def __enter__(self):
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, op, inputs, out, vjp):
        out.requires_grad = True
        node = _Node(op, inputs, out, vjp, id(self))
        out.node = node
        self._nodes.append(node)
        for t in inputs:
            if t.requires_grad and t.node is None and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self._leaves.append(t)

    def backward(self, root: Tensor) -> dict[Tensor, Tensor]:
        """Reverse sweep from a scalar root.

        Returns gradients for every requires_grad leaf seen by this tape;
        leaves unreachable from the root get zeros.  A tape can be consumed
        only once.
        """
        if self._consumed:
            raise TapeReuseError("tape already consumed by a previous backward()")
        if root.shape != ():
            raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
        if root.node is None or root.node.tape_id != id(self):
            raise ContractViolation("backward root is not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
        owned: set[int] = set()
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            owned.discard(id(node.out))
            for t, gt in zip(node.inputs, node.vjp(g)):
                if gt is None or not t.requires_grad:
                    continue
                tid = id(t)
                cur = grads.get(tid)
                if cur is None:
                    grads[tid] = gt
                elif tid in owned:
                    cur += gt
                else:
                    # First stored array may alias vjp internals; never
                    # mutate it in place.
                    grads[tid] = cur + gt
                    owned.add(tid)
        out: dict[Tensor, Tensor] = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            out[leaf] = _wrap(np.ascontiguousarray(g, dtype=np.float64))
        return out


def backward(root: Tensor) -> dict[Tensor, Tensor]:
    """Run backward on the tape that recorded ``root``."""
    tape = _active_tape()
    if tape is None:
        raise ContractViolation("backward() requires an active tape")
    return tape.backward(root)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _maybe_record(op, inputs, out_data, vjp_builder) -> Tensor:
    out = _wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(op, inputs, out, vjp_builder())
    return out


def _bias_mode(op: str, xs: tuple, ys: tuple) -> str:
    """'same', 'xbias' (x broadcast over y's batch axis) or 'ybias'."""
    if xs == ys:
        return "same"
    if len(xs) == len(ys) + 1 and xs[1:] == ys:
        return "ybias"
    if len(ys) == len(xs) + 1 and ys[1:] == xs:
        return "xbias"
    raise ContractViolation(f"{op}: incompatible shapes {xs} and {ys}")


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops
# ---------------------------------------------------------------------------


def add(x: Tensor, y: Tensor) -> Tensor:
    mode = _bias_mode("add", x.shape, y.shape)
    out_data = x.data + y.data

    def build():
        def vjp(g):
            gx = g.sum(axis=0) if mode == "xbias" else g
            gy = g.sum(axis=0) if mode == "ybias" else g
            return (gx if x.requires_grad else None, gy if y.requires_grad else None)

        return vjp

    return _maybe_record("add", (x, y), out_data, build)


def sub(x: Tensor, y: Tensor) -> Tensor:
    mode = _bias_mode("sub", x.shape, y.shape)
    out_data = x.data - y.data

    def build():
        def vjp(g):
            gx = g.sum(axis=0) if mode == "xbias" else g
            gy = -(g.sum(axis=0)) if mode == "ybias" else -g
            return (gx if x.requires_grad else None, gy if y.requires_grad else None)

        return vjp

    return _maybe_record("sub", (x, y), out_data, build)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ContractViolation(f"mul: incompatible shapes {x.shape} and {y.shape}")
    out_data = x.data * y.data

    def build():
        xd, yd = x.data, y.data

        def vjp(g):
            return (g * yd if x.requires_grad else None, g * xd if y.requires_grad else None)

        return vjp

    return _maybe_record("mul", (x, y), out_data, build)


def matmul(x: Tensor, y: Tensor) -> Tensor:
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    out_data = x.data @ y.data

    def build():
        xd, yd = x.data, y.data

        def vjp(g):
            gx = g @ yd.T if x.requires_grad else None
            gy = xd.T @ g if y.requires_grad else None
            return (gx, gy)

        return vjp

    return _maybe_record("matmul", (x, y), out_data, build)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine layer x @ w + b (b broadcast over the batch axis)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ContractViolation(f"linear: bias shape {b.shape} does not match {(w.shape[1],)}")
    out_data = x.data @ w.data
    out_data += b.data

    def build():
        xd, wd = x.data, w.data

        def vjp(g):
            gx = g @ wd.T if x.requires_grad else None
            gw = xd.T @ g if w.requires_grad else None
            gb = g.sum(axis=0) if b.requires_grad else None
            return (gx, gw, gb)

        return vjp

    return _maybe_record("linear", (x, w, b), out_data, build)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    if not np.isfinite(out_data).all():
        raise NonFiniteError("exp")

    def build():
        def vjp(g):
            return (g * out_data,)

        return vjp

    return _maybe_record("exp", (x,), out_data, build)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data, where=x.data > 0, out=np.full_like(x.data, np.nan))
    if not np.isfinite(out_data).all():
        raise NonFiniteError("log", "non-positive input")

    def build():
        xd = x.data

        def vjp(g):
            return (g / xd,)

        return vjp

    return _maybe_record("log", (x,), out_data, build)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def build():
        def vjp(g):
            return (g * (1.0 - out_data * out_data),)

        return vjp

    return _maybe_record("tanh", (x,), out_data, build)


def scaled_tanh(x: Tensor, scale: float) -> Tensor:
    """scale * tanh(x / scale); squashes into (-scale, scale)."""
    if scale <= 0:
        raise ContractViolation("scaled_tanh: scale must be positive")
    inner = np.tanh(x.data / scale)
    out_data = scale * inner

    def build():
        def vjp(g):
            return (g * (1.0 - inner * inner),)

        return vjp

    return _maybe_record("scaled_tanh", (x,), out_data, build)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def build():
        mask = x.data > 0

        def vjp(g):
            return (g * mask,)

        return vjp

    return _maybe_record("relu", (x,), out_data, build)


def square(x: Tensor) -> Tensor:
    out_data = x.data * x.data

    def build():
        xd = x.data

        def vjp(g):
            return (2.0 * g * xd,)

        return vjp

    return _maybe_record("square", (x,), out_data, build)


def neg(x: Tensor) -> Tensor:
    def build():
        def vjp(g):
            return (-g,)

        return vjp

    return _maybe_record("neg", (x,), -x.data, build)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def build():
        def vjp(g):
            return (c * g,)

        return vjp

    return _maybe_record("scalar_mul", (x,), c * x.data, build)


def scalar_add(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def build():
        def vjp(g):
            return (g,)

        return vjp

    return _maybe_record("scalar_add", (x,), x.data + c, build)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _check_axis(op, x, axis):
    if axis is not None and not (-x.ndim <= axis < x.ndim):
        raise ContractViolation(f"{op}: axis {axis} out of range for shape {x.shape}")


def asum(x: Tensor, axis: int | None = None) -> Tensor:
    _check_axis("sum", x, axis)
    out_data = x.data.sum(axis=axis)

    def build():
        shape = x.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape),)

        return vjp

    return _maybe_record("sum", (x,), out_data, build)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    _check_axis("mean", x, axis)
    out_data = x.data.mean(axis=axis)

    def build():
        shape = x.shape
        n = x.data.size if axis is None else shape[axis]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / n, shape),)
            return (np.broadcast_to(np.expand_dims(g / n, axis), shape),)

        return vjp

    return _maybe_record("mean", (x,), out_data, build)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractViolation("concat: need at least one tensor")
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ContractViolation(
                f"concat: rank mismatch {tensors[0].shape} vs {t.shape}"
            )
        for ax in range(ndim):
            if ax != axis % ndim and t.shape[ax] != tensors[0].shape[ax]:
                raise ContractViolation(
                    f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {ax}"
                )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def build():
        sizes = [t.shape[axis] for t in tensors]
        split_at = np.cumsum(sizes)[:-1]

        def vjp(g):
            parts = np.split(g, split_at, axis=axis)
            return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

        return vjp

    return _maybe_record("concat", tensors, out_data, build)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_axis("slice", x, axis)
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ContractViolation(f"slice: bounds [{start}, {stop}) invalid for axis size {n}")
    index = tuple(slice(None) if ax != axis % x.ndim else slice(start, stop) for ax in range(x.ndim))
    out_data = x.data[index]

    def build():
        shape = x.shape

        def vjp(g):
            full = np.zeros(shape, dtype=np.float64)
            full[index] = g
            return (full,)

        return vjp

    return _maybe_record("slice", (x,), out_data, build)


def split(x: Tensor, sizes, axis: int = 1):
    """Split into consecutive chunks of the given sizes along an axis."""
    if sum(sizes) != x.shape[axis]:
        raise ContractViolation(f"split: sizes {tuple(sizes)} do not cover axis of size {x.shape[axis]}")
    parts = []
    start = 0
    for s in sizes:
        parts.append(slice_axis(x, axis, start, start + s))
        start += s
    return tuple(parts)


def permute_cols(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the columns of a 2-D tensor; volume preserving."""
    if x.ndim != 2:
        raise ContractViolation(f"permute_cols: expected 2-D tensor, got shape {x.shape}")
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (x.shape[1],):
        raise ContractViolation(f"permute_cols: permutation length {perm.shape} != {x.shape[1]} columns")
    out_data = x.data[:, perm]

    def build():
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)

        def vjp(g):
            return (g[:, inv],)

        return vjp

    return _maybe_record("permute_cols", (x,), out_data, build)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments, one slot per named parameter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    if set(params.keys()) != set(grads.keys()):
        missing = set(params) ^ set(grads)
        raise ContractViolation(f"adam_step: parameter/gradient key mismatch: {sorted(missing)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractViolation(f"adam_step: gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
