"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is an append-only tape. Every op evaluates eagerly, caches its
output on the tape and (when recording) stores a closure that maps the output
gradient to input gradients. Parameters live outside the graph in
:class:`Parameter` objects so one set of weights can be used by many graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with an op."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class Parameter:
    """A named, trainable float64 array."""

    def __init__(self, name: str, data):
        self.name = name
        self.data = np.array(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Node:
    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self):
        return f"Node({self.id}, kind={self.graph.kinds[self.id]!r}, shape={self.shape})"


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """Append-only computation tape.

    ``record=False`` skips storing backward closures, which is what evaluation
    passes use. ``check_finite`` raises as soon as an op produces NaN/Inf.
    """

    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record = record
        self.check_finite = check_finite
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.backward_fns: list[Callable | None] = []
        self.trainable: dict[int, Parameter] = {}
        self._param_nodes: dict[int, Node] = {}

    def __len__(self):
        return len(self.values)

    # -- construction -------------------------------------------------------

    def _push(self, kind, value, parents=(), backward_fn=None) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{kind} produced non-finite values")
        self.kinds.append(kind)
        self.values.append(value)
        self.parents.append(tuple(p.id for p in parents))
        self.backward_fns.append(backward_fn if self.record else None)
        return Node(self, len(self.values) - 1)

    def const(self, value) -> Node:
        return self._push("const", np.asarray(value, dtype=np.float64))

    def param(self, p: Parameter) -> Node:
        """Leaf node for ``p``; one node per parameter per graph."""
        key = id(p)
        if key not in self._param_nodes:
            node = self._push("param", p.data)
            self.trainable[node.id] = p
            self._param_nodes[key] = node
        return self._param_nodes[key]

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ContractError("node belongs to a different graph")
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.const(x)

    def forward(self, node: Node) -> np.ndarray:
        return self.values[node.id]

    # -- elementwise --------------------------------------------------------

    def _check_broadcast(self, op, a, b):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._check_broadcast("add", a, b)
        sa, sb = a.shape, b.shape
        return self._push("add", a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._check_broadcast("sub", a, b)
        sa, sb = a.shape, b.shape
        return self._push("sub", a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        self._check_broadcast("mul", a, b)
        av, bv = a.value, b.value
        return self._push("mul", av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a, c: float) -> Node:
        a = self._lift(a)
        c = float(c)
        return self._push("scale", a.value * c, (a,), lambda g: (g * c,))

    def tanh(self, a) -> Node:
        a = self._lift(a)
        y = np.tanh(a.value)
        return self._push("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a) -> Node:
        a = self._lift(a)
        y = _sigmoid(a.value)
        return self._push("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))

    def relu(self, a) -> Node:
        a = self._lift(a)
        on = a.value > 0
        return self._push("relu", np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))

    def dropout(self, a, mask) -> Node:
        """Multiply by a caller-supplied (already rescaled) mask."""
        a = self._lift(a)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.shape:
            raise DimensionError(f"dropout: mask {mask.shape} vs input {a.shape}")
        return self._push("dropout", a.value * mask, (a,), lambda g: (g * mask,))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a, b) -> Node:
        """``a @ b`` where ``b`` is a matrix and ``a`` has any leading dims."""
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
            raise DimensionError(f"matmul: {av.shape} @ {bv.shape}")

        def back(g):
            ga = g @ bv.T
            a2 = av.reshape(-1, av.shape[-1]) if av.ndim > 1 else av[None, :]
            g2 = g.reshape(-1, bv.shape[1]) if g.ndim > 1 else g[None, :]
            return ga, a2.T @ g2

        return self._push("matmul", av @ bv, (a, b), back)

    def transpose(self, a) -> Node:
        a = self._lift(a)
        if a.value.ndim != 2:
            raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
        return self._push("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    # -- structure ----------------------------------------------------------

    def concat(self, xs: Sequence, axis: int = -1) -> Node:
        xs = [self._lift(x) for x in xs]
        vals = [x.value for x in xs]
        try:
            out = np.concatenate(vals, axis=axis)
        except ValueError:
            raise DimensionError(f"concat: shapes {[v.shape for v in vals]} on axis {axis}") from None
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return self._push("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))

    def stack(self, xs: Sequence, axis: int = 0) -> Node:
        xs = [self._lift(x) for x in xs]
        try:
            out = np.stack([x.value for x in xs], axis=axis)
        except ValueError:
            raise DimensionError(f"stack: shapes {[x.shape for x in xs]}") from None
        n = len(xs)
        return self._push("stack", out, xs,
                          lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))

    def slice(self, a, start: int, stop: int, axis: int = -1) -> Node:
        a = self._lift(a)
        shape = a.shape
        ax = axis % len(shape)
        if not 0 <= start < stop <= shape[ax]:
            raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {shape}")
        index = [slice(None)] * len(shape)
        index[ax] = slice(start, stop)
        index = tuple(index)

        def back(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)

        return self._push("slice", a.value[index].copy(), (a,), back)

    def reshape(self, a, shape) -> Node:
        a = self._lift(a)
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: {old} -> {shape}") from None
        return self._push("reshape", out, (a,), lambda g: (g.reshape(old),))

    def select(self, a, i: int, axis: int = 0) -> Node:
        """``a`` indexed at position ``i`` along ``axis`` (that axis is dropped)."""
        a = self._lift(a)
        shape = a.shape
        ax = axis % len(shape)
        if not 0 <= i < shape[ax]:
            raise DimensionError(f"select: index {i} out of range for axis {axis} of {shape}")

        def back(g):
            out = np.zeros(shape)
            idx = [slice(None)] * len(shape)
            idx[ax] = i
            out[tuple(idx)] = g
            return (out,)

        return self._push("select", np.take(a.value, i, axis=ax), (a,), back)

    def take(self, a, idx) -> Node:
        """Row lookup ``a[idx]`` along axis 0 (embedding gather)."""
        a = self._lift(a)
        idx = np.asarray(idx, dtype=np.int64)
        shape = a.shape
        if idx.size and (idx.min() < 0 or idx.max() >= shape[0]):
            raise DimensionError(f"take: index out of range for {shape}")

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._push("take", a.value[idx], (a,), back)

    def take_along(self, a, idx, axis: int = -1) -> Node:
        a = self._lift(a)
        idx = np.asarray(idx, dtype=np.int64)
        shape = a.shape
        try:
            out = np.take_along_axis(a.value, idx, axis=axis)
        except (ValueError, IndexError):
            raise DimensionError(f"take_along: {idx.shape} into {shape}") from None

        def back(g):
            full = np.zeros(shape)
            # put_along_axis would overwrite repeated indices
            ax = axis % len(shape)
            grids = list(np.indices(idx.shape, sparse=True))
            grids[ax] = idx
            np.add.at(full, tuple(grids), g)
            return (full,)

        return self._push("take_along", out, (a,), back)

    # -- reductions ---------------------------------------------------------

    def sum(self, a, axis=None) -> Node:
        a = self._lift(a)
        shape = a.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._push("sum", np.asarray(a.value.sum(axis=axis)), (a,), back)

    def mean(self, a, axis=None) -> Node:
        a = self._lift(a)
        shape = a.shape
        n = a.value.size if axis is None else shape[axis]
        if n == 0:
            raise ContractError("mean of an empty tensor")

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).copy(),)

        return self._push("mean", np.asarray(a.value.mean(axis=axis)), (a,), back)

    def max_over_time(self, a, axis: int = 0, mask=None) -> Node:
        """Elementwise max along ``axis``; gradient goes to the earliest argmax.

        ``mask`` (broadcastable to ``a`` with size 1 on trailing feature dims)
        marks valid steps; masked steps never win.
        """
        a = self._lift(a)
        v = a.value
        ax = axis % v.ndim
        if v.shape[ax] == 0:
            raise ContractError("max_over_time over an empty sequence")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            v = np.where(mask, v, -np.inf)
        arg = np.expand_dims(np.argmax(v, axis=ax), ax)
        out = np.take_along_axis(a.value, arg, axis=ax).squeeze(ax)
        shape = a.shape

        def back(g):
            full = np.zeros(shape)
            np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
            return (full,)

        return self._push("max_over_time", out, (a,), back)

    # -- similarity ---------------------------------------------------------

    def cosine(self, a, b) -> Node:
        """Cosine similarity along the last axis (row-wise for matrices)."""
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise DimensionError(f"cosine: {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        na = np.linalg.norm(av, axis=-1, keepdims=True)
        nb = np.linalg.norm(bv, axis=-1, keepdims=True)
        if np.any(na == 0) or np.any(nb == 0):
            raise ContractError("cosine of a zero vector")
        c = np.sum(av * bv, axis=-1, keepdims=True) / (na * nb)

        def back(g):
            g = np.expand_dims(g, -1)
            ga = g * (bv / (na * nb) - c * av / (na * na))
            gb = g * (av / (na * nb) - c * bv / (nb * nb))
            return ga, gb

        return self._push("cosine", c.squeeze(-1), (a, b), back)

    def cosine_matrix(self, a, b) -> Node:
        """All-pairs cosine between rows of ``a`` (n, k) and ``b`` (m, k)."""
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
            raise DimensionError(f"cosine_matrix: {av.shape} vs {bv.shape}")
        na = np.linalg.norm(av, axis=1, keepdims=True)
        nb = np.linalg.norm(bv, axis=1, keepdims=True)
        if np.any(na == 0) or np.any(nb == 0):
            raise ContractError("cosine of a zero vector")
        ah, bh = av / na, bv / nb
        c = ah @ bh.T

        def back(g):
            ga = (g @ bh - np.sum(g * c, axis=1, keepdims=True) * ah) / na
            gb = (g.T @ ah - np.sum(g * c, axis=0)[:, None] * bh) / nb
            return ga, gb

        return self._push("cosine_matrix", c, (a, b), back)

    # -- differentiation ----------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every parameter on this graph.

        Parameters that do not reach ``loss`` get zeros.
        """
        if not self.record:
            raise ContractError("graph was built with record=False")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for i in range(loss.id, -1, -1):
            g = grads.pop(i, None) if i not in self.trainable else grads.get(i)
            if g is None or self.backward_fns[i] is None:
                continue
            for pid, pg in zip(self.parents[i], self.backward_fns[i](g)):
                if pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for nid, p in self.trainable.items():
            g = grads.get(nid)
            out[p.name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


# -- optimisation -----------------------------------------------------------


@dataclass
class RmsPropState:
    rho: float = 0.9
    eps: float = 1e-8
    acc: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_update(w, g, acc, lr, rho=0.9, eps=1e-8):
    """One elementwise RMSProp update; returns ``(w_new, acc_new)``."""
    w, g, acc = np.asarray(w, float), np.asarray(g, float), np.asarray(acc, float)
    if not (w.shape == g.shape == acc.shape):
        raise DimensionError(f"rmsprop: w {w.shape}, g {g.shape}, acc {acc.shape}")
    acc = rho * acc + (1.0 - rho) * g * g
    return w - lr * g / np.sqrt(acc + eps), acc


def rmsprop_step(params: Iterable[Parameter], grads: dict[str, np.ndarray],
                 state: RmsPropState, lr: float) -> None:
    """Update ``params`` in place from ``grads`` (keyed by parameter name)."""
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        acc = state.acc.get(p.name)
        if acc is None:
            acc = np.zeros_like(p.data)
        p.data[...], state.acc[p.name] = rmsprop_update(p.data, g, acc, lr, state.rho, state.eps)


def clip_parameters(params: Iterable[Parameter], c: float) -> None:
    if c <= 0:
        raise ContractError(f"clip bound must be positive, got {c}")
    for p in params:
        np.clip(p.data, -c, c, out=p.data)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_difference_check(loss_fn: Callable[[Graph], Node], params: Sequence[Parameter],
                            step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare ``Graph.backward`` against central differences, coordinate by coordinate.

    ``loss_fn`` builds the loss on a fresh graph and must be deterministic
    (fix dropout masks and negative samples outside of it).
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    g = Graph()
    analytic = g.backward(loss_fn(g))

    def f():
        # the analytic pass above already screens for non-finite values
        return float(loss_fn(Graph(record=False, check_finite=False)).value)

    errors = {}
    for p in params:
        a = analytic.get(p.name, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f()
            flat[i] = old - step
            down = f()
            flat[i] = old
            num = (up - down) / (2 * step)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), 1e-8)
            worst = max(worst, err)
        errors[p.name] = worst
    return GradCheckReport(errors, tolerance, all(e <= tolerance for e in errors.values()))
