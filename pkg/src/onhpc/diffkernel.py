"""Minimal deterministic tensor compute with reverse-mode differentiation.

Tensors wrap float64 numpy arrays and carry backward closures; graphs are
built define-by-run and freed after each backward pass. All reductions use a
fixed summation order (single GEMM / numpy reduction per op), so repeated
runs with the same inputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Finite checks on every op output are part of the compute contract; the flag
# exists so profiling can quantify their cost, not to ship with them off.
FINITE_CHECKS = True


class GraphError(ValueError):
    """Shape or structure violation while building/running a graph."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


class Tensor:
    """Node in the compute graph: float64 values plus gradient plumbing."""

    __slots__ = ("data", "grad", "parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    def accumulate_owned(self, g: np.ndarray) -> None:
        """Like accumulate, but takes ownership of the buffer without copying.

        Callers must hand over either a freshly computed array or a view of
        their own node's grad buffer (dead after that node's backward); a
        buffer must never be given to two different tensors.
        """
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"


def constant(data, name=None) -> Tensor:
    return Tensor(data, name=name)


def _unbroadcast_into(t: Tensor, g: np.ndarray, fresh: bool) -> None:
    """Sum g down to t's shape (reverse of broadcasting) and accumulate.

    `fresh` says the incoming buffer is exclusively ours; a pass-through of a
    non-fresh buffer must be copied so two parents never share one.
    """
    reduced = False
    while g.ndim > t.data.ndim:
        g = g.sum(axis=0)
        reduced = True
    for ax, n in enumerate(t.data.shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
            reduced = True
    if fresh or reduced:
        t.accumulate_owned(g)
    else:
        t.accumulate(g)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = _checked(a.data + b.data, "add")

    def backward(g, out):
        _unbroadcast_into(a, g, fresh=False)
        _unbroadcast_into(b, g, fresh=False)

    return Tensor(out_data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = _checked(a.data * b.data, "mul")

    def backward(g, out):
        _unbroadcast_into(a, g * b.data, fresh=True)
        _unbroadcast_into(b, g * a.data, fresh=True)

    return Tensor(out_data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = _checked(x.data * c, "scale")

    def backward(g, out):
        x.accumulate_owned(g * c)

    return Tensor(out_data, (x,), backward, "scale")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b on the last axis; x may carry leading batch axes."""
    fi, fo = w.data.shape[0], w.data.shape[1]
    if x.data.shape[-1] != fi:
        raise GraphError(
            f"dense: input last dim {x.data.shape[-1]} != weight rows {fi} "
            f"(x {x.data.shape}, w {w.data.shape})")
    if b.data.shape != (fo,):
        raise GraphError(f"dense: bias shape {b.data.shape} != ({fo},)")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, fi)
    out2 = x2 @ w.data
    out2 += b.data
    out_data = _checked(out2.reshape(*lead, fo), "dense")

    def backward(g, out):
        g2 = g.reshape(-1, fo)
        x.accumulate_owned((g2 @ w.data.T).reshape(x.data.shape))
        w.accumulate_owned(x2.T @ g2)
        b.accumulate_owned(g2.sum(axis=0))

    return Tensor(out_data, (x, w, b), backward, "dense")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise GraphError(f"matmul: inner dims differ ({a.data.shape} @ {b.data.shape})")
    out_data = _checked(np.matmul(a.data, b.data), "matmul")

    def backward(g, out):
        _unbroadcast_into(a, np.matmul(g, np.swapaxes(b.data, -1, -2)), fresh=True)
        _unbroadcast_into(b, np.matmul(np.swapaxes(a.data, -1, -2), g), fresh=True)

    return Tensor(out_data, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g, out):
        x.accumulate_owned(g * (x.data > 0.0))

    return Tensor(out_data, (x,), backward, "relu")


def softmax(x: Tensor) -> Tensor:
    """Shift-stabilized softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = _checked(e / e.sum(axis=-1, keepdims=True), "softmax")

    def backward(g, out):
        y = out.data
        x.accumulate_owned((g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return Tensor(out_data, (x,), backward, "softmax")


def max_over_set(x: Tensor) -> Tensor:
    """Max over the point axis: (..., n, d) -> (..., d).

    Gradient routes only to the argmax rows; ties go to the lowest index.
    The argmax is only computed when a backward pass needs it.
    """
    if x.data.ndim < 2:
        raise GraphError(f"max_over_set: need at least 2 dims, got {x.data.shape}")
    out_data = np.max(x.data, axis=-2)

    def backward(g, out):
        # argmax over a contiguous last axis; first occurrence = lowest index
        swapped = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
        idx = np.argmax(swapped, axis=-1)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        x.accumulate_owned(gx)

    return Tensor(_checked(out_data, "max_over_set"), (x,), backward, "max_over_set")


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    out_data = _checked(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            t.accumulate_owned(g[tuple(sl)])  # disjoint slices of a dead buffer

    return Tensor(out_data, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g, out):
        for i, t in enumerate(tensors):
            t.accumulate_owned(np.take(g, i, axis=axis))

    return Tensor(_checked(out_data, "stack"), tuple(tensors), backward, "stack")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g, out):
        x.accumulate_owned(np.ascontiguousarray(g.transpose(inverse)))

    return Tensor(out_data, (x,), backward, "transpose")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out_data = _checked(np.asarray(x.data.mean()), "mean")

    def backward(g, out):
        x.accumulate_owned(np.full_like(x.data, float(g) / n))

    return Tensor(out_data, (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g, out):
        x.accumulate_owned(g.reshape(x.data.shape))  # view of a dead buffer

    return Tensor(out_data, (x,), backward, "reshape")


def expand_rows(x: Tensor, n: int) -> Tensor:
    """Insert a point axis before the last: (..., d) -> (..., n, d)."""
    out_data = np.broadcast_to(x.data[..., None, :],
                               (*x.data.shape[:-1], n, x.data.shape[-1])).copy()

    def backward(g, out):
        x.accumulate_owned(g.sum(axis=-2))

    return Tensor(out_data, (x,), backward, "expand_rows")


def custom_op(data, parents, backward, name) -> Tensor:
    """Extension point for ops with hand-written gradients (e.g. losses)."""
    return Tensor(_checked(np.asarray(data, dtype=np.float64), name), parents, backward, name)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into .grad fields."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)


class ParamStore:
    """Ordered named parameters with seeded deterministic initialization."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise GraphError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = shape if shape is not None else (fan_in, fan_out)
        return self.register(name, self._rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.register(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._params.items()}


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: ParamStore, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected update, in place; increments the step counter once."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise GraphError(f"adam_step: gradient shape {g.shape} != param {name!r} {t.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        _checked(t.data, "adam_step")
