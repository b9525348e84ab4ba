"""Tensor-level reverse-mode differentiation and the Adam optimizer.

A ``Tape`` records every operation as a node holding its value and a
vector-Jacobian product closure.  Nodes are appended in evaluation order, so
the node list is already a topological order and ``backward`` simply walks it
in reverse.  The tape is rebuilt for every forward pass (define-by-run).

Trainable state lives in ``Param`` objects outside any tape; ``Tape.watch``
brings a param onto a tape as a leaf and ``Tape.backward`` accumulates into
``Param.grad``.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Param", "Var", "Tape", "Adam", "ShapeError",
    "add", "sub", "mul", "div", "neg", "matmul", "einsum", "sum", "mean",
    "relu", "tanh", "abs", "sqrt", "sin", "cos", "square", "maximum",
    "gather", "scatter_add", "stop_gradient", "reshape", "transpose",
    "stack", "concat", "index", "norm", "smooth_l1", "sparse_matmul",
]


class ShapeError(ValueError):
    pass


class Param:
    """A trainable tensor with an accumulated gradient."""

    def __init__(self, value, name: str = "", requires_grad: bool = True):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Var:
    """A node on a tape."""

    __slots__ = ("tape", "id", "value", "op", "inputs", "vjp", "param")
    __array_priority__ = 100.0

    def __init__(self, tape, id_, value, op, inputs, vjp, param=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.id} {self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._watched: dict[int, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs, value, vjp) -> Var:
        """Append a node.  ``vjp(g)`` maps the output cotangent to one
        cotangent (or None) per input."""
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input #{x.id} belongs to another tape")
        node = Var(self, len(self.nodes), np.asarray(value, dtype=np.float64),
                   op, tuple(inputs), vjp)
        self.nodes.append(node)
        return node

    def const(self, value) -> Var:
        return self.record("const", (), np.array(value, dtype=np.float64), None)

    def watch(self, param: Param) -> Var:
        """Leaf node backed by ``param``; repeated calls return the same node."""
        node = self._watched.get(id(param))
        if node is None:
            node = self.record("param", (), param.value, None)
            node.param = param
            self._watched[id(param)] = node
        return node

    def backward(self, root: Var, seed=1.0) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(param) into every watched param's ``grad``.

        Returns the cotangents of the leaf nodes (params and constants) by id;
        interior cotangents are dropped as soon as they have been propagated.
        """
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {root.id: np.full(root.value.shape, seed, dtype=np.float64)}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.param is not None:
                if node.param.requires_grad:
                    node.param.grad = node.param.grad + g
                grads[node.id] = g
                continue
            if node.vjp is None:
                grads[node.id] = g
                continue
            for x, gx in zip(node.inputs, node.vjp(g)):
                if gx is None:
                    continue
                prev = grads.get(x.id)
                grads[x.id] = gx if prev is None else prev + gx
        return grads


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one argument must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, Param):
        return tape.watch(x)
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return t.record("add", (a, b), a.value + b.value,
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return t.record("sub", (a, b), a.value - b.value,
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return t.record("mul", (a, b), av * bv,
                    lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_check("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return t.record("div", (a, b), out,
                    lambda g: (_unbroadcast(g / bv, av.shape),
                               _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Var) -> Var:
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def maximum(a: Var, c: float) -> Var:
    """max(a, c) against a constant; the gradient at a tie goes to zero."""
    mask = a.value > c
    return a.tape.record("max_const", (a,), np.where(mask, a.value, c),
                         lambda g: (g * mask,))


# --- elementwise unary ------------------------------------------------------

def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record("relu", (a,), a.value * mask, lambda g: (g * mask,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def abs(a: Var) -> Var:  # noqa: A001
    s = np.sign(a.value)
    return a.tape.record("abs", (a,), np.abs(a.value), lambda g: (g * s,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sin(a: Var) -> Var:
    c = np.cos(a.value)
    return a.tape.record("sin", (a,), np.sin(a.value), lambda g: (g * c,))


def cos(a: Var) -> Var:
    s = np.sin(a.value)
    return a.tape.record("cos", (a,), np.cos(a.value), lambda g: (-g * s,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record("square", (a,), av * av, lambda g: (2.0 * g * av,))


def smooth_l1(a: Var, beta: float = 1.0) -> Var:
    """0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    x = a.value
    ax = np.abs(x)
    inside = ax < beta
    out = np.where(inside, 0.5 * x * x / beta, ax - 0.5 * beta)
    slope = np.where(inside, x / beta, np.sign(x))
    return a.tape.record("smooth_l1", (a,), out, lambda g: (g * slope,))


def stop_gradient(a: Var) -> Var:
    return a.tape.record("stop_gradient", (a,), a.value, lambda g: (None,))


# --- reductions and linear algebra -----------------------------------------

def sum(a: Var, axis=None) -> Var:  # noqa: A001
    shape = a.shape
    out = np.sum(a.value, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return a.tape.record("sum", (a,), out, vjp)


def mean(a: Var, axis=None) -> Var:
    shape = a.shape
    n = a.value.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.value, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)
    return a.tape.record("mean", (a,), out, vjp)


def norm(a: Var, axis=-1) -> Var:
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis))
    safe = np.where(out > 0, out, 1.0)

    def vjp(g):
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * av,)
    return a.tape.record("norm", (a,), out, vjp)


def matmul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 1 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: expects 2-D @ 1-D/2-D, got {av.shape} and {bv.shape}")

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g
    return t.record("matmul", (a, b), av @ bv, vjp)


def einsum(spec: str, *operands) -> Var:
    """Einstein summation without repeated indices inside one operand."""
    t = _tape_of(*operands)
    xs = [_lift(t, x) for x in operands]
    ins, out = spec.replace(" ", "").split("->")
    ins = ins.split(",")
    vals = [x.value for x in xs]
    try:
        value = np.einsum(spec, *vals, optimize=len(vals) > 2)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: {[v.shape for v in vals]}: {exc}") from None

    def vjp(g):
        res = []
        for i, sub_i in enumerate(ins):
            others = [vals[k] for k in range(len(vals)) if k != i]
            other_subs = [ins[k] for k in range(len(vals)) if k != i]
            gi = np.einsum(",".join([out] + other_subs) + "->" + sub_i, g, *others,
                           optimize=len(others) > 1)
            res.append(gi)
        return res
    return t.record("einsum", xs, value, vjp)


def sparse_matmul(m, a: Var) -> Var:
    """Constant (scipy sparse or dense) matrix times a tape value."""
    mt = m.T
    return a.tape.record("sparse_matmul", (a,), np.asarray(m @ a.value), lambda g: (np.asarray(mt @ g),))


# --- indexing and shape -----------------------------------------------------

def gather(a: Var, idx) -> Var:
    """Rows ``a[idx]`` along axis 0."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return a.tape.record("gather", (a,), a.value[idx], vjp)


def scatter_add(a: Var, idx, n: int) -> Var:
    """Zeros of length ``n`` along axis 0 with rows of ``a`` added at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.shape[: idx.ndim]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} vs values {a.shape}")
    out = np.zeros((n,) + a.shape[idx.ndim:])
    np.add.at(out, idx, a.value)
    return a.tape.record("scatter_add", (a,), out, lambda g: (g[idx],))


def index(a: Var, key) -> Var:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return a.tape.record("index", (a,), a.value[key], vjp)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Var, axes=None) -> Var:
    inv = None if axes is None else np.argsort(axes)
    return a.tape.record("transpose", (a,), np.transpose(a.value, axes),
                         lambda g: (np.transpose(g, inv),))


def stack(xs, axis=0) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    n = len(xs)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(n)]
    return t.record("stack", xs, np.stack([x.value for x in xs], axis=axis), vjp)


def concat(xs, axis=0) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return t.record("concat", xs, np.concatenate([x.value for x in xs], axis=axis),
                    lambda g: np.split(g, splits, axis=axis))


class Adam:
    """Adam with bias correction.

    ``step`` can be restricted to a subset of params; the others keep their
    moments and step counts, which is how per-frame pose variables outside
    the current batch are left alone.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {id(p): np.zeros_like(p.value) for p in self.params}
        self.v = {id(p): np.zeros_like(p.value) for p in self.params}
        self.t = {id(p): 0 for p in self.params}

    @property
    def step_count(self) -> int:
        return max(self.t.values(), default=0)

    def step(self, params=None, lr_scale: float = 1.0):
        """Update ``params`` (default: all registered) from their grads."""
        for p in (self.params if params is None else params):
            if not p.requires_grad:
                continue
            k = id(p)
            g = p.grad
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** t)
            vhat = self.v[k] / (1 - self.beta2 ** t)
            p.value = p.value - self.lr * lr_scale * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self, names) -> dict[str, np.ndarray]:
        out = {}
        for p, name in zip(self.params, names):
            out[f"adam.m.{name}"] = self.m[id(p)]
            out[f"adam.v.{name}"] = self.v[id(p)]
            out[f"adam.t.{name}"] = np.array([self.t[id(p)]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays, names):
        for p, name in zip(self.params, names):
            self.m[id(p)] = np.array(arrays[f"adam.m.{name}"])
            self.v[id(p)] = np.array(arrays[f"adam.v.{name}"])
            self.t[id(p)] = int(arrays[f"adam.t.{name}"][0])
