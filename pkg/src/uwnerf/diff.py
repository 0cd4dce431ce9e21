"""A minimal reverse-mode differentiation engine over numpy arrays.

Values are whole arrays, so a single tape node covers an entire batch of rays
or samples.  The op set is limited to what the field, the compositor and the
trilinear perturbation need.  There is no control-flow capture and no
higher-order differentiation.

Typical use::

    tape = Tape(np.float64)
    x = tape.leaf(np.array([3.0]))
    y = (x * x).sum()
    (gx,) = tape.backward(y, 1.0, [x])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool


@dataclass(frozen=True)
class _Op:
    forward: Callable
    vjp: Callable


_OPS: dict[str, _Op] = {}


def _register(name):
    def deco(cls):
        _OPS[name] = _Op(cls.forward, cls.vjp)
        return cls

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


# --------------------------------------------------------------------------
# primitive ops; vjp(g, out, ins, attrs, needs) -> per-input grads (or None)
# --------------------------------------------------------------------------


@_register("add")
class _Add:
    forward = staticmethod(lambda a, b: a + b)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        a, b = ins
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )


@_register("sub")
class _Sub:
    forward = staticmethod(lambda a, b: a - b)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        a, b = ins
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )


@_register("mul")
class _Mul:
    forward = staticmethod(lambda a, b: a * b)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        a, b = ins
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@_register("div")
class _Div:
    forward = staticmethod(lambda a, b: a / b)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        a, b = ins
        return (
            _unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b, b.shape) if needs[1] else None,
        )


@_register("neg")
class _Neg:
    forward = staticmethod(lambda a: -a)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (-g,)


@_register("exp")
class _Exp:
    forward = staticmethod(np.exp)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g * out,)


@_register("one_minus_exp_neg")
class _OneMinusExpNeg:
    # 1 - exp(-x), accurate for small x
    forward = staticmethod(lambda a: -np.expm1(-a))

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g * np.exp(-ins[0]),)


@_register("softplus")
class _Softplus:
    forward = staticmethod(_softplus)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g * expit(ins[0]),)


@_register("sigmoid")
class _Sigmoid:
    forward = staticmethod(expit)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g * out * (1 - out),)


@_register("relu")
class _Relu:
    forward = staticmethod(lambda a: np.maximum(a, 0))

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g * (ins[0] > 0),)


@_register("sin")
class _Sin:
    forward = staticmethod(np.sin)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g * np.cos(ins[0]),)


@_register("cos")
class _Cos:
    forward = staticmethod(np.cos)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (-g * np.sin(ins[0]),)


@_register("affine")
class _Affine:
    forward = staticmethod(lambda x, w, b: x @ w + b)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        x, w, b = ins
        return (
            g @ w.T if needs[0] else None,
            x.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )


@_register("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        (a,) = ins
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@_register("cumsum_exclusive")
class _CumsumExclusive:
    @staticmethod
    def forward(a, axis=-1):
        out = np.zeros_like(a)
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        src[axis] = slice(0, -1)
        dst[axis] = slice(1, None)
        out[tuple(dst)] = np.cumsum(a[tuple(src)], axis=axis)
        return out

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        axis = attrs.get("axis", -1)
        # d/da_j sum_i g_i sum_{k<i} a_k = sum_{i>j} g_i
        rev = np.flip(g, axis=axis)
        return (np.flip(_CumsumExclusive.forward(rev, axis=axis), axis=axis),)


@_register("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=-1):
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        axis = attrs.get("axis", -1)
        splits = np.cumsum([a.shape[axis] for a in ins])[:-1]
        parts = np.split(g, splits, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (np.reshape(g, ins[0].shape),)


@_register("index")
class _Index:
    # basic (slice/int/None/Ellipsis) indexing only
    @staticmethod
    def forward(a, key):
        return a[key]

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        z = np.zeros_like(ins[0])
        z[attrs["key"]] = g
        return (z,)


@_register("gather_rows")
class _GatherRows:
    @staticmethod
    def forward(a, idx, unique=False):
        return a[idx]

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        z = np.zeros_like(ins[0])
        if attrs.get("unique", False):
            z[attrs["idx"]] = g
        else:
            np.add.at(z, attrs["idx"], g)
        return (z,)


@_register("scatter_rows")
class _ScatterRows:
    # rows placed into a zero array of n rows; idx must be unique
    @staticmethod
    def forward(a, idx, n):
        out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
        out[idx] = a
        return out

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        return (g[attrs["idx"]],)


@_register("trilinear")
class _Trilinear:
    """out[p] = sum_k weights[p, k] * table[index[p, k]]."""

    @staticmethod
    def forward(table, index, weights):
        return np.einsum("pk,pkc->pc", weights, table[index])

    @staticmethod
    def vjp(g, out, ins, attrs, needs):
        table = ins[0]
        index, weights = attrs["index"], attrs["weights"]
        z = np.zeros_like(table)
        contrib = weights[..., None] * g[:, None, :]
        np.add.at(z, index.reshape(-1), contrib.reshape(-1, table.shape[1]))
        return (z,)


# --------------------------------------------------------------------------
# tape and variables
# --------------------------------------------------------------------------


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.shape})"

    def _wrap(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._wrap(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._wrap(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._wrap(other), self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self._wrap(other))

    def __rmul__(self, other):
        return self.tape.apply("mul", self._wrap(other), self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, self._wrap(other))

    def __rtruediv__(self, other):
        return self.tape.apply("div", self._wrap(other), self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __getitem__(self, key):
        return self.tape.apply("index", self, key=key)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply("reshape", self, shape=tuple(shape))


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive ops.

    With ``record=False`` ops are evaluated eagerly and nothing is kept, which
    is how inference passes run; values are bit-identical to a recorded pass
    because both share the same forward functions.
    """

    dtype: type = np.float32
    record: bool = True
    nodes: list[_Node] = field(default_factory=list)

    def _cast(self, value):
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        return value

    def leaf(self, value, requires_grad: bool = True) -> Var:
        value = self._cast(value)
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(_Node("leaf", (), {}, value, requires_grad))
        return Var(self, len(self.nodes) - 1, value)

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ContractError("operands belong to different tapes")
        value = _OPS[op].forward(*(v.value for v in inputs), **attrs)
        if not self.record:
            return Var(self, -1, value)
        requires = any(self.nodes[v.index].requires_grad for v in inputs)
        self.nodes.append(_Node(op, tuple(v.index for v in inputs), attrs, value, requires))
        return Var(self, len(self.nodes) - 1, value)

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every recorded node forward; leaf values may be overridden."""
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                values.append(self._cast(overrides[i]) if i in overrides else node.value)
            else:
                args = (values[j] for j in node.inputs)
                values.append(_OPS[node.op].forward(*args, **node.attrs))
        return values

    def backward(self, output: Var, seed, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Vector-Jacobian product of ``output`` with ``seed`` for each leaf in ``wrt``.

        Leaves that do not reach the output get exact zeros.  Adjoint buffers
        are local to the call, so concurrent calls on one tape are safe.
        """
        if not self.record or output.index < 0:
            raise ContractError("backward requires a recording tape")
        seed = np.asarray(seed, dtype=self.dtype)
        if seed.shape != output.shape:
            if seed.ndim == 0:
                seed = np.broadcast_to(seed, output.shape)
            else:
                raise ContractError(
                    f"seed shape {seed.shape} does not match output shape {output.shape}"
                )
        wanted = {v.index for v in wrt}
        for v in wrt:
            if self.nodes[v.index].op != "leaf":
                raise ContractError("gradients are only available for leaves")
        grads: dict[int, np.ndarray] = {}
        adj: dict[int, np.ndarray] = {output.index: seed}
        for idx in range(output.index, -1, -1):
            g = adj.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.op == "leaf":
                if idx in wanted:
                    grads[idx] = g
                continue
            needs = tuple(self.nodes[j].requires_grad for j in node.inputs)
            if not any(needs):
                continue
            ins = [self.nodes[j].value for j in node.inputs]
            for j, gj, need in zip(
                node.inputs, _OPS[node.op].vjp(g, node.value, ins, node.attrs, needs), needs
            ):
                if not need or gj is None:
                    continue
                adj[j] = adj[j] + gj if j in adj else gj
        return [
            np.array(grads[v.index], dtype=self.dtype) if v.index in grads else np.zeros_like(v.value)
            for v in wrt
        ]


def backward(tape: Tape, output: Var, seed, wrt: Sequence[Var]) -> list[np.ndarray]:
    return tape.backward(output, seed, wrt)


# --------------------------------------------------------------------------
# functional wrappers
# --------------------------------------------------------------------------


def exp(v: Var) -> Var:
    return v.tape.apply("exp", v)


def one_minus_exp_neg(v: Var) -> Var:
    return v.tape.apply("one_minus_exp_neg", v)


def softplus(v: Var) -> Var:
    return v.tape.apply("softplus", v)


def sigmoid(v: Var) -> Var:
    return v.tape.apply("sigmoid", v)


def relu(v: Var) -> Var:
    return v.tape.apply("relu", v)


def sin(v: Var) -> Var:
    return v.tape.apply("sin", v)


def cos(v: Var) -> Var:
    return v.tape.apply("cos", v)


def affine(x: Var, w: Var, b: Var) -> Var:
    return x.tape.apply("affine", x, w, b)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    return parts[0].tape.apply("concat", *parts, axis=axis)


def cumsum_exclusive(v: Var, axis: int = -1) -> Var:
    return v.tape.apply("cumsum_exclusive", v, axis=axis)


def gather_rows(v: Var, idx: np.ndarray, unique: bool = False) -> Var:
    return v.tape.apply("gather_rows", v, idx=idx, unique=unique)


def scatter_rows(v: Var, idx: np.ndarray, n: int) -> Var:
    return v.tape.apply("scatter_rows", v, idx=idx, n=n)


def trilinear(table: Var, index: np.ndarray, weights: np.ndarray) -> Var:
    weights = np.asarray(weights, dtype=table.value.dtype)
    return table.tape.apply("trilinear", table, index=index, weights=weights)


ACTIVATIONS = {"relu": relu, "softplus": softplus, "sigmoid": sigmoid}


def fd_check(f: Callable[[Tape, Var], Var], x, h: float = 1e-4, dtype=np.float64) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    ``f`` builds a scalar from a leaf on the given tape.  The gap for
    coordinate k is ``|analytic_k - fd_k| / max(1, |fd_k|)``.  Near activation
    kinks the gap can legitimately be O(1).
    """
    if h <= 0:
        raise ContractError("step must be positive")
    x = np.asarray(x, dtype=dtype)
    tape = Tape(dtype)
    xv = tape.leaf(x)
    out = f(tape, xv)
    if out.value.size != 1:
        raise ContractError("fd_check needs a scalar function")
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function value is not finite")
    (analytic,) = tape.backward(out, np.ones_like(out.value), [xv])

    def evaluate(point):
        t = Tape(dtype, record=False)
        val = f(t, t.leaf(point)).value
        if not np.all(np.isfinite(val)):
            raise NumericError("function value is not finite")
        return float(np.sum(val))

    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[k] += h
        minus[k] -= h
        fd = (evaluate(plus.reshape(x.shape)) - evaluate(minus.reshape(x.shape))) / (2 * h)
        worst = max(worst, abs(analytic.reshape(-1)[k] - fd) / max(1.0, abs(fd)))
    return worst
