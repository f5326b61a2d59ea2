"""Scalar reverse-mode autodiff with a forward spatial-tangent channel.

A :class:`Tape` records every scalar operation in an append-only list. Calling
:meth:`Tape.backward` sweeps the list once in reverse and returns the adjoint of
every registered parameter.

:class:`SpatialDual` carries a primal value together with its partial
derivatives with respect to the input coordinates. The tangents are themselves
recorded on the tape, so reverse mode over a dual evaluation gives exact mixed
derivatives such as d/dtheta of ||grad_x f||^2 (forward-over-reverse).

Example
-------
>>> tape = Tape()
>>> w = tape.parameter(2.0, "w")
>>> b = tape.parameter(1.0, "b")
>>> y = w * 3.0 + b
>>> grads = tape.backward(y)
>>> grads[w.id], grads[b.id]
(3.0, 1.0)
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

from .errors import DomainError, NumericError, TapeUsageError

Number = Union[int, float]


class TapeValue:
    """Handle to one scalar node of a :class:`Tape`."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> float:
        return self.tape.values[self.id]

    def __repr__(self) -> str:
        return f"TapeValue({self.value!r}, id={self.id})"

    def __float__(self) -> float:
        return self.value

    def _lift(self, other) -> "TapeValue":
        if isinstance(other, TapeValue):
            if other.tape is not self.tape:
                raise TapeUsageError("operands live on different tapes")
            return other
        return self.tape.constant(float(other))

    def __add__(self, other):
        return record_binary("add", self, self._lift(other))

    def __radd__(self, other):
        return record_binary("add", self._lift(other), self)

    def __sub__(self, other):
        return record_binary("sub", self, self._lift(other))

    def __rsub__(self, other):
        return record_binary("sub", self._lift(other), self)

    def __mul__(self, other):
        return record_binary("mul", self, self._lift(other))

    def __rmul__(self, other):
        return record_binary("mul", self._lift(other), self)

    def __truediv__(self, other):
        return record_binary("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return record_binary("div", self._lift(other), self)

    def __neg__(self):
        return record_unary("neg", self)

    def exp(self):
        return record_unary("exp", self)

    def log(self):
        return record_unary("log", self)

    def sqrt(self):
        return record_unary("sqrt", self)

    def sin(self):
        return record_unary("sin", self)

    def cos(self):
        return record_unary("cos", self)

    def tanh(self):
        return record_unary("tanh", self)

    def sigmoid(self):
        return record_unary("sigmoid", self)

    def softplus(self):
        return record_unary("softplus", self)

    def abs(self):
        return record_unary("abs", self)

    def relu(self):
        return record_unary("relu", self)


class Tape:
    """Append-only record of scalar operations.

    Nodes are stored column-wise (kinds, values, parent ids, local partials).
    Parents always precede their children, so a single reverse sweep visits
    the graph in a valid order.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.values: list[float] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.params: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind: str, value: float, parents: tuple[int, ...],
              partials: tuple[float, ...]) -> TapeValue:
        if not math.isfinite(value):
            raise NumericError(f"non-finite value {value!r} produced by '{kind}'")
        self.kinds.append(kind)
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        return TapeValue(self, len(self.values) - 1)

    def constant(self, value: Number) -> TapeValue:
        return self._push("const", float(value), (), ())

    def parameter(self, value: Number, name: str | None = None) -> TapeValue:
        """Create a trainable leaf; its gradient is reported by :meth:`backward`."""
        v = self._push("param", float(value), (), ())
        self.params[v.id] = name if name is not None else f"p{v.id}"
        return v

    def parameters(self, values: Iterable[Number], prefix: str = "p") -> list[TapeValue]:
        return [self.parameter(v, f"{prefix}{i}") for i, v in enumerate(values)]

    def _check(self, v: TapeValue) -> None:
        if not isinstance(v, TapeValue) or v.tape is not self or not 0 <= v.id < len(self.values):
            raise TapeUsageError("value is not on this tape")

    def adjoints(self, output: TapeValue) -> list[float]:
        """Adjoint of ``output`` with respect to every node (reverse sweep)."""
        self._check(output)
        adj = [0.0] * (output.id + 1)
        adj[output.id] = 1.0
        parents, partials = self.parents, self.partials
        for i in range(output.id, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            for p, d in zip(parents[i], partials[i]):
                adj[p] += g * d
        return adj

    def backward(self, output: TapeValue) -> dict[int, float]:
        """Gradient of ``output`` for every registered parameter, keyed by node id."""
        adj = self.adjoints(output)
        n = len(adj)
        return {pid: (adj[pid] if pid < n else 0.0) for pid in self.params}

    def gradient(self, output: TapeValue, wrt: Sequence[TapeValue]) -> list[float]:
        adj = self.adjoints(output)
        out = []
        for v in wrt:
            self._check(v)
            out.append(adj[v.id] if v.id < len(adj) else 0.0)
        return out


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def record_binary(op: str, a: TapeValue, b: TapeValue) -> TapeValue:
    tape = a.tape
    if b.tape is not tape:
        raise TapeUsageError("operands live on different tapes")
    x, y = a.value, b.value
    if op == "add":
        return tape._push(op, x + y, (a.id, b.id), (1.0, 1.0))
    if op == "sub":
        return tape._push(op, x - y, (a.id, b.id), (1.0, -1.0))
    if op == "mul":
        return tape._push(op, x * y, (a.id, b.id), (y, x))
    if op == "div":
        if y == 0.0:
            raise DomainError("division by zero")
        return tape._push(op, x / y, (a.id, b.id), (1.0 / y, -x / (y * y)))
    raise ValueError(f"unknown binary op {op!r}")


def record_unary(op: str, a: TapeValue) -> TapeValue:
    tape, x = a.tape, a.value
    if op == "neg":
        v, d = -x, -1.0
    elif op == "exp":
        if x > 709.0:
            raise NumericError(f"exp overflow at {x!r}")
        v = math.exp(x)
        d = v
    elif op == "log":
        if x <= 0.0:
            raise DomainError(f"log of non-positive value {x!r}")
        v, d = math.log(x), 1.0 / x
    elif op == "sqrt":
        if x <= 0.0:
            raise DomainError(f"sqrt of non-positive value {x!r}")
        v = math.sqrt(x)
        d = 0.5 / v
    elif op == "sin":
        v, d = math.sin(x), math.cos(x)
    elif op == "cos":
        v, d = math.cos(x), -math.sin(x)
    elif op == "tanh":
        v = math.tanh(x)
        d = 1.0 - v * v
    elif op == "sigmoid":
        v = _sigmoid(x)
        d = v * (1.0 - v)
    elif op == "softplus":
        v, d = _softplus(x), _sigmoid(x)
    elif op == "abs":
        v = abs(x)
        d = 1.0 if x > 0 else (-1.0 if x < 0 else 0.0)
    elif op in ("relu", "max0"):
        v = x if x > 0 else 0.0
        d = 1.0 if x > 0 else 0.0
    else:
        raise ValueError(f"unknown unary op {op!r}")
    return tape._push(op, v, (a.id,), (d,))


def dot(ws: Sequence[TapeValue], xs: Sequence[TapeValue]) -> TapeValue:
    """Fused sum_i ws[i] * xs[i] recorded as a single node."""
    if len(ws) != len(xs) or not ws:
        raise ValueError("dot needs two non-empty sequences of equal length")
    tape = ws[0].tape
    for v in (*ws, *xs):
        if v.tape is not tape:
            raise TapeUsageError("operands live on different tapes")
    wv = [w.value for w in ws]
    xv = [x.value for x in xs]
    value = math.fsum(w * x for w, x in zip(wv, xv))
    return tape._push("dot", value, tuple(w.id for w in ws) + tuple(x.id for x in xs),
                      tuple(xv) + tuple(wv))


def detach(a: TapeValue) -> TapeValue:
    """Same value, no gradient path back to ``a``."""
    return a.tape._push("detach", a.value, (), ())


# --- forward spatial tangents ------------------------------------------------

Scalar = Union[TapeValue, float]


def _add(a: Scalar, b: Scalar) -> Scalar:
    if isinstance(a, float) and a == 0.0:
        return b
    if isinstance(b, float) and b == 0.0:
        return a
    if isinstance(a, float) and isinstance(b, float):
        return a + b
    return a + b if isinstance(a, TapeValue) else b + a


def _mul(a: Scalar, b: Scalar) -> Scalar:
    if (isinstance(a, float) and a == 0.0) or (isinstance(b, float) and b == 0.0):
        return 0.0
    if isinstance(a, float) and a == 1.0:
        return b
    if isinstance(b, float) and b == 1.0:
        return a
    if isinstance(a, float) and isinstance(b, float):
        return a * b
    return a * b if isinstance(a, TapeValue) else b * a


def _neg(a: Scalar) -> Scalar:
    return -a


class SpatialDual:
    """A primal tape value and its partials with respect to D input coordinates.

    Tangent entries may be plain floats (structural zeros and ones) or tape
    values; both propagate by the exact chain rule.
    """

    __slots__ = ("primal", "tangents")

    def __init__(self, primal: TapeValue, tangents: Sequence[Scalar]):
        self.primal = primal
        self.tangents = tuple(tangents)

    @classmethod
    def inputs(cls, tape: Tape, point: Sequence[float]) -> list["SpatialDual"]:
        """Seed coordinate x_i with the i-th standard basis tangent."""
        dim = len(point)
        return [cls(tape.constant(float(v)), [1.0 if j == i else 0.0 for j in range(dim)])
                for i, v in enumerate(point)]

    @classmethod
    def lift(cls, value: TapeValue | float, dim: int, tape: Tape) -> "SpatialDual":
        if not isinstance(value, TapeValue):
            value = tape.constant(float(value))
        return cls(value, [0.0] * dim)

    @property
    def value(self) -> float:
        return self.primal.value

    @property
    def dim(self) -> int:
        return len(self.tangents)

    def tangent_values(self) -> list[float]:
        return [t.value if isinstance(t, TapeValue) else t for t in self.tangents]

    def _other(self, other) -> "SpatialDual":
        if isinstance(other, SpatialDual):
            return other
        return SpatialDual.lift(other, self.dim, self.primal.tape)

    def __add__(self, other):
        o = self._other(other)
        return SpatialDual(self.primal + o.primal,
                           [_add(a, b) for a, b in zip(self.tangents, o.tangents)])

    __radd__ = __add__

    def __sub__(self, other):
        o = self._other(other)
        return SpatialDual(self.primal - o.primal,
                           [_add(a, _neg(b)) for a, b in zip(self.tangents, o.tangents)])

    def __rsub__(self, other):
        return self._other(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = float(other)
            return SpatialDual(self.primal * c, [_mul(t, c) for t in self.tangents])
        o = self._other(other)
        return SpatialDual(self.primal * o.primal,
                           [_add(_mul(ta, o.primal), _mul(self.primal, tb))
                            for ta, tb in zip(self.tangents, o.tangents)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._other(other)
        q = self.primal / o.primal
        inv = 1.0 / o.primal
        # (a/b)' = (a' - q b') / b
        return SpatialDual(q, [_mul(_add(ta, _neg(_mul(q, tb))), inv)
                               for ta, tb in zip(self.tangents, o.tangents)])

    def __neg__(self):
        return SpatialDual(-self.primal, [_neg(t) for t in self.tangents])

    def _chain(self, value: TapeValue, deriv: Scalar) -> "SpatialDual":
        return SpatialDual(value, [_mul(deriv, t) for t in self.tangents])

    def exp(self):
        v = self.primal.exp()
        return self._chain(v, v)

    def log(self):
        return self._chain(self.primal.log(), 1.0 / self.primal)

    def sqrt(self):
        v = self.primal.sqrt()
        return self._chain(v, 0.5 / v)

    def sin(self):
        return self._chain(self.primal.sin(), self.primal.cos())

    def cos(self):
        return self._chain(self.primal.cos(), -self.primal.sin())

    def tanh(self):
        v = self.primal.tanh()
        return self._chain(v, 1.0 - v * v)

    def sigmoid(self):
        v = self.primal.sigmoid()
        return self._chain(v, v * (1.0 - v))

    def softplus(self):
        return self._chain(self.primal.softplus(), self.primal.sigmoid())

    def abs(self):
        x = self.primal.value
        return self._chain(self.primal.abs(), 1.0 if x > 0 else (-1.0 if x < 0 else 0.0))

    def relu(self):
        x = self.primal.value
        return self._chain(self.primal.relu(), 1.0 if x > 0 else 0.0)

    def detach(self):
        """Detach primal and tangents alike."""
        return SpatialDual(detach(self.primal),
                           [detach(t) if isinstance(t, TapeValue) else t for t in self.tangents])


def dual_affine(weights: Sequence[TapeValue], inputs: Sequence[SpatialDual],
                bias: TapeValue) -> SpatialDual:
    """bias + sum_i weights[i] * inputs[i] using fused dot nodes."""
    primal = dot(weights, [x.primal for x in inputs]) + bias
    tangents: list[Scalar] = []
    for k in range(inputs[0].dim):
        pw, pt = [], []
        acc: Scalar = 0.0
        for w, x in zip(weights, inputs):
            t = x.tangents[k]
            if isinstance(t, TapeValue):
                pw.append(w)
                pt.append(t)
            elif t != 0.0:
                acc = _add(acc, _mul(w, t))
        if pw:
            acc = _add(dot(pw, pt), acc)
        tangents.append(acc)
    return SpatialDual(primal, tangents)


def finite(values: Iterable[float]) -> bool:
    return all(math.isfinite(v) for v in values)
