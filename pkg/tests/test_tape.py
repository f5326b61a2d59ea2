from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridrecon.errors import DomainError, NumericError, TapeUsageError
from hybridrecon.tape import SpatialDual, Tape, detach, dual_affine, record_binary, record_unary

from conftest import central_fd, rel_err


def test_binary_examples():
    t = Tape()
    a, b = t.parameter(2.0, "a"), t.parameter(3.0, "b")
    y = record_binary("add", a, b)
    assert y.value == 5.0
    assert t.gradient(y, [a, b]) == [1.0, 1.0]
    y = record_binary("mul", a, b)
    assert y.value == 6.0
    assert t.gradient(y, [a, b]) == [3.0, 2.0]
    with pytest.raises(DomainError):
        record_binary("div", t.constant(1.0), t.constant(0.0))


@pytest.mark.parametrize("op,x,value,partial", [
    ("exp", 0.0, 1.0, 1.0), ("sigmoid", 0.0, 0.5, 0.25), ("abs", -0.3, 0.3, -1.0),
    ("abs", 0.0, 0.0, 0.0), ("relu", 0.0, 0.0, 0.0), ("neg", 2.0, -2.0, -1.0),
    ("log", 1.0, 0.0, 1.0), ("sqrt", 4.0, 2.0, 0.25), ("sin", 0.0, 0.0, 1.0),
    ("cos", 0.0, 1.0, 0.0), ("tanh", 0.0, 0.0, 1.0), ("softplus", 0.0, math.log(2.0), 0.5),
    ("max0", -1.0, 0.0, 0.0),
])
def test_unary_examples(op, x, value, partial):
    t = Tape()
    a = t.parameter(x, "a")
    y = record_unary(op, a)
    assert y.value == pytest.approx(value, abs=1e-15)
    assert t.gradient(y, [a])[0] == pytest.approx(partial, abs=1e-15)


@pytest.mark.parametrize("op,x", [("log", 0.0), ("log", -1.0), ("sqrt", 0.0), ("sqrt", -2.0)])
def test_unary_domain_errors(op, x):
    t = Tape()
    with pytest.raises(DomainError):
        record_unary(op, t.constant(x))


def test_non_finite_detected():
    t = Tape()
    with pytest.raises(NumericError):
        t.constant(1000.0).exp()
    with pytest.raises(NumericError):
        t.constant(float("nan"))


def test_backward_examples():
    t = Tape()
    w, x, b = t.parameter(2.0, "w"), t.constant(3.0), t.parameter(1.0, "b")
    grads = t.backward(w * x + b)
    assert grads == {w.id: 3.0, b.id: 1.0}
    t = Tape()
    w = t.parameter(0.0, "w")
    assert t.backward(w.exp()) == {w.id: 1.0}


def test_output_adjoint_is_one():
    t = Tape()
    x = t.parameter(0.7)
    y = (x * x).sin()
    assert t.adjoints(y)[y.id] == 1.0


def test_backward_rejects_foreign_output():
    t1, t2 = Tape(), Tape()
    y = t2.parameter(1.0) * 2.0
    with pytest.raises(TapeUsageError):
        t1.backward(y)
    with pytest.raises(TapeUsageError):
        t1.parameter(1.0) + t2.parameter(1.0)


def test_topological_order():
    t = Tape()
    x = t.parameter(1.0)
    y = (x * 2.0 + x.exp()).tanh()
    for node, parents in enumerate(t.parents):
        assert all(p < node for p in parents)
    assert len(t) == y.id + 1


def test_detach_examples():
    t = Tape()
    x = t.parameter(3.0, "x")
    y = detach(x) * x
    assert y.value == 9.0
    assert t.gradient(y, [x]) == [3.0]
    t = Tape()
    x = t.parameter(5.0, "x")
    assert t.gradient(detach(x), [x]) == [0.0]


def test_detach_blend_composite():
    # alpha = exp(-gamma * detach(|f|)) with toy f = w*x + c
    t = Tape()
    w, c, gamma = t.parameter(0.4), t.parameter(-0.1), t.parameter(7.0)
    f = w * 0.5 + c
    alpha = (-(gamma * detach(f.abs()))).exp()
    gw, gc, gg = t.gradient(alpha, [w, c, gamma])
    assert gw == 0.0 and gc == 0.0
    fv = abs(0.4 * 0.5 - 0.1)
    assert gg == pytest.approx(-fv * math.exp(-7.0 * fv), rel=1e-12)
    fd = (math.exp(-(7.0 + 1e-6) * fv) - math.exp(-(7.0 - 1e-6) * fv)) / 2e-6
    assert gg == pytest.approx(fd, rel=1e-6)


def test_detach_only_cuts_its_own_path():
    # y = a*b + detach(a*b) + a : paths through the detached product vanish only
    t = Tape()
    a, b = t.parameter(2.0), t.parameter(5.0)
    p = a * b
    y = p + detach(p) + a
    assert t.gradient(y, [a, b]) == [6.0, 2.0]


_UNARY = ["exp", "sin", "cos", "tanh", "sigmoid", "softplus", "neg"]


def _build(ops, xs):
    """Evaluate a random expression on floats or tape values alike."""
    def apply(op, v):
        if isinstance(v, float):
            return {"exp": math.exp, "sin": math.sin, "cos": math.cos, "tanh": math.tanh,
                    "sigmoid": lambda z: 1 / (1 + math.exp(-z)), "softplus": lambda z: math.log1p(math.exp(z)),
                    "neg": lambda z: -z}[op](v)
        return record_unary(op, v)
    vals = list(xs)
    for kind, i, j, op in ops:
        a, b = vals[i % len(vals)], vals[j % len(vals)]
        if kind == 0:
            vals.append(a + b)
        elif kind == 1:
            vals.append(a * b)
        elif kind == 2:
            vals.append(a - b * 0.5)
        else:
            vals.append(apply(op, a * 0.3))
    return vals[-1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 50), st.integers(0, 50), st.sampled_from(_UNARY)),
                min_size=1, max_size=40),
       st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_gradient_check_property(ops, x0):
    t = Tape()
    params = t.parameters(x0)
    y = _build(ops, params)
    g = t.gradient(y, params)
    fd = central_fd(lambda v: _build(ops, [float(z) for z in v]), np.array(x0))
    err = np.abs(np.array(g) - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    assert np.all((err < 1e-3) | (np.abs(np.array(g) - fd) < 1e-6))


def _dual_fn(xs, ws):
    """f(x) = softplus(w0 x0 + w1 x1) * tanh(x0 / (1 + x1^2)) on duals or floats."""
    if isinstance(xs[0], SpatialDual):
        a = dual_affine(ws, xs, ws[0].tape.constant(0.1)).softplus()
        b = (xs[0] / (xs[1] * xs[1] + 1.0)).tanh()
        return a * b
    a = math.log1p(math.exp(ws[0] * xs[0] + ws[1] * xs[1] + 0.1))
    return a * math.tanh(xs[0] / (xs[1] ** 2 + 1.0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=2),
       st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=2))
def test_spatial_tangent_property(x, w):
    t = Tape()
    ws = t.parameters(w)
    y = _dual_fn(SpatialDual.inputs(t, x), ws)
    fd = central_fd(lambda v: _dual_fn(list(v), w), np.array(x))
    tv = np.array(y.tangent_values())
    assert np.all(np.abs(tv - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-2))


def test_input_tangents_are_basis():
    t = Tape()
    xs = SpatialDual.inputs(t, [0.3, -0.2, 0.9])
    assert [x.tangent_values() for x in xs] == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]


def test_forward_over_reverse_mixed_derivative():
    # g(w) = ||d/dx softplus(w x)||^2 = (w sigmoid(w x))^2 at x = 0.4
    t = Tape()
    w = t.parameter(1.3)
    (x,) = SpatialDual.inputs(t, [0.4])
    f = dual_affine([w], [x], t.constant(0.0)).softplus()
    g = f.tangents[0] * f.tangents[0]
    dg = t.gradient(g, [w])[0]
    ref = lambda wv: (wv / (1 + math.exp(-wv * 0.4))) ** 2
    assert rel_err(dg, (ref(1.3 + 1e-6) - ref(1.3 - 1e-6)) / 2e-6) < 1e-6


def test_determinism():
    def run():
        t = Tape()
        p = t.parameters([0.1, 0.2, 0.3])
        y = _build([(1, 0, 1, "exp"), (3, 3, 0, "tanh"), (0, 4, 2, "sin")], p)
        return t.values, t.gradient(y, p)
    assert run() == run()
