from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridrecon.dirparam import (DirectionalConfig, FusionOrder, Mode, blend_weight, circular_spread,
                                  direction_features, gamma_from_b, hybrid_direction, reflect_direction)
from hybridrecon.errors import DegenerateNormalError
from hybridrecon.nets import PEConfig, pe_encode
from hybridrecon.tape import Tape


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.mark.parametrize("d,n,expected", [
    ((0, 0, 1), (0, 0, 1), (0, 0, 1)),
    ((1, 0, 0), (0, 0, 1), (-1, 0, 0)),
    ((1 / math.sqrt(2), 0, 1 / math.sqrt(2)), (0, 0, 1), (-1 / math.sqrt(2), 0, 1 / math.sqrt(2))),
])
def test_reflect_examples(d, n, expected):
    assert np.allclose(reflect_direction(np.array(d), np.array(n)), expected, atol=1e-15)


def test_reflect_degenerate_normal():
    with pytest.raises(DegenerateNormalError):
        reflect_direction(np.array([1.0, 0.0]), np.zeros(2))


def test_reflect_differentiable_in_normal():
    n = torch.tensor([0.3, 0.9], dtype=torch.float64, requires_grad=True)
    r = reflect_direction(torch.tensor([1.0, 0.0], dtype=torch.float64), n)
    (g,) = torch.autograd.grad(r.sum(), n)
    assert torch.isfinite(g).all() and g.abs().sum() > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 3), st.integers(0, 10_000))
def test_reflection_identities(dim, seed):
    rng = np.random.default_rng(seed)
    d, n = unit(rng.normal(size=(20, dim))), unit(rng.normal(size=(20, dim)))
    r = reflect_direction(d, n)
    assert np.allclose(np.linalg.norm(r, axis=1), 1.0, atol=1e-9)
    assert np.allclose((r * n).sum(1), (d * n).sum(1), atol=1e-9)
    assert np.allclose(reflect_direction(r, n), d, atol=1e-9)


def test_blend_examples():
    assert blend_weight(np.array(0.0), 0.3) == 1.0
    # independent evaluation: gamma = e^3, alpha = exp(-e^3 * 0.05)
    gamma = math.e ** 3
    assert gamma == pytest.approx(20.0855, abs=1e-4)
    expected = math.exp(-gamma * 0.05)
    assert expected == pytest.approx(0.36630, abs=1e-5)
    assert blend_weight(np.array(0.05), 0.3) == pytest.approx(expected, rel=1e-14)
    assert blend_weight(np.array(-0.05), 0.3) == pytest.approx(expected, rel=1e-14)


def test_blend_gradient_wrt_gamma_b():
    gb = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    (g0,) = torch.autograd.grad(blend_weight(torch.tensor(0.0, dtype=torch.float64), gb), gb)
    assert g0.item() == 0.0
    f = torch.tensor(0.05, dtype=torch.float64)
    (g,) = torch.autograd.grad(blend_weight(f, gb), gb)
    fd = (blend_weight(np.array(0.05), 0.3 + 1e-6) - blend_weight(np.array(0.05), 0.3 - 1e-6)) / 2e-6
    assert abs(g.item() - fd) < 1e-3 * abs(fd)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_blend_monotone(f1, f2, g1, g2):
    a1 = blend_weight(np.array(f1), 0.1)
    a2 = blend_weight(np.array(f2), 0.1)
    assert 0 < a1 <= 1 and 0 < a2 <= 1
    if f2 - f1 > 1e-9:
        assert a1 > a2
    if g2 - g1 > 1e-9:
        assert blend_weight(np.array(0.2), g1) > blend_weight(np.array(0.2), g2)


def test_detach_path_zero_and_nonzero():
    w = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
    gb = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
    f = w * 0.2 - 0.05
    (g_det,) = torch.autograd.grad(blend_weight(f, gb, detach=True), w, allow_unused=True)
    assert g_det is None or g_det.item() == 0.0
    (g_live,) = torch.autograd.grad(blend_weight(w * 0.2 - 0.05, gb, detach=False), w)
    assert g_live.item() != 0.0
    # tape engine: same statement
    t = Tape()
    wt, gbt = t.parameter(0.7), t.parameter(0.1)
    a = blend_weight(wt * 0.2 - 0.05, gbt, detach=True)
    gw, gg = t.gradient(a, [wt, gbt])
    assert gw == 0.0 and gg != 0.0


@pytest.mark.parametrize("alpha,expected", [(1.0, "ref"), (0.0, "view")])
def test_hybrid_limits(alpha, expected):
    d_view, d_ref = unit([1.0, 0.2, 0.0]), unit([0.0, 0.3, 1.0])
    out = hybrid_direction(d_view[None], d_ref[None], np.array([alpha]))[0]
    assert np.array_equal(out, d_ref if expected == "ref" else d_view)


def test_hybrid_midpoint_and_fallback():
    out = hybrid_direction(np.array([[1.0, 0, 0]]), np.array([[0, 0, 1.0]]), np.array([0.5]))
    assert np.allclose(out, [[1 / math.sqrt(2), 0, 1 / math.sqrt(2)]], atol=1e-15)
    d = np.array([[1.0, 0.0]])
    out = hybrid_direction(d, -d, np.array([0.5]))
    assert np.array_equal(out, d)
    out = hybrid_direction(torch.as_tensor(d), torch.as_tensor(-d), torch.tensor([0.5], dtype=torch.float64))
    assert torch.equal(out, torch.as_tensor(d))


def _inputs(rng, k=8, dim=3):
    return unit(rng.normal(size=(k, dim))), rng.normal(size=(k, dim)), rng.uniform(-0.3, 0.3, k)


def test_direction_features_modes(rng):
    d, n, f = _inputs(rng)
    pe = PEConfig(2)
    view = direction_features(DirectionalConfig(Mode.VIEWING), d, n)[0]
    ref = direction_features(DirectionalConfig(Mode.REFLECTION), d, n)[0]
    assert np.array_equal(view, pe_encode(d, pe))
    assert np.allclose(ref, pe_encode(reflect_direction(d, n), pe), atol=0)
    hyb0 = direction_features(DirectionalConfig(Mode.HYBRID), d, n, np.zeros(8), 0.3)[0]
    assert np.array_equal(hyb0, ref)
    hyb_inf = direction_features(DirectionalConfig(Mode.HYBRID), d, n, f + np.sign(f) * 0.1, 60.0)[0]
    assert np.array_equal(hyb_inf, view)
    post1 = direction_features(DirectionalConfig(Mode.HYBRID, FusionOrder.POST), d, n, np.zeros(8), 0.3)[0]
    assert np.allclose(post1, ref, atol=0)


def test_direction_features_degenerate_normal(rng):
    d, n, f = _inputs(rng, 4)
    n[1] = 0.0
    feats, bad = direction_features(DirectionalConfig(Mode.REFLECTION), d, n)
    assert bad == 1
    assert np.array_equal(feats[1], pe_encode(d[1], PEConfig(2)))


def test_negate_view_flag(rng):
    d, n, _ = _inputs(rng, 4)
    cfg = DirectionalConfig(Mode.REFLECTION, negate_view_in_reflection=True)
    assert np.allclose(direction_features(cfg, d, n)[0], pe_encode(reflect_direction(-d, n), cfg.pe))


def test_config_coercion_and_gamma():
    cfg = DirectionalConfig("hybrid", "post")
    assert cfg.mode is Mode.HYBRID and cfg.fusion_order is FusionOrder.POST and cfg.uses_blend
    assert not DirectionalConfig("viewing").uses_blend
    with pytest.raises(ValueError):
        DirectionalConfig("sideways")
    assert gamma_from_b(0.3) == pytest.approx(math.exp(3.0))
    assert gamma_from_b(-5.0) > 0


def test_circular_spread():
    assert circular_spread(np.tile([[0.0, 1.0]], (5, 1))) == 0.0
    ang = np.array([-0.1, 0.1])
    d = np.stack([np.cos(ang), np.sin(ang)], 1)
    assert circular_spread(d) == pytest.approx(math.sqrt(-2 * math.log(math.cos(0.1))))
