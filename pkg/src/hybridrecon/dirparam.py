"""Directional inputs of the radiance network.

Three parameterizations are supported:

* ``viewing``: the ray direction itself.
* ``reflection``: the ray direction mirrored about the surface normal,
  ``2 (d . n) n - d``.
* ``hybrid``: ``normalize(alpha * d_ref + (1 - alpha) * d_view)`` with the blend
  weight ``alpha = exp(-gamma * |f|)``, ``gamma = exp(10 * gamma_b)``. At the
  zero level set alpha is 1 (pure reflection); far from it the input decays to
  the viewing direction.

:func:`direction_features` is the only place that reads the mode. All other
functions are shape-agnostic and accept numpy arrays or torch tensors with the
vector components on the last axis; :func:`blend_weight` additionally accepts
scalar tape values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import torch

from .errors import DegenerateNormalError
from .nets import PEConfig, pe_encode
from .tape import TapeValue, detach as tape_detach

NORMAL_EPS = 1e-8
BLEND_EPS = 1e-8


class Mode(str, Enum):
    VIEWING = "viewing"
    REFLECTION = "reflection"
    HYBRID = "hybrid"


class FusionOrder(str, Enum):
    PRE = "pre"
    POST = "post"


@dataclass(frozen=True)
class DirectionalConfig:
    mode: Mode = Mode.HYBRID
    fusion_order: FusionOrder = FusionOrder.PRE
    detach: bool = True
    gamma_b_init: float = 0.3
    pe: PEConfig = field(default_factory=lambda: PEConfig(2))
    negate_view_in_reflection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "fusion_order", FusionOrder(self.fusion_order))

    @property
    def uses_blend(self) -> bool:
        return self.mode is Mode.HYBRID

    def with_(self, **changes) -> "DirectionalConfig":
        return replace(self, **changes)


def _xp(a):
    return torch if isinstance(a, torch.Tensor) else np


def _dot(a, b):
    return (a * b).sum(-1)[..., None]


def _norm(a):
    return _xp(a).sqrt((a * a).sum(-1))[..., None]


def gamma_from_b(gamma_b):
    """gamma = exp(10 * gamma_b); always positive."""
    if isinstance(gamma_b, TapeValue):
        return (gamma_b * 10.0).exp()
    if isinstance(gamma_b, torch.Tensor):
        return torch.exp(10.0 * gamma_b)
    return np.exp(10.0 * np.asarray(gamma_b, dtype=float))


def reflect_direction(d_view, n, check: bool = True):
    """Mirror ``d_view`` about ``n``: ``2 (d_view . n) n - d_view``.

    Both inputs are renormalised first. Raises :class:`DegenerateNormalError`
    when a normal has (near) zero length and ``check`` is set.
    """
    n_len = _norm(n)
    if check and bool((n_len < NORMAL_EPS).any()):
        raise DegenerateNormalError("normal has zero length")
    xp = _xp(n)
    n_len = xp.maximum(n_len, xp.full_like(n_len, NORMAL_EPS)) if xp is np else n_len.clamp_min(NORMAL_EPS)
    n_hat = n / n_len
    d_hat = d_view / _norm(d_view)
    return 2.0 * _dot(d_hat, n_hat) * n_hat - d_hat


def blend_weight(f, gamma_b, detach: bool = True):
    """alpha = exp(-gamma * |f|), with |f| cut from the graph when ``detach``.

    The gradient with respect to ``gamma_b`` always flows.
    """
    if isinstance(f, TapeValue):
        a = f.abs()
        if detach:
            a = tape_detach(a)
        return (-(gamma_from_b(gamma_b) * a)).exp()
    if isinstance(f, torch.Tensor):
        a = f.abs()
        if detach:
            a = a.detach()
        return torch.exp(-gamma_from_b(gamma_b) * a)
    return np.exp(-gamma_from_b(gamma_b) * np.abs(f))


def hybrid_direction(d_view, d_ref, alpha):
    """normalize(alpha d_ref + (1 - alpha) d_view); falls back to ``d_view``
    where the blend collapses (anti-parallel inputs at alpha = 1/2)."""
    xp = _xp(d_view)
    a = alpha[..., None] if getattr(alpha, "ndim", 0) else alpha
    blend = a * d_ref + (1.0 - a) * d_view
    length = _norm(blend)
    ok = length >= BLEND_EPS
    # the end points are returned bit-exactly rather than renormalised
    if xp is np:
        out = np.where(ok, blend / np.maximum(length, BLEND_EPS), d_view)
        return np.where(a == 1.0, d_ref, np.where(a == 0.0, d_view, out))
    out = torch.where(ok, blend / length.clamp_min(BLEND_EPS), d_view)
    return torch.where(a == 1.0, d_ref, torch.where(a == 0.0, d_view, out))


def direction_features(cfg: DirectionalConfig, d_view, n, f=None, gamma_b=None):
    """Encoded direction fed to the radiance network.

    ``n`` may be an unnormalised SDF gradient. Samples whose gradient length is
    below 1e-8 fall back to the viewing direction. Returns ``(features,
    n_degenerate)``.
    """
    xp = _xp(d_view)
    if cfg.mode is Mode.VIEWING:
        return pe_encode(d_view, cfg.pe), 0

    degenerate = (_norm(n) < NORMAL_EPS)[..., 0]
    n_bad = int(degenerate.sum())
    view_in = -d_view if cfg.negate_view_in_reflection else d_view
    d_ref = reflect_direction(view_in, n, check=False)
    if n_bad:
        d_ref = xp.where(degenerate[..., None], d_view, d_ref)

    if cfg.mode is Mode.REFLECTION:
        return pe_encode(d_ref, cfg.pe), n_bad

    if gamma_b is None:
        raise ValueError("hybrid mode needs gamma_b")
    alpha = blend_weight(f, gamma_b, cfg.detach)
    if cfg.fusion_order is FusionOrder.PRE:
        return pe_encode(hybrid_direction(d_view, d_ref, alpha), cfg.pe), n_bad
    a = alpha[..., None]
    return a * pe_encode(d_ref, cfg.pe) + (1.0 - a) * pe_encode(d_view, cfg.pe), n_bad


def circular_spread(directions) -> float:
    """Circular standard deviation sqrt(-2 ln R) of unit vectors, R being the
    mean resultant length. Exactly 0 for identical directions."""
    d = np.asarray(directions, dtype=float)
    if len(d) == 0:
        return float("nan")
    r = float(np.linalg.norm(d.mean(axis=0)))
    if r >= 1.0 - 1e-14:
        return 0.0
    return math.sqrt(-2.0 * math.log(max(r, 1e-300)))
