"""Differentiable SDF volume rendering with S-density opacities.

All functions operate on batches of rays held as float64 torch tensors:
origins and directions of shape (R, D), sample depths of shape (R, K).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dirparam import DirectionalConfig, direction_features
from .errors import NumericError
from .nets import DTYPE, sdf_gradient

DUP_EPS = 1e-12


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float | None = None
    far: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.linalg.norm(d)
        if self.near is not None and self.far is not None and not self.near < self.far:
            raise ValueError("ray needs near < far")


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 32
    n_importance: int = 32
    perturb: bool = True
    uniform_floor: float = 0.01
    bound: float = 1.0


@dataclass
class RenderOutput:
    color: torch.Tensor
    acc: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    weights: torch.Tensor
    t: torch.Tensor
    sdf: torch.Tensor | None = None
    gradients: torch.Tensor | None = None
    n_degenerate: int = 0


def ray_bounds(origins: torch.Tensor, dirs: torch.Tensor, radius: float = 1.0):
    """Chord through the bounding sphere; rays that miss it get the segment of
    length 2r centred on their closest approach."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    root = torch.sqrt(disc.clamp_min(0.0))
    hit = disc > 0
    near = torch.where(hit, -b - root, -b - radius).clamp_min(1e-4)
    far = torch.where(hit, -b + root, -b + radius)
    far = torch.maximum(far, near + 1e-4)
    return near, far


def stratified_samples(near, far, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """One sample per equal stratum of [near, far]; midpoints when ``generator`` is None."""
    if n < 2:
        raise ValueError("need at least two samples")
    near = torch.as_tensor(near, dtype=DTYPE).reshape(-1)
    far = torch.as_tensor(far, dtype=DTYPE).reshape(-1)
    base = torch.arange(n, dtype=DTYPE)
    if generator is None:
        u = base + 0.5
        u = u.expand(len(near), n)
    else:
        u = base + torch.rand(len(near), n, dtype=DTYPE, generator=generator)
    return near[:, None] + (far - near)[:, None] * (u / n)


def _sorted_unique(t: torch.Tensor) -> torch.Tensor:
    t, _ = torch.sort(t, dim=-1)
    # nudge exact duplicates so the sequence stays strictly increasing
    for _ in range(4):
        dup = torch.zeros_like(t, dtype=torch.bool)
        dup[:, 1:] = t[:, 1:] <= t[:, :-1]
        if not dup.any():
            break
        prev = torch.cat([t[:, :1], t[:, :-1]], dim=1)
        t = torch.where(dup, prev + DUP_EPS, t)
    return t


def importance_resample(t: torch.Tensor, weights: torch.Tensor, m: int,
                        generator: torch.Generator | None = None,
                        uniform_floor: float = 0.01) -> torch.Tensor:
    """Draw ``m`` depths from the piecewise-constant density given by interval
    ``weights`` (shape (R, K-1)) mixed with a uniform floor; return them merged
    with ``t``. Rays with all-zero weights draw stratified samples instead."""
    t = t.detach()
    w = weights.detach().clamp_min(0.0)
    lengths = t[:, 1:] - t[:, :-1]
    total = w.sum(-1, keepdim=True)
    flat = (total <= 0).squeeze(-1)
    pdf_w = w / total.clamp_min(1e-300)
    pdf_u = lengths / lengths.sum(-1, keepdim=True)
    pdf = (1.0 - uniform_floor) * pdf_w + uniform_floor * pdf_u
    pdf = torch.where(flat[:, None], pdf_u, pdf)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    cdf[:, -1] = 1.0
    if generator is None:
        u = (torch.arange(m, dtype=DTYPE) + 0.5) / m
        u = u.expand(len(t), m).contiguous()
    else:
        u = (torch.arange(m, dtype=DTYPE) + torch.rand(len(t), m, dtype=DTYPE, generator=generator)) / m
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[-1] - 1)
    lo, hi = idx - 1, idx
    c0, c1 = cdf.gather(1, lo), cdf.gather(1, hi)
    t0, t1 = t.gather(1, lo), t.gather(1, hi)
    frac = (u - c0) / (c1 - c0).clamp_min(1e-300)
    new = t0 + frac.clamp(0.0, 1.0) * (t1 - t0)
    return _sorted_unique(torch.cat([t, new], dim=-1))


def sdensity_opacity(f_i: torch.Tensor, f_next: torch.Tensor, s) -> torch.Tensor:
    """Discrete interval opacity max((Phi(s f_i) - Phi(s f_next)) / Phi(s f_i), 0)."""
    p = torch.sigmoid(f_i * s)
    c = torch.sigmoid(f_next * s)
    return ((p - c) / p.clamp_min(1e-300)).clamp(0.0, 1.0)


def composite(alpha: torch.Tensor, colors: torch.Tensor, t_mid: torch.Tensor | None = None,
              background=None, normals: torch.Tensor | None = None) -> RenderOutput:
    """Front-to-back compositing; ``alpha`` has shape (R, K)."""
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], -1), -1)
    w = alpha * trans
    acc = w.sum(-1)
    color = (w[..., None] * colors).sum(1)
    if background is not None:
        bg = torch.as_tensor(background, dtype=DTYPE)
        color = color + (1.0 - acc)[:, None] * bg
    if t_mid is None:
        t_mid = torch.arange(alpha.shape[1], dtype=DTYPE).expand_as(alpha)
    depth = (w * t_mid).sum(-1) / acc.clamp_min(1e-10)
    normal = (w[..., None] * normals).sum(1) if normals is not None else torch.zeros_like(color)
    return RenderOutput(color, acc, depth, normal, w, t_mid)


def render_rays(field, cfg: DirectionalConfig, origins, dirs, sampling: SamplingConfig = SamplingConfig(),
                generator: torch.Generator | None = None, background=(0.0, 0.0, 0.0),
                training: bool = False, ray_ids=None, bounds=None) -> RenderOutput:
    """Render a batch of rays through ``field``.

    ``field`` provides ``sdf(x) -> (f, features)``, ``radiance(x, dir_features,
    normals, features) -> rgb``, a positive sharpness ``s`` and ``gamma_b``
    (``None`` outside hybrid mode). With ``training`` the graph is kept for
    backpropagation including the gradient-of-gradient path. ``bounds``
    overrides the bounding-sphere ``(near, far)`` per ray.
    """
    o = torch.as_tensor(origins, dtype=DTYPE)
    d = torch.as_tensor(dirs, dtype=DTYPE)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    R, D = d.shape
    near, far = ray_bounds(o, d, sampling.bound) if bounds is None else (
        torch.as_tensor(bounds[0], dtype=DTYPE), torch.as_tensor(bounds[1], dtype=DTYPE))
    gen = generator if sampling.perturb else None
    t = stratified_samples(near, far, sampling.n_coarse, gen)
    s = field.s
    if sampling.n_importance > 0:
        with torch.no_grad():
            fc, _ = field.sdf(o[:, None, :] + t[..., None] * d[:, None, :])
            a_c = sdensity_opacity(fc[:, :-1], fc[:, 1:], s.detach())
            trans = torch.cumprod(torch.cat([torch.ones_like(a_c[:, :1]), 1.0 - a_c[:, :-1]], -1), -1)
            t = importance_resample(t, a_c * trans, sampling.n_importance, gen, sampling.uniform_floor)
    K = t.shape[1]
    x = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, D)
    with torch.set_grad_enabled(True):
        f, grad, feats = sdf_gradient(field, x, create_graph=training, check=False)
    if not training:
        f, grad, feats = f.detach(), grad.detach(), feats.detach()
    if not torch.isfinite(f).all():
        bad = torch.nonzero(~torch.isfinite(f.reshape(R, K)).all(-1))[0, 0].item()
        raise NumericError("non-finite SDF during rendering", ray_ids[bad] if ray_ids is not None else bad)
    glen = torch.linalg.norm(grad, dim=-1, keepdim=True)
    normals = grad / glen.clamp_min(1e-8)
    d_rep = d[:, None, :].expand(R, K, D).reshape(-1, D)
    gamma_b = getattr(field, "gamma_b", None)
    dir_feats, n_bad = direction_features(cfg, d_rep, grad, f, gamma_b)
    with torch.set_grad_enabled(training):
        rgb = field.radiance(x, dir_feats, normals, feats).reshape(R, K, 3)
    f = f.reshape(R, K)
    alpha = sdensity_opacity(f[:, :-1], f[:, 1:], s)
    t_mid = 0.5 * (t[:, 1:] + t[:, :-1])
    out = composite(alpha, rgb[:, :-1], t_mid, background, normals.reshape(R, K, D)[:, :-1])
    if not torch.isfinite(out.color).all():
        bad = torch.nonzero(~torch.isfinite(out.color).all(-1))[0, 0].item()
        raise NumericError("non-finite colour during rendering", ray_ids[bad] if ray_ids is not None else bad)
    out.sdf = f
    out.gradients = grad.reshape(R, K, D)
    out.n_degenerate = n_bad
    out.t = t
    return out


def render_ray(field, cfg: DirectionalConfig, ray: Ray, sampling: SamplingConfig = SamplingConfig(),
               seed: int | None = None, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Single-ray convenience wrapper around :func:`render_rays`."""
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    sampling = SamplingConfig(sampling.n_coarse, sampling.n_importance,
                              sampling.perturb and gen is not None, sampling.uniform_floor,
                              bound=max(sampling.bound, 1e-9))
    o = torch.as_tensor(ray.origin[None], dtype=DTYPE)
    d = torch.as_tensor(ray.direction[None], dtype=DTYPE)
    bounds = None
    if ray.near is not None and ray.far is not None:
        bounds = ([ray.near], [ray.far])
    return render_rays(field, cfg, o, d, sampling, gen, background, bounds=bounds)


def render_image(field, cfg: DirectionalConfig, camera, sampling: SamplingConfig = SamplingConfig(),
                 background=(0.0, 0.0, 0.0), chunk: int = 1024) -> dict[str, np.ndarray]:
    """Deterministic (zero-jitter) render of a full camera view."""
    o, d = camera.rays()
    sampling = SamplingConfig(sampling.n_coarse, sampling.n_importance, False,
                              sampling.uniform_floor, sampling.bound)
    colors, accs, normals, depths = [], [], [], []
    for i in range(0, len(o), chunk):
        out = render_rays(field, cfg, o[i:i + chunk], d[i:i + chunk], sampling, None, background)
        colors.append(out.color.detach().numpy())
        accs.append(out.acc.detach().numpy())
        normals.append(out.normal.detach().numpy())
        depths.append(out.depth.detach().numpy())
    shape = camera.shape
    return {
        "color": np.concatenate(colors).reshape(*shape, 3),
        "acc": np.concatenate(accs).reshape(shape),
        "normal": np.concatenate(normals).reshape(*shape, -1),
        "depth": np.concatenate(depths).reshape(shape),
    }


class AnalyticField:
    """Ground-truth SDF wired through the renderer's field interface.

    Emits a constant colour, or ``color_fn(x, dir_features, normals)`` when
    given. Used as an oracle and as a passthrough "checkpoint" for evaluation.
    """

    def __init__(self, sdf, s: float = 2000.0, color=(1.0, 0.5, 0.25), color_fn=None, dim: int | None = None):
        self.sdf_node = sdf
        self.dim = dim if dim is not None else sdf.dim
        self.s = torch.tensor(float(s), dtype=DTYPE)
        self.gamma_b = None
        self.color = torch.as_tensor(color, dtype=DTYPE)
        self.color_fn = color_fn

    def sdf(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        return self.sdf_node.eval(x), x[..., :0]

    def radiance(self, x, dir_features, normals, features):
        if self.color_fn is not None:
            return self.color_fn(x, dir_features, normals)
        return self.color.expand(*x.shape[:-1], 3)
