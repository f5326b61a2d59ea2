"""Analytic ground-truth scenes for flatland (2D) and small 3D experiments.

Geometry is a CSG tree of exact primitive SDFs. ``sdf.eval(x)`` works on numpy
arrays and on torch tensors (so a ground-truth field can be wired through the
differentiable renderer); ``sdf.eval_grad(x)`` returns the analytic gradient
with active-branch selection through min/max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

# --- array helpers working for numpy and torch --------------------------------


def _is_torch(a) -> bool:
    return isinstance(a, torch.Tensor)


def _unit(v) -> list[float]:
    """Normalise, leaving already-unit vectors untouched so serialisation round-trips."""
    d = np.asarray(v, dtype=float)
    n = np.linalg.norm(d)
    if abs(n - 1.0) > 1e-12:
        d = d / n
    return [float(c) for c in d]


def _asarray(x, like):
    if _is_torch(like):
        return torch.as_tensor(x, dtype=like.dtype)
    return np.asarray(x, dtype=float)


def _vnorm(a):
    if _is_torch(a):
        return torch.linalg.norm(a, dim=-1)
    return np.linalg.norm(a, axis=-1)


def _relu(a):
    return torch.clamp(a, min=0.0) if _is_torch(a) else np.maximum(a, 0.0)


def _minimum(a, b):
    return torch.minimum(a, b) if _is_torch(a) else np.minimum(a, b)


def _maximum(a, b):
    return torch.maximum(a, b) if _is_torch(a) else np.maximum(a, b)


# --- CSG ------------------------------------------------------------------------


class AnalyticSdf:
    """Base class of CSG nodes."""

    dim: int

    def eval(self, x):
        raise NotImplementedError

    def eval_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __call__(self, x):
        return self.eval(x)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class Ball(AnalyticSdf):
    center: Sequence[float]
    radius: float

    def __post_init__(self):
        self.center = [float(c) for c in self.center]
        self.dim = len(self.center)

    def eval(self, x):
        return _vnorm(x - _asarray(self.center, x)) - self.radius

    def eval_grad(self, x):
        x = np.asarray(x, dtype=float)
        p = x - np.asarray(self.center)
        r = np.linalg.norm(p, axis=-1)
        g = np.zeros_like(p)
        ok = r > 0
        g[ok] = p[ok] / r[ok, None]
        g[~ok, 0] = 1.0
        return r - self.radius, g

    def to_dict(self):
        return {"type": "ball", "center": list(self.center), "radius": self.radius}


@dataclass
class Box(AnalyticSdf):
    center: Sequence[float]
    half: Sequence[float]

    def __post_init__(self):
        self.center = [float(c) for c in self.center]
        self.half = [float(h) for h in self.half]
        self.dim = len(self.center)

    def eval(self, x):
        q = (x - _asarray(self.center, x)).abs() - _asarray(self.half, x) if _is_torch(x) else \
            np.abs(x - np.asarray(self.center)) - np.asarray(self.half)
        inside = q.max(dim=-1).values if _is_torch(q) else q.max(axis=-1)
        return _vnorm(_relu(q)) + _minimum(inside, _asarray(0.0, inside))

    def eval_grad(self, x):
        x = np.asarray(x, dtype=float)
        p = x - np.asarray(self.center)
        sgn = np.where(p >= 0, 1.0, -1.0)
        q = np.abs(p) - np.asarray(self.half)
        qpos = np.maximum(q, 0.0)
        outer = np.linalg.norm(qpos, axis=-1)
        qmax = q.max(axis=-1)
        f = outer + np.minimum(qmax, 0.0)
        g = np.zeros_like(p)
        out = outer > 0
        g[out] = sgn[out] * qpos[out] / outer[out, None]
        ins = ~out
        if ins.any():
            k = q[ins].argmax(axis=-1)
            rows = np.nonzero(ins)[0]
            g[rows, k] = sgn[rows, k]
        return f, g

    def to_dict(self):
        return {"type": "box", "center": list(self.center), "half": list(self.half)}


@dataclass
class HalfSpace(AnalyticSdf):
    """Solid ``{x : n . x <= offset}``; ``normal`` is normalised."""

    normal: Sequence[float]
    offset: float = 0.0

    def __post_init__(self):
        self.normal = _unit(self.normal)
        self.dim = len(self.normal)

    def eval(self, x):
        return (x * _asarray(self.normal, x)).sum(-1) - self.offset

    def eval_grad(self, x):
        x = np.asarray(x, dtype=float)
        n = np.asarray(self.normal)
        return x @ n - self.offset, np.broadcast_to(n, x.shape).copy()

    def to_dict(self):
        return {"type": "halfspace", "normal": list(self.normal), "offset": self.offset}


@dataclass
class Union(AnalyticSdf):
    children: list

    def __post_init__(self):
        self.dim = self.children[0].dim

    def eval(self, x):
        out = self.children[0].eval(x)
        for c in self.children[1:]:
            out = _minimum(out, c.eval(x))
        return out

    def eval_grad(self, x):
        f, g = self.children[0].eval_grad(x)
        for c in self.children[1:]:
            fc, gc = c.eval_grad(x)
            take = fc < f
            f = np.where(take, fc, f)
            g = np.where(take[:, None], gc, g)
        return f, g

    def to_dict(self):
        return {"type": "union", "children": [c.to_dict() for c in self.children]}


@dataclass
class Intersection(AnalyticSdf):
    children: list

    def __post_init__(self):
        self.dim = self.children[0].dim

    def eval(self, x):
        out = self.children[0].eval(x)
        for c in self.children[1:]:
            out = _maximum(out, c.eval(x))
        return out

    def eval_grad(self, x):
        f, g = self.children[0].eval_grad(x)
        for c in self.children[1:]:
            fc, gc = c.eval_grad(x)
            take = fc > f
            f = np.where(take, fc, f)
            g = np.where(take[:, None], gc, g)
        return f, g

    def to_dict(self):
        return {"type": "intersection", "children": [c.to_dict() for c in self.children]}


@dataclass
class Difference(AnalyticSdf):
    """``a`` minus ``b``: max(f_a, -f_b)."""

    a: AnalyticSdf
    b: AnalyticSdf

    def __post_init__(self):
        self.dim = self.a.dim

    def eval(self, x):
        return _maximum(self.a.eval(x), -self.b.eval(x))

    def eval_grad(self, x):
        fa, ga = self.a.eval_grad(x)
        fb, gb = self.b.eval_grad(x)
        take = -fb > fa
        return np.where(take, -fb, fa), np.where(take[:, None], -gb, ga)

    def to_dict(self):
        return {"type": "difference", "a": self.a.to_dict(), "b": self.b.to_dict()}


@dataclass
class Transform(AnalyticSdf):
    """Rigid motion: child evaluated at R^T (x - t)."""

    child: AnalyticSdf
    rotation: Sequence[Sequence[float]]
    translation: Sequence[float]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        self.dim = self.child.dim
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(self.dim), atol=1e-9):
            raise ValueError("rotation must be orthonormal")

    def eval(self, x):
        R = _asarray(self.rotation, x)
        return self.child.eval((x - _asarray(self.translation, x)) @ R)

    def eval_grad(self, x):
        x = np.asarray(x, dtype=float)
        f, g = self.child.eval_grad((x - self.translation) @ self.rotation)
        return f, g @ self.rotation.T

    def to_dict(self):
        return {"type": "transform", "child": self.child.to_dict(),
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def sdf_from_dict(d: dict) -> AnalyticSdf:
    kind = d["type"]
    if kind == "ball":
        return Ball(d["center"], d["radius"])
    if kind == "box":
        return Box(d["center"], d["half"])
    if kind == "halfspace":
        return HalfSpace(d["normal"], d.get("offset", 0.0))
    if kind == "union":
        return Union([sdf_from_dict(c) for c in d["children"]])
    if kind == "intersection":
        return Intersection([sdf_from_dict(c) for c in d["children"]])
    if kind == "difference":
        return Difference(sdf_from_dict(d["a"]), sdf_from_dict(d["b"]))
    if kind == "transform":
        return Transform(sdf_from_dict(d["child"]), d["rotation"], d["translation"])
    raise ValueError(f"unknown SDF node type {kind!r}")


def analytic_eval(sdf: AnalyticSdf, x) -> tuple[np.ndarray, np.ndarray]:
    """Value and analytic gradient at points ``x`` of shape (N, D) or (D,)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    f, g = sdf.eval_grad(np.atleast_2d(x))
    return (f[0], g[0]) if single else (f, g)


# --- materials, lights, environment ---------------------------------------------


@dataclass
class Material:
    albedo: Sequence[float] = (0.5, 0.5, 0.5)
    specular: float = 0.0
    shininess: float = 32.0
    mirror: float = 0.0

    def __post_init__(self):
        self.albedo = [float(a) for a in self.albedo]
        if any(not 0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo must lie in [0, 1]")
        if self.specular < 0 or self.shininess <= 0 or self.mirror < 0:
            raise ValueError("invalid material coefficients")


@dataclass
class Light:
    """Directional light; ``direction`` points from the surface toward the light."""

    direction: Sequence[float]
    intensity: float = 1.0

    def __post_init__(self):
        self.direction = _unit(self.direction)


@dataclass
class EnvLobe:
    direction: Sequence[float]
    color: Sequence[float]
    sharpness: float

    def __post_init__(self):
        self.direction = _unit(self.direction)
        self.color = [float(c) for c in self.color]


def env_radiance(lobes: Sequence[EnvLobe], r: np.ndarray) -> np.ndarray:
    """Sum of exponential lobes exp(k (r . mu - 1)) evaluated along unit ``r``."""
    r = np.atleast_2d(r)
    out = np.zeros((len(r), 3))
    for lobe in lobes:
        w = np.exp(lobe.sharpness * (r @ np.asarray(lobe.direction) - 1.0))
        out += w[:, None] * np.asarray(lobe.color)
    return out


def shade(normal, material: Material, lights: Sequence[Light], view_dir,
          ambient: float = 0.0, env: Sequence[EnvLobe] = ()) -> np.ndarray:
    """Blinn-Phong with an optional mirror term; ``view_dir`` is the ray direction.

    Works on single vectors or stacks of shape (N, D). Output clamped to [0, 1].
    """
    n = np.atleast_2d(np.asarray(normal, dtype=float))
    d = np.atleast_2d(np.asarray(view_dir, dtype=float))
    single = np.ndim(normal) == 1
    albedo = np.asarray(material.albedo)
    color = np.broadcast_to(ambient * albedo, (len(n), 3)).copy()
    to_eye = -d
    for light in lights:
        l = np.asarray(light.direction)
        ndl = np.maximum(n @ l, 0.0)
        color += light.intensity * ndl[:, None] * albedo
        if material.specular > 0:
            h = to_eye + l
            h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
            ndh = np.maximum((n * h).sum(-1), 0.0)
            lit = (ndl > 0).astype(float)
            color += (light.intensity * material.specular * lit * ndh ** material.shininess)[:, None]
    if material.mirror > 0 and env:
        r = d - 2.0 * (d * n).sum(-1, keepdims=True) * n
        color += material.mirror * env_radiance(env, r)
    color = np.clip(color, 0.0, 1.0)
    return color[0] if single else color


# --- ray casting ----------------------------------------------------------------


@dataclass
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray


def sphere_trace_batch(sdf: AnalyticSdf, origins: np.ndarray, dirs: np.ndarray,
                       near: np.ndarray | float = 0.0, far: np.ndarray | float = 10.0,
                       eps: float = 1e-6, max_steps: int = 256):
    """Vectorised sphere tracing. Returns ``(hit mask, t)``."""
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = len(origins)
    t = np.broadcast_to(np.asarray(near, dtype=float), (n,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=float), (n,))
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        f = sdf.eval(origins[idx] + t[idx, None] * dirs[idx])
        done = np.abs(f) < eps
        hit[idx[done]] = True
        active[idx[done]] = False
        go = idx[~done]
        t[go] += f[~done]
        escaped = t[go] > far[go]
        active[go[escaped]] = False
    return hit, t


def sphere_trace(sdf: AnalyticSdf, origin, direction, near: float = 0.0, far: float = 10.0,
                 eps: float = 1e-6, max_steps: int = 256) -> Hit | None:
    """Trace one ray; ``None`` on a miss."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin, dtype=float)
    hit, t = sphere_trace_batch(sdf, o[None], d[None], near, far, eps, max_steps)
    if not hit[0]:
        return None
    p = o + t[0] * d
    _, g = analytic_eval(sdf, p)
    return Hit(float(t[0]), p, g / np.linalg.norm(g))


def sphere_bounds(origins: np.ndarray, dirs: np.ndarray, radius: float = 1.0):
    """Ray segment inside the bounding sphere, or [tc - r, tc + r] around the
    closest approach for rays that miss it."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.where(disc > 0, -b - root, -b - radius)
    far = np.where(disc > 0, -b + root, -b + radius)
    return np.maximum(near, 1e-4), np.maximum(far, 2e-4)


# --- cameras --------------------------------------------------------------------


@dataclass
class Camera2D:
    """Pinhole camera in the plane with a one-row image."""

    position: Sequence[float]
    angle: float
    fov: float
    pixels: int

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        fwd = np.array([math.cos(self.angle), math.sin(self.angle)])
        right = np.array([math.sin(self.angle), -math.cos(self.angle)])
        s = ((np.arange(self.pixels) + 0.5) / self.pixels * 2.0 - 1.0) * math.tan(self.fov / 2)
        d = fwd[None] + s[:, None] * right[None]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position, dtype=float), d.shape).copy()
        return o, d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.pixels,)

    def to_dict(self):
        return {"kind": "2d", "position": list(map(float, self.position)), "angle": self.angle,
                "fov": self.fov, "pixels": self.pixels}


@dataclass
class Camera3D:
    """OpenCV-style pinhole (x right, y down, z forward); ``c2w`` is 3x4."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: Sequence[Sequence[float]]

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=float)
        R = self.c2w[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        dc = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        d = dc.reshape(-1, 3) @ self.c2w[:, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.c2w[:, 3], d.shape).copy()
        return o, d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.height, self.width)

    def to_dict(self):
        return {"kind": "3d", "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "c2w": self.c2w.tolist()}


def camera_from_dict(d: dict):
    if d["kind"] == "2d":
        return Camera2D(d["position"], d["angle"], d["fov"], d["pixels"])
    return Camera3D(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["c2w"])


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    p = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - p
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.concatenate([np.stack([right, down, fwd], axis=1), p[:, None]], axis=1)


def flatland_rig(n_views: int = 64, pixels: int = 256, distance: float = 2.5,
                 offset: float = 0.0, bound: float = 1.0) -> list[Camera2D]:
    """Cameras on a full circle looking at the origin; FOV covers the bounding circle."""
    if distance <= bound:
        raise ValueError("cameras must sit outside the bounding circle")
    fov = 2.0 * math.asin(bound / distance) * 1.1
    cams = []
    for k in range(n_views):
        phi = offset + 2.0 * math.pi * k / n_views
        pos = [distance * math.cos(phi), distance * math.sin(phi)]
        cams.append(Camera2D(pos, phi + math.pi, fov, pixels))
    return cams


def spiral_rig(n_views: int = 36, size: int = 48, distance: float = 3.0,
               offset: float = 0.0, bound: float = 1.0) -> list[Camera3D]:
    """Two thirds of the views on an upper-hemisphere spiral, the rest on the equator."""
    if distance <= bound:
        raise ValueError("cameras must sit outside the bounding sphere")
    n_eq = n_views // 3
    n_sp = n_views - n_eq
    half_fov = math.asin(bound / distance) * 1.1
    focal = (size / 2) / math.tan(half_fov)
    poses = []
    for k in range(n_sp):
        u = (k + 0.5) / n_sp
        elev = math.radians(10.0 + 65.0 * u)
        azim = offset + 3.0 * 2.0 * math.pi * u
        poses.append((elev, azim))
    for k in range(n_eq):
        poses.append((0.0, offset + 2.0 * math.pi * (k + 0.5) / n_eq))
    cams = []
    for elev, azim in poses:
        pos = distance * np.array([math.cos(elev) * math.cos(azim), math.cos(elev) * math.sin(azim),
                                   math.sin(elev)])
        cams.append(Camera3D(focal, focal, size / 2, size / 2, size, size, look_at(pos)))
    return cams


# --- scenes and datasets --------------------------------------------------------


@dataclass
class SceneSpec:
    name: str
    sdf: AnalyticSdf
    material: Material
    lights: list[Light]
    env: list[EnvLobe] = field(default_factory=list)
    ambient: float = 0.1
    background: Sequence[float] = (0.0, 0.0, 0.0)
    views: int = 64
    pixels: int = 256
    camera_distance: float = 2.5
    probe: Sequence[float] | None = None

    @property
    def dim(self) -> int:
        return self.sdf.dim

    def to_dict(self) -> dict:
        return {
            "name": self.name, "sdf": self.sdf.to_dict(),
            "material": {"albedo": list(self.material.albedo), "specular": self.material.specular,
                         "shininess": self.material.shininess, "mirror": self.material.mirror},
            "lights": [{"direction": list(l.direction), "intensity": l.intensity} for l in self.lights],
            "env": [{"direction": list(e.direction), "color": list(e.color), "sharpness": e.sharpness}
                    for e in self.env],
            "ambient": self.ambient, "background": list(self.background), "views": self.views,
            "pixels": self.pixels, "camera_distance": self.camera_distance,
            "probe": list(self.probe) if self.probe is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            name=d["name"], sdf=sdf_from_dict(d["sdf"]), material=Material(**d["material"]),
            lights=[Light(**l) for l in d["lights"]], env=[EnvLobe(**e) for e in d.get("env", [])],
            ambient=d.get("ambient", 0.1), background=tuple(d.get("background", (0, 0, 0))),
            views=d.get("views", 64), pixels=d.get("pixels", 256),
            camera_distance=d.get("camera_distance", 2.5), probe=d.get("probe"),
        )

    def rig(self, offset: float = 0.0):
        if self.dim == 2:
            return flatland_rig(self.views, self.pixels, self.camera_distance, offset)
        return spiral_rig(self.views, self.pixels, self.camera_distance, offset)


def _env_2d() -> list[EnvLobe]:
    return [EnvLobe([math.cos(a), math.sin(a)], c, 3.0) for a, c in
            [(math.radians(30), (0.9, 0.3, 0.1)), (math.radians(150), (0.1, 0.8, 0.3)),
             (math.radians(270), (0.2, 0.3, 0.9))]]


def _env_3d() -> list[EnvLobe]:
    return [EnvLobe(d, c, 3.0) for d, c in
            [((1, 0, 1), (0.9, 0.3, 0.1)), ((-1, 1, 0.5), (0.1, 0.8, 0.3)),
             ((0, -1, -0.3), (0.2, 0.3, 0.9))]]


_SPECULAR = Material((0.25, 0.25, 0.3), specular=0.8, shininess=60.0, mirror=0.7)
_DIFFUSE = Material((0.7, 0.45, 0.3), specular=0.0, shininess=1.0, mirror=0.0)


def _lights_2d():
    return [Light([1.0, 1.0], 0.8), Light([-1.0, 0.3], 0.5), Light([0.2, -1.0], 0.4)]


def _lights_3d():
    return [Light([1.0, 1.0, 1.0], 0.8), Light([-1.0, 0.3, 0.5], 0.5), Light([0.2, -1.0, -0.2], 0.4)]


def builtin_scenes() -> dict[str, SceneSpec]:
    lshape = Difference(Box([0.0, 0.0], [0.55, 0.55]), Box([0.4, 0.4], [0.4, 0.4]))
    blob = Union([Ball([-0.2, 0.0], 0.35), Ball([0.25, 0.1], 0.3), Ball([0.0, -0.3], 0.25)])
    bowl = Difference(Ball([0.0, 0.0, 0.0], 0.6), Ball([0.0, 0.0, 0.35], 0.5))
    scenes = [
        SceneSpec("flat2d-disk", Ball([0.0, 0.0], 0.5), _SPECULAR, _lights_2d(), _env_2d()),
        # probe: centroid of the triangle between the notch walls and the convex hull
        SceneSpec("flat2d-lshape", lshape, _SPECULAR, _lights_2d(), _env_2d(),
                  probe=[0.55 / 3, 0.55 / 3]),
        SceneSpec("flat2d-blob", blob, _DIFFUSE, _lights_2d()),
        SceneSpec("flat2d-halfplane", HalfSpace([0.0, 1.0], -0.3), _SPECULAR, _lights_2d(), _env_2d()),
        SceneSpec("sphere3d", Ball([0.0, 0.0, 0.0], 0.5), _SPECULAR, _lights_3d(), _env_3d(),
                  views=36, pixels=48, camera_distance=3.0),
        SceneSpec("bowl3d", bowl, _SPECULAR, _lights_3d(), _env_3d(),
                  views=36, pixels=48, camera_distance=3.0, probe=[0.0, 0.0, 0.2]),
    ]
    return {s.name: s for s in scenes}


def get_scene(name: str) -> SceneSpec:
    scenes = builtin_scenes()
    if name not in scenes:
        raise KeyError(f"unknown scene {name!r}; valid ids: {', '.join(sorted(scenes))}")
    return scenes[name]


@dataclass
class Dataset:
    scene: SceneSpec
    cameras: list
    images: list[np.ndarray]
    masks: list[np.ndarray]
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.scene.dim

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.scene.background, dtype=float)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack all pixels: ``X`` = [origin, direction] per ray, colours, masks."""
        xs, ys, ms = [], [], []
        for cam, img, mask in zip(self.cameras, self.images, self.masks):
            o, d = cam.rays()
            xs.append(np.concatenate([o, d], axis=1))
            ys.append(img.reshape(-1, 3))
            ms.append(mask.reshape(-1))
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(ms).astype(float)


def render_view(scene: SceneSpec, camera) -> tuple[np.ndarray, np.ndarray]:
    o, d = camera.rays()
    near, far = sphere_bounds(o, d)
    hit, t = sphere_trace_batch(scene.sdf, o, d, near, far)
    img = np.broadcast_to(np.asarray(scene.background, dtype=float), (len(o), 3)).copy()
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        _, g = scene.sdf.eval_grad(p)
        n = g / np.linalg.norm(g, axis=1, keepdims=True)
        img[hit] = shade(n, scene.material, scene.lights, d[hit], scene.ambient, scene.env)
    shape = camera.shape
    return img.reshape(*shape, 3), hit.reshape(shape)


def generate_dataset(scene: SceneSpec, seed: int = 0, rig=None) -> Dataset:
    """Sphere-trace and shade every pixel of every view.

    ``seed`` only rotates the camera rig by a small azimuth offset; generation
    is otherwise deterministic.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    offset = float(rng.uniform(0.0, 2.0 * math.pi / max(scene.views, 1)))
    cams = rig if rig is not None else scene.rig(offset)
    images, masks = [], []
    for cam in cams:
        img, mask = render_view(scene, cam)
        images.append(img)
        masks.append(mask)
    return Dataset(scene, cams, images, masks, seed)
