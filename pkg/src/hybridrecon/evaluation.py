"""Surface extraction, geometric metrics and the reflection-dispersion diagnostic."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dirparam import circular_spread, reflect_direction
from .scenes import AnalyticSdf, sphere_bounds, sphere_trace, sphere_trace_batch

BANDS = ((0.0, 0.02), (0.02, 0.1), (0.1, math.inf))
BAND_NAMES = ("near", "mid", "far")

# Edge e of a cell joins corners EDGE_CORNERS[e]; corners are numbered
# counter-clockwise from (i, j): c0=(i,j) c1=(i+1,j) c2=(i+1,j+1) c3=(i,j+1).
EDGE_CORNERS = ((0, 1), (1, 2), (2, 3), (3, 0))
CORNER_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))
SEGMENT_TABLE = {
    0: (), 1: ((3, 0),), 2: ((0, 1),), 3: ((3, 1),), 4: ((1, 2),), 6: ((0, 2),),
    7: ((3, 2),), 8: ((2, 3),), 9: ((0, 2),), 11: ((1, 2),), 12: ((1, 3),),
    13: ((0, 1),), 14: ((3, 0),), 15: (),
}
# saddles: (centre inside, centre outside)
SADDLE_TABLE = {
    5: (((0, 1), (2, 3)), ((3, 0), (1, 2))),
    10: (((3, 0), (1, 2)), ((0, 1), (2, 3))),
}


@dataclass
class Polylines:
    """Extracted 2D contour: oriented vertex chains (solid on the left)."""

    chains: list[np.ndarray]
    closed: list[bool]
    resolution: int
    bbox: tuple

    @property
    def segments(self) -> np.ndarray:
        segs = []
        for c, closed in zip(self.chains, self.closed):
            pts = np.vstack([c, c[:1]]) if closed else c
            segs.append(np.stack([pts[:-1], pts[1:]], axis=1))
        return np.concatenate(segs) if segs else np.zeros((0, 2, 2))

    @property
    def vertices(self) -> np.ndarray:
        return np.concatenate(self.chains) if self.chains else np.zeros((0, 2))

    def is_empty(self) -> bool:
        return not self.chains

    def length(self) -> float:
        s = self.segments
        return float(np.linalg.norm(s[:, 1] - s[:, 0], axis=1).sum()) if len(s) else 0.0

    def to_json(self) -> str:
        return json.dumps([c.tolist() for c in self.chains])


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    resolution: int = 0

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.areas().sum())

    def is_closed(self) -> bool:
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(len(counts)) and bool((counts == 2).all())

    def write_obj(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in self.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def _grid(bbox, resolution: int, dim: int):
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(dim)]
    return axes


def sample_grid(f: Callable, bbox, resolution: int, dim: int, chunk: int = 65536) -> tuple[list, np.ndarray]:
    axes = _grid(bbox, resolution, dim)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    vals = np.concatenate([np.asarray(f(pts[i:i + chunk]), dtype=float).reshape(-1)
                           for i in range(0, len(pts), chunk)])
    return axes, vals.reshape((resolution,) * dim)


def marching_squares(f: Callable, bbox=((-1.0, -1.0), (1.0, 1.0)), resolution: int = 256) -> Polylines:
    """Zero contour of ``f`` (maps (N, 2) points to (N,) values) on a regular grid.

    Linear interpolation along cell edges; saddle cells are resolved by
    sampling ``f`` at the cell centre. Vertices with value exactly 0 count as
    outside.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    (xs, ys), F = sample_grid(f, bbox, resolution, 2)
    inside = F < 0
    case = (inside[:-1, :-1].astype(np.uint8) | (inside[1:, :-1] << 1) | (inside[1:, 1:] << 2)
            | (inside[:-1, 1:] << 3))
    ci, cj = np.nonzero((case != 0) & (case != 15))
    saddle = np.isin(case[ci, cj], (5, 10))
    centre_in = np.zeros(len(ci), dtype=bool)
    if saddle.any():
        centres = np.stack([(xs[ci[saddle]] + xs[ci[saddle] + 1]) / 2, (ys[cj[saddle]] + ys[cj[saddle] + 1]) / 2], 1)
        centre_in[saddle] = np.asarray(f(centres), dtype=float).reshape(-1) < 0

    def edge_key(i, j, e):
        if e == 0:
            return ("h", i, j)
        if e == 1:
            return ("v", i + 1, j)
        if e == 2:
            return ("h", i, j + 1)
        return ("v", i, j)

    def edge_point(i, j, e):
        (a, b) = EDGE_CORNERS[e]
        ia, ja = i + CORNER_OFFSETS[a][0], j + CORNER_OFFSETS[a][1]
        ib, jb = i + CORNER_OFFSETS[b][0], j + CORNER_OFFSETS[b][1]
        fa, fb = F[ia, ja], F[ib, jb]
        t = fa / (fa - fb)
        pa, pb = np.array([xs[ia], ys[ja]]), np.array([xs[ib], ys[jb]])
        neg = pa if fa < 0 else pb
        return pa + t * (pb - pa), neg

    next_of: dict = {}
    point_of: dict = {}
    for k, (i, j) in enumerate(zip(ci, cj)):
        c = int(case[i, j])
        segs = SADDLE_TABLE[c][0 if centre_in[k] else 1] if c in SADDLE_TABLE else SEGMENT_TABLE[c]
        for ea, eb in segs:
            pa, neg = edge_point(i, j, ea)
            pb, _ = edge_point(i, j, eb)
            ka, kb = edge_key(i, j, ea), edge_key(i, j, eb)
            d = pb - pa
            w = neg - pa
            if d[0] * w[1] - d[1] * w[0] < 0:
                ka, kb, pa, pb = kb, ka, pb, pa
            next_of[ka] = kb
            point_of[ka], point_of[kb] = pa, pb

    chains, closed = [], []
    starts = set(next_of) - set(next_of.values())
    visited = set()

    def walk(k0):
        keys = [k0]
        visited.add(k0)
        k = k0
        while k in next_of:
            k = next_of[k]
            if k == k0:
                return keys, True
            keys.append(k)
            visited.add(k)
        return keys, False

    for k0 in sorted(starts):
        keys, is_closed = walk(k0)
        chains.append(keys)
        closed.append(is_closed)
    for k0 in sorted(next_of):
        if k0 not in visited:
            keys, is_closed = walk(k0)
            chains.append(keys)
            closed.append(is_closed)

    out_chains, out_closed = [], []
    for keys, is_closed in zip(chains, closed):
        pts = np.array([point_of[k] for k in keys])
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12
        pts = pts[keep]
        if is_closed and len(pts) > 1 and np.linalg.norm(pts[0] - pts[-1]) <= 1e-12:
            pts = pts[:-1]
        if len(pts) >= 2:
            out_chains.append(pts)
            out_closed.append(is_closed)
    return Polylines(out_chains, out_closed, resolution, bbox)


def marching_cubes(f: Callable, bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), resolution: int = 128) -> Mesh:
    """Zero isosurface via scikit-image's Lewiner marching cubes tables."""
    from skimage.measure import marching_cubes as _mc

    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axes, F = sample_grid(f, bbox, resolution, 3)
    if F.min() >= 0 or F.max() < 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int), resolution)
    lo = np.array([a[0] for a in axes])
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    verts, faces, _, _ = _mc(F, level=0.0, spacing=spacing, allow_degenerate=False)
    # with the default winding, face normals already point toward f > 0 (outward)
    return Mesh(verts + lo, faces.astype(int), resolution)


def sample_polylines(poly: Polylines, n: int) -> np.ndarray:
    """``n`` points evenly spaced by arc length over all chains."""
    segs = poly.segments
    if not len(segs):
        return np.zeros((0, 2))
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = (np.arange(n) + 0.5) / n * cum[-1]
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(segs) - 1)
    frac = (s - cum[k]) / np.maximum(lengths[k], 1e-300)
    return segs[k, 0] + frac[:, None] * (segs[k, 1] - segs[k, 0])


def sample_mesh(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    areas = mesh.areas()
    tri = rng.choice(len(areas), n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    p = mesh.vertices[mesh.faces[tri]]
    return p[:, 0] + u[:, None] * (p[:, 1] - p[:, 0]) + v[:, None] * (p[:, 2] - p[:, 0])


def surface_samples(sdf: AnalyticSdf, n: int, rng: np.random.Generator, bound: float = 1.0,
                    band: float = 0.02, newton_steps: int = 5) -> np.ndarray:
    """Points on the zero level set: uniform candidates within ``band`` of the
    surface, projected by Newton steps along the analytic gradient. Candidates
    that fail to converge (CSG creases) are rejected."""
    dim = sdf.dim
    out, have = [], 0
    while have < n:
        x = rng.uniform(-bound, bound, size=(max(4 * n, 4096), dim))
        f, _ = sdf.eval_grad(x)
        x = x[np.abs(f) < band]
        for _ in range(newton_steps):
            f, g = sdf.eval_grad(x)
            x = x - (f / np.maximum((g * g).sum(1), 1e-12))[:, None] * g
        x = x[np.abs(sdf.eval(x)) < 1e-9]
        out.append(x)
        have += len(x)
    return np.concatenate(out)[:n]


def nearest_distances(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Distance from every point of ``P`` to its nearest neighbour in ``Q``."""
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("point sets must be non-empty")
    d, _ = cKDTree(np.asarray(Q, dtype=float)).query(np.asarray(P, dtype=float))
    return d


def chamfer_distance(P: np.ndarray, Q: np.ndarray) -> float:
    """0.5 * (mean_P min_Q |p - q| + mean_Q min_P |p - q|)."""
    return 0.5 * (float(nearest_distances(P, Q).mean()) + float(nearest_distances(Q, P).mean()))


def accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """One-directional mean distance from prediction to ground truth."""
    return float(nearest_distances(pred, gt).mean())


def hausdorff_distance(P: np.ndarray, Q: np.ndarray) -> float:
    return max(float(nearest_distances(P, Q).max()), float(nearest_distances(Q, P).max()))


def normal_mae(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean angle in degrees between normal maps over masked pixels."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("normal maps must have the same shape")
    d = pred.shape[-1]
    p = pred.reshape(-1, d)
    g = gt.reshape(-1, d)
    m = np.ones(len(p), dtype=bool) if mask is None else np.asarray(mask).reshape(-1).astype(bool)
    if not m.any():
        return float("nan")
    p = p[m] / np.maximum(np.linalg.norm(p[m], axis=1, keepdims=True), 1e-300)
    g = g[m] / np.maximum(np.linalg.norm(g[m], axis=1, keepdims=True), 1e-300)
    cos = np.clip((p * g).sum(1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def winding_number(poly: Polylines, point) -> int:
    """Signed number of turns of the closed chains around ``point``."""
    p = np.asarray(point, dtype=float)
    total = 0.0
    for chain, closed in zip(poly.chains, poly.closed):
        pts = np.vstack([chain, chain[:1]]) if closed else chain
        a = pts[:-1] - p
        b = pts[1:] - p
        ang = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], (a * b).sum(1))
        total += ang.sum()
    return int(round(total / (2 * math.pi)))


def contour_contains(poly: Polylines, point) -> bool:
    """Whether ``point`` lies in the solid bounded by the extracted contour."""
    return winding_number(poly, point) > 0


@dataclass
class MetricReport:
    chamfer: float
    accuracy: float
    normal_mae: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"chamfer": self.chamfer, "accuracy": self.accuracy, "normal_mae": self.normal_mae, **self.extra}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["chamfer", "accuracy", "normal_mae"],
    "properties": {
        "chamfer": {"type": "number", "minimum": 0},
        "accuracy": {"type": "number", "minimum": 0},
        "normal_mae": {"type": ["number", "null"], "minimum": 0},
    },
}


# --- reflection dispersion ---------------------------------------------------


@dataclass
class DispersionProfile:
    hit: bool
    t: np.ndarray
    sdf: np.ndarray
    normals: np.ndarray
    reflections: np.ndarray
    band_spread: dict[str, float]
    band_count: dict[str, int]
    normal_deviation: np.ndarray
    hit_normal: np.ndarray | None = None


def _band_index(absf: np.ndarray) -> np.ndarray:
    out = np.full(len(absf), len(BANDS) - 1)
    for k, (lo, hi) in enumerate(BANDS):
        out[(absf >= lo) & (absf < hi)] = k
    return out


def reflection_dispersion(sdf: AnalyticSdf, origin, direction, t_values: np.ndarray | None = None,
                          n_samples: int = 64, bound: float = 1.0) -> DispersionProfile:
    """Spread of reflection directions along one ray, grouped by |f| band.

    For each sample the analytic normal gives d_ref = 2 (d . n) n - d. Spread
    is the circular standard deviation within each band; also reported is the
    angle between each sample's normal and the normal at the ray's first hit.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    near, far = sphere_bounds(o[None], d[None], bound)
    if t_values is None:
        t_values = near[0] + (far[0] - near[0]) * (np.arange(n_samples) + 0.5) / n_samples
    t_values = np.asarray(t_values, dtype=float)
    x = o + t_values[:, None] * d
    f, g = sdf.eval_grad(x)
    n = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    refl = reflect_direction(np.broadcast_to(d, n.shape), n, check=False)
    bands = _band_index(np.abs(f))
    spread, count = {}, {}
    for k, name in enumerate(BAND_NAMES):
        sel = bands == k
        count[name] = int(sel.sum())
        spread[name] = circular_spread(refl[sel]) if sel.any() else float("nan")
    hit = sphere_trace(sdf, o, d, near=float(near[0]), far=float(far[0]))
    if hit is not None:
        dev = np.degrees(np.arccos(np.clip(n @ hit.normal, -1.0, 1.0)))
        hit_n = hit.normal
    else:
        dev, hit_n = np.full(len(f), np.nan), None
    return DispersionProfile(hit is not None, t_values, f, n, refl, spread, count, dev, hit_n)


def ray_fan(origin, targets: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    o = np.asarray(origin, dtype=float)
    return [(o, (np.asarray(t, dtype=float) - o) / np.linalg.norm(np.asarray(t, dtype=float) - o)) for t in targets]


def fan_dispersion(sdf: AnalyticSdf, rays: Sequence, n_samples: int = 64) -> tuple[list[DispersionProfile], dict]:
    """Per-ray profiles and the fan summary (mean per-band spread over rays
    that have samples in the band, and the far/near ratio)."""
    profiles = [reflection_dispersion(sdf, o, d, n_samples=n_samples) for o, d in rays]
    summary = {}
    for name in BAND_NAMES:
        vals = [p.band_spread[name] for p in profiles if p.hit and p.band_count[name] > 0]
        summary[name] = float(np.mean(vals)) if vals else float("nan")
    near, far = summary["near"], summary["far"]
    if near == 0.0:
        summary["ratio"] = math.inf if far > 0 else float("nan")
    else:
        summary["ratio"] = far / near
    summary["misses"] = sum(not p.hit for p in profiles)
    return profiles, summary


def diagnostic_fan(scene_name: str, n_rays: int = 32):
    """Standard ray fans used by the diagnostic: into the L-shape notch, onto
    the disk / sphere / half-plane from above-right."""
    if scene_name == "flat2d-lshape":
        targets = np.stack([np.linspace(0.05, 0.5, n_rays), np.zeros(n_rays)], 1)
        return ray_fan([1.2, 1.2], targets)
    if scene_name in ("flat2d-disk", "flat2d-blob"):
        ang = np.linspace(-0.6, 0.6, n_rays) + math.pi / 4
        targets = 0.3 * np.stack([np.cos(ang), np.sin(ang)], 1)
        return ray_fan([1.5, 1.5], targets)
    if scene_name == "flat2d-halfplane":
        targets = np.stack([np.linspace(-0.5, 0.5, n_rays), np.full(n_rays, -0.3)], 1)
        return ray_fan([0.2, 1.5], targets)
    if scene_name in ("sphere3d", "bowl3d"):
        ang = np.linspace(-0.5, 0.5, n_rays)
        targets = 0.3 * np.stack([np.cos(ang), np.sin(ang), np.zeros(n_rays)], 1)
        return ray_fan([1.5, 0.0, 1.0], targets)
    raise KeyError(f"no diagnostic fan defined for {scene_name!r}")


# --- learned-field evaluation -------------------------------------------------


def field_function(field, clip_radius: float | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Numpy view of a field's SDF. With ``clip_radius`` the field is
    intersected with the ball the renderer samples in, so unsupervised space
    outside it cannot produce spurious surface pieces."""
    import torch

    def f(x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            v = field.sdf(torch.as_tensor(x, dtype=torch.float64))[0].numpy()
        if clip_radius is not None:
            v = np.maximum(v, np.linalg.norm(x, axis=1) - clip_radius)
        return v
    return f


def extract_surface(f: Callable, dim: int, resolution: int | None = None, bound: float = 1.0):
    """Polylines in 2D (default 256^2), triangle mesh in 3D (default 128^3)."""
    if dim == 2:
        return marching_squares(f, ((-bound, -bound), (bound, bound)), resolution or 256)
    if dim == 3:
        return marching_cubes(f, ((-bound,) * 3, (bound,) * 3), resolution or 128)
    raise ValueError(f"unsupported dimension {dim}")


def sample_surface(surface, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(surface, Polylines):
        return sample_polylines(surface, n)
    return sample_mesh(surface, n, rng)


def gt_normal_maps(scene, cameras) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Analytic normal maps and hit masks for the given cameras."""
    normals, masks = [], []
    for cam in cameras:
        o, d = cam.rays()
        near, far = sphere_bounds(o, d)
        hit, t = sphere_trace_batch(scene.sdf, o, d, near, far)
        n = np.zeros_like(o)
        if hit.any():
            _, g = scene.sdf.eval_grad(o[hit] + t[hit, None] * d[hit])
            n[hit] = g / np.linalg.norm(g, axis=1, keepdims=True)
        normals.append(n.reshape(*cam.shape, -1))
        masks.append(hit.reshape(cam.shape))
    return normals, masks


def evaluate_field(field, scene, *, resolution: int | None = None, n_points: int | None = None,
                   seed: int = 0, bound: float = 1.0, normal_views: Sequence = (), dcfg=None,
                   sampling=None) -> tuple[MetricReport, object]:
    """Chamfer and accuracy of the extracted surface against the analytic
    scene; normal MAE over ``normal_views`` when given."""
    from .render import render_image

    dim = scene.dim
    n_points = n_points or (10_000 if dim == 2 else 100_000)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    surface = extract_surface(field_function(field, bound * 0.99), dim, resolution, bound)
    gt = surface_samples(scene.sdf, n_points, rng, bound)
    if surface.is_empty():
        return MetricReport(float("inf"), float("inf"), float("nan"), {"empty": True}), surface
    pred = sample_surface(surface, n_points, rng)
    mae = float("nan")
    if len(normal_views):
        gt_n, gt_m = gt_normal_maps(scene, normal_views)
        errs, counts = [], []
        for cam, n_gt, m in zip(normal_views, gt_n, gt_m):
            img = render_image(field, dcfg, cam, sampling) if sampling is not None else render_image(field, dcfg, cam)
            if m.any():
                errs.append(normal_mae(img["normal"], n_gt, m) * m.sum())
                counts.append(m.sum())
        if counts:
            mae = float(np.sum(errs) / np.sum(counts))
    return MetricReport(chamfer_distance(pred, gt), accuracy(pred, gt), mae), surface
