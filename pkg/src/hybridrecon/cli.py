"""Command-line entry point.

Subcommands: generate, train, render, extract, eval, ablate, diagnose, version.
Exit codes: 0 success, 2 config error, 3 numeric abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (RunConfig, atomic_write_text, default_output_root, load_config, utc_now,
                     write_manifest)
from .dirparam import DirectionalConfig, reflect_direction
from .errors import ConfigError, NumericError
from .evaluation import (BAND_NAMES, REPORT_SCHEMA, Polylines, diagnostic_fan, evaluate_field,
                         extract_surface, fan_dispersion, field_function)
from .fileio import load_dataset, save_dataset, write_ppm
from .nets import load_bundle
from .render import AnalyticField, render_image
from .scenes import Dataset, generate_dataset, get_scene
from .train import fit, write_log

log = logging.getLogger("hybridrecon")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
ABLATION_AXES = {
    "gamma-b-init": ("direction", "gamma_b_init", (0.0, 0.1, 0.2, 0.3, 0.5)),
    "detach": ("direction", "detach", (True, False)),
    "fusion-order": ("direction", "fusion_order", ("pre", "post")),
    "mode": ("direction", "mode", ("viewing", "reflection", "hybrid")),
}


# --- shared pipeline ---------------------------------------------------------------


def obtain_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is not None:
        ds = load_dataset(cfg.dataset)
        if cfg.scene and ds.scene.name != cfg.scene:
            log.warning("dataset scene %s differs from configured scene %s", ds.scene.name, cfg.scene)
        return ds
    return generate_dataset(get_scene(cfg.scene), seed=cfg.seed)


def heldout_cameras(ds: Dataset, n: int):
    """Views half-way between training cameras, never seen during fitting."""
    if n <= 0:
        return []
    step = 2 * math.pi / max(ds.scene.views, 1)
    base = ds.scene.rig(0.5 * step + _rig_offset(ds))
    idx = np.linspace(0, len(base), n, endpoint=False).astype(int)
    return [base[i] for i in idx]


def _rig_offset(ds: Dataset) -> float:
    cam = ds.cameras[0]
    return float(getattr(cam, "angle", 0.0)) - math.pi if hasattr(cam, "angle") else 0.0


def train_run(cfg: RunConfig, out_dir: Path | None, resume: bool = False, stop_after: int | None = None,
              dataset: Dataset | None = None) -> dict:
    """Fit, evaluate and (with ``out_dir``) write checkpoint, log and report."""
    ds = dataset if dataset is not None else obtain_dataset(cfg)
    dim = ds.dim
    dcfg = cfg.direction.build(dim)
    X, y, mask = ds.to_arrays()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "resolved_config.json", cfg.to_json())
    result = fit(X, y, mask, dcfg, cfg.train, cfg.sampling, cfg.loss_weights, ds.background,
                 bundle_kwargs=cfg.model.bundle_kwargs(), out_dir=out_dir,
                 evaluator=lambda b: evaluate_field(b, ds.scene, resolution=min(cfg.eval.resolution, 128),
                                                    n_points=cfg.eval.n_points, seed=cfg.seed)[0].chamfer,
                 resume=resume, stop_after=stop_after,
                 checkpoint_meta={"run_config": cfg.to_dict(), "scene": ds.scene.to_dict()})
    metrics = {"steps": len(result.log) and int(result.log[-1]["step"])}
    if result.log:
        last = result.log[-1]
        metrics.update({k: last[k] for k in ("loss_total", "loss_color", "loss_eikonal", "loss_mask")})
    finished = stop_after is None or stop_after >= cfg.train.iterations
    if finished:
        report, surface = evaluate_field(result.bundle, ds.scene, resolution=cfg.eval.resolution,
                                         n_points=cfg.eval.n_points, seed=cfg.seed)
        metrics.update(report.to_dict())
        if ds.scene.probe is not None and isinstance(surface, Polylines):
            from .evaluation import contour_contains
            metrics["probe_inside"] = bool(contour_contains(surface, ds.scene.probe))
        if out_dir is not None:
            write_surface(surface, out_dir)
    metrics = {k: _json_safe(v) for k, v in metrics.items()}
    if out_dir is not None:
        write_log(out_dir / "metrics.csv", result.log)
        atomic_write_text(out_dir / "report.json", json.dumps(metrics, indent=2, sort_keys=True))
    metrics["bundle"] = result.bundle
    return metrics


def _json_safe(v):
    """NaN becomes null so every emitted report is strict JSON."""
    return None if isinstance(v, float) and math.isnan(v) else v


def write_surface(surface, out_dir: Path) -> Path:
    if isinstance(surface, Polylines):
        path = out_dir / "surface.json"
        path.write_text(surface.to_json())
    else:
        path = out_dir / "surface.obj"
        surface.write_obj(path)
    return path


def _load_field(checkpoint: str, scene_name: str | None):
    """Returns (field, direction config, run config dict, scene)."""
    if checkpoint == "gt":
        if scene_name is None:
            raise ConfigError("--scene is required with the ground-truth passthrough", "scene")
        scene = get_scene(scene_name)
        return AnalyticField(scene.sdf), DirectionalConfig(mode="viewing"), RunConfig(scene=scene_name).to_dict(), scene
    bundle, _, meta = load_bundle(checkpoint)
    run = meta.get("run_config") or RunConfig().to_dict()
    cfg = load_config(run)
    from .scenes import SceneSpec
    scene = SceneSpec.from_dict(meta["scene"]) if "scene" in meta else get_scene(scene_name or cfg.scene)
    if scene_name is not None and scene_name != scene.name:
        scene = get_scene(scene_name)
    if scene.dim != bundle.dim:
        raise ConfigError(f"checkpoint is {bundle.dim}D but scene {scene.name} is {scene.dim}D", "scene")
    return bundle, cfg.direction.build(bundle.dim), run, scene


# --- commands --------------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "scene", None):
        cfg = cfg.replace(scene=args.scene)
    if getattr(args, "dataset", None):
        cfg = cfg.replace(dataset=str(args.dataset))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
        cfg = cfg.with_section("train", seed=args.seed)
    if getattr(args, "mode", None):
        cfg = cfg.with_section("direction", mode=args.mode)
    if getattr(args, "gamma_b_init", None) is not None:
        cfg = cfg.with_section("direction", gamma_b_init=args.gamma_b_init)
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.with_section("train", iterations=args.iterations)
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=str(args.out))
    return load_config(cfg.to_dict())


def _out_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    name = f"{command}-{cfg.scene}-{cfg.direction.mode}-seed{cfg.seed}"
    return default_output_root() / name


def cmd_generate(args) -> int:
    started = utc_now()
    cfg = _config_from_args(args)
    ds = generate_dataset(get_scene(cfg.scene), seed=cfg.seed)
    out = _out_dir(cfg, "dataset") if not args.out else Path(args.out)
    save_dataset(ds, out)
    write_manifest(out, "generate", cfg.to_dict(), started, {"views": len(ds.images)}, __version__)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    started = utc_now()
    cfg = _config_from_args(args)
    out = _out_dir(cfg, "train")
    metrics = train_run(cfg, out, resume=args.resume, stop_after=args.stop_after)
    metrics.pop("bundle")
    write_manifest(out, "train", cfg.to_dict(), started, metrics, __version__)
    print(json.dumps({k: v for k, v in metrics.items()}, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    field, dcfg, run, scene = _load_field(args.checkpoint, args.scene)
    cfg = load_config(run)
    cams = scene.rig(0.0)
    if not 0 <= args.view < len(cams):
        raise ConfigError(f"view must be in [0, {len(cams)})", "view")
    img = render_image(field, dcfg, cams[args.view], cfg.sampling, scene.background)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, img["color"])
    print(out)
    return EXIT_OK


def cmd_extract(args) -> int:
    field, _, run, scene = _load_field(args.checkpoint, args.scene)
    res = args.resolution or load_config(run).eval.resolution
    surface = extract_surface(field_function(field, 0.99), scene.dim, res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(write_surface(surface, out))
    return EXIT_OK


def cmd_eval(args) -> int:
    started = utc_now()
    field, dcfg, run, scene = _load_field(args.checkpoint, args.scene)
    cfg = load_config(run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .scenes import Dataset as _D
    ds = _D(scene, scene.rig(0.0), [], [], cfg.seed)
    cams = heldout_cameras(ds, args.heldout if args.heldout is not None else cfg.eval.heldout_views)
    report, surface = evaluate_field(field, scene, resolution=args.resolution or cfg.eval.resolution,
                                     n_points=cfg.eval.n_points, seed=cfg.seed, normal_views=cams,
                                     dcfg=dcfg, sampling=cfg.sampling)
    for i, cam in enumerate(cams):
        img = render_image(field, dcfg, cam, cfg.sampling, scene.background)
        write_ppm(out / f"heldout_{i:04d}.ppm", img["color"])
    d = report.to_dict()
    d["heldout_renders"] = len(cams)
    d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
    atomic_write_text(out / "report.json", json.dumps(d, indent=2, sort_keys=True))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(sorted(d))
        w.writerow([d[k] if d[k] is not None else "" for k in sorted(d)])
    write_surface(surface, out)
    write_manifest(out, "eval", run, started, d, __version__)
    print(json.dumps(d, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = utc_now()
    cfg = _config_from_args(args)
    section, key, values = ABLATION_AXES[args.axis]
    out = _out_dir(cfg, f"ablate-{args.axis}") if not args.out else Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = obtain_dataset(cfg)
    rows = []
    for value in values:
        run_cfg = cfg.with_section(section, **{key: value}).replace(output_dir=None)
        run_dir = out / f"{key}={value}"
        row = {"axis": args.axis, "value": value, "status": "ok"}
        try:
            m = train_run(run_cfg, run_dir, dataset=ds)
            m.pop("bundle")
            row.update({k: m.get(k) for k in ("chamfer", "accuracy", "normal_mae", "loss_total",
                                               "loss_color", "loss_eikonal", "loss_mask")})
        except (NumericError, ValueError) as exc:
            row["status"] = f"failed: {exc}"
        rows.append(row)
    cols = ["axis", "value", "status", "chamfer", "accuracy", "normal_mae", "loss_total", "loss_color",
            "loss_eikonal", "loss_mask"]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None or (isinstance(r.get(c), float) and math.isnan(r[c]))
                        else r[c] for c in cols])
    write_manifest(out, "ablate", cfg.to_dict(), started, {"rows": len(rows)}, __version__)
    print(out / "table.csv")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    started = utc_now()
    try:
        scene = get_scene(args.scene)
    except KeyError as exc:
        raise ConfigError(exc.args[0], "scene") from exc
    rays = diagnostic_fan(scene.name, args.rays)
    profiles, summary = fan_dispersion(scene.sdf, rays, args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dispersion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ray_id", "band", "spread_rad", "n_samples"])
        for i, p in enumerate(profiles):
            for band in BAND_NAMES:
                spread = p.band_spread[band]
                w.writerow([i if p.hit else f"{i}*", band, "" if math.isnan(spread) else repr(spread),
                            p.band_count[band]])
    atomic_write_text(out / "summary.json", json.dumps(
        {k: (None if isinstance(v, float) and (math.isnan(v) or math.isinf(v)) else v) for k, v in summary.items()}
        | {"ratio_infinite": math.isinf(summary["ratio"])}, indent=2, sort_keys=True))
    write_ppm(out / "dispersion.ppm", dispersion_figure(scene, rays, profiles))
    write_manifest(out, "diagnose", {"scene": scene.name, "rays": args.rays, "samples": args.samples},
                   started, {"summary": {k: str(v) for k, v in summary.items()}}, __version__)
    print(json.dumps({k: str(v) for k, v in summary.items()}))
    return EXIT_OK


def dispersion_figure(scene, rays, profiles, size: int = 384) -> np.ndarray:
    """Top-down raster: solid in grey, samples coloured by band, short strokes
    along each sample's reflection direction (first two coordinates)."""
    lin = np.linspace(-1, 1, size)
    X, Y = np.meshgrid(lin, -lin)
    pts = np.stack([X.ravel(), Y.ravel()] + [np.zeros(X.size)] * (scene.dim - 2), 1)
    f = scene.sdf.eval(pts).reshape(size, size)
    img = np.ones((size, size, 3))
    img[f < 0] = 0.6
    colors = {0: (0.85, 0.1, 0.1), 1: (0.9, 0.6, 0.0), 2: (0.1, 0.3, 0.9)}

    def put(p, c):
        i = int(round((1 - p[1]) / 2 * (size - 1)))
        j = int(round((p[0] + 1) / 2 * (size - 1)))
        if 0 <= i < size and 0 <= j < size:
            img[i, j] = c

    from .evaluation import _band_index
    for (o, d), p in zip(rays, profiles):
        band = _band_index(np.abs(p.sdf))
        for t, b, r in zip(p.t, band, p.reflections):
            x = o + t * d
            for s in np.linspace(0, 0.06, 8):
                put(x + s * r, tuple(0.5 + 0.5 * np.array(colors[b])))
            put(x, colors[b])
    return img


def cmd_version(args) -> int:
    print(f"hybridrecon {__version__}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridrecon", description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=int, default=1, help="intra-op threads (1 = deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--scene")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if training:
            sp.add_argument("--dataset")
            sp.add_argument("--mode", choices=["viewing", "reflection", "hybrid"])
            sp.add_argument("--gamma-b-init", type=float)
            sp.add_argument("--iterations", type=int)

    sp = sub.add_parser("generate", help="render a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="fit a field to a dataset")
    common(sp, training=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render one view of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--scene")
    sp.add_argument("--view", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("extract", help="extract the zero level set")
    sp.add_argument("checkpoint")
    sp.add_argument("--scene")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("eval", help="geometric metrics against the analytic scene")
    sp.add_argument("checkpoint", help="checkpoint file, or 'gt' for the analytic passthrough")
    sp.add_argument("--scene")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--heldout", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep one design axis")
    common(sp, training=True)
    sp.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("diagnose", help="reflection-direction dispersion over a ray fan")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--rays", type=int, default=32)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("version")
    sp.set_defaults(func=cmd_version)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
