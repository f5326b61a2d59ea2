"""Run configuration: strict JSON loading, resolution and manifests."""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dirparam import DirectionalConfig, FusionOrder, Mode
from .errors import ConfigError
from .fileio import sha256_file
from .nets import PEConfig
from .render import SamplingConfig
from .scenes import builtin_scenes
from .train import LossWeights, TrainConfig

OUTPUT_ROOT_ENV = "HYBRIDRECON_OUTPUT_ROOT"


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass(frozen=True)
class DirectionSection:
    mode: str = "hybrid"
    fusion_order: str = "pre"
    detach: bool = True
    gamma_b_init: float = 0.3
    frequencies: int | None = None
    negate_view_in_reflection: bool = False

    def build(self, dim: int = 2) -> DirectionalConfig:
        freq = self.frequencies if self.frequencies is not None else (2 if dim == 2 else 4)
        return DirectionalConfig(mode=Mode(self.mode), fusion_order=FusionOrder(self.fusion_order),
                                 detach=self.detach, gamma_b_init=self.gamma_b_init,
                                 pe=PEConfig(freq),
                                 negate_view_in_reflection=self.negate_view_in_reflection)


@dataclass(frozen=True)
class ModelSection:
    sdf_width: int = 64
    sdf_depth: int = 4
    feature_width: int = 32
    rad_width: int = 64
    rad_depth: int = 3
    pos_frequencies: int | None = None
    init_radius: float = 0.5
    init_ridge: float | None = 1e-3

    def bundle_kwargs(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EvalSection:
    resolution: int = 256
    n_points: int | None = None
    heldout_views: int = 4


@dataclass(frozen=True)
class RunConfig:
    scene: str = "flat2d-disk"
    dataset: str | None = None
    seed: int = 0
    output_dir: str | None = None
    direction: DirectionSection = field(default_factory=DirectionSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_section(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_scalar(value, typ, path: str):
    if typ is float and isinstance(value, bool) or typ is int and isinstance(value, bool):
        raise ConfigError(f"expected {typ.__name__}, got bool", path)
    if not isinstance(value, _SCALARS[typ]):
        raise ConfigError(f"expected {typ.__name__}, got {type(value).__name__}", path)
    return typ(value)


def _resolve_type(hint: str):
    return {"int": int, "float": float, "bool": bool, "str": str,
            "str | None": (str, None), "int | None": (int, None),
            "float | None": (float, None)}.get(hint, hint)


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(fields)}", where)
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        hint = fields[name].type
        typ = _resolve_type(hint) if isinstance(hint, str) else hint
        if isinstance(typ, tuple):
            kwargs[name] = None if value is None else _check_scalar(value, typ[0], sub)
        elif typ in _SCALARS:
            kwargs[name] = _check_scalar(value, typ, sub)
        else:
            nested = _NESTED.get(hint)
            if nested is None:
                raise ConfigError(f"unsupported field type {hint}", sub)
            kwargs[name] = _from_dict(nested, value, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path or cls.__name__) from exc


_NESTED = {
    "DirectionSection": DirectionSection, "TrainConfig": TrainConfig, "SamplingConfig": SamplingConfig,
    "LossWeights": LossWeights, "ModelSection": ModelSection, "EvalSection": EvalSection,
}


def load_config(data: dict | str | Path) -> RunConfig:
    """Strictly parse a config object or JSON file; unknown keys are errors."""
    if isinstance(data, (str, Path)):
        try:
            data = json.loads(Path(data).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    cfg = _from_dict(RunConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.dataset is None and cfg.scene not in builtin_scenes():
        raise ConfigError(f"unknown scene {cfg.scene!r}; valid ids: {', '.join(sorted(builtin_scenes()))}",
                          "scene")
    for key, enum in (("mode", Mode), ("fusion_order", FusionOrder)):
        allowed = [e.value for e in enum]
        if getattr(cfg.direction, key) not in allowed:
            raise ConfigError(f"must be one of {allowed}", f"direction.{key}")
    try:
        cfg.direction.build()
    except ValueError as exc:
        raise ConfigError(str(exc), "direction") from exc
    if cfg.direction.frequencies is not None and cfg.direction.frequencies < 0:
        raise ConfigError("must be >= 0", "direction.frequencies")
    for key in ("sdf_width", "sdf_depth", "feature_width", "rad_width", "rad_depth"):
        if getattr(cfg.model, key) < 1:
            raise ConfigError("must be >= 1", f"model.{key}")
    if not 0.0 < cfg.model.init_radius < 1.0:
        raise ConfigError("must lie in (0, 1)", "model.init_radius")
    if cfg.model.init_ridge is not None and cfg.model.init_ridge <= 0:
        raise ConfigError("must be positive or null", "model.init_ridge")
    if cfg.sampling.n_coarse < 2:
        raise ConfigError("must be >= 2", "sampling.n_coarse")
    if cfg.eval.resolution < 2:
        raise ConfigError("must be >= 2", "eval.resolution")


# --- manifests -------------------------------------------------------------------


def utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_manifest(out_dir: str | Path, command: str, config: dict, started: str,
                   metrics: dict | None = None, version: str = "") -> Path:
    """Inventory every file under ``out_dir`` with checksums, then write
    ``manifest.json`` atomically. Timestamps live only in the manifest."""
    out = Path(out_dir)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            files[str(p.relative_to(out))] = sha256_file(p)
    manifest = {
        "command": command, "version": version, "config": config, "started": started,
        "finished": utc_now(), "metrics": metrics or {}, "files": files,
    }
    path = out / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
