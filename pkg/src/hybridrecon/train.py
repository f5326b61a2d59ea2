"""Losses, Adam, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dirparam import DirectionalConfig, gamma_from_b
from .errors import NumericError
from .nets import DTYPE, FieldBundle, build_bundle, load_arrays, save_bundle, sdf_gradient
from .render import SamplingConfig, render_rays
from .seeding import substream, torch_generator

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "loss_total", "loss_color", "loss_eikonal", "loss_mask", "s", "gamma", "chamfer"]
MASK_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    eikonal: float = 0.1
    mask: float = 0.1

    def __post_init__(self):
        if min(self.color, self.eikonal, self.mask) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    rays_per_batch: int = 256
    base_lr: float = 5e-4
    warmup_steps: int = 500
    lr_floor: float = 5e-6
    log_every: int = 50
    eval_every: int = 1000
    checkpoint_every: int = 1000
    eikonal_points: int = 256
    masked_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")


def color_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over rays and channels."""
    if rendered.shape != target.shape:
        raise ValueError(f"batch mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return (rendered - target).abs().mean()


def eikonal_from_gradients(grads: torch.Tensor) -> torch.Tensor:
    return ((torch.linalg.norm(grads, dim=-1) - 1.0) ** 2).mean()


def eikonal_loss(field, points) -> torch.Tensor:
    """mean (||grad f|| - 1)^2, differentiable in the field parameters."""
    _, grads, _ = sdf_gradient(field, torch.as_tensor(points, dtype=DTYPE), create_graph=True)
    return eikonal_from_gradients(grads)


def mask_loss(acc: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy between accumulated weight and the foreground mask."""
    p = acc.clamp(MASK_EPS, 1.0 - MASK_EPS)
    m = torch.as_tensor(mask, dtype=DTYPE)
    return -(m * torch.log(p) + (1.0 - m) * torch.log(1.0 - p)).mean()


class Adam:
    """Bias-corrected Adam over a list of leaf tensors."""

    def __init__(self, params: list[torch.Tensor], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [torch.zeros_like(p, requires_grad=False) for p in self.params]
        self.v = [torch.zeros_like(p, requires_grad=False) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads: list[torch.Tensor] | None = None, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads[i] if grads is not None else p.grad
            if g is None:
                g = torch.zeros_like(p)
            self.m[i].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            self.v[i].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(lr * (self.m[i] / c1) / (torch.sqrt(self.v[i] / c2) + self.eps))

    def state_arrays(self, names: list[str]) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for n, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{n}"] = m.numpy().copy()
            out[f"adam.v.{n}"] = v.numpy().copy()
        return out

    def load_state_arrays(self, names: list[str], arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"])
        for i, n in enumerate(names):
            self.m[i] = torch.as_tensor(arrays[f"adam.m.{n}"], dtype=DTYPE).clone()
            self.v[i] = torch.as_tensor(arrays[f"adam.v.{n}"], dtype=DTYPE).clone()


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to ``lr_floor``; ``step`` counts from 0."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.iterations - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr_floor + (cfg.base_lr - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Batch:
    origins: torch.Tensor
    dirs: torch.Tensor
    colors: torch.Tensor
    masks: torch.Tensor


def sample_batch(X: np.ndarray, y: np.ndarray, mask: np.ndarray, n: int,
                 rng: np.random.Generator, masked_fraction: float = 0.75) -> Batch:
    """Draw ``n`` rays, ``masked_fraction`` of them from foreground pixels."""
    fg = np.flatnonzero(mask > 0.5)
    bg = np.flatnonzero(mask <= 0.5)
    n_fg = int(round(n * masked_fraction)) if len(fg) and len(bg) else (n if len(fg) else 0)
    idx = np.concatenate([rng.choice(fg, n_fg) if n_fg else np.empty(0, int),
                          rng.choice(bg, n - n_fg) if n - n_fg else np.empty(0, int)])
    D = X.shape[1] // 2
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return Batch(t(X[idx, :D]), t(X[idx, D:]), t(y[idx]), t(mask[idx]))


def train_step(bundle: FieldBundle, batch: Batch, dcfg: DirectionalConfig, opt: Adam, lr: float,
               weights: LossWeights = LossWeights(), sampling: SamplingConfig = SamplingConfig(),
               generator: torch.Generator | None = None, eikonal_points: torch.Tensor | None = None,
               background=(0.0, 0.0, 0.0)) -> dict[str, float]:
    """One Adam update on the weighted sum of colour, eikonal and mask losses."""
    if len(batch.origins) == 0:
        raise ValueError("empty batch")
    out = render_rays(bundle, dcfg, batch.origins, batch.dirs, sampling, generator, background, training=True)
    l_color = color_loss(out.color, batch.colors)
    l_mask = mask_loss(out.acc, batch.masks)
    grads = out.gradients.reshape(-1, bundle.dim)
    if eikonal_points is not None and len(eikonal_points):
        _, g_extra, _ = sdf_gradient(bundle, eikonal_points, create_graph=True)
        grads = torch.cat([grads, g_extra], dim=0)
    l_eik = eikonal_from_gradients(grads)
    total = weights.color * l_color + weights.eikonal * l_eik + weights.mask * l_mask
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss {total.item()!r}")
    opt.zero_grad()
    total.backward()
    opt.step(lr=lr)
    return {
        "loss_total": total.item(), "loss_color": l_color.item(), "loss_eikonal": l_eik.item(),
        "loss_mask": l_mask.item(), "s": bundle.s.item(),
        "gamma": float(gamma_from_b(bundle.gamma_b).item()) if bundle.gamma_b is not None else None,
        "n_degenerate": out.n_degenerate,
    }


@dataclass
class FitResult:
    bundle: FieldBundle
    log: list[dict]
    checkpoint: Path | None = None


def _format(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_format(r.get(c)) for c in LOG_COLUMNS])


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fit(X: np.ndarray, y: np.ndarray, mask: np.ndarray, dcfg: DirectionalConfig,
        tcfg: TrainConfig = TrainConfig(), sampling: SamplingConfig = SamplingConfig(),
        weights: LossWeights = LossWeights(), background=(0.0, 0.0, 0.0),
        bundle_kwargs: dict | None = None, out_dir: str | Path | None = None,
        evaluator: Callable[[FieldBundle], float] | None = None, resume: bool = False,
        stop_after: int | None = None, checkpoint_meta: dict | None = None) -> FitResult:
    """Optimise a fresh field pair on rays ``X`` = [origin, direction].

    Every random draw is keyed on ``(tcfg.seed, stream, step)``, so a run
    resumed from a checkpoint reproduces the uninterrupted metrics exactly.
    ``stop_after`` ends the loop early (used to simulate an interruption).
    """
    dim = X.shape[1] // 2
    bundle = build_bundle(dim, seed=substream(tcfg.seed, "init"), hybrid=dcfg.uses_blend,
                          gamma_b_init=dcfg.gamma_b_init, dir_frequencies=dcfg.pe.num_frequencies,
                          **(bundle_kwargs or {}))
    names = [n for n, _ in bundle.named_parameters()]
    opt = Adam(bundle.parameters(), tcfg.base_lr)
    rows: list[dict] = []
    start = 0
    ckpt = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt = Path(out_dir) / "checkpoint.bin"
    if resume and ckpt is not None and ckpt.exists():
        arrays, meta = load_arrays(ckpt)
        bundle.load_arrays(arrays)
        opt.load_state_arrays(names, arrays)
        start = int(meta["step"])
        rows = meta.get("log", [])
        log.info("resumed from %s at step %d", ckpt, start)
    last_good = ckpt if ckpt is not None and ckpt.exists() else None
    end = tcfg.iterations if stop_after is None else min(stop_after, tcfg.iterations)
    for step in range(start, end):
        rng = substream(tcfg.seed, "sampling", step)
        batch = sample_batch(X, y, mask, tcfg.rays_per_batch, rng, tcfg.masked_fraction)
        eik = torch.as_tensor(rng.uniform(-sampling.bound, sampling.bound, (tcfg.eikonal_points, dim)), dtype=DTYPE)
        try:
            metrics = train_step(bundle, batch, dcfg, opt, learning_rate(step, tcfg), weights, sampling,
                                 torch_generator(tcfg.seed, "sampling", step), eik, background)
        except NumericError as exc:
            raise NumericError(f"step {step + 1}: {exc}; last good checkpoint: {last_good}") from exc
        n = step + 1
        if n % tcfg.log_every == 0:
            row = {"step": n, **{k: metrics[k] for k in LOG_COLUMNS[1:-1]}, "chamfer": None}
            if evaluator is not None and tcfg.eval_every and n % tcfg.eval_every == 0:
                row["chamfer"] = float(evaluator(bundle))
            rows.append(row)
            log.debug("step %d %s", n, row)
        if ckpt is not None and (n % tcfg.checkpoint_every == 0 or n == tcfg.iterations):
            extra = opt.state_arrays(names)
            save_bundle(ckpt, bundle, extra, {"step": n, "log": rows, "direction": _dcfg_dict(dcfg), **(checkpoint_meta or {})})
            last_good = ckpt
    return FitResult(bundle, rows, ckpt)


def _dcfg_dict(dcfg: DirectionalConfig) -> dict:
    d = asdict(dcfg)
    d["mode"] = dcfg.mode.value
    d["fusion_order"] = dcfg.fusion_order.value
    d["pe"] = [dcfg.pe.num_frequencies, dcfg.pe.include_identity]
    return d
