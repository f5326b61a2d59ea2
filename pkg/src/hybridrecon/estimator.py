"""Estimator-style wrapper: fit on rays and pixel colours, predict colours."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dirparam import DirectionalConfig
from .evaluation import extract_surface, field_function
from .render import SamplingConfig, render_rays
from .train import LossWeights, TrainConfig, fit


class NeuralSurfaceReconstructor(BaseEstimator):
    """SDF + radiance field trained by volume rendering.

    ``X`` holds one ray per row as ``[origin, direction]`` (4 columns in 2D,
    6 in 3D); ``y`` holds the RGB colour observed along it.
    """

    def __init__(self, mode: str = "hybrid", gamma_b_init: float = 0.3, detach: bool = True,
                 fusion_order: str = "pre", iterations: int = 5000, rays_per_batch: int = 256,
                 base_lr: float = 5e-4, warmup_steps: int = 500, n_coarse: int = 32,
                 n_importance: int = 32, sdf_width: int = 64, rad_width: int = 64,
                 feature_width: int = 32, eikonal_weight: float = 0.1, mask_weight: float = 0.1,
                 random_state: int = 0):
        self.mode = mode
        self.gamma_b_init = gamma_b_init
        self.detach = detach
        self.fusion_order = fusion_order
        self.iterations = iterations
        self.rays_per_batch = rays_per_batch
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.n_coarse = n_coarse
        self.n_importance = n_importance
        self.sdf_width = sdf_width
        self.rad_width = rad_width
        self.feature_width = feature_width
        self.eikonal_weight = eikonal_weight
        self.mask_weight = mask_weight
        self.random_state = random_state

    def _configs(self):
        dcfg = DirectionalConfig(mode=self.mode, fusion_order=self.fusion_order, detach=self.detach,
                                 gamma_b_init=self.gamma_b_init)
        tcfg = TrainConfig(iterations=self.iterations, rays_per_batch=self.rays_per_batch,
                           base_lr=self.base_lr, warmup_steps=min(self.warmup_steps, self.iterations),
                           log_every=max(1, min(50, self.iterations)), eval_every=0, seed=self.random_state)
        sampling = SamplingConfig(n_coarse=self.n_coarse, n_importance=self.n_importance)
        weights = LossWeights(1.0, self.eikonal_weight, self.mask_weight)
        return dcfg, tcfg, sampling, weights

    def fit(self, X, y, mask=None):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if X.shape[1] not in (4, 6):
            raise ValueError(f"X must have 4 (2D) or 6 (3D) columns, got {X.shape[1]}")
        if y.ndim != 2 or y.shape[1] != 3:
            raise ValueError("y must be an (n, 3) array of RGB colours")
        mask = np.ones(len(X)) if mask is None else check_array(mask, ensure_2d=False, dtype=np.float64)
        if len(mask) != len(X):
            raise ValueError("mask length does not match X")
        dcfg, tcfg, sampling, weights = self._configs()
        result = fit(X, y, mask, dcfg, tcfg, sampling, weights,
                     bundle_kwargs=dict(sdf_width=self.sdf_width, rad_width=self.rad_width,
                                        feature_width=self.feature_width))
        self.field_ = result.bundle
        self.log_ = result.log
        self.n_features_in_ = X.shape[1]
        self.dim_ = X.shape[1] // 2
        return self

    def _check(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X

    def predict(self, X, chunk: int = 2048) -> np.ndarray:
        """Rendered RGB per ray (deterministic sample placement)."""
        X = self._check(X)
        dcfg, _, sampling, _ = self._configs()
        sampling = SamplingConfig(sampling.n_coarse, sampling.n_importance, perturb=False)
        D = self.dim_
        out = []
        for i in range(0, len(X), chunk):
            r = render_rays(self.field_, dcfg, X[i:i + chunk, :D], X[i:i + chunk, D:], sampling)
            out.append(r.color.detach().numpy())
        return np.concatenate(out)

    def predict_sdf(self, points) -> np.ndarray:
        check_is_fitted(self, "field_")
        pts = check_array(points, dtype=np.float64)
        with torch.no_grad():
            return self.field_.sdf(torch.as_tensor(pts))[0].numpy()

    def extract_surface(self, resolution: int | None = None):
        check_is_fitted(self, "field_")
        return extract_surface(field_function(self.field_, 0.99), self.dim_, resolution)

    def score(self, X, y) -> float:
        """PSNR of the predicted colours in dB."""
        y = check_array(y, dtype=np.float64)
        mse = float(np.mean((self.predict(X) - y) ** 2))
        return float("inf") if mse == 0 else -10.0 * np.log10(mse)
