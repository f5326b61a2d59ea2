"""Neural implicit surface reconstruction with a hybrid directional input."""

from __future__ import annotations

__version__ = "0.1.0"

from .dirparam import DirectionalConfig, FusionOrder, Mode
from .estimator import NeuralSurfaceReconstructor
from .scenes import builtin_scenes, generate_dataset, get_scene

__all__ = [
    "DirectionalConfig", "FusionOrder", "Mode", "NeuralSurfaceReconstructor",
    "builtin_scenes", "generate_dataset", "get_scene", "__version__",
]
