from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hybridrecon import NeuralSurfaceReconstructor
from hybridrecon.evaluation import Polylines
from hybridrecon.scenes import flatland_rig, generate_dataset, get_scene

TINY = dict(iterations=30, rays_per_batch=16, warmup_steps=5, n_coarse=8, n_importance=4,
            sdf_width=32, rad_width=16, feature_width=4)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(get_scene("flat2d-disk"), rig=flatland_rig(8, 32)).to_arrays()


@pytest.fixture(scope="module")
def fitted(data):
    X, y, m = data
    return NeuralSurfaceReconstructor(**TINY).fit(X, y, m)


def test_params_roundtrip():
    est = NeuralSurfaceReconstructor(mode="viewing", gamma_b_init=0.1)
    params = est.get_params()
    assert params["mode"] == "viewing" and params["gamma_b_init"] == 0.1
    twin = clone(est)
    assert twin.get_params() == params


def test_predict_shapes_and_determinism(fitted, data):
    X, y, _ = data
    pred = fitted.predict(X[:40])
    assert pred.shape == (40, 3) and np.all((pred >= 0) & (pred <= 1))
    assert np.array_equal(pred, fitted.predict(X[:40]))
    assert np.isfinite(fitted.score(X[:40], y[:40]))
    assert fitted.predict_sdf(np.zeros((1, 2))).shape == (1,)
    assert len(fitted.log_) == 1
    assert isinstance(fitted.extract_surface(32), Polylines)


def test_same_seed_same_model(fitted, data):
    X, y, m = data
    other = NeuralSurfaceReconstructor(**TINY).fit(X, y, m)
    assert np.array_equal(fitted.predict(X[:20]), other.predict(X[:20]))


def test_input_validation(fitted, data):
    X, y, m = data
    with pytest.raises(NotFittedError):
        NeuralSurfaceReconstructor().predict(X)
    with pytest.raises(ValueError):
        NeuralSurfaceReconstructor(**TINY).fit(X[:, :3], y)
    with pytest.raises(ValueError):
        NeuralSurfaceReconstructor(**TINY).fit(X, y, m[:5])
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 6)))
    with pytest.raises(ValueError):
        NeuralSurfaceReconstructor(**TINY).fit(np.full_like(X, np.nan), y)
