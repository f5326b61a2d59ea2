"""Shared independent oracles (plain numpy / math, no package internals)."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def np_pe(v: np.ndarray, n_freq: int, identity: bool = True) -> np.ndarray:
    v = np.atleast_2d(np.asarray(v, dtype=float))
    parts = [v] if identity else []
    for k in range(n_freq):
        parts += [np.sin(2.0**k * math.pi * v), np.cos(2.0**k * math.pi * v)]
    return np.concatenate(parts, axis=1) if parts else v[:, :0]


def np_mlp(params: list[np.ndarray], depth: int, skips, x: np.ndarray, act: str = "softplus",
           beta: float = 100.0, out_act: str = "none") -> np.ndarray:
    def a(h, name):
        if name == "softplus":
            return np.logaddexp(beta * h, 0.0) / beta
        if name == "relu":
            return np.maximum(h, 0.0)
        if name == "sigmoid":
            return 1.0 / (1.0 + np.exp(-h))
        return h

    h = x
    for l in range(depth + 1):
        if l in skips:
            h = np.concatenate([h, x], axis=1) / math.sqrt(2.0)
        h = h @ params[2 * l].T + params[2 * l + 1]
        if l < depth:
            h = a(h, act)
    return a(h, out_act)


def central_fd(fun, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
