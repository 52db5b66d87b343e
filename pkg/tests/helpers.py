"""Finite-difference oracles and random fixtures shared by the tests."""

import numpy as np


def random_spd(rng, n, floor=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + floor * np.eye(n)


def central_diff(fun, x, h=1e-5):
    """Gradient of scalar ``fun`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fun(x)
        x[i] = old - h
        down = fun(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
