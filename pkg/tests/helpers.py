"""Shared test utilities: finite-difference gradient checking and small
world builders."""

import numpy as np

from fedepi.config import load_config
from fedepi import pipeline


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar f at array x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad


def assert_grad_close(analytic, numeric, rel_tol=1e-4):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    assert np.abs(analytic - numeric).max() / scale < rel_tol, (
        f"gradient mismatch: max abs diff {np.abs(analytic - numeric).max()}, scale {scale}"
    )


def tiny_config(**over):
    overrides = [
        "mobility.n_users=80",
        "mobility.n_regions=16",
        "mobility.n_intervals=24",
        "disease.n_seed_infections=6",
        "model.embed_dim=8",
        "model.hidden_dim=8",
        "model.epochs=10",
        "macro.epochs=5",
        "macro.encoder_len=8",
        "macro.horizon=4",
        "macro.hidden_dim=4",
    ]
    overrides += [f"{k}={v}" for k, v in over.items()]
    return load_config(overrides=overrides)


def tiny_base(**over):
    return pipeline.build_base_world(tiny_config(**over))
