"""Differential-privacy mechanics of the federated protocol.

Two separate mechanisms: per-location embedding contributions are clipped
per coordinate and perturbed with Gaussian noise before upload; model
gradients are norm-clipped and perturbed before upload (DPSGD).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class PrivacyConfig:
    """Privacy budget, clip bounds, noise scales, and decoy count."""

    epsilon: float = 1.0
    delta: float = 0.001
    clip_location: float = 0.1  # C_l, per-coordinate bound on upload deltas
    sigma_location: float = 0.1  # noise std added to every location upload
    clip_gradient: float = 0.1  # C_f, 2-norm bound on per-client gradients
    sigma_gradient: float = 0.1  # noise std added to sanitized gradients
    n_pseudo: int = 2  # decoy trajectories per user

    def __post_init__(self):
        for name in (
            "epsilon",
            "delta",
            "clip_location",
            "sigma_location",
            "clip_gradient",
            "sigma_gradient",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_pseudo < 0:
            raise ValueError("n_pseudo must be non-negative")

    @classmethod
    def off(cls):
        """Everything disabled: no decoys, no noise, no clipping."""
        return cls(
            epsilon=math.inf,
            delta=0.001,
            clip_location=math.inf,
            sigma_location=0.0,
            clip_gradient=math.inf,
            sigma_gradient=0.0,
            n_pseudo=0,
        )

    def with_calibrated_sigma(self, exposures):
        return replace(
            self,
            sigma_location=calibrate_sigma(
                self.epsilon, self.delta, self.clip_location, exposures
            ),
        )


def calibrate_sigma(epsilon, delta, clip_location, exposures):
    """Gaussian-mechanism noise scale L * C_l * sqrt(2 ln(1.25/delta)) / eps.

    ``exposures`` is the number of times a location update is released
    (the training epoch count).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if exposures < 1:
        raise ValueError("exposures must be at least 1")
    return exposures * clip_location * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def clip_coords(values, bound):
    """Per-coordinate clamp to [-bound, bound]; identity for infinite bound."""
    if not np.isfinite(bound):
        return np.asarray(values, dtype=np.float64)
    return np.clip(values, -bound, bound)


def client_embedding_update(
    e_prev_edge,
    e_u_old,
    e_u_new,
    n_rt,
    is_real=True,
    clip_location=np.inf,
    sigma_location=0.0,
    rng=None,
):
    """One client's contribution for one location cell.

    Real cells contribute the previous edge embedding plus the clipped
    per-member update (e_new - e_old) / N_rt; decoy cells contribute a
    zero vector. Gaussian noise of scale ``sigma_location`` is added to
    either kind before upload.
    """
    if n_rt < 1:
        raise ValueError("n_rt must be at least 1")
    e_prev_edge = np.asarray(e_prev_edge, dtype=np.float64)
    if is_real:
        delta = (np.asarray(e_u_new, np.float64) - np.asarray(e_u_old, np.float64)) / n_rt
        out = e_prev_edge + clip_coords(delta, clip_location)
    else:
        out = np.zeros_like(e_prev_edge)
    if sigma_location > 0.0:
        if rng is None:
            raise ValueError("rng required when sigma_location > 0")
        out = out + rng.normal(0.0, sigma_location, size=out.shape)
    return out


def server_aggregate(contributions, e_prev_edge, n_rt):
    """Recover the new edge embedding from member contributions.

    With exact inputs this reproduces the member mean: each of the N_rt
    contributions carries e_prev plus its own update, so subtracting
    (N_rt - 1) previous embeddings leaves the updated mean.
    """
    contributions = [np.asarray(c, dtype=np.float64) for c in contributions]
    if len(contributions) != n_rt:
        raise ValueError(f"expected {n_rt} contributions, got {len(contributions)}")
    e_prev_edge = np.asarray(e_prev_edge, dtype=np.float64)
    total = np.sum(contributions, axis=0)
    return total - (n_rt - 1) * e_prev_edge


def dpsgd_sanitize(gradient, clip_gradient, sigma_gradient, rng):
    """Rescale a flat gradient to 2-norm <= C_f, then add Gaussian noise."""
    if clip_gradient <= 0:
        raise ValueError("clip_gradient must be positive")
    g = np.asarray(gradient, dtype=np.float64)
    if np.isfinite(clip_gradient):
        norm = float(np.linalg.norm(g))
        if norm > clip_gradient:
            g = g * (clip_gradient / norm)
    if sigma_gradient > 0.0:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        g = g + rng.normal(0.0, sigma_gradient, size=g.shape)
    return g
