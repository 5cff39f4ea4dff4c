"""Noise schedule, forward noising and deterministic DDIM stepping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    kind: str = "scaled-linear"

    def sqrt_ab(self, t):
        return np.sqrt(self.alpha_bar[t])


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    t: int


def betas(T: int, kind: str = "scaled-linear") -> np.ndarray:
    if kind == "scaled-linear":
        return np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, T) ** 2
    if kind == "linear":
        return np.linspace(1e-4, 0.02, T)
    raise ValueError(f"unknown schedule kind {kind!r}")


def make_schedule(T: int = 1000, kind: str = "scaled-linear") -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"make_schedule: need T >= 2, got {T}")
    ab = np.concatenate([[1.0], np.cumprod(1.0 - betas(T, kind))])
    ab.setflags(write=False)
    return NoiseSchedule(T=T, alpha_bar=ab, kind=kind)


def add_noise(z0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` may be per-batch."""
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"add_noise: shape mismatch {z0.shape} vs {eps.shape}")
    ab = _ab_for(sched.alpha_bar, t, z0.ndim)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def _ab_for(table, t, ndim):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > len(table) - 1):
        raise ValueError(f"timestep out of range: {t}")
    ab = table[t]
    if t.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (ndim - 1))
    return ab


def ddim_step(state: LatentState, eps_hat: np.ndarray, t_prev: int,
              sched: NoiseSchedule) -> LatentState:
    """Deterministic (eta = 0) DDIM update from state.t to t_prev."""
    if t_prev >= state.t or t_prev < 0:
        raise ValueError(f"ddim_step: need 0 <= t_prev < t, got t_prev={t_prev}, t={state.t}")
    if eps_hat.shape != state.z.shape:
        raise ValueError(f"ddim_step: shape mismatch {eps_hat.shape} vs {state.z.shape}")
    ab_t = sched.alpha_bar[state.t]
    ab_p = sched.alpha_bar[t_prev]
    x0 = (state.z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    z = np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * eps_hat
    return LatentState(z=z, t=t_prev)


def inference_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly spaced descending timesteps, ending with the jump to 0."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    stride = T // steps
    ts = [T - k * stride for k in range(steps)]
    return ts + [0]
