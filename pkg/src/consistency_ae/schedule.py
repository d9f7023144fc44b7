"""Noise-level machinery for continuous-time consistency training.

Every function here accepts Python floats, numpy arrays, or torch tensors
where that makes sense (only arithmetic operators are used on the values).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 7.0
    p_mean: float = -1.1
    p_std: float = 2.0
    dt0: float = 0.1
    e_k: float = 3.0
    total_iters: int = 800_000
    huber_scale: float = 0.00054

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0 or self.rho <= 0 or self.p_std <= 0:
            raise ValueError("sigma_data, rho and p_std must be positive")
        if not 0.0 < self.dt0 < 1.0:
            raise ValueError(f"dt0 must lie in (0, 1), got {self.dt0}")
        if self.e_k < 1.0:
            raise ValueError(f"e_k must be >= 1, got {self.e_k}")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")


@dataclass
class NoisePair:
    """Adjacent noise levels for one batch; every field has shape ``[B]``."""

    sigma_lo: np.ndarray
    sigma_hi: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray


def _check_range(name, value, lo, hi):
    v = np.asarray(value.detach().cpu() if hasattr(value, "detach") else value, dtype=np.float64)
    if np.any(v < lo) or np.any(v > hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")


def step_size(k, cfg: ScheduleConfig) -> float:
    """Gap between paired timesteps at iteration ``k``; decays from dt0 to dt0**e_k."""
    _check_range("k", k, 0, cfg.total_iters)
    return cfg.dt0 ** ((k / cfg.total_iters) * (cfg.e_k - 1.0) + 1.0)


def t_to_sigma(t, cfg: ScheduleConfig):
    _check_range("t", t, 0.0, 1.0)
    lo = cfg.sigma_min ** (1.0 / cfg.rho)
    hi = cfg.sigma_max ** (1.0 / cfg.rho)
    t = np.asarray(t, dtype=np.float64)
    sigma = (lo + t * (hi - lo)) ** cfg.rho
    # endpoints are pinned; the root/power round trip is not exact in floating point
    sigma = np.where(t == 0.0, cfg.sigma_min, np.where(t == 1.0, cfg.sigma_max, sigma))
    return float(sigma) if sigma.ndim == 0 else sigma


def sigma_to_t(sigma, cfg: ScheduleConfig):
    _check_range("sigma", sigma, cfg.sigma_min, cfg.sigma_max)
    lo = cfg.sigma_min ** (1.0 / cfg.rho)
    hi = cfg.sigma_max ** (1.0 / cfg.rho)
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.clip((sigma ** (1.0 / cfg.rho) - lo) / (hi - lo), 0.0, 1.0)
    t = np.where(sigma == cfg.sigma_min, 0.0, np.where(sigma == cfg.sigma_max, 1.0, t))
    return float(t) if t.ndim == 0 else t


def sample_noise_pair(k: int, rng: np.random.Generator, cfg: ScheduleConfig, size: int = 1) -> NoisePair:
    """Draw ``size`` (sigma_lo, sigma_hi) pairs.

    sigma_hi comes from a lognormal projected onto ``[sigma_min, sigma_max]``;
    its timestep is then shifted down by the current step size (floored at 0).
    A draw that lands exactly on sigma_min would produce an empty gap, so it
    is lifted to ``t_hi = step_size(k)``.
    """
    dt = step_size(k, cfg)
    sigma = np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(size))
    sigma = np.clip(sigma, cfg.sigma_min, cfg.sigma_max)
    t_hi = sigma_to_t(sigma, cfg)
    sigma_hi = t_to_sigma(t_hi, cfg)
    sigma_min = cfg.sigma_min
    degenerate = sigma_hi <= sigma_min
    if np.any(degenerate):
        t_hi = np.where(degenerate, dt, t_hi)
        sigma_hi = t_to_sigma(t_hi, cfg)
    t_lo = np.maximum(t_hi - dt, 0.0)
    sigma_lo = t_to_sigma(t_lo, cfg)
    return NoisePair(sigma_lo=sigma_lo, sigma_hi=sigma_hi, t_lo=t_lo, t_hi=t_hi)


def loss_weight(sigma_lo, sigma_hi):
    gap = sigma_hi - sigma_lo
    if np.any(np.asarray(gap) <= 0):
        raise ValueError("degenerate noise pair: sigma_hi must exceed sigma_lo")
    return 1.0 / gap


def consistency_scalings(sigma, cfg: ScheduleConfig):
    """Return ``(c_skip, c_out, c_in)`` at noise level ``sigma``.

    ``sigma - sigma_min`` is an exact zero at the lower boundary, so
    ``c_skip == 1`` and ``c_out == 0`` hold bit-for-bit there.
    """
    _check_range("sigma", sigma, cfg.sigma_min, cfg.sigma_max)
    sd2 = cfg.sigma_data**2
    shifted = sigma - cfg.sigma_min
    c_skip = sd2 / (shifted**2 + sd2)
    c_out = cfg.sigma_data * shifted / (sigma**2 + sd2) ** 0.5
    c_in = 1.0 / (sigma**2 + sd2) ** 0.5
    return c_skip, c_out, c_in


def huber_constant(n_elements: int, scale: float = 0.00054) -> float:
    return scale * math.sqrt(n_elements)


def pseudo_huber(x, y, c: float, batch_dims: int = 0):
    """``sqrt(||x - y||^2 + c^2) - c`` with the norm taken over all non-batch axes.

    Written as ``s / (sqrt(s + c^2) + c)`` to avoid cancellation for small
    residuals.  Works on numpy arrays and torch tensors.
    """
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if c <= 0:
        raise ValueError("c must be positive")
    diff = x - y
    lead = tuple(diff.shape[:batch_dims])
    sq = (diff * diff).reshape(lead + (-1,)).sum(-1)
    return sq / ((sq + c * c) ** 0.5 + c)
