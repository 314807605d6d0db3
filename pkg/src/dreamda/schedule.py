"""Closed-form diffusion coefficients.

``alpha_bar`` is indexed from 0 with ``alpha_bar[0] = 1`` so that ``t = 0``
is clean data; ``beta`` and ``sigma2`` are padded with a leading NaN so
that ``beta[t]`` reads naturally for ``t = 1..T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def check_step(self, t: int, allow_zero: bool = True):
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def reweighting(self, t: int) -> float:
        """Factor turning the weighted per-step loss into the unweighted one."""
        return 1.0 / elbo_weight(t, self)


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over t = 1..T with reverse variance sigma_t^2 = beta_t."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    beta = np.concatenate([[np.nan], betas])
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = (1.0 - beta[t]) * alpha_bar[t - 1]
    sigma2 = beta.copy()
    for arr in (beta, alpha_bar, sigma2):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma2=sigma2)


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Works on arrays and Tensors."""
    sched.check_step(t)
    if np.shape(eps) != np.shape(x0):
        raise ValueError(f"eps shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample_batch(x0: np.ndarray, ts: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Per-sample timesteps ``ts`` along the leading axis."""
    ab = sched.alpha_bar[ts].reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def elbo_weight(t: int, sched: NoiseSchedule) -> float:
    """Per-step weight beta^2 / (2 sigma^2 (1 - beta) (1 - abar_t))."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"elbo weight undefined at t={t}; need 1 <= t <= {sched.T}")
    b = sched.beta[t]
    return float(b * b / (2.0 * sched.sigma2[t] * (1.0 - b) * (1.0 - sched.alpha_bar[t])))


@dataclass(frozen=True)
class StepGrid:
    taus: tuple

    def __post_init__(self):
        if not self.taus:
            raise ValueError("empty step grid")
        if any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError("step grid must be strictly increasing")
        if self.taus[0] < 1:
            raise ValueError("step grid must start at t >= 1")

    def __len__(self):
        return len(self.taus)


def make_grid(T: int, steps: int) -> StepGrid:
    """``steps`` evenly spaced timesteps ending exactly at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    taus = np.round(np.linspace(T / steps, T, steps)).astype(int)
    taus = np.maximum.accumulate(np.maximum(taus, 1))
    return StepGrid(tuple(int(t) for t in np.unique(taus)))
