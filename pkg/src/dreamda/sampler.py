"""Denoising objective, ancestral sampling, DDIM sampling and DDIM inversion.

Sampler state is carried in float64; the network sees float32 copies. A
"predictor" is anything callable as ``predictor(x_t, t, cond) -> eps`` on
NCHW arrays; a :class:`~dreamda.denoiser.Denoiser` is wrapped automatically.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, predict_noise, to_nhwc
from .ndgrad import Tensor, check_finite, grad, ops
from .ndgrad.nn import cosine_lr, make_optimizer
from .schedule import NoiseSchedule, StepGrid, q_sample_batch

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    direction: str
    steps: list = field(default_factory=list)

    def append(self, t: int, x: np.ndarray):
        if self.steps:
            last = self.steps[-1][0]
            ok = t > last if self.direction == "forward" else t < last
            if not ok:
                raise ValueError(f"non-monotone {self.direction} trajectory: {last} -> {t}")
        self.steps.append((int(t), x))

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.steps]

    def stacked(self) -> np.ndarray:
        return np.stack([x for _, x in self.steps])


def as_predictor(model):
    if isinstance(model, Denoiser):
        return lambda x, t, cond: predict_noise(model, x, t, cond)
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a noise predictor")


# -- training ------------------------------------------------------------------

def simple_loss(model, x0: np.ndarray, cond, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Unweighted denoising loss, per-element mean over the batch.

    ``model`` is called as ``model(x_t_nhwc: Tensor, t: array, cond) -> Tensor``.
    """
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ValueError("simple_loss needs a nonempty batch")
    ts = rng.integers(1, sched.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample_batch(x0, ts, eps, sched)
    pred = model(Tensor(to_nhwc(x_t)), ts, cond)
    diff = Tensor(to_nhwc(eps).astype(pred.dtype, copy=False)) - pred
    return ops.mean(diff * diff)


@dataclass
class DiffusionTrainConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0


def train_diffusion(model: Denoiser, images: np.ndarray, labels: np.ndarray, sched: NoiseSchedule,
                    cfg: DiffusionTrainConfig, callback=None) -> list[float]:
    """Minibatch training of the noise predictor; returns per-step losses."""
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch))
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch):
            idx = order[s:s + cfg.batch]
            loss = simple_loss(model, images[idx], labels[idx], sched, rng)
            check_finite(loss, "diffusion loss")
            grads = grad(loss, params)
            opt.lr = cosine_lr(cfg.lr, step, total)
            opt.step(grads)
            history.append(loss.item())
            step += 1
        log.info("diffusion epoch %d/%d loss %.4f", epoch + 1, cfg.epochs,
                 float(np.mean(history[-steps_per_epoch:])))
        if callback is not None:
            callback(epoch, history)
    return history


# -- ancestral sampling --------------------------------------------------------

def ancestral_step(model, x_t: np.ndarray, t: int, cond, sched: NoiseSchedule, rng=None,
                   z: np.ndarray | None = None) -> np.ndarray:
    """One reverse step of the Markov chain with sigma_t^2 = beta_t; no noise at t = 1."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"ancestral step needs 1 <= t <= {sched.T}, got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(as_predictor(model)(x_t, t, cond), dtype=np.float64)
    beta = float(sched.beta[t])
    mean = (x_t - beta / math.sqrt(1.0 - sched.alpha_bar[t]) * eps) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if z is None:
        z = rng.standard_normal(x_t.shape)
    return mean + math.sqrt(sched.sigma2[t]) * z


def ancestral_sample(model, x_T: np.ndarray, cond, sched: NoiseSchedule, rng) -> np.ndarray:
    x = np.asarray(x_T, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        x = ancestral_step(model, x, t, cond, sched, rng)
    return x


# -- DDIM ----------------------------------------------------------------------

def predicted_x0(x_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    ab = float(sched.alpha_bar[t])
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def x0_term(x_t, eps, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Scaled predicted-x0 part of a DDIM step."""
    return math.sqrt(float(sched.alpha_bar[t_prev])) * predicted_x0(x_t, eps, t, sched)


def direction_term(eps, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Direction-pointing-to-x_t part of a DDIM step."""
    return math.sqrt(1.0 - float(sched.alpha_bar[t_prev])) * eps


def ddim_step(x_t, eps_for_x0, eps_for_dir, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM move t -> t_prev; the two eps may differ (perturbed split)."""
    if t_prev >= t:
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    sched.check_step(t, allow_zero=False)
    sched.check_step(t_prev)
    x_t = np.asarray(x_t, dtype=np.float64)
    e0 = np.asarray(eps_for_x0, dtype=np.float64)
    ed = np.asarray(eps_for_dir, dtype=np.float64)
    if e0.shape != x_t.shape or ed.shape != x_t.shape:
        raise ValueError(f"eps shapes {e0.shape}, {ed.shape} do not match x_t {x_t.shape}")
    return x0_term(x_t, e0, t, t_prev, sched) + direction_term(ed, t_prev, sched)


def ddim_invert_step(x_t, eps, t: int, t_next: int, sched: NoiseSchedule) -> np.ndarray:
    """Move t -> t_next > t along the deterministic ODE."""
    if t_next <= t:
        raise ValueError(f"inversion needs t_next > t, got {t} -> {t_next}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    return x0_term(x_t, eps, t, t_next, sched) + direction_term(eps, t_next, sched)


def _levels(grid: StepGrid) -> list[int]:
    if grid is None or len(grid) == 0:
        raise ValueError("empty step grid")
    return [0] + list(grid.taus)


def ddim_sample(model, x_T, grid: StepGrid, cond, sched: NoiseSchedule,
                keep_trajectory: bool = True):
    """Run DDIM from the top of ``grid`` down to t = 0. Returns (x_0, Trajectory)."""
    predictor = as_predictor(model)
    levels = _levels(grid)
    x = np.asarray(x_T, dtype=np.float64)
    traj = Trajectory("reverse")
    if keep_trajectory:
        traj.append(levels[-1], x)
    for i in range(len(levels) - 1, 0, -1):
        t, t_prev = levels[i], levels[i - 1]
        eps = predictor(x, t, cond)
        x = ddim_step(x, eps, eps, t, t_prev, sched)
        if keep_trajectory:
            traj.append(t_prev, x)
    return x, traj


def ddim_invert(model, x_0, grid: StepGrid, cond, sched: NoiseSchedule,
                keep_trajectory: bool = True):
    """Map clean data to the top of ``grid``. Returns (x_T, Trajectory).

    Each move t -> t_next uses eps evaluated at (x_t, t); the first move from
    t = 0 evaluates the predictor at the first grid level since the network
    is only defined for t >= 1.
    """
    predictor = as_predictor(model)
    levels = _levels(grid)
    x = np.asarray(x_0, dtype=np.float64)
    traj = Trajectory("forward")
    if keep_trajectory:
        traj.append(0, x)
    for i in range(len(levels) - 1):
        t, t_next = levels[i], levels[i + 1]
        eps = predictor(x, max(t, levels[1]), cond)
        x = ddim_invert_step(x, eps, t, t_next, sched)
        if keep_trajectory:
            traj.append(t_next, x)
    return x, traj


def reconstruct(model, x_0, grid: StepGrid, cond, sched: NoiseSchedule, clamp: bool = True) -> np.ndarray:
    """Invert then regenerate; clamped to the data range like generated variants."""
    x_T, _ = ddim_invert(model, x_0, grid, cond, sched, keep_trajectory=False)
    x0_hat, _ = ddim_sample(model, x_T, grid, cond, sched, keep_trajectory=False)
    return np.clip(x0_hat, -1.0, 1.0) if clamp else x0_hat
