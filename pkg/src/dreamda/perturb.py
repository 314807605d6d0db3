"""Perturbed reverse diffusion from inverted seed latents.

Every (seed, variant, step) draws its noise from its own stream derived
from ``(master_seed, seed_index, variant_index, t)``; combined with the
row-stable matrix products in :mod:`dreamda.ndgrad.ops` this makes the
output independent of batching, chunking and worker count.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .denoiser import (
    DECODER_SITES,
    ENCODER_SITES,
    Denoiser,
    predict_noise,
    predict_noise_pair,
    predict_noise_sites,
)
from .sampler import ddim_invert, ddim_step
from .schedule import NoiseSchedule, StepGrid

log = logging.getLogger(__name__)

SITES = ("bottleneck", "latent_x0", "latent_xT", "latent_all_steps", "unet_encoder", "unet_decoder")
# stream tag for one-shot draws (x_T and x_0 sites); grid steps use t >= 1
ONE_SHOT = 0


@dataclass(frozen=True)
class PerturbSpec:
    sigma_h: float = 3.0
    n_variants: int = 10
    site: str = "bottleneck"
    grid: StepGrid | None = None

    def __post_init__(self):
        if self.sigma_h < 0:
            raise ValueError(f"sigma_h must be >= 0, got {self.sigma_h}")
        if self.n_variants < 1:
            raise ValueError(f"n_variants must be >= 1, got {self.n_variants}")
        if self.site not in SITES:
            raise ValueError(f"unknown perturbation site {self.site!r}; expected one of {SITES}")


@dataclass
class VariantRecord:
    seed_index: int
    variant_index: int
    image: np.ndarray
    seed_label: int
    stream_id: str


def stream(master_seed: int, seed_index: int, variant_index: int, t: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, seed_index, variant_index, t])


def stream_id(master_seed: int, seed_index: int, variant_index: int) -> str:
    return f"{master_seed}/{seed_index}/{variant_index}"


def _draw(rngs, sigma: float, shape: tuple) -> np.ndarray:
    """One draw of ``shape`` per stream, stacked along a new batch axis."""
    return np.stack([sigma * r.standard_normal(shape) for r in rngs]).astype(np.float32)


def perturbed_ddim_step(model: Denoiser, x_t, t: int, t_prev: int, cond, sigma_h: float,
                        sched: NoiseSchedule, rng) -> np.ndarray:
    """DDIM step whose predicted-x0 term uses the bottleneck-perturbed noise estimate
    and whose direction term uses the clean one.

    ``rng`` is a Generator (shared by the batch) or a sequence with one
    Generator per batch row.
    """
    if sigma_h < 0:
        raise ValueError(f"sigma_h must be >= 0, got {sigma_h}")
    x_t = np.asarray(x_t)
    rngs = rng if isinstance(rng, (list, tuple)) else None
    if rngs is None:
        eps_h = (sigma_h * rng.standard_normal((x_t.shape[0],) + model.bottleneck_shape)).astype(np.float32)
    else:
        eps_h = _draw(rngs, sigma_h, model.bottleneck_shape)
    eps_clean, eps_pert = predict_noise_pair(model, x_t, t, cond, eps_h)
    return ddim_step(x_t, eps_pert, eps_clean, t, t_prev, sched)


# -- batched reverse processes ---------------------------------------------------

@dataclass
class _Job:
    """A chunk of (seed, variant) rows sharing nothing but the model."""
    x_T: np.ndarray
    cond: np.ndarray
    seed_idx: np.ndarray
    var_idx: np.ndarray


def _reverse_chunk(model: Denoiser, job: _Job, site: str, sigma: float, grid: StepGrid,
                   sched: NoiseSchedule, master_seed: int) -> tuple[np.ndarray, np.ndarray]:
    levels = [0] + list(grid.taus)
    rows = list(zip(job.seed_idx.tolist(), job.var_idx.tolist()))
    shapes = model.site_shapes()
    x = np.asarray(job.x_T, dtype=np.float64)
    if site == "latent_xT":
        x = x + _draw([stream(master_seed, s, v, ONE_SHOT) for s, v in rows], sigma, x.shape[1:])
    ok = np.ones(len(rows), dtype=bool)
    for i in range(len(levels) - 1, 0, -1):
        t, t_prev = levels[i], levels[i - 1]
        if site == "bottleneck":
            rngs = [stream(master_seed, s, v, t) for s, v in rows]
            x = perturbed_ddim_step(model, x, t, t_prev, job.cond, sigma, sched, rngs)
        elif site in ("unet_encoder", "unet_decoder"):
            names = ENCODER_SITES if site == "unet_encoder" else DECODER_SITES
            rngs = [stream(master_seed, s, v, t) for s, v in rows]
            noise = {k: _draw(rngs, sigma, shapes[k]) for k in names}
            eps_clean, eps_pert = predict_noise_sites(model, x, t, job.cond, noise)
            x = ddim_step(x, eps_pert, eps_clean, t, t_prev, sched)
        else:
            eps = predict_noise(model, x, t, job.cond)
            x = ddim_step(x, eps, eps, t, t_prev, sched)
            if site == "latent_all_steps" and t_prev >= 1:
                x = x + _draw([stream(master_seed, s, v, t) for s, v in rows], sigma, x.shape[1:])
        finite = np.isfinite(x).reshape(len(rows), -1).all(axis=1)
        if not finite.all():
            ok &= finite
            x = np.where(finite.reshape((-1,) + (1,) * (x.ndim - 1)), x, 0.0)
    if site == "latent_x0":
        x = x + _draw([stream(master_seed, s, v, ONE_SHOT) for s, v in rows], sigma, x.shape[1:])
    return np.clip(x, -1.0, 1.0), ok


def invert_seeds(model: Denoiser, images: np.ndarray, labels: np.ndarray, grid: StepGrid,
                 sched: NoiseSchedule, chunk: int = 64, workers: int = 1) -> np.ndarray:
    """DDIM-invert every seed exactly once (batched in fixed chunks)."""
    starts = list(range(0, len(images), chunk))

    def run(s):
        x_T, _ = ddim_invert(model, images[s:s + chunk], grid, labels[s:s + chunk], sched,
                             keep_trajectory=False)
        return x_T

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(run, starts))
    return np.concatenate(parts) if parts else np.zeros((0,) + images.shape[1:])


def generate_dataset(model: Denoiser, images: np.ndarray, labels: np.ndarray, spec: PerturbSpec,
                     sched: NoiseSchedule, master_seed: int, workers: int = 1, chunk: int = 64,
                     x_T: np.ndarray | None = None) -> list[VariantRecord]:
    """Variants for every seed image; records ordered by (seed, variant)."""
    if spec.grid is None:
        raise ValueError("PerturbSpec.grid is required")
    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64)
    if x_T is None:
        x_T = invert_seeds(model, images, labels, spec.grid, sched, chunk=chunk, workers=workers)
    n = spec.n_variants
    seed_idx = np.repeat(np.arange(len(images)), n)
    var_idx = np.tile(np.arange(n), len(images))
    jobs = [_Job(x_T[seed_idx[s:s + chunk]], labels[seed_idx[s:s + chunk]],
                 seed_idx[s:s + chunk], var_idx[s:s + chunk])
            for s in range(0, len(seed_idx), chunk)]

    def run(job):
        return _reverse_chunk(model, job, spec.site, spec.sigma_h, spec.grid, sched, master_seed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, jobs))
    records = []
    for job, (imgs, ok) in zip(jobs, results):
        for k in range(len(imgs)):
            s, v = int(job.seed_idx[k]), int(job.var_idx[k])
            if not ok[k]:
                log.warning("variant %s aborted: non-finite intermediate", stream_id(master_seed, s, v))
                continue
            records.append(VariantRecord(s, v, imgs[k], int(labels[s]), stream_id(master_seed, s, v)))
    return records


def generate_variants(model: Denoiser, seed_image: np.ndarray, cond: int, spec: PerturbSpec,
                      sched: NoiseSchedule, master_seed: int, seed_index: int = 0) -> list[VariantRecord]:
    """Invert one seed once, then run ``n_variants`` perturbed reverse processes from it."""
    if spec.grid is None:
        raise ValueError("PerturbSpec.grid is required")
    seed = np.asarray(seed_image)[None]
    cond_arr = np.array([cond], dtype=np.int64)
    x_T, _ = ddim_invert(model, seed, spec.grid, cond_arr, sched, keep_trajectory=False)
    n = spec.n_variants
    job = _Job(np.repeat(x_T, n, axis=0), np.full(n, cond, dtype=np.int64),
               np.full(n, seed_index), np.arange(n))
    imgs, ok = _reverse_chunk(model, job, spec.site, spec.sigma_h, spec.grid, sched, master_seed)
    out = []
    for v in range(n):
        if not ok[v]:
            log.warning("variant %s aborted: non-finite intermediate", stream_id(master_seed, seed_index, v))
            continue
        out.append(VariantRecord(seed_index, v, imgs[v], int(cond), stream_id(master_seed, seed_index, v)))
    return out


def perturb_study(model: Denoiser, images: np.ndarray, labels: np.ndarray, site: str, sigma_h: float,
                  sched: NoiseSchedule, master_seed: int, n_variants: int = 10, grid: StepGrid | None = None,
                  workers: int = 1, x_T: np.ndarray | None = None):
    """Expanded dataset for one perturbation site: (images, provisional labels, seed indices)."""
    spec = PerturbSpec(sigma_h=sigma_h, n_variants=n_variants, site=site, grid=grid)
    records = generate_dataset(model, images, labels, spec, sched, master_seed, workers=workers, x_T=x_T)
    return records_to_arrays(records)


def records_to_arrays(records: list[VariantRecord]):
    if not records:
        return np.zeros((0,)), np.zeros((0,), dtype=np.uint32), np.zeros((0,), dtype=np.uint32)
    imgs = np.stack([r.image for r in records]).astype(np.float32)
    labs = np.array([r.seed_label for r in records], dtype=np.uint32)
    seeds = np.array([r.seed_index for r in records], dtype=np.uint32)
    return imgs, labs, seeds


def mean_pairwise_distance(variants: np.ndarray) -> float:
    """Mean L2 distance over all unordered pairs of one seed's variants."""
    flat = np.asarray(variants, dtype=np.float64).reshape(len(variants), -1)
    n = len(flat)
    if n < 2:
        return 0.0
    d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
    return float(d[np.triu_indices(n, 1)].mean())
