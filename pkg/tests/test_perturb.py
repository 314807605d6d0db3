import numpy as np
import pytest

from dreamda import perturb
from dreamda.denoiser import predict_noise
from dreamda.perturb import (
    SITES,
    PerturbSpec,
    generate_dataset,
    generate_variants,
    mean_pairwise_distance,
    perturb_study,
    perturbed_ddim_step,
    stream,
)
from dreamda.sampler import ddim_step, reconstruct
from dreamda.schedule import make_grid, make_schedule

from test_denoiser import live_model

SCHED = make_schedule()
GRID = make_grid(1000, 5)


@pytest.fixture(scope="module")
def model():
    return live_model(seed=3)


@pytest.fixture(scope="module")
def seeds():
    r = np.random.default_rng(8)
    return r.uniform(-1, 1, (3, 1, 8, 8)).astype(np.float32), np.array([0, 1, 2])


@pytest.mark.parametrize("kwargs", [{"sigma_h": -1.0}, {"n_variants": 0}, {"site": "nowhere"}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        PerturbSpec(**kwargs)


def test_zero_sigma_step_equals_clean_ddim_step(model, seeds):
    x, c = seeds
    x = x.astype(np.float64)
    got = perturbed_ddim_step(model, x, 600, 400, c, 0.0, SCHED, np.random.default_rng(0))
    eps = predict_noise(model, x, 600, c)
    assert np.array_equal(got, ddim_step(x, eps, eps, 600, 400, SCHED))


def test_default_sigma_changes_the_step_and_is_repeatable(model, seeds):
    x, c = seeds
    x = x.astype(np.float64)
    a = perturbed_ddim_step(model, x, 600, 400, c, 3.0, SCHED, np.random.default_rng(0))
    b = perturbed_ddim_step(model, x, 600, 400, c, 3.0, SCHED, np.random.default_rng(0))
    clean = perturbed_ddim_step(model, x, 600, 400, c, 0.0, SCHED, np.random.default_rng(0))
    assert np.linalg.norm(a - clean) > 0 and np.array_equal(a, b)
    with pytest.raises(ValueError):
        perturbed_ddim_step(model, x, 600, 400, c, -0.1, SCHED, np.random.default_rng(0))


def test_zero_sigma_variants_bit_equal_reconstruction(model, seeds):
    x, c = seeds
    spec = PerturbSpec(sigma_h=0.0, n_variants=4, grid=GRID)
    for i in range(3):
        recon = reconstruct(model, x[i:i + 1], GRID, c[i:i + 1], SCHED)
        for rec in generate_variants(model, x[i], int(c[i]), spec, SCHED, master_seed=0, seed_index=i):
            assert np.array_equal(rec.image, recon[0])


def test_variants_differ_pairwise_and_stay_in_range(model, seeds):
    x, c = seeds
    recs = generate_variants(model, x[0], 0, PerturbSpec(sigma_h=3.0, n_variants=8, grid=GRID), SCHED, 0)
    imgs = np.stack([r.image for r in recs])
    flat = imgs.reshape(8, -1)
    d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
    assert np.all(d[np.triu_indices(8, 1)] > 0)
    assert np.all(np.isfinite(imgs)) and imgs.min() >= -1 and imgs.max() <= 1
    assert [r.variant_index for r in recs] == list(range(8))
    assert {r.seed_label for r in recs} == {0}


def test_inversion_runs_once_per_seed(model, seeds, monkeypatch):
    calls = []
    real = perturb.ddim_invert

    def counting(m, images, *a, **k):
        calls.append(len(images))
        return real(m, images, *a, **k)

    monkeypatch.setattr(perturb, "ddim_invert", counting)
    x, c = seeds
    generate_variants(model, x[0], 0, PerturbSpec(n_variants=6, grid=GRID), SCHED, 0)
    assert calls == [1]
    calls.clear()
    generate_dataset(model, x, c, PerturbSpec(n_variants=5, grid=GRID), SCHED, 0, chunk=2)
    assert sum(calls) == 3


def test_dataset_is_independent_of_workers_and_chunking(model, seeds):
    x, c = seeds
    spec = PerturbSpec(sigma_h=3.0, n_variants=3, grid=GRID)
    ref = generate_dataset(model, x, c, spec, SCHED, 7, workers=1, chunk=64)
    for workers, chunk in [(4, 1), (2, 5)]:
        got = generate_dataset(model, x, c, spec, SCHED, 7, workers=workers, chunk=chunk)
        assert [(r.seed_index, r.variant_index, r.stream_id) for r in got] == \
               [(r.seed_index, r.variant_index, r.stream_id) for r in ref]
        assert all(np.array_equal(a.image, b.image) for a, b in zip(got, ref))


def test_single_seed_and_dataset_paths_agree(model, seeds):
    x, c = seeds
    spec = PerturbSpec(sigma_h=1.0, n_variants=2, grid=GRID)
    batch = generate_dataset(model, x, c, spec, SCHED, 5)
    one = generate_variants(model, x[1], int(c[1]), spec, SCHED, 5, seed_index=1)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(batch[2:4], one))


def test_master_seed_changes_variants(model, seeds):
    x, c = seeds
    spec = PerturbSpec(sigma_h=3.0, n_variants=2, grid=GRID)
    a = generate_variants(model, x[0], 0, spec, SCHED, 0)
    b = generate_variants(model, x[0], 0, spec, SCHED, 1)
    assert not np.array_equal(a[0].image, b[0].image)


def test_streams_are_keyed_by_all_four_indices():
    draws = {k: stream(*k).standard_normal() for k in [(0, 0, 0, 1), (1, 0, 0, 1), (0, 1, 0, 1),
                                                       (0, 0, 1, 1), (0, 0, 0, 2)]}
    assert len(set(draws.values())) == 5
    assert stream(0, 0, 0, 1).standard_normal() == draws[(0, 0, 0, 1)]


@pytest.mark.parametrize("site", SITES)
def test_every_site_yields_n_records_per_seed(model, seeds, site):
    x, c = seeds
    imgs, labs, idx = perturb_study(model, x, c, site, 1.0, SCHED, 0, n_variants=2, grid=GRID)
    assert imgs.shape == (6, 1, 8, 8) and list(idx) == [0, 0, 1, 1, 2, 2]
    assert list(labs) == [0, 0, 1, 1, 2, 2]


@pytest.mark.parametrize("site", ["latent_xT", "latent_x0", "latent_all_steps", "unet_decoder"])
def test_zero_sigma_collapses_every_site_to_reconstruction(model, seeds, site):
    x, c = seeds
    imgs, _, _ = perturb_study(model, x, c, site, 0.0, SCHED, 0, n_variants=1, grid=GRID)
    assert np.array_equal(imgs, reconstruct(model, x, GRID, c, SCHED).astype(np.float32))


def test_unknown_site_rejected(model, seeds):
    x, c = seeds
    with pytest.raises(ValueError, match="site"):
        perturb_study(model, x, c, "mid", 1.0, SCHED, 0, grid=GRID)


def test_mean_pairwise_distance_hand_value():
    v = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])
    assert mean_pairwise_distance(v) == pytest.approx(10 / 3)
    assert mean_pairwise_distance(v[:1]) == 0.0
