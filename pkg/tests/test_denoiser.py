import numpy as np
import pytest

from dreamda.dataio import load_tensors
from dreamda.denoiser import (
    DenoiserConfig,
    init_denoiser,
    load_denoiser,
    predict_noise,
    predict_noise_pair,
    predict_noise_sites,
    save_denoiser,
)
from dreamda.ndgrad import grad_check
from dreamda.sampler import simple_loss
from dreamda.schedule import make_schedule

TINY = DenoiserConfig(resolution=8, channels=(4, 8, 8), num_classes=3, time_dim=8, embed_dim=8)


def live_model(seed=0, dtype=np.float32):
    """Tiny denoiser with a randomized output head so predictions are non-zero."""
    m = init_denoiser(TINY, rng=seed)
    r = np.random.default_rng(seed + 1)
    m.conv_out.weight.data[...] = 0.3 * r.standard_normal(m.conv_out.weight.shape)
    return m.to(dtype)


def batch(rng, n=3, res=8):
    return rng.uniform(-1, 1, (n, 1, res, res)).astype(np.float32), np.arange(n) % 3


def test_zero_init_head_predicts_zero(rng):
    m = init_denoiser(TINY, rng=0)
    x, c = batch(rng)
    assert np.all(predict_noise(m, x, 10, c) == 0)


def test_prediction_is_deterministic_and_shape_preserving(rng):
    m = live_model()
    x, c = batch(rng)
    a, b = predict_noise(m, x, 100, c), predict_noise(m, x, 100, c)
    assert a.shape == x.shape and np.array_equal(a, b)


def test_default_geometry():
    m = init_denoiser(DenoiserConfig(), rng=0)
    assert m.bottleneck_shape == (128, 4, 4)


def test_same_seed_same_parameters():
    a, b = init_denoiser(TINY, rng=5), init_denoiser(TINY, rng=5)
    assert a.num_parameters() == b.num_parameters()
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and np.array_equal(va, vb)


def test_resolution_must_divide_by_four():
    with pytest.raises(ValueError):
        init_denoiser(DenoiserConfig(resolution=10), rng=0)


def test_input_shape_mismatch_and_bad_timestep(rng):
    m = live_model()
    with pytest.raises(ValueError, match="shape"):
        predict_noise(m, np.zeros((1, 1, 16, 16), np.float32), 5, [0])
    with pytest.raises(ValueError, match="timestep"):
        predict_noise(m, np.zeros((1, 1, 8, 8), np.float32), 0, [0])


def test_pair_with_zero_noise_is_identical_and_matches_plain_prediction(rng):
    m = live_model()
    x, c = batch(rng)
    clean, pert = predict_noise_pair(m, x, 50, c, np.zeros((3,) + m.bottleneck_shape))
    assert np.array_equal(clean, pert)
    assert np.array_equal(clean, predict_noise(m, x, 50, c))
    clean2, pert2 = predict_noise_pair(m, x, 50, c, None)
    assert np.array_equal(clean2, pert2)


def test_pair_with_noise_differs_and_is_repeatable(rng):
    m = live_model()
    x, c = batch(rng)
    eps_h = 3.0 * rng.standard_normal((3,) + m.bottleneck_shape)
    a = predict_noise_pair(m, x, 50, c, eps_h)
    b = predict_noise_pair(m, x, 50, c, eps_h)
    assert np.linalg.norm(a[0] - a[1]) > 0
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_pair_rejects_wrong_noise_shape(rng):
    m = live_model()
    x, c = batch(rng)
    with pytest.raises(ValueError, match="bottleneck"):
        predict_noise_pair(m, x, 50, c, np.zeros((3, 1, 2, 2)))


def test_bottleneck_noise_leaves_encoder_untouched(rng):
    m = live_model()
    x, c = batch(rng)
    from dreamda.denoiser import _input_tensor
    f1 = m.encode(_input_tensor(m, x), 20, c)
    f2 = m.encode(_input_tensor(m, x), 20, c)
    for s1, s2 in zip(f1.skips, f2.skips):
        assert np.array_equal(s1.data, s2.data)
    noise = {"bottleneck": rng.standard_normal((3,) + m.bottleneck_shape)}
    clean, _ = predict_noise_sites(m, x, 20, c, noise)
    assert np.array_equal(clean, predict_noise(m, x, 20, c))


@pytest.mark.parametrize("site", ["enc1", "enc3", "dec2", "bottleneck"])
def test_every_site_perturbs_output(rng, site):
    m = live_model()
    x, c = batch(rng)
    shape = m.site_shapes()[site]
    clean, pert = predict_noise_sites(m, x, 20, c, {site: rng.standard_normal((3,) + shape)})
    assert np.linalg.norm(clean - pert) > 0


def test_batch_rows_do_not_depend_on_batch_composition(rng):
    m = live_model()
    x, c = batch(rng, n=5)
    full = predict_noise(m, x, 30, c)
    for i in range(5):
        assert np.array_equal(full[i:i + 1], predict_noise(m, x[i:i + 1], 30, c[i:i + 1]))


def test_class_conditioning_is_live(rng):
    m = live_model()
    x, _ = batch(rng, n=1)
    assert np.linalg.norm(predict_noise(m, x, 30, [0]) - predict_noise(m, x, 30, [2])) > 0


def test_checkpoint_round_trip(tmp_path, rng):
    m = live_model()
    save_denoiser(m, tmp_path / "ckpt")
    back = load_denoiser(tmp_path / "ckpt")
    x, c = batch(rng)
    assert back.config == m.config
    assert np.array_equal(predict_noise(back, x, 7, c), predict_noise(m, x, 7, c))
    _, desc = load_tensors(tmp_path / "ckpt")
    assert desc["kind"] == "unet-denoiser"


def test_simple_loss_gradient_matches_finite_differences(rng):
    m = live_model(dtype=np.float64)
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    sched = make_schedule()
    params = [m.conv_in.weight, m.mid.conv1.weight, m.classes.table, m.time1.bias, m.conv_out.weight]
    err = grad_check(lambda: simple_loss(m, x0, [0, 2], sched, np.random.default_rng(3)), params, n_coords=6)
    assert err < 1e-3


V_TINY = DenoiserConfig(resolution=8, channels=(4, 8, 8), num_classes=3, time_dim=8, embed_dim=8,
                        parameterization="v")


def test_v_head_at_zero_recovers_the_noise_share_of_the_input(rng):
    m = init_denoiser(V_TINY, rng=0)
    x, c = batch(rng)
    ab = make_schedule().alpha_bar[700]
    assert np.allclose(predict_noise(m, x, 700, c), np.sqrt(1 - ab) * x, atol=1e-6)


def test_v_mode_pair_and_locality(rng):
    m = init_denoiser(V_TINY, rng=0)
    m.conv_out.weight.data[...] = 0.3 * rng.standard_normal(m.conv_out.weight.shape)
    x, c = batch(rng)
    clean, pert = predict_noise_pair(m, x, 50, c, np.zeros((3,) + m.bottleneck_shape))
    assert np.array_equal(clean, pert) and np.array_equal(clean, predict_noise(m, x, 50, c))
    full = predict_noise(m, x, 400, c)
    assert np.array_equal(full[1:2], predict_noise(m, x[1:2], 400, c[1:2]))


def test_v_mode_loss_gradient_matches_finite_differences(rng):
    m = init_denoiser(V_TINY, rng=0).to(np.float64)
    m.conv_out.weight.data[...] = 0.3 * rng.standard_normal(m.conv_out.weight.shape)
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    params = [m.conv_in.weight, m.classes.table, m.conv_out.weight]
    err = grad_check(lambda: simple_loss(m, x0, [1, 2], make_schedule(), np.random.default_rng(4)), params,
                     n_coords=6)
    assert err < 1e-3


def test_unknown_parameterization_rejected():
    with pytest.raises(ValueError, match="parameterization"):
        DenoiserConfig(parameterization="x0")
