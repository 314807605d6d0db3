import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dreamda.schedule import StepGrid, elbo_weight, make_grid, make_schedule, q_sample, q_sample_batch


def test_constant_beta_product():
    s = make_schedule(2, 0.5, 0.5)
    assert np.allclose(s.alpha_bar, [1.0, 0.5, 0.25])


def test_default_schedule_reaches_near_gaussian():
    s = make_schedule()
    assert s.T == 1000 and s.alpha_bar[1000] < 1e-3
    assert s.beta[1] == pytest.approx(1e-4) and s.beta[1000] == pytest.approx(0.02)
    assert np.array_equal(s.sigma2[1:], s.beta[1:])


@given(T=st.integers(1, 400), lo=st.floats(1e-5, 0.2), span=st.floats(0.0, 0.5))
def test_alpha_bar_recurrence_and_monotonicity(T, lo, span):
    hi = min(lo + span, 0.99)
    s = make_schedule(T, lo, hi)
    ab = s.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.max(np.abs(ab[1:] - (1 - s.beta[1:]) * ab[:-1])) <= 1e-12


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_invalid_schedules_rejected(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_schedule_arrays_are_read_only():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bar[3] = 0.0


def test_q_sample_boundary_and_hand_value():
    s = make_schedule(2, 0.5, 0.5)
    x0 = np.array([0.3, -0.7])
    assert np.array_equal(q_sample(x0, 0, np.ones(2), s), x0)
    # alpha_bar[2] = 0.25
    assert q_sample(np.array(1.0), 2, np.array(0.0), s) == pytest.approx(0.5)


def test_q_sample_rejects_bad_step_and_shape():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 1, np.zeros(4), s)


def test_q_sample_moments_monte_carlo():
    s = make_schedule()
    t, x0 = 300, 0.8
    eps = np.random.default_rng(0).standard_normal(100_000)
    out = q_sample(np.full_like(eps, x0), t, eps, s)
    ab = s.alpha_bar[t]
    assert out.mean() == pytest.approx(np.sqrt(ab) * x0, abs=0.01)
    assert out.var() == pytest.approx(1 - ab, rel=0.02)


def test_q_sample_batch_matches_per_sample(rng):
    s = make_schedule()
    x0 = rng.standard_normal((4, 1, 3, 3))
    eps = rng.standard_normal(x0.shape)
    ts = np.array([1, 10, 500, 1000])
    batch = q_sample_batch(x0, ts, eps, s)
    for i, t in enumerate(ts):
        assert np.allclose(batch[i], q_sample(x0[i], int(t), eps[i], s))


def test_elbo_weight_hand_value_and_reciprocal():
    s = make_schedule(2, 0.5, 0.5)
    assert elbo_weight(1, s) == pytest.approx(1.0)
    d = make_schedule()
    for t in (1, 17, 500, 1000):
        w = elbo_weight(t, d)
        b = d.beta[t]
        assert w > 0
        assert w == pytest.approx(b / (2 * (1 - b) * (1 - d.alpha_bar[t])), rel=1e-12)
        assert w * d.reweighting(t) == pytest.approx(1.0, rel=1e-15)


def test_elbo_weight_undefined_at_zero():
    with pytest.raises(ValueError):
        elbo_weight(0, make_schedule(10))


@given(T=st.integers(1, 2000), data=st.data())
def test_grid_ends_at_T_and_is_increasing(T, data):
    steps = data.draw(st.integers(1, T))
    g = make_grid(T, steps)
    assert g.taus[-1] == T and g.taus[0] >= 1
    assert all(b > a for a, b in zip(g.taus, g.taus[1:]))
    assert len(g) == steps


@pytest.mark.parametrize("taus", [(), (0, 5), (3, 3), (5, 2)])
def test_invalid_grids_rejected(taus):
    with pytest.raises(ValueError):
        StepGrid(taus)
