"""Tests for the flow module: schedule, samplers, score transform."""
import numpy as np
import pytest

from flowdc import flow, numkit
from conftest import ConstField, GaussianField, LinearField


class ZeroField:
    dim = 2

    def __call__(self, x, t):
        return np.zeros_like(x)


class BlowupField:
    dim = 2

    def __call__(self, x, t):
        return 1e300 * (x + 1.0)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_grid_and_coefficients():
    sch = flow.NoiseSchedule(T=100)
    g = sch.grid()
    assert g[0] == 0.0 and g[-1] == 1.0
    assert len(g) == 101
    assert sch.h * sch.T == pytest.approx(1.0, abs=1e-15)
    assert sch.abar(1.0) == 1.0
    assert sch.src_coeff(0.0) == 1.0


def test_schedule_sigma_positive_before_one():
    sch = flow.NoiseSchedule(T=100)
    for t in [0.0, 0.01, 0.3, 0.7, 0.99]:
        assert sch.sigma(t) > 0.0
    assert sch.sigma(1.0) == 0.0


def test_schedule_drift_coeff_clamped():
    sch = flow.NoiseSchedule(T=100)
    # at t=0 the clamp floors at h, so the state coefficient (1 - h*c) is 0
    assert sch.drift_coeff(0.0) == pytest.approx(1.0 / sch.h)
    assert sch.drift_coeff(0.5) == pytest.approx(2.0)


def test_schedule_linear_mode_and_overrides():
    sch = flow.NoiseSchedule(T=10, sigma_mode="linear", sigma0=2.0)
    assert sch.sigma(0.25) == pytest.approx(1.5)
    sch2 = flow.NoiseSchedule(T=10, sigma_fn=lambda t: 0.0, drift_fn=lambda t: 0.0)
    assert sch2.sigma(0.3) == 0.0 and sch2.drift_coeff(0.3) == 0.0
    with pytest.raises(ValueError, match="sigma_mode"):
        flow.NoiseSchedule(T=10, sigma_mode="quadratic")


# ---------------------------------------------------------------------------
# sample_ode
# ---------------------------------------------------------------------------

def test_ode_zero_velocity_returns_source():
    sch = flow.NoiseSchedule(T=50)
    x0 = np.random.default_rng(0).standard_normal((200, 2))
    out = flow.sample_ode(ZeroField(), 200, sch, x0=x0)
    assert np.array_equal(out, x0)


def test_ode_constant_drift():
    sch = flow.NoiseSchedule(T=80)
    c = np.array([0.7, -1.2])
    x0 = np.random.default_rng(1).standard_normal((50, 2))
    out = flow.sample_ode(ConstField(c), 50, sch, x0=x0)
    assert np.allclose(out, x0 + c, atol=1e-12)


def test_ode_linear_field_matches_exponential():
    sch = flow.NoiseSchedule(T=1000)
    x0 = np.random.default_rng(2).standard_normal((100, 2))
    out = flow.sample_ode(LinearField(-1.0, 2), 100, sch, x0=x0)
    assert np.allclose(out, np.exp(-1.0) * x0, atol=1e-2)
    # and exactly (1 - h)^T for the discrete scheme
    assert np.allclose(out, (1 - sch.h) ** sch.T * x0, atol=1e-12)


def test_ode_divergence_error_names_step():
    sch = flow.NoiseSchedule(T=10)
    with pytest.raises(flow.DivergedIntegrationError, match="step"), \
            np.errstate(over="ignore"):
        flow.sample_ode(BlowupField(), 4, sch, rng=np.random.default_rng(3))


def test_ode_refining_grid_small_drift():
    mu = np.array([1.0, 0.0])
    v = GaussianField(mu)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((4000, 2))
    out1 = flow.sample_ode(v, 4000, flow.NoiseSchedule(T=100), x0=x0)
    out2 = flow.sample_ode(v, 4000, flow.NoiseSchedule(T=200), x0=x0)
    assert np.linalg.norm(out1.mean(axis=0) - out2.mean(axis=0)) <= 5e-3


# ---------------------------------------------------------------------------
# sample_memoryless
# ---------------------------------------------------------------------------

def test_memoryless_all_zero_is_identity():
    sch = flow.NoiseSchedule(T=20, sigma_fn=lambda t: 0.0, drift_fn=lambda t: 0.0)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((30, 2))
    traj = flow.sample_memoryless(ZeroField(), 30, sch, rng, x0=x0)
    assert np.array_equal(traj.terminal, x0)
    assert traj.states.shape == (30, 21, 2)
    assert traj.noises.shape == (30, 20, 2)


def test_memoryless_single_step_unrolled():
    sch = flow.NoiseSchedule(T=1, sigma_fn=lambda t: 0.5, drift_fn=lambda t: 0.3)
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((40, 2))
    traj = flow.sample_memoryless(ZeroField(), 40, sch, np.random.default_rng(7), x0=x0)
    eps = traj.noises[:, 0]
    want = x0 * (1 - 1.0 * 0.3) + np.sqrt(1.0) * 0.5 * eps
    assert np.allclose(traj.terminal, want, atol=1e-14)


def test_memoryless_terminal_is_last_state():
    sch = flow.NoiseSchedule(T=15)
    traj = flow.sample_memoryless(GaussianField(np.zeros(2)), 10, sch,
                                  np.random.default_rng(8))
    assert np.array_equal(traj.terminal, traj.states[:, -1, :])


def test_memoryless_noises_reconstruct_path():
    sch = flow.NoiseSchedule(T=25)
    v = GaussianField(np.array([0.5, -0.5]))
    traj = flow.sample_memoryless(v, 12, sch, np.random.default_rng(9))
    x = traj.states[:, 0].copy()
    h = sch.h
    for k in range(sch.T):
        t = k / sch.T
        x = x + h * (2 * v(x, t) - sch.drift_coeff(t) * x) \
            + np.sqrt(h) * sch.sigma(t) * traj.noises[:, k]
        assert np.allclose(x, traj.states[:, k + 1], atol=1e-12)


def test_memoryless_preserves_gaussian_marginal():
    # Monte Carlo oracle: terminal mean/cov within 3 standard errors
    n = 100_000
    mu = np.array([3.0, 0.0])
    traj = flow.sample_memoryless(GaussianField(mu), n, flow.NoiseSchedule(T=100),
                                  np.random.default_rng(10))
    term = traj.terminal
    se_mean = 1.0 / np.sqrt(n)
    se_var = np.sqrt(2.0 / n)
    assert np.all(np.abs(term.mean(axis=0) - mu) <= 3 * se_mean + 5e-3)
    assert np.all(np.abs(term.var(axis=0) - 1.0) <= 3 * se_var + 5e-3)
    offdiag = np.cov(term.T)[0, 1]
    assert abs(offdiag) <= 3 * se_var + 5e-3


def test_schedule_sigma_variance_matched_at_start():
    sch = flow.NoiseSchedule(T=100)
    h = sch.h
    # at j = 0 the clamp zeroes the state coefficient and the standard-path
    # Jacobian is -1, so the step factor is -2h and the injected variance
    # must be var(h) - (2h)^2 var(0)
    want = (h * h + (1.0 - h) ** 2 - 4.0 * h * h) / h
    assert sch.sigma(0.0) ** 2 == pytest.approx(want, rel=1e-12)


def test_memoryless_variance_tracks_path_marginal_profile():
    # the variance-matched schedule keeps the rollout on the standard path
    # variance t^2 + (1-t)^2 at every grid time, including near t = 0 where
    # the raw continuous profile, discretized, injects about double
    v = GaussianField(np.zeros(2))
    sch = flow.NoiseSchedule(T=100)
    traj = flow.sample_memoryless(v, 4000, sch, np.random.default_rng(21))
    grid = sch.grid()
    for j in [1, 2, 10, 50, 90, 100]:
        t = grid[j]
        want = t * t + (1.0 - t) ** 2
        got = float(traj.states[:, j].var(axis=0).mean())
        assert abs(got - want) <= 0.07


def test_memoryless_sigma_zero_with_matched_drift_equals_ode():
    # with v = lam*x and drift_coeff = lam, the drift 2v - cx reduces to v
    lam = -0.8
    v = LinearField(lam, 2)
    sch = flow.NoiseSchedule(T=60, sigma_fn=lambda t: 0.0, drift_fn=lambda t: lam)
    x0 = np.random.default_rng(11).standard_normal((25, 2))
    traj = flow.sample_memoryless(v, 25, sch, np.random.default_rng(12), x0=x0)
    ode = flow.sample_ode(v, 25, flow.NoiseSchedule(T=60), x0=x0)
    assert np.allclose(traj.terminal, ode, atol=1e-12)


# ---------------------------------------------------------------------------
# score transform
# ---------------------------------------------------------------------------

def test_score_standard_normal():
    sch = flow.NoiseSchedule(T=100)
    v = GaussianField(np.zeros(2))
    x = np.random.default_rng(13).standard_normal((50, 2))
    s = flow.score_from_velocity(v, x, 1.0 - sch.t_eps, sch)
    assert np.max(np.abs(s - (-x))) <= 1e-2


def test_score_shifted_normal():
    sch = flow.NoiseSchedule(T=100)
    mu = np.array([2.0, -1.0])
    v = GaussianField(mu)
    x = mu + np.random.default_rng(14).standard_normal((50, 2))
    s = flow.score_from_velocity(v, x, 1.0 - sch.t_eps, sch)
    assert np.max(np.abs(s - (-(x - mu)))) <= 2e-2


def test_score_scaling_law():
    # scaling data by c maps score(c x) to score(x)/c near t = 1
    sch = flow.NoiseSchedule(T=100)
    c = 2.0
    base = GaussianField(np.zeros(2), c=1.0)
    scaled = GaussianField(np.zeros(2), c=c)
    x = np.random.default_rng(15).standard_normal((40, 2))
    t = 1.0 - sch.t_eps
    s_base = flow.score_from_velocity(base, x, t, sch)
    s_scaled = flow.score_from_velocity(scaled, c * x, t, sch)
    assert np.max(np.abs(s_scaled - s_base / c)) <= 1e-2


def test_score_rejects_extreme_times():
    sch = flow.NoiseSchedule(T=100)
    v = GaussianField(np.zeros(2))
    x = np.zeros((1, 2))
    with pytest.raises(ValueError, match="t_min"):
        flow.score_from_velocity(v, x, 1e-5, sch)
    with pytest.raises(ValueError, match="close to 1"):
        flow.score_from_velocity(v, x, 0.9999, sch)


# ---------------------------------------------------------------------------
# velocity field wrapper
# ---------------------------------------------------------------------------

def test_velocity_field_checkpoint_round_trip(tmp_path):
    net = numkit.Mlp([3, 8, 2], rng=np.random.default_rng(16))
    vf = flow.VelocityField(net)
    path = str(tmp_path / "vf.ckpt")
    vf.save(path)
    back = flow.VelocityField.load(path)
    x = np.random.default_rng(17).standard_normal((5, 2))
    assert np.array_equal(vf(x, 0.3), back(x, 0.3))
    assert back.dim == 2


def test_velocity_field_rejects_mismatched_net():
    net = numkit.Mlp([3, 8, 3])
    with pytest.raises(ValueError, match="velocity field"):
        flow.VelocityField(net, dim=2)


def test_velocity_field_accepts_per_sample_times():
    net = numkit.Mlp([3, 8, 2], rng=np.random.default_rng(18))
    vf = flow.VelocityField(net)
    x = np.random.default_rng(19).standard_normal((4, 2))
    ts = np.array([0.1, 0.2, 0.3, 0.4])
    out = vf(x, ts)
    for i in range(4):
        assert np.allclose(out[i], vf(x[i:i + 1], ts[i])[0], atol=1e-12)
