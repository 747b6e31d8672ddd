"""Exact W1, mean-shift anisotropy, k-NN entropy, and tail summaries."""

import itertools
import math

import numpy as np
import pytest

from flowdc import evalkit


# ---------------------------------------------------------------------------
# exact W1
# ---------------------------------------------------------------------------

def brute_force_w1(a, b, weights=None):
    """Minimum over all permutations; only feasible for tiny n."""
    if weights is not None:
        a = a * weights
        b = b * weights
    n = a.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(np.linalg.norm(a[i] - b[perm[i]]) for i in range(n))
        best = min(best, cost / n)
    return best


def test_w1_identical_sets_zero():
    x = np.random.default_rng(0).normal(size=(40, 2))
    assert evalkit.exact_w1(x, x) == 0.0


def test_w1_translation_is_shift_norm():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 2))
    t = np.array([1.5, -2.0])
    assert evalkit.exact_w1(x, x + t) == pytest.approx(np.linalg.norm(t),
                                                      abs=1e-12)


def test_w1_planted_three_point_instance():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    b = np.array([[2.0, 2.0], [0.1, 0.0], [0.0, 0.9]])
    assert evalkit.exact_w1(a, b) == pytest.approx(brute_force_w1(a, b),
                                                  abs=1e-12)


def test_w1_matches_brute_force_small_instances():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2))
        assert evalkit.exact_w1(a, b) == pytest.approx(
            brute_force_w1(a, b), abs=1e-12)


def test_w1_anisotropic_metric_weights():
    a = np.zeros((5, 2))
    b = np.zeros((5, 2))
    b[:, 1] = 1.0  # unit vertical displacement
    assert evalkit.exact_w1(a, b, "d_A") == pytest.approx(7.0, abs=1e-12)
    assert evalkit.exact_w1(a, b, "d_B") == pytest.approx(1.0, abs=1e-12)
    assert evalkit.exact_w1(a, b, np.array([1.0, 3.0])) == pytest.approx(3.0)


def test_w1_metric_properties_on_random_triples():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 2))
    y = rng.normal(size=(50, 2)) + 1.0
    z = rng.normal(scale=2.0, size=(50, 2))
    dxy = evalkit.exact_w1(x, y)
    dyx = evalkit.exact_w1(y, x)
    assert dxy == pytest.approx(dyx, rel=1e-12)
    assert dxy <= evalkit.exact_w1(x, z) + evalkit.exact_w1(z, y) + 1e-12


def test_w1_rejects_bad_inputs():
    x = np.zeros((4, 2))
    with pytest.raises(ValueError, match="identical shapes"):
        evalkit.exact_w1(x, np.zeros((5, 2)))
    with pytest.raises(ValueError, match="2000"):
        evalkit.exact_w1(np.zeros((2001, 2)), np.zeros((2001, 2)))
    with pytest.raises(ValueError, match="unknown metric"):
        evalkit.exact_w1(x, x, "manhattan")
    with pytest.raises(ValueError, match="weights have size"):
        evalkit.exact_w1(x, x, np.array([1.0, 2.0, 3.0]))


# ---------------------------------------------------------------------------
# mean shift
# ---------------------------------------------------------------------------

def test_mean_shift_identical_sets_infinite_flag():
    x = np.random.default_rng(5).normal(size=(30, 2))
    delta, ratio = evalkit.mean_shift_report(x, x)
    assert delta == pytest.approx(np.zeros(2), abs=1e-12)
    assert math.isinf(ratio)


def test_mean_shift_planted_ratio():
    pre = np.zeros((100, 2))
    ft = np.tile(np.array([2.0, 1.0]), (100, 1))
    delta, ratio = evalkit.mean_shift_report(pre, ft)
    assert delta == pytest.approx([2.0, 1.0])
    assert ratio == pytest.approx(200.0)


def test_mean_shift_rejects_empty():
    with pytest.raises(ValueError, match="nonempty"):
        evalkit.mean_shift_report(np.zeros((0, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

def test_entropy_standard_normal_matches_analytic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(10000, 2))
    analytic = math.log(2.0 * math.pi * math.e)
    assert evalkit.mc_entropy(x) == pytest.approx(analytic, abs=0.05)


def test_entropy_scaling_law():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(8000, 2))
    c = 3.0
    gain = evalkit.mc_entropy(c * x) - evalkit.mc_entropy(x)
    assert gain == pytest.approx(2.0 * math.log(c), abs=0.05)


def test_entropy_uniform_square_near_zero():
    rng = np.random.default_rng(13)
    x = rng.uniform(size=(10000, 2))
    assert evalkit.mc_entropy(x) == pytest.approx(0.0, abs=0.05)


def test_entropy_duplicates_jittered_and_flagged(capsys):
    rng = np.random.default_rng(14)
    x = rng.normal(size=(200, 2))
    x[:50] = x[0]  # heavy duplication
    value = evalkit.mc_entropy(x)
    assert np.isfinite(value)
    assert "jittered" in capsys.readouterr().out


def test_entropy_rejects_small_samples():
    with pytest.raises(ValueError, match="n >= 100"):
        evalkit.mc_entropy(np.zeros((50, 2)))


# ---------------------------------------------------------------------------
# tail report
# ---------------------------------------------------------------------------

def test_tail_report_sorted_oracle():
    r = np.arange(100, dtype=float)
    rep = evalkit.tail_report(r, 0.01)
    assert rep.cvar == pytest.approx(0.0)  # worst 1% of 0..99 is the 0 sample
    assert rep.mean == pytest.approx(49.5)
    assert 0.01 * rep.cvar + 0.99 * rep.sq == pytest.approx(rep.mean,
                                                           abs=1e-10)


def test_tail_report_constant_values():
    rep = evalkit.tail_report(np.full(64, 3.25), 0.2)
    assert rep.cvar == rep.sq == rep.mean == pytest.approx(3.25)


def test_tail_report_identity_random_sets():
    rng = np.random.default_rng(21)
    for _ in range(100):
        r = rng.normal(size=int(rng.integers(5, 300)))
        beta = float(rng.uniform(0.05, 0.95))
        rep = evalkit.tail_report(r, beta)
        assert beta * rep.cvar + (1.0 - beta) * rep.sq == pytest.approx(
            rep.mean, abs=1e-12)
