"""Shared test helpers: analytic velocity fields and cached pretrained models."""
import dataclasses
import time

import numpy as np
import pytest

from flowdc import amsolver, fdc, flow, functionals, pretrain, scenarios


class GaussianField:
    """Exact velocity field for target N(mu, c^2 I) under the linear path.

    u(x, t) = (t c^2 - (1 - t)) / var_t * (x - t mu) + mu
    with var_t = t^2 c^2 + (1 - t)^2 the marginal variance scale.
    """

    def __init__(self, mu, c=1.0):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.c = float(c)
        self.dim = self.mu.shape[0]

    def _coef(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        var_t = t * t * self.c ** 2 + (1.0 - t) ** 2
        return t, (t * self.c ** 2 - (1.0 - t)) / var_t

    def __call__(self, x, t):
        t, coef = self._coef(t)
        return coef * (x - t * self.mu) + self.mu

    def vjp(self, x, t, cot):
        _, coef = self._coef(t)
        return coef * cot


class ConstField:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.dim = self.value.shape[0]

    def __call__(self, x, t):
        return np.broadcast_to(self.value, x.shape)

    def vjp(self, x, t, cot):
        return np.zeros_like(np.asarray(cot))


class LinearField:
    """v(x, t) = lam * x."""

    def __init__(self, lam, dim):
        self.lam = float(lam)
        self.dim = dim

    def __call__(self, x, t):
        return self.lam * x

    def vjp(self, x, t, cot):
        return self.lam * np.asarray(cot)


class MatrixField:
    """v(x, t) = x @ A^T for a fixed square matrix A."""

    def __init__(self, a_mat):
        self.a_mat = np.asarray(a_mat, dtype=np.float64)
        self.dim = self.a_mat.shape[0]

    def __call__(self, x, t):
        return x @ self.a_mat.T

    def vjp(self, x, t, cot):
        return np.asarray(cot) @ self.a_mat


class GaussMixDensity:
    """Analytic Gaussian mixture with exact log density and score."""

    def __init__(self, means, covs, weights):
        self.means = [np.asarray(m, dtype=np.float64) for m in means]
        self.covs = [np.asarray(c, dtype=np.float64) for c in covs]
        self.weights = np.asarray(weights, dtype=np.float64)
        self.invs = [np.linalg.inv(c) for c in self.covs]
        self.logdets = [np.linalg.slogdet(c)[1] for c in self.covs]

    def _component_logpdf(self, x):
        d = x.shape[1]
        cols = []
        for mu, inv, ld in zip(self.means, self.invs, self.logdets):
            diff = x - mu
            quad = np.einsum("bi,ij,bj->b", diff, inv, diff)
            cols.append(-0.5 * (d * np.log(2.0 * np.pi) + ld + quad))
        return np.stack(cols, axis=1)

    def log_density(self, x):
        lp = self._component_logpdf(np.atleast_2d(x)) + np.log(self.weights)
        top = lp.max(axis=1, keepdims=True)
        return top[:, 0] + np.log(np.exp(lp - top).sum(axis=1))

    def score(self, x):
        x = np.atleast_2d(x)
        lp = self._component_logpdf(x) + np.log(self.weights)
        top = lp.max(axis=1, keepdims=True)
        resp = np.exp(lp - top)
        resp /= resp.sum(axis=1, keepdims=True)
        comp = np.stack([-(x - mu) @ inv
                         for mu, inv in zip(self.means, self.invs)], axis=1)
        return np.einsum("bk,bkd->bd", resp, comp)


def fd_value(spec, points, aux, direction, eps=1e-5):
    """Central particle finite difference of the functional value."""
    plus = functionals.value(spec, points + eps * direction, aux)
    minus = functionals.value(spec, points - eps * direction, aux)
    return (plus - minus) / (2.0 * eps)


def grad_inner(spec, points, aux, direction):
    """Mean inner product of the first-variation gradient with the direction."""
    g = functionals.grad_first_variation(spec, points, points, aux)
    return float(np.mean(np.sum(g * direction, axis=1)))


@pytest.fixture(scope="session")
def std_normal_field_2d():
    """Trained velocity field for target N(0, I_2); cached across the session."""
    target = pretrain.TargetDistribution.gaussian(np.zeros(2), np.eye(2))
    field, losses = pretrain.cfm_train(target, rng=np.random.default_rng(1234))
    return field, losses


@pytest.fixture(scope="session")
def shifted_normal_field_2d():
    """Trained velocity field for target N((3, 0), I_2)."""
    target = pretrain.TargetDistribution.gaussian(np.array([3.0, 0.0]), np.eye(2))
    field, losses = pretrain.cfm_train(target, rng=np.random.default_rng(99))
    return field, losses


@pytest.fixture(scope="session")
def strong_normal_field_2d():
    """Heavily trained unit-Gaussian field with a decayed learning rate.

    Tests that differentiate through the learned Jacobian along whole
    rollouts (network-anchored adjoints) need spatial derivatives well
    beyond what the default recipe delivers; the long silu run with cosine
    decay keeps the compounded Jacobian error small.
    """
    target = pretrain.TargetDistribution.gaussian(np.zeros(2), np.eye(2))
    field, _ = pretrain.cfm_train(
        target, hidden=(64, 64), steps=25000, batch=512, lr=1e-3,
        rng=np.random.default_rng(7), activation="silu", lr_final=5e-5)
    return field


@pytest.fixture(scope="session")
def gaussian_tilt_run(std_normal_field_2d):
    """Linear-reward fine-tuning against the exact N(0, I) pre-model.

    Solves argmax <a, x> - KL with a = (2, 0), eta = 1; the exp-tilt of the
    Gaussian pre-model is N((2, 0), I), so the generated mean is the oracle
    check. The anchor is the analytic field (the oracle presumes the exact
    Gaussian pre-model; a trained surrogate's own Jacobian bias would be
    measured instead of the solver). Shared across test modules because the
    solve takes about a minute.
    """
    field, _ = std_normal_field_2d
    anchor = GaussianField(np.zeros(2))
    a = np.array([2.0, 0.0])
    sch = flow.NoiseSchedule(T=100, sigma0=1.0)
    cfg = amsolver.AmConfig(eta=1.0, inner_steps=1500, batch=128, lr=2e-3,
                            schedule=sch)
    t0 = time.perf_counter()
    tuned = amsolver.solve(
        field, anchor, lambda x: np.tile(a, (x.shape[0], 1)), cfg,
        rng=np.random.default_rng(11))
    seconds = time.perf_counter() - t0
    xs = flow.sample_memoryless(tuned, 8000, sch,
                                np.random.default_rng(5)).terminal
    return {"mean": xs.mean(axis=0), "var": xs.var(axis=0),
            "target": a, "seconds": seconds}


@pytest.fixture(scope="session")
def risk_bundle():
    """Tail-risk scenario bundle; building it also runs the design checks."""
    return scenarios.make_scenario("risk_averse")


@pytest.fixture(scope="session")
def risk_pre_field(risk_bundle):
    """Mixture pre-model shared by the risk ordering, headline, and ablation
    tests; a safe bulk plus a rare high-cost cluster, trained once per
    session (about 80 s)."""
    field, _ = scenarios.pretrain_field(risk_bundle)
    return field


@pytest.fixture(scope="session")
def risk_experiment(risk_bundle, risk_pre_field):
    """Headline-scale risk runs: one baseline solve and three seeded
    outer-loop runs, shared between the iterate-ordering test and the
    tail-risk comparison. solve_seconds covers all four solves."""
    scn = risk_bundle
    _, reward_grad = scenarios.reward_handles(scn.landscape)
    t0 = time.perf_counter()
    am_field = amsolver.solve(risk_pre_field, risk_pre_field, reward_grad,
                              scn.am, rng=np.random.default_rng(500))
    runs = {}
    for seed in (0, 1, 2):
        cfg = dataclasses.replace(scn.fdc, seed=seed)
        runs[seed] = fdc.run(risk_pre_field, cfg)
    return {"am": am_field, "runs": runs,
            "solve_seconds": time.perf_counter() - t0}
