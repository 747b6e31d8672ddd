"""Exact mirror ascent on a finite probability simplex.

The n-point simplex admits closed-form KL-proximal steps (exponential
weights), so the convergence behavior of entropy-regularized functional
ascent can be checked here exactly, with no sampling or network error in
the way.  Two verifiers cover the two regimes: a KL-regularized linear
functional where matched smoothness constants make a single step land on
the optimum, and a relatively smooth quadratic where the optimality gap
must shrink like 1/K against an independently computed optimum.
"""

import dataclasses
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, rel_entr

Array = np.ndarray

SIMPLEX_TOL = 1e-12


def check_simplex(p, tol: float = SIMPLEX_TOL) -> Array:
    """Validate and return a probability vector."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(
            f"simplex points are 1-d vectors with n >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector has non-finite entries")
    if np.min(p) < -tol or abs(float(np.sum(p)) - 1.0) > tol:
        raise ValueError(
            f"not a probability vector: min={np.min(p):.3e}, "
            f"sum={np.sum(p):.12f}")
    return np.maximum(p, 0.0)


def kl(p: Array, q: Array) -> float:
    """KL divergence between probability vectors, 0 log 0 = 0."""
    return float(np.sum(rel_entr(p, q)))


@dataclasses.dataclass
class SimplexState:
    """Current point plus the trajectory of iterates and objective values."""
    p: Array
    history: List[Array] = dataclasses.field(default_factory=list)
    values: List[float] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        self.p = check_simplex(self.p)

    def record(self, value: float) -> None:
        self.history.append(self.p.copy())
        self.values.append(float(value))


def md_step(p: Array, grad: Array, gamma: float) -> Array:
    """One exponential-weights step: p_next[i] proportional to p[i] e^{gamma g[i]}.

    Log-domain accumulation (normalize by log-sum-exp) keeps the step exact
    for gamma * grad up to about +-700; zero entries of p stay zero.  A
    gamma * grad product that overflows to infinity leaves nothing to
    normalize and is rejected.
    """
    p = check_simplex(p)
    g = np.asarray(grad, dtype=float)
    if g.shape != p.shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match point shape {p.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    if not gamma > 0.0:
        raise ValueError(f"step size gamma must be positive, got {gamma}")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logw = np.log(p) + gamma * g
        norm = logsumexp(logw)
    if not np.isfinite(norm):
        raise ValueError(
            "exponential weights are unnormalizable (gamma * grad overflowed); "
            "shrink gamma or rescale the gradient")
    return np.exp(logw - norm)


# ---------------------------------------------------------------------------
# KL-regularized linear functional: one matched step is exact
# ---------------------------------------------------------------------------

def _linear_kl_value(p: Array, r: Array, alpha: float, p0: Array) -> float:
    return float(r @ p) - alpha * kl(p, p0)


def _linear_kl_grad(p: Array, r: Array, alpha: float, p0: Array) -> Array:
    with np.errstate(divide="ignore"):
        ratio = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0) / p0), -np.inf)
    g = r - alpha * (ratio + 1.0)
    # zero-mass entries never influence an exponential-weights step; clamp
    # their formally infinite gradient so md_step's finiteness check passes
    return np.where(np.isfinite(g), g, 0.0)


def verify_theorem1(r: Array, p0: Array, alpha: float, K: int = 1,
                    tol: float = 1e-12) -> dict:
    """Mirror-ascend the KL-regularized linear functional and check one-step
    exactness.

    For G(p) = <r, p> - alpha KL(p || p0), the ascent with step 1/alpha has
    matched curvature constants, so the very first iterate must equal the
    closed-form optimum p* proportional to p0 e^{r/alpha} up to tol.
    Returns the iterates, the optimum, and the optimality-gap trace.
    """
    p0 = check_simplex(p0)
    r = np.asarray(r, dtype=float)
    if r.shape != p0.shape:
        raise ValueError(
            f"reward shape {r.shape} does not match p0 shape {p0.shape}")
    if not alpha > 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")

    logw = np.where(p0 > 0.0, np.log(np.where(p0 > 0.0, p0, 1.0)), -np.inf)
    logw = logw + r / alpha
    p_star = np.exp(logw - logsumexp(logw))
    v_star = _linear_kl_value(p_star, r, alpha, p0)

    gamma = 1.0 / alpha
    state = SimplexState(p=p0.copy())
    state.record(_linear_kl_value(state.p, r, alpha, p0))
    for _ in range(K):
        grad = _linear_kl_grad(state.p, r, alpha, p0)
        state.p = md_step(state.p, grad, gamma)
        state.record(_linear_kl_value(state.p, r, alpha, p0))

    sup_err = float(np.max(np.abs(state.history[1] - p_star)))
    if sup_err > tol:
        raise RuntimeError(
            f"one matched step missed the tilted optimum: sup err "
            f"{sup_err:.3e} > {tol:.1e}")
    gaps = [v_star - v for v in state.values]
    return {
        "p_star": p_star,
        "iterates": state.history,
        "values": state.values,
        "gaps": gaps,
        "one_step_sup_err": sup_err,
        "gamma": gamma,
        "alpha": float(alpha),
    }


# ---------------------------------------------------------------------------
# relatively smooth quadratic: 1/K rate against an independent optimum
# ---------------------------------------------------------------------------

def project_simplex(v: Array) -> Array:
    """Euclidean projection onto the simplex by the sorted-threshold rule."""
    v = np.asarray(v, dtype=float)
    u_sorted = np.sort(v)[::-1]
    css = np.cumsum(u_sorted) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = idx[u_sorted - css / idx > 0.0][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def _projected_gradient_optimum(u: Array, p0: Array, tol: float = 1e-10,
                                max_iter: int = 10000) -> Array:
    """Maximize -0.5 ||p - u||^2 over the simplex by projected ascent.

    Deliberately a different algorithm from the mirror iteration it
    cross-checks: Euclidean steps with sorted-threshold projection.
    """
    p = p0.copy()
    for _ in range(max_iter):
        nxt = project_simplex(p + 0.5 * (u - p))
        if float(np.max(np.abs(nxt - p))) <= tol:
            return nxt
        p = nxt
    raise RuntimeError(
        f"projected-gradient oracle did not converge within {max_iter} steps")


def verify_rate_quadratic(u: Array, p0: Array, K: int,
                          tol: float = 1e-8) -> dict:
    """Check the 1/K optimality-gap bound for G(p) = -0.5 ||p - u||^2.

    The squared half-norm is 1-smooth relative to negative entropy (via
    Pinsker's inequality), so exact mirror steps with gamma = 1 must obey
    G(p*) - G(p_K) <= KL(p* || p0) / K at every K.  The optimum comes from
    an independent projected-gradient run.  The gap trace must also be
    nondecreasing in value.  Violations beyond tol raise.
    """
    p0 = check_simplex(p0)
    u = check_simplex(u)
    if np.min(u) <= 0.0:
        raise ValueError(
            "target u must lie in the simplex interior (all entries > 0)")
    if u.shape != p0.shape:
        raise ValueError(f"u shape {u.shape} does not match p0 shape {p0.shape}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")

    p_star = _projected_gradient_optimum(u, p0)
    v_star = -0.5 * float(np.sum((p_star - u) ** 2))
    d0 = kl(p_star, p0)

    state = SimplexState(p=p0.copy())
    state.record(-0.5 * float(np.sum((state.p - u) ** 2)))
    gaps = [v_star - state.values[0]]
    bounds = [np.inf]
    for k in range(1, K + 1):
        state.p = md_step(state.p, u - state.p, 1.0)
        state.record(-0.5 * float(np.sum((state.p - u) ** 2)))
        gap = v_star - state.values[-1]
        bound = d0 / k
        if gap > bound + tol:
            raise RuntimeError(
                f"rate bound violated at K={k}: gap {gap:.3e} > "
                f"bound {bound:.3e} + {tol:.1e}")
        if state.values[-1] < state.values[-2] - 1e-12:
            raise RuntimeError(
                f"objective decreased at step {k}: "
                f"{state.values[-2]:.12f} -> {state.values[-1]:.12f}")
        gaps.append(gap)
        bounds.append(bound)

    finite = [(g, b) for g, b in zip(gaps[1:], bounds[1:]) if b > 0.0]
    slack_factor = max((g / b for g, b in finite), default=0.0)
    return {
        "p_star": p_star,
        "values": state.values,
        "gaps": gaps,
        "bounds": bounds,
        "slack_factor": float(slack_factor),
        "kl_p_star_p0": d0,
        "relative_smoothness": 1.0,
    }
