"""Velocity-field flow model on the linear path: deterministic flow-ODE
sampling, the stochastic rollout used by the fine-tuning solver, and the
velocity-to-score transform.

Time convention: signal coefficient abar(t) = t, source coefficient 1 - t, so
marginals interpolate X_t = t*X_1 + (1-t)*X_0 with X_0 ~ N(0, I). Euler
integration uses left endpoints on the uniform grid t_k = k/T; the terminal
state sits at t = 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import numkit

Array = np.ndarray


class DivergedIntegrationError(RuntimeError):
    """Raised when an integration step produces non-finite state."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Step grid and coefficients for the samplers.

    sigma_mode "memoryless" makes the stochastic rollout marginal-preserving
    for the linear path: the continuous profile is sigma(t)^2 = 2(1-t)/t, and
    the per-step values are variance-matched against the standard path
    reference var(t) = t^2 + (1-t)^2 so that each discrete step reproduces
    the reference variance exactly (the raw continuous profile, discretized,
    over-injects noise near the singular start at t=0 by about 2x, which
    pushes early states far outside the region a trained field has seen).
    "linear" is sigma0*(1-t), which does not preserve marginals and exists
    for comparison runs. drift_coeff(t) is the state coefficient of the
    rollout drift, 1/t clamped.

    Clamping: times are floored at max(t_min, h) wherever 1/t is evaluated,
    so the first explicit Euler step stays bounded (h/t_min alone would
    exceed 1 for the default grids).
    """
    T: int = 100
    sigma0: float = 1.0
    t_min: float = 1e-3
    t_eps: float = 1e-3
    sigma_mode: str = "memoryless"
    sigma_fn: Optional[Callable[[float], float]] = None
    drift_fn: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.sigma_mode not in ("memoryless", "linear"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.T

    def grid(self) -> Array:
        """Times t_0 = 0 ... t_T = 1, exactly."""
        return np.arange(self.T + 1) / self.T

    def abar(self, t: float) -> float:
        return float(t)

    def src_coeff(self, t: float) -> float:
        return 1.0 - float(t)

    def clamped(self, t: float) -> float:
        return max(float(t), self.t_min, self.h)

    @cached_property
    def _step_sigmas(self) -> Array:
        """Memoryless noise levels sigma_j for steps j = 0 .. T-1.

        h*sigma_j^2 solves the one-step variance recursion of the standard
        linear path (velocity Jacobian (2t-1)/var(t)), so the discrete chain
        tracks var(t) = t^2 + (1-t)^2 exactly; away from t=0 this agrees
        with the continuous profile 2(1-t)/t up to O(h).
        """
        grid = self.grid()
        var = grid ** 2 + (1.0 - grid) ** 2
        out = np.empty(self.T)
        for j in range(self.T):
            t = grid[j]
            coef = (2.0 * t - 1.0) / var[j]
            fac = 1.0 - self.h * self.drift_coeff(t) + 2.0 * self.h * coef
            out[j] = np.sqrt(max(var[j + 1] - fac * fac * var[j], 0.0) / self.h)
        return out

    def sigma(self, t: float) -> float:
        if self.sigma_fn is not None:
            return float(self.sigma_fn(t))
        if self.sigma_mode == "linear":
            return self.sigma0 * (1.0 - float(t))
        j = int(round(float(t) * self.T))
        if j >= self.T:
            return 0.0
        return self.sigma0 * float(self._step_sigmas[max(j, 0)])

    def drift_coeff(self, t: float) -> float:
        if self.drift_fn is not None:
            return float(self.drift_fn(t))
        return 1.0 / self.clamped(t)


class VelocityField:
    """Wraps an Mlp taking (x, t) -> velocity; the net input is (x..., t)."""

    def __init__(self, net: numkit.Mlp, dim: int | None = None):
        if dim is None:
            dim = net.d_out
        if net.d_in != dim + 1 or net.d_out != dim:
            raise ValueError(
                f"net dims {net.layer_dims} do not match a velocity field on R^{dim}")
        self.net = net
        self.dim = dim

    def __call__(self, x: Array, t) -> Array:
        """x (B, d), t scalar or (B,) -> velocity (B, d)."""
        x = np.asarray(x, dtype=np.float64)
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return self.net.forward(np.column_stack([x, tcol]))

    def copy(self) -> "VelocityField":
        return VelocityField(self.net.copy(), self.dim)

    def save(self, path: str) -> None:
        numkit.save_checkpoint(path, self.net)

    @classmethod
    def load(cls, path: str) -> "VelocityField":
        net = numkit.load_checkpoint(path)
        return cls(net, net.d_out)


@dataclass
class TrajectoryBatch:
    """states (B, T+1, d) on the grid, noises (B, T, d) as drawn."""
    states: Array
    noises: Array

    @property
    def terminal(self) -> Array:
        return self.states[:, -1, :]


def _check_finite(x: Array, step: int, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.argwhere(~np.isfinite(x).all(axis=tuple(range(1, x.ndim))))[0, 0]) \
            if x.ndim > 1 else -1
        raise DivergedIntegrationError(
            f"{what} produced non-finite state at step {step} (path {bad})")


def sample_ode(v, n: int, schedule: NoiseSchedule,
               rng: np.random.Generator | None = None,
               x0: Array | None = None, dim: int | None = None) -> Array:
    """Euler-integrate dX/dt = v(X, t) from X_0 ~ N(0, I); returns X_1 (n, d)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if dim is None:
        dim = getattr(v, "dim")
    if x0 is None:
        if rng is None:
            raise ValueError("need rng or explicit x0")
        x = rng.standard_normal((n, dim))
    else:
        x = np.array(x0, dtype=np.float64)
    h = schedule.h
    for k in range(schedule.T):
        t = k / schedule.T
        x = x + h * v(x, t)
        _check_finite(x, k, "flow ODE")
    return x


def sample_memoryless(v, m: int, schedule: NoiseSchedule,
                      rng: np.random.Generator,
                      x0: Array | None = None, dim: int | None = None
                      ) -> TrajectoryBatch:
    """Stochastic rollout X_{t+h} = X_t + h(2v - drift_coeff(t) X_t)
    + sqrt(h) sigma(t) eps_t, recording states and the exact noise draws."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if dim is None:
        dim = getattr(v, "dim")
    if x0 is None:
        x = rng.standard_normal((m, dim))
    else:
        x = np.array(x0, dtype=np.float64)
    T, h = schedule.T, schedule.h
    states = np.empty((m, T + 1, dim))
    noises = np.empty((m, T, dim))
    states[:, 0] = x
    sqrt_h = np.sqrt(h)
    for k in range(T):
        t = k / T
        eps = rng.standard_normal((m, dim))
        noises[:, k] = eps
        drift = 2.0 * v(x, t) - schedule.drift_coeff(t) * x
        x = x + h * drift + sqrt_h * schedule.sigma(t) * eps
        _check_finite(x, k, "memoryless rollout")
        states[:, k + 1] = x
    return TrajectoryBatch(states=states, noises=noises)


def score_from_velocity(v, x: Array, t: float, schedule: NoiseSchedule) -> Array:
    """Score of the time-t marginal from the velocity: (t*v(x,t) - x)/(1-t).

    Exact for Gaussian data under the linear path. Rejects t < t_min (the
    transform divides by t-dependent quantities that degenerate at 0) and
    t > 1 - t_eps (division by 1-t); evaluate near the data side at 1 - t_eps.
    """
    t = float(t)
    if t < schedule.t_min:
        raise ValueError(f"score transform rejected: t={t} below t_min={schedule.t_min}")
    if t > 1.0 - schedule.t_eps + 1e-12:
        raise ValueError(
            f"score transform rejected: t={t} too close to 1 (use t <= 1 - t_eps)")
    x = np.asarray(x, dtype=np.float64)
    return (t * v(x, t) - x) / (1.0 - t)
