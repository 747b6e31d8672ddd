"""Entropy-regularized linear fine-tuning by adjoint matching.

Solves argmax_p <g, p> - eta * KL(p || p_anchor) over generated
distributions by regressing the fine-tuned velocity toward the anchor
velocity plus a control read off a lean adjoint:

  1. roll out memoryless trajectories under the current fine-tuned field,
  2. set the terminal adjoint to -(1/eta) * g(X_1),
  3. run the adjoint backward with Jacobian-transpose products of the
     anchor drift (the exact discrete adjoint of the forward Euler step),
  4. minimize sum_j mean_b || (2/sigma_j)(u_ft - u_pre)(X_j, t_j)
     + sigma_j a_{j+1} ||^2 by Adam on the fine-tuned network.

The fixed point is u_ft = u_pre - (sigma_j^2 / 2) a_{j+1} at every step,
the drift of the reward-tilted chain.

States and adjoints are treated as constants in the loss; only the
fine-tuned network carries parameter gradients.
"""
import dataclasses
from typing import Callable, List, Optional

import numpy as np

from . import flow, numkit


@dataclasses.dataclass
class AmConfig:
    eta: float
    inner_steps: int = 200
    batch: int = 64
    lr: float = 1e-3
    schedule: flow.NoiseSchedule = dataclasses.field(default_factory=flow.NoiseSchedule)
    clip_norm: Optional[float] = 10.0
    verbose: bool = False

    def __post_init__(self):
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")


@dataclasses.dataclass
class AdjointState:
    """Lean adjoint along a trajectory batch; a_tilde has shape (B, T+1, d)."""
    a_tilde: np.ndarray


def _field_vjp(field, x: np.ndarray, t: float, cot: np.ndarray) -> np.ndarray:
    """Rows cot_b . dv/dx(x_b, t) of the velocity's input Jacobian.

    Fields may supply an analytic .vjp(x, t, cot); network-backed fields
    fall back to backprop through the network with the time column fixed.
    """
    vjp_fn = getattr(field, "vjp", None)
    if vjp_fn is not None:
        return np.asarray(vjp_fn(x, t, cot), dtype=np.float64)
    net = getattr(field, "net", None)
    if net is None:
        raise TypeError(
            "anchor field must expose either a .vjp method or a .net network")
    z = np.concatenate([x, np.full((x.shape[0], 1), t)], axis=1)
    return numkit.grad_input(net, z, cot)[:, : x.shape[1]]


def rollout_and_adjoint(v_ft, v_pre, reward_grad: Callable[[np.ndarray], np.ndarray],
                        cfg: AmConfig, rng: np.random.Generator):
    """Memoryless rollout under v_ft plus the lean adjoint of the anchor drift.

    The backward recursion a_j = (1 - h c_j) a_{j+1} + 2 h J_pre(X_j, t_j)^T a_{j+1}
    is the transpose of the forward Euler step's state Jacobian, so when
    v_ft == v_pre the adjoint at time 0 equals the exact gradient of the
    terminal value -(1/eta) r(X_T) through the frozen noise path.
    Returns (TrajectoryBatch, AdjointState).
    """
    sch = cfg.schedule
    traj = flow.sample_memoryless(v_ft, cfg.batch, sch, rng)
    states = traj.states
    batch, t_plus_1, d = states.shape
    n_steps = t_plus_1 - 1
    grid = sch.grid()

    a_tilde = np.empty_like(states)
    g_term = np.asarray(reward_grad(states[:, n_steps]), dtype=np.float64)
    if g_term.shape != (batch, d):
        raise ValueError(
            f"reward_grad returned shape {g_term.shape}, expected {(batch, d)}")
    if not np.all(np.isfinite(g_term)):
        path = int(np.argwhere(~np.isfinite(g_term))[0][0])
        raise RuntimeError(
            f"terminal reward gradient non-finite (path {path})")
    a_tilde[:, n_steps] = -g_term / cfg.eta

    for j in range(n_steps - 1, -1, -1):
        t_j = grid[j]
        c_j = sch.drift_coeff(t_j)
        cot = a_tilde[:, j + 1]
        jac_prod = _field_vjp(v_pre, states[:, j], t_j, cot)
        a_tilde[:, j] = cot + sch.h * (2.0 * jac_prod - c_j * cot)
        if not np.all(np.isfinite(a_tilde[:, j])):
            path = int(np.argwhere(~np.isfinite(a_tilde[:, j]))[0][0])
            raise RuntimeError(
                f"lean adjoint non-finite at time step {j} (path {path})")
    return traj, AdjointState(a_tilde=a_tilde)


def _flatten_steps(traj: flow.TrajectoryBatch, adj: AdjointState,
                   schedule: flow.NoiseSchedule):
    """Stack all (state, time) pairs of the loss steps into one batch.

    Step j pairs (X_j, t_j, sigma_j) with the adjoint a_{j+1}: tilting the
    discrete chain shifts the step-j transition mean by h sigma_j^2 times
    the log-gradient of the value at j+1, so the regression target for the
    drift at t_j is -(sigma_j^2 / 2) a_{j+1}.  Pairing a_j instead skews
    the early steps, where the drift clamp makes consecutive adjoints
    differ by an order-one factor.
    Returns (z (B*T, d+1), sigma rows (B*T,), adjoint rows (B*T, d), B).
    """
    states = traj.states
    batch, t_plus_1, d = states.shape
    n_steps = t_plus_1 - 1
    grid = schedule.grid()[:n_steps]
    sig = np.array([schedule.sigma(t) for t in grid])
    x_rows = states[:, :n_steps].reshape(batch * n_steps, d)
    t_rows = np.tile(grid, batch)
    z = np.concatenate([x_rows, t_rows[:, None]], axis=1)
    sig_rows = np.tile(sig, batch)
    a_rows = adj.a_tilde[:, 1:].reshape(batch * n_steps, d)
    return z, sig_rows, a_rows, batch


def am_loss(v_ft, v_pre, traj: flow.TrajectoryBatch, adj: AdjointState,
            schedule: flow.NoiseSchedule) -> float:
    """Adjoint-matching regression loss on a frozen trajectory batch.

    Sum over time steps of the batch-mean squared residual
    (2/sigma_j)(u_ft - u_pre)(X_j, t_j) + sigma_j * a_{j+1}; zero exactly
    when the fine-tuned drift at step j implements the control
    -(sigma_j^2 / 2) a_{j+1}.
    """
    z, sig_rows, a_rows, batch = _flatten_steps(traj, adj, schedule)
    x_rows, t_rows = z[:, :-1], z[:, -1]
    u_ft = np.asarray(v_ft(x_rows, t_rows), dtype=np.float64)
    u_pre = np.asarray(v_pre(x_rows, t_rows), dtype=np.float64)
    resid = (2.0 / sig_rows[:, None]) * (u_ft - u_pre) + sig_rows[:, None] * a_rows
    return float(np.sum(resid ** 2) / batch)


def solve(v_init, v_pre_anchor, reward_grad: Callable[[np.ndarray], np.ndarray],
          cfg: AmConfig, rng: Optional[np.random.Generator] = None,
          reward_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
          history: Optional[List[dict]] = None) -> flow.VelocityField:
    """Run adjoint-matching fine-tuning and return the tuned field.

    v_pre_anchor is the proximal anchor: the lean adjoint differentiates
    its drift and the loss regresses deviations from it, while rollouts
    follow the evolving fine-tuned field.  reward_fn is only used for
    logging mean terminal rewards into history rows.
    """
    rng = rng or np.random.default_rng()
    field = v_init.copy()
    if cfg.inner_steps == 0:
        return field
    params = field.net.params()
    adam = numkit.adam_init(params, lr=cfg.lr)
    sch = cfg.schedule

    for step in range(cfg.inner_steps):
        traj, adj = rollout_and_adjoint(field, v_pre_anchor, reward_grad, cfg, rng)
        z, sig_rows, a_rows, batch = _flatten_steps(traj, adj, sch)
        x_rows, t_rows = z[:, :-1], z[:, -1]
        u_pre = np.asarray(v_pre_anchor(x_rows, t_rows), dtype=np.float64)

        def loss_fn(y):
            resid = ((2.0 / sig_rows[:, None]) * (y - u_pre)
                     + sig_rows[:, None] * a_rows)
            loss = float(np.sum(resid ** 2) / batch)
            dy = (4.0 / batch) * resid / sig_rows[:, None]
            return loss, dy

        loss, grads = numkit.grad_params(field.net, z, loss_fn)
        if not np.isfinite(loss):
            raise RuntimeError(f"adjoint matching loss non-finite at step {step}")
        if cfg.clip_norm is not None:
            numkit.clip_global_norm(grads, cfg.clip_norm)
        numkit.adam_step(adam, params, grads)

        if history is not None:
            mean_reward = float("nan")
            if reward_fn is not None:
                mean_reward = float(np.mean(reward_fn(traj.terminal)))
            history.append({"step": step, "loss": loss, "mean_reward": mean_reward})
        if cfg.verbose and step % 100 == 0:
            print(f"[am] step={step} loss={loss:.6f}")
    return field
