"""Utilities and divergences of the generated distribution.

Each supported kind pairs a plug-in value estimator G(p), computed from
samples, with a pointwise gradient estimator x -> grad delta G(p)(x) of the
first variation.  The gradient is the linearized target that the inner
fine-tuning solver consumes: fine-tuning against it performs one mirror step
on the nonlinear objective.

Supported kinds
---------------
expectation     E[r(x)]
entropy         -E[log p(x)]
cvar            mean of r over the lower beta-tail
sq              mean of r over the upper (1-beta)-tail (superquantile)
mean_variance   E[r] - Var[r]
w1_to_pre       Wasserstein-1 distance to the reference model (critic dual)
mmd_to_pre      squared MMD to the reference model (Gaussian kernel)
log_barrier     E[r] - w * log(E[c] - C)
oed_logdet      logdet of the regularized feature second-moment matrix
kl_to_pre       KL divergence to the reference model

Tail conventions: the cvar/sq value estimators split the sample at mass
beta*n, assigning the boundary sample fractionally to both tails, so that
beta*cvar + (1-beta)*sq == mean(r) holds exactly on any sample set.  The
gradient masks use the linear-interpolation quantile; the constant tail
prefactors are dropped by default (absorbed into the outer step size), so
the particle finite-difference identity reads mean<g, d> = beta * dG for
cvar and (1-beta) * dG for sq.
"""
import dataclasses
import math
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import digamma, gammaln

from . import flow, numkit

VALID_KINDS = (
    "expectation", "entropy", "cvar", "sq", "mean_variance",
    "w1_to_pre", "mmd_to_pre", "log_barrier", "oed_logdet", "kl_to_pre",
)

# Kinds that are recognized but deliberately not implemented; each maps to
# the reason reported when a config asks for it.
UNSUPPORTED_KINDS = {
    "renyi": ("estimating a Renyi divergence requires trajectory-wise "
              "density estimates that this package does not provide"),
    "diverse_modes": ("the diverse-modes objective requires latent "
                      "conditioning that this package does not provide"),
}

COND_LIMIT = 1e12


@dataclasses.dataclass
class FunctionalSpec:
    """One utility or divergence with its parameters and handles.

    reward / reward_grad map (B, d) points to (B,) values and (B, d)
    gradients.  features / features_jac map (B, d) to (B, p) and (B, p, d).
    cost / cost_grad follow the reward signature.  score_time is the ODE
    time at which scores are extracted from velocity fields (defaults to
    1 - t_eps of the schedule in use).
    """
    kind: str
    reward: Optional[Callable[[np.ndarray], np.ndarray]] = None
    reward_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    beta: Optional[float] = None
    bandwidth: Optional[float] = None
    features: Optional[Callable[[np.ndarray], np.ndarray]] = None
    features_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ridge: float = 1e-3
    cost: Optional[Callable[[np.ndarray], np.ndarray]] = None
    cost_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    threshold: float = 0.0
    barrier_weight: float = 1.0
    metric_weights: Optional[np.ndarray] = None
    score_time: Optional[float] = None
    strict_prefactors: bool = False
    biased_mmd: bool = False
    knn_k: int = 3

    def __post_init__(self):
        if self.kind in UNSUPPORTED_KINDS:
            raise ValueError(
                f"functional kind '{self.kind}' is not supported: "
                f"{UNSUPPORTED_KINDS[self.kind]}")
        if self.kind not in VALID_KINDS:
            raise ValueError(
                f"unknown functional kind '{self.kind}'; valid kinds are "
                f"{', '.join(VALID_KINDS)}")
        if self.kind in ("cvar", "sq"):
            if self.beta is None or not 0.0 < self.beta < 1.0:
                raise ValueError(
                    f"kind '{self.kind}' needs a tail level beta in (0, 1), "
                    f"got {self.beta}")
        if self.kind == "oed_logdet" and self.ridge <= 0.0:
            raise ValueError(f"oed ridge must be positive, got {self.ridge}")
        if self.bandwidth is not None and self.bandwidth <= 0.0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.bandwidth}")
        if self.knn_k < 1:
            raise ValueError(f"knn_k must be >= 1, got {self.knn_k}")

    def _need(self, attr: str) -> Callable:
        fn = getattr(self, attr)
        if fn is None:
            raise ValueError(f"kind '{self.kind}' needs the '{attr}' handle")
        return fn


@dataclasses.dataclass
class ModelHandles:
    """Frozen evaluation context shared by value and gradient estimators.

    pre_samples are draws from the reference model for the *_to_pre kinds.
    score_cur / score_pre map (B, d) points to (B, d) scores of the current
    and reference models.  log_density_cur / log_density_pre, when supplied,
    give exact (B,) log densities and take precedence over the k-NN
    estimators for entropy and KL values.  mmd_bandwidth pins the kernel
    width for the duration of an outer iteration.
    """
    pre_samples: Optional[np.ndarray] = None
    score_cur: Optional[Callable[[np.ndarray], np.ndarray]] = None
    score_pre: Optional[Callable[[np.ndarray], np.ndarray]] = None
    log_density_cur: Optional[Callable[[np.ndarray], np.ndarray]] = None
    log_density_pre: Optional[Callable[[np.ndarray], np.ndarray]] = None
    critic: Optional["CriticNet"] = None
    mmd_bandwidth: Optional[float] = None


def score_handle(field: flow.VelocityField, schedule: flow.NoiseSchedule,
                 t: Optional[float] = None) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a velocity field as a score evaluator at a fixed time.

    Defaults to t = 1 - t_eps, the latest time the velocity-to-score
    transform accepts.  Earlier times trade bias for less amplification of
    field error; trained fields should use t well below 1.
    """
    t_eval = 1.0 - schedule.t_eps if t is None else float(t)

    def score(x: np.ndarray) -> np.ndarray:
        return flow.score_from_velocity(field, x, t_eval, schedule)

    return score


# ---------------------------------------------------------------------------
# quantiles and tail statistics
# ---------------------------------------------------------------------------

def quantile(values, beta: float) -> float:
    """Linear-interpolation empirical quantile at level beta."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("quantile needs a nonempty value list")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {beta}")
    return float(np.quantile(v, beta))


def tail_means(values, beta: float) -> Tuple[float, float]:
    """Lower and upper tail means with proportional boundary mass.

    The sorted sample is split at mass beta*n; the straddling sample
    contributes fractionally to both sides, which makes
    beta * lower + (1 - beta) * upper == mean(values) exact.
    Returns (cvar, superquantile).
    """
    r = np.sort(np.asarray(values, dtype=float).ravel())
    n = r.size
    if n == 0:
        raise ValueError("tail_means needs a nonempty value list")
    mass = beta * n
    if not 0.0 < mass < n:
        raise ValueError(
            f"tail level beta={beta} leaves an empty tail for n={n}")
    m = int(math.floor(mass))
    frac = mass - m
    if m == n:  # beta*n == n only through rounding; keep indexing safe
        m, frac = n - 1, 1.0
    lower = float(r[:m].sum() + frac * r[m])
    upper = float((1.0 - frac) * r[m] + r[m + 1:].sum())
    return lower / mass, upper / (n - mass)


# ---------------------------------------------------------------------------
# k-NN entropy and KL estimators
# ---------------------------------------------------------------------------

def knn_entropy(samples: np.ndarray, k: int = 3) -> float:
    """Kozachenko-Leonenko differential entropy estimate in nats.

    samples: (n, d).  Raises on duplicate points (zero k-th neighbor
    distance); callers that tolerate duplicates should jitter first.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more than k={k} samples, got {n}")
    dist, _ = cKDTree(x).query(x, k=k + 1)
    rho = dist[:, k]
    if np.any(rho <= 0.0):
        raise ValueError(
            "duplicate samples give a zero k-th neighbor distance; "
            "jitter the sample set before estimating entropy")
    log_vd = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
    return float(digamma(n) - digamma(k) + log_vd + d * np.mean(np.log(rho)))


def knn_kl(samples: np.ndarray, ref_samples: np.ndarray, k: int = 3) -> float:
    """Two-sample k-NN estimate of KL(samples-law || ref-law) in nats.

    Compares k-th neighbor distances within the first sample against k-th
    neighbor distances into the reference sample.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.atleast_2d(np.asarray(ref_samples, dtype=float))
    n, d = x.shape
    m = y.shape[0]
    if n <= k or m < k:
        raise ValueError(f"need more than k={k} samples on both sides, got {n} and {m}")
    rho = cKDTree(x).query(x, k=k + 1)[0][:, k]
    nu = cKDTree(y).query(x, k=k)[0]
    if nu.ndim > 1:
        nu = nu[:, k - 1]
    if np.any(rho <= 0.0) or np.any(nu <= 0.0):
        raise ValueError(
            "duplicate samples give a zero k-th neighbor distance; "
            "jitter the sample sets before estimating KL")
    return float(d * np.mean(np.log(nu / rho)) + math.log(m / (n - 1.0)))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def median_bandwidth(a: np.ndarray, b: np.ndarray, cap: int = 2048) -> float:
    """Median pairwise distance over the pooled sample sets.

    Large pools are thinned deterministically to at most cap rows before
    forming pairwise distances.
    """
    pool = np.vstack([np.atleast_2d(a), np.atleast_2d(b)])
    if pool.shape[0] > cap:
        idx = np.linspace(0, pool.shape[0] - 1, cap).astype(int)
        pool = pool[idx]
    d = cdist(pool, pool)
    vals = d[np.triu_indices_from(d, k=1)]
    vals = vals[vals > 0.0]
    if vals.size == 0:
        raise ValueError("all pooled samples coincide; no usable bandwidth")
    return float(np.median(vals))


def _kernel_matrix(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    sq = cdist(a, b, metric="sqeuclidean")
    return np.exp(-sq / (2.0 * bandwidth ** 2))


def mmd_squared(x: np.ndarray, y: np.ndarray, bandwidth: float,
                biased: bool = False) -> float:
    """Squared maximum mean discrepancy under a Gaussian kernel.

    biased=True gives the V-statistic (all pairs, always >= 0), whose
    particle derivative matches the witness gradient exactly.  The default
    unbiased estimator excludes within-set diagonals; for equally sized
    sets it uses the paired form that is exactly zero on identical sets.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"mmd needs at least two samples per set, got {n} and {m}")
    kxx = _kernel_matrix(x, x, bandwidth)
    kyy = _kernel_matrix(y, y, bandwidth)
    kxy = _kernel_matrix(x, y, bandwidth)
    if biased:
        return float(kxx.mean() - 2.0 * kxy.mean() + kyy.mean())
    off_xx = kxx.sum() - np.trace(kxx)
    off_yy = kyy.sum() - np.trace(kyy)
    if n == m:
        off_xy = kxy.sum() - np.trace(kxy)
        return float((off_xx + off_yy - 2.0 * off_xy) / (n * (n - 1.0)))
    return float(off_xx / (n * (n - 1.0)) + off_yy / (m * (m - 1.0))
                 - 2.0 * kxy.mean())


def _mean_kernel_grad(x: np.ndarray, ys: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gradient in x of mean_l k(x, y_l); returns (B, d)."""
    diff = x[:, None, :] - ys[None, :, :]
    k = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * bandwidth ** 2))
    return -(k[:, :, None] * diff).mean(axis=1) / bandwidth ** 2


# ---------------------------------------------------------------------------
# value estimation
# ---------------------------------------------------------------------------

def _resolve_bandwidth(spec: FunctionalSpec, aux: Optional[ModelHandles],
                       x: np.ndarray, y: np.ndarray) -> float:
    if spec.bandwidth is not None:
        return spec.bandwidth
    if aux is not None and aux.mmd_bandwidth is not None:
        return aux.mmd_bandwidth
    return median_bandwidth(x, y)


def _pre_samples(spec: FunctionalSpec, aux: Optional[ModelHandles]) -> np.ndarray:
    if aux is None or aux.pre_samples is None:
        raise ValueError(
            f"kind '{spec.kind}' needs reference-model samples in the aux handles")
    return np.atleast_2d(np.asarray(aux.pre_samples, dtype=float))


def _require_critic(aux: Optional[ModelHandles]) -> "CriticNet":
    if aux is None or aux.critic is None:
        raise ValueError("kind 'w1_to_pre' needs a trained critic in the aux handles")
    if not aux.critic.trained:
        raise ValueError("the critic has not been trained; call train_critic first")
    return aux.critic


def value(spec: FunctionalSpec, samples: np.ndarray,
          aux: Optional[ModelHandles] = None) -> float:
    """Plug-in estimate of the functional on samples from the current model."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("value needs a nonempty sample set")
    kind = spec.kind

    if kind == "expectation":
        return float(np.mean(spec._need("reward")(x)))

    if kind == "mean_variance":
        r = np.asarray(spec._need("reward")(x), dtype=float)
        return float(np.mean(r) - np.var(r))

    if kind in ("cvar", "sq"):
        r = np.asarray(spec._need("reward")(x), dtype=float)
        n = r.size
        mass = spec.beta * n if kind == "cvar" else (1.0 - spec.beta) * n
        if mass < 1.0:
            raise ValueError(
                f"the {kind} tail at beta={spec.beta} holds less than one "
                f"sample for n={n}")
        lower, upper = tail_means(r, spec.beta)
        return lower if kind == "cvar" else upper

    if kind == "entropy":
        if aux is not None and aux.log_density_cur is not None:
            return float(-np.mean(aux.log_density_cur(x)))
        return knn_entropy(x, k=spec.knn_k)

    if kind == "kl_to_pre":
        if (aux is not None and aux.log_density_cur is not None
                and aux.log_density_pre is not None):
            return float(np.mean(aux.log_density_cur(x) - aux.log_density_pre(x)))
        return knn_kl(x, _pre_samples(spec, aux), k=spec.knn_k)

    if kind == "w1_to_pre":
        critic = _require_critic(aux)
        pre = _pre_samples(spec, aux)
        return float(np.mean(critic(x)) - np.mean(critic(pre)))

    if kind == "mmd_to_pre":
        pre = _pre_samples(spec, aux)
        bw = _resolve_bandwidth(spec, aux, x, pre)
        return mmd_squared(x, pre, bw, biased=spec.biased_mmd)

    if kind == "log_barrier":
        r = np.asarray(spec._need("reward")(x), dtype=float)
        c = np.asarray(spec._need("cost")(x), dtype=float)
        slack = float(np.mean(c) - spec.threshold)
        if slack <= 0.0:
            raise ValueError(
                f"log barrier needs mean cost above the threshold; "
                f"slack={slack:.6g}")
        return float(np.mean(r) - spec.barrier_weight * math.log(slack))

    if kind == "oed_logdet":
        m_mat = _feature_moment(spec, x)
        sign, logdet = np.linalg.slogdet(m_mat)
        if sign <= 0.0:
            raise ValueError("feature moment matrix is not positive definite")
        return float(logdet)

    raise AssertionError(f"unhandled kind {kind}")


def _feature_moment(spec: FunctionalSpec, samples: np.ndarray) -> np.ndarray:
    phi = np.asarray(spec._need("features")(samples), dtype=float)
    if phi.ndim != 2:
        raise ValueError(f"features must return a 2-d array, got shape {phi.shape}")
    m_mat = phi.T @ phi / phi.shape[0]
    m_mat += spec.ridge * np.eye(m_mat.shape[0])
    cond = np.linalg.cond(m_mat)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise ValueError(
            f"feature moment matrix is ill-conditioned (cond={cond:.3e}); "
            f"increase the ridge or change the feature map")
    return m_mat


# ---------------------------------------------------------------------------
# first-variation gradients
# ---------------------------------------------------------------------------

def grad_first_variation(spec: FunctionalSpec, p_samples: np.ndarray,
                         x_batch: np.ndarray,
                         model_handles: Optional[ModelHandles] = None) -> np.ndarray:
    """Gradient of the first variation, evaluated at each row of x_batch.

    p_samples: (n, d) draws from the current model; population statistics
    (tail quantiles, reward means, feature moments, barrier slack, witness
    sets) are computed from them and act as frozen within one outer
    iteration as p_samples is held fixed.  Returns (B, d).
    """
    p = np.atleast_2d(np.asarray(p_samples, dtype=float))
    x = np.atleast_2d(np.asarray(x_batch, dtype=float))
    aux = model_handles
    kind = spec.kind

    if kind == "expectation":
        return np.asarray(spec._need("reward_grad")(x), dtype=float)

    if kind == "entropy":
        if aux is None or aux.score_cur is None:
            raise ValueError("kind 'entropy' needs a current-model score handle")
        return -np.asarray(aux.score_cur(x), dtype=float)

    if kind in ("cvar", "sq"):
        r_pop = np.asarray(spec._need("reward")(p), dtype=float)
        q_hat = quantile(r_pop, spec.beta)
        r_x = np.asarray(spec.reward(x), dtype=float)
        mask = r_x <= q_hat if kind == "cvar" else r_x >= q_hat
        g = np.asarray(spec._need("reward_grad")(x), dtype=float) * mask[:, None]
        if spec.strict_prefactors:
            g = g * (spec.beta if kind == "cvar" else 1.0 - spec.beta)
        return g

    if kind == "mean_variance":
        r_x = np.asarray(spec._need("reward")(x), dtype=float)
        mean_r = float(np.mean(spec.reward(p)))
        coeff = 1.0 - 2.0 * r_x + 2.0 * mean_r
        return np.asarray(spec._need("reward_grad")(x), dtype=float) * coeff[:, None]

    if kind == "w1_to_pre":
        critic = _require_critic(aux)
        return critic.grad(x)

    if kind == "mmd_to_pre":
        pre = _pre_samples(spec, aux)
        bw = _resolve_bandwidth(spec, aux, p, pre)
        return 2.0 * (_mean_kernel_grad(x, p, bw) - _mean_kernel_grad(x, pre, bw))

    if kind == "kl_to_pre":
        if aux is None or aux.score_cur is None or aux.score_pre is None:
            raise ValueError(
                "kind 'kl_to_pre' needs current and reference score handles")
        return (np.asarray(aux.score_cur(x), dtype=float)
                - np.asarray(aux.score_pre(x), dtype=float))

    if kind == "log_barrier":
        c_pop = np.asarray(spec._need("cost")(p), dtype=float)
        slack = float(np.mean(c_pop) - spec.threshold)
        if slack <= 0.0:
            raise ValueError(
                f"log barrier needs mean cost above the threshold; "
                f"slack={slack:.6g}")
        g_r = np.asarray(spec._need("reward_grad")(x), dtype=float)
        g_c = np.asarray(spec._need("cost_grad")(x), dtype=float)
        return g_r - (spec.barrier_weight / slack) * g_c

    if kind == "oed_logdet":
        m_mat = _feature_moment(spec, p)
        m_inv = np.linalg.inv(m_mat)
        phi = np.asarray(spec._need("features")(x), dtype=float)
        jac = np.asarray(spec._need("features_jac")(x), dtype=float)
        if jac.ndim != 3:
            raise ValueError(
                f"features_jac must return a 3-d array, got shape {jac.shape}")
        return 2.0 * np.einsum("bp,bpd->bd", phi @ m_inv, jac)

    raise AssertionError(f"unhandled kind {kind}")


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Objective:
    """Utility minus alpha times a divergence to the reference model."""
    utility: FunctionalSpec
    divergence: Optional[FunctionalSpec] = None
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError(f"divergence weight alpha must be >= 0, got {self.alpha}")
        if self.alpha > 0.0 and self.divergence is None:
            raise ValueError("alpha > 0 needs a divergence spec")


def objective_grad(obj: Objective, p_samples: np.ndarray, x_batch: np.ndarray,
                   model_handles: Optional[ModelHandles] = None) -> np.ndarray:
    """Gradient of delta(F - alpha D) rows for x_batch; shape (B, d)."""
    g = grad_first_variation(obj.utility, p_samples, x_batch, model_handles)
    if obj.divergence is not None and obj.alpha > 0.0:
        g = g - obj.alpha * grad_first_variation(
            obj.divergence, p_samples, x_batch, model_handles)
    return g


def objective_values(obj: Objective, samples: np.ndarray,
                     aux: Optional[ModelHandles] = None) -> Tuple[float, float]:
    """Utility and divergence values on the sample set; divergence 0 if absent."""
    util = value(obj.utility, samples, aux)
    div = 0.0
    if obj.divergence is not None:
        div = value(obj.divergence, samples, aux)
    return util, div


# ---------------------------------------------------------------------------
# critic training for the W1 dual
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class CriticConfig:
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "silu"
    steps: int = 800
    batch: int = 256
    lr: float = 1e-3
    lambda_gp: float = 10.0
    input_scale: Optional[np.ndarray] = None
    verbose: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.batch < 2:
            raise ValueError("critic config needs steps >= 1 and batch >= 2")
        if self.lambda_gp < 0.0:
            raise ValueError(f"lambda_gp must be >= 0, got {self.lambda_gp}")


@dataclasses.dataclass
class CriticNet:
    """Scalar critic with coordinate weights implementing the ground metric.

    The network sees scaled inputs z = input_scale * x, so a 1-Lipschitz
    critic in z is Lipschitz with the per-coordinate weights in x.  grad
    returns the gradient with respect to the raw x.
    """
    net: numkit.Mlp
    input_scale: np.ndarray
    lambda_gp: float = 10.0
    trained: bool = False
    gap: float = float("nan")
    mean_grad_norm: float = float("nan")
    grad_penalty: float = float("nan")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(x, dtype=float)) * self.input_scale
        return numkit.forward(self.net, z)[:, 0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(x, dtype=float)) * self.input_scale
        ones = np.ones((z.shape[0], 1))
        return numkit.grad_input(self.net, z, ones) * self.input_scale


def _gp_param_grads(net: numkit.Mlp, z_int: np.ndarray) -> Tuple[float, float, List[np.ndarray]]:
    """Gradient-penalty value, mean gradient norm, and its parameter grads.

    Penalty = mean_b (||grad_z f(z_b)|| - 1)^2 over the interpolate batch.
    """
    batch = z_int.shape[0]
    ones = np.ones((batch, 1))
    g_in = numkit.grad_input(net, z_int, ones)
    norms = np.linalg.norm(g_in, axis=1)
    penalty = float(np.mean((norms - 1.0) ** 2))
    coeff = 2.0 * (norms - 1.0) / (np.maximum(norms, 1e-12) * batch)
    tangent = coeff[:, None] * g_in
    _, grads = numkit.grad_params_jvp(net, z_int, tangent, ones)
    return penalty, float(np.mean(norms)), grads


def train_critic(model_samples: np.ndarray, pre_samples: np.ndarray,
                 cfg: Optional[CriticConfig] = None,
                 rng: Optional[np.random.Generator] = None) -> CriticNet:
    """Train a gradient-penalized critic separating model from reference.

    Maximizes mean critic(model) - mean critic(pre) - lambda_gp * penalty,
    with the penalty pushing gradient norms toward 1 on interpolates, so
    the final gap estimates the W1 distance from below and the critic is
    the first variation of that distance.
    """
    cfg = cfg or CriticConfig()
    rng = rng or np.random.default_rng()
    xm = np.atleast_2d(np.asarray(model_samples, dtype=float))
    xp = np.atleast_2d(np.asarray(pre_samples, dtype=float))
    if xm.shape[0] < 256 or xp.shape[0] < 256:
        raise ValueError(
            f"critic training needs at least 256 samples per side, "
            f"got {xm.shape[0]} and {xp.shape[0]}")
    if xm.shape[1] != xp.shape[1]:
        raise ValueError(
            f"sample dimensions differ: {xm.shape[1]} vs {xp.shape[1]}")
    d = xm.shape[1]
    scale = np.ones(d) if cfg.input_scale is None else np.asarray(cfg.input_scale, dtype=float)
    if scale.shape != (d,) or np.any(scale <= 0.0):
        raise ValueError(f"input_scale must be {d} positive weights")

    net = numkit.Mlp([d, *cfg.hidden, 1], activation=cfg.activation, rng=rng)
    # Zero the head so the first updates follow the separation term.  With a
    # random head the gradient penalty can lock in a wrong-sign critic: the
    # penalty builds a barrier of height lambda_gp between the two slope
    # orientations, and whichever one the init lands on wins.
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = 0.0
    params = net.params()
    adam = numkit.adam_init(params, lr=cfg.lr)
    zm_all = xm * scale
    zp_all = xp * scale
    n_batch = cfg.batch

    for step in range(cfg.steps):
        zm = zm_all[rng.integers(0, zm_all.shape[0], size=n_batch)]
        zp = zp_all[rng.integers(0, zp_all.shape[0], size=n_batch)]
        loss_mean = lambda y: (float(np.mean(y)), np.full_like(y, 1.0 / y.shape[0]))
        fm, g_model = numkit.grad_params(net, zm, loss_mean)
        fp, g_pre = numkit.grad_params(net, zp, loss_mean)
        u = rng.uniform(size=(n_batch, 1))
        z_int = u * zm + (1.0 - u) * zp
        penalty, _, g_pen = _gp_param_grads(net, z_int)
        objective = fm - fp - cfg.lambda_gp * penalty
        if not np.isfinite(objective):
            raise RuntimeError(f"critic objective non-finite at step {step}")
        grads = [-a + b + cfg.lambda_gp * c
                 for a, b, c in zip(g_model, g_pre, g_pen)]
        numkit.adam_step(adam, params, grads)
        if cfg.verbose and step % 100 == 0:
            print(f"[critic] step={step} objective={objective:.4f} "
                  f"penalty={penalty:.4f}")

    critic = CriticNet(net=net, input_scale=scale, lambda_gp=cfg.lambda_gp)
    gap = float(np.mean(critic(xm)) - np.mean(critic(xp)))
    n_eval = min(1024, zm_all.shape[0], zp_all.shape[0])
    ze_m = zm_all[rng.integers(0, zm_all.shape[0], size=n_eval)]
    ze_p = zp_all[rng.integers(0, zp_all.shape[0], size=n_eval)]
    u = rng.uniform(size=(n_eval, 1))
    pen_val, mean_norm, _ = _gp_param_grads(net, u * ze_m + (1.0 - u) * ze_p)
    critic.trained = True
    critic.gap = gap
    critic.mean_grad_norm = mean_norm
    critic.grad_penalty = pen_val
    return critic
