"""Evaluation metrics for comparing pretrained and fine-tuned models.

Exact small-sample Wasserstein-1 via the assignment problem, mean-shift
anisotropy, k-NN differential entropy, and tail summaries.  Everything
here is pure and deterministic given its inputs; randomness stays with the
callers.
"""

import dataclasses
import math
from typing import Optional, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import digamma

from . import functionals

Array = np.ndarray

W1_MAX_POINTS = 2000

# named ground metrics: per-coordinate weights of the scaled Euclidean
# distance sqrt(sum_i (w_i dx_i)^2); the anisotropic pair prices one axis
# seven times the other
METRIC_WEIGHTS = {
    "euclidean": None,
    "d_A": np.array([1.0, 7.0]),
    "d_B": np.array([7.0, 1.0]),
}


def metric_weights(metric: Union[str, Array, None]) -> Optional[Array]:
    """Resolve a metric name or explicit weight vector to weights."""
    if metric is None or isinstance(metric, str):
        name = metric or "euclidean"
        if name not in METRIC_WEIGHTS:
            raise ValueError(
                f"unknown metric '{name}'; choose from "
                f"{', '.join(sorted(METRIC_WEIGHTS))} or pass a weight vector")
        w = METRIC_WEIGHTS[name]
        return None if w is None else w.copy()
    w = np.asarray(metric, dtype=float)
    if w.ndim != 1 or np.any(w <= 0.0):
        raise ValueError("metric weights must be a 1-d positive vector")
    return w


def exact_w1(samples_a: Array, samples_b: Array,
             metric: Union[str, Array, None] = "euclidean") -> float:
    """Exact empirical W1 between two equal-size sample sets.

    Solves the n x n assignment problem on the pairwise ground-metric
    costs, which is the exact optimal transport between two uniform
    empirical measures of equal size.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(
            f"sample sets must have identical shapes, got {a.shape} "
            f"and {b.shape}")
    if a.shape[0] > W1_MAX_POINTS:
        raise ValueError(
            f"assignment regime is limited to {W1_MAX_POINTS} points, "
            f"got {a.shape[0]}")
    w = metric_weights(metric)
    if w is not None:
        if w.size != a.shape[1]:
            raise ValueError(
                f"metric weights have size {w.size} for dimension {a.shape[1]}")
        a = a * w
        b = b * w
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=2))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.shape[0])


def mean_shift_report(pre_samples: Array, ft_samples: Array) -> Tuple[Array, float]:
    """Mean displacement and its horizontal-to-vertical percent ratio.

    Returns (delta_mean, ratio) with ratio = 100 |delta_x| / |delta_y|.
    A vertical displacement below 1e-9 yields an infinite ratio rather
    than an error, covering the fully horizontal case.
    """
    pre = np.atleast_2d(np.asarray(pre_samples, dtype=float))
    ft = np.atleast_2d(np.asarray(ft_samples, dtype=float))
    if pre.shape[0] == 0 or ft.shape[0] == 0:
        raise ValueError("mean shift needs nonempty sample sets")
    delta = ft.mean(axis=0) - pre.mean(axis=0)
    vertical = abs(float(delta[1])) if delta.size > 1 else 0.0
    if vertical < 1e-9:
        return delta, math.inf
    return delta, 100.0 * abs(float(delta[0])) / vertical


def mc_entropy(samples: Array, k_neighbors: int = 3) -> float:
    """Kozachenko-Leonenko k-NN differential entropy estimate.

    Duplicate points make the k-NN distance zero and the estimate
    degenerate; they are jittered by 1e-9 and the repair is reported.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    if n < 100:
        raise ValueError(f"entropy estimation needs n >= 100 samples, got {n}")
    if k_neighbors < 1:
        raise ValueError(f"k_neighbors must be >= 1, got {k_neighbors}")
    tree = cKDTree(x)
    dist, _ = tree.query(x, k=k_neighbors + 1)
    radii = dist[:, -1]
    if np.any(radii <= 0.0):
        dup = int(np.sum(radii <= 0.0))
        print(f"[evalkit] {dup} duplicate points jittered by 1e-9 for the "
              f"entropy estimate")
        x = x + np.random.default_rng(0).normal(scale=1e-9, size=x.shape)
        tree = cKDTree(x)
        dist, _ = tree.query(x, k=k_neighbors + 1)
        radii = dist[:, -1]
    log_ball = (d / 2.0) * math.log(math.pi) - math.lgamma(d / 2.0 + 1.0)
    return float(-digamma(k_neighbors) + digamma(n) + log_ball
                 + d * np.mean(np.log(radii)))


@dataclasses.dataclass
class TailReport:
    cvar: float
    sq: float
    mean: float


def tail_report(r_values, beta: float) -> TailReport:
    """Lower-tail mean (cvar), upper-tail mean (sq), and overall mean.

    The two tail means use the proportional tie rule, so
    beta * cvar + (1 - beta) * sq recomposes the mean exactly.
    """
    r = np.asarray(r_values, dtype=float).ravel()
    lower, upper = functionals.tail_means(r, beta)
    return TailReport(cvar=lower, sq=upper, mean=float(np.mean(r)))
