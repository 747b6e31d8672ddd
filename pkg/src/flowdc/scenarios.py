"""Synthetic landscapes and ready-made fine-tuning scenario bundles.

Four settings exercise the outer loop end to end on a 2-d standard-normal
pre-model: a high-cost plateau with catastrophic stripes (tail-risk
reduction), sparse extreme-reward spikes (novelty seeking), a linear reward
under an anisotropic Wasserstein penalty (transport-shaped drift), and
entropy maximization at several divergence weights (conservative
exploration).

Landscapes are sums of axis-aligned smoothed boxes

    bump(x) = h * prod_j sigmoid((x_j - lo_j) / tau) * sigmoid((hi_j - x_j) / tau)

plus an optional linear tilt a . x, so values and gradients are analytic
everywhere; the smoothing width tau controls how sharp each edge is.  For
the stripe_cost kind the landscape value is a cost and the fine-tuning
reward is its negation (see reward_handles).
"""
import dataclasses
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from . import fdc as fdc_mod
from . import flow, functionals, pretrain
from .amsolver import AmConfig

Array = np.ndarray

SCENARIO_NAMES = ("risk_averse", "novelty", "ot_a", "ot_b", "explore")
LANDSCAPE_KINDS = ("stripe_cost", "spike_reward", "tilt_reward")

# Window over which design invariants are checked; all scenario geometry and
# essentially all pre-model mass live inside it.
DESIGN_WINDOW = 6.0


@dataclasses.dataclass(frozen=True)
class Bump:
    """One smoothed axis-aligned box; tau None uses the landscape default."""
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    height: float
    tau: Optional[float] = None

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError(
                f"bump edges disagree in dimension: {len(self.lo)} vs {len(self.hi)}")
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"bump needs lo < hi on every axis, got {self.lo} {self.hi}")
        if self.tau is not None and self.tau <= 0.0:
            raise ValueError(f"bump tau must be positive, got {self.tau}")


def _bump_terms(x: Array, bump: Bump, default_tau: float) -> Tuple[Array, Array]:
    """Value (B,) and gradient (B, d) of one smoothed box at each row of x.

    With edge activations s_lo = sigmoid((x - lo)/tau), s_hi = sigmoid((hi - x)/tau)
    the per-axis factor is f = s_lo * s_hi and df/dx = f * (s_hi - s_lo) / tau,
    so the gradient of the product needs no division by f.
    """
    tau = bump.tau if bump.tau is not None else default_tau
    lo = np.asarray(bump.lo, dtype=float)
    hi = np.asarray(bump.hi, dtype=float)
    s_lo = expit((x - lo) / tau)
    s_hi = expit((hi - x) / tau)
    val = bump.height * np.prod(s_lo * s_hi, axis=1)
    grad = val[:, None] * (s_hi - s_lo) / tau
    return val, grad


@dataclasses.dataclass
class Landscape:
    """Piecewise-smooth analytic reward or cost surface.

    kind tags the semantics: stripe_cost values are costs (base floor plus a
    plateau plus catastrophic stripes), spike_reward values are rewards
    (tilt plus thin extreme-reward lines), tilt_reward is the bare linear
    term.  All groups are summed regardless of kind, so unused groups stay
    at their empty defaults.
    """
    kind: str
    tau: float = 0.05
    base: Optional[Bump] = None
    plateau: Optional[Bump] = None
    stripes: Tuple[Bump, ...] = ()
    spikes: Tuple[Bump, ...] = ()
    tilt: Tuple[float, ...] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in LANDSCAPE_KINDS:
            raise ValueError(
                f"unknown landscape kind '{self.kind}'; valid kinds are "
                f"{', '.join(LANDSCAPE_KINDS)}")
        if self.tau <= 0.0:
            raise ValueError(f"landscape tau must be positive, got {self.tau}")
        self.stripes = tuple(self.stripes)
        self.spikes = tuple(self.spikes)
        self.tilt = tuple(float(a) for a in self.tilt)

    def bumps(self) -> List[Bump]:
        out = [b for b in (self.base, self.plateau) if b is not None]
        out.extend(self.stripes)
        out.extend(self.spikes)
        return out

    @property
    def plateau_level(self) -> float:
        """Nominal value on the plateau top: floor height plus plateau height."""
        level = self.base.height if self.base is not None else 0.0
        if self.plateau is not None:
            level += self.plateau.height
        return level

    @property
    def moderate_level(self) -> float:
        """Nominal value of the moderate region: the floor away from all boxes."""
        return self.base.height if self.base is not None else 0.0

    def value_grad(self, x_batch: Array) -> Tuple[Array, Array]:
        """Values (B,) and gradients (B, d) of the landscape."""
        x = np.atleast_2d(np.asarray(x_batch, dtype=float))
        a = np.asarray(self.tilt, dtype=float)
        val = x @ a
        grad = np.broadcast_to(a, x.shape).copy()
        for bump in self.bumps():
            bv, bg = _bump_terms(x, bump, self.tau)
            val = val + bv
            grad = grad + bg
        return val, grad

    def value(self, x_batch: Array) -> Array:
        return self.value_grad(x_batch)[0]


def eval_reward(landscape: Landscape, x_batch: Array) -> Tuple[Array, Array]:
    """Landscape values and analytic gradients at each row of x_batch.

    For stripe_cost landscapes the returned values are costs; fine-tuning
    rewards are their negation (reward_handles applies the sign).
    """
    return landscape.value_grad(x_batch)


def reward_handles(landscape: Landscape) -> Tuple[Callable[[Array], Array],
                                                  Callable[[Array], Array]]:
    """(reward, reward_grad) callables with the sign fixed per kind."""
    sign = -1.0 if landscape.kind == "stripe_cost" else 1.0

    def reward(x: Array) -> Array:
        return sign * landscape.value_grad(x)[0]

    def reward_grad(x: Array) -> Array:
        return sign * landscape.value_grad(x)[1]

    return reward, reward_grad


# ---------------------------------------------------------------------------
# design invariants
# ---------------------------------------------------------------------------

def _box_grid(bump: Bump, per_axis: int = 25) -> Array:
    axes = [np.linspace(max(lo, -DESIGN_WINDOW), min(hi, DESIGN_WINDOW), per_axis)
            for lo, hi in zip(bump.lo, bump.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _in_box(x: Array, bump: Bump) -> Array:
    lo = np.asarray(bump.lo)
    hi = np.asarray(bump.hi)
    return np.all((x >= lo) & (x <= hi), axis=1)


def box_mass(target: pretrain.TargetDistribution, boxes: Tuple[Bump, ...],
             n: int = 200000, rng: Optional[np.random.Generator] = None) -> float:
    """Monte Carlo probability that a target draw lands inside any box."""
    if not boxes:
        return 0.0
    rng = rng or np.random.default_rng(0)
    x = target.sample(n, rng)
    hit = np.zeros(x.shape[0], dtype=bool)
    for bump in boxes:
        hit |= _in_box(x, bump)
    return float(np.mean(hit))


def design_report(landscape: Landscape, target: pretrain.TargetDistribution,
                  tail_mass: float,
                  rng: Optional[np.random.Generator] = None) -> dict:
    """Check the constructed orderings and rare-region mass; raise on violation.

    stripe_cost: the minimum cost inside every stripe box must exceed the
    moderate level, and stripe mass under the pre-model target must stay
    below the tail mass the functional averages over.  spike_reward: every
    spike's peak must exceed the largest non-spike value in the design
    window, and total spike mass must stay below the tail mass.
    """
    report = {"kind": landscape.kind}
    boxes: Tuple[Bump, ...] = ()
    if landscape.kind == "stripe_cost":
        boxes = landscape.stripes
        floor = landscape.moderate_level
        worst = np.inf
        for bump in boxes:
            worst = min(worst, float(np.min(landscape.value(_box_grid(bump)))))
        report["stripe_min"] = worst
        report["moderate_level"] = floor
        if boxes and worst <= floor:
            raise ValueError(
                f"stripe minimum {worst:.3f} does not exceed the moderate "
                f"level {floor:.3f}")
    elif landscape.kind == "spike_reward":
        boxes = landscape.spikes
        grid = np.linspace(-DESIGN_WINDOW, DESIGN_WINDOW, 241)
        mesh = np.meshgrid(grid, grid, indexing="ij")
        pts = np.column_stack([m.ravel() for m in mesh])
        outside = np.ones(pts.shape[0], dtype=bool)
        for bump in boxes:
            pad = 3.0 * (bump.tau if bump.tau is not None else landscape.tau)
            widened = Bump(tuple(l - pad for l in bump.lo),
                           tuple(h + pad for h in bump.hi), bump.height)
            outside &= ~_in_box(pts, widened)
        vals = landscape.value(pts)
        off_peak = float(np.max(vals[outside]))
        peaks = [float(np.max(landscape.value(_box_grid(bump)))) for bump in boxes]
        report["spike_peaks"] = peaks
        report["off_peak_max"] = off_peak
        if boxes and min(peaks) <= off_peak:
            raise ValueError(
                f"spike peak {min(peaks):.3f} does not exceed the largest "
                f"non-spike value {off_peak:.3f}")
    mass = box_mass(target, boxes, rng=rng)
    report["box_mass"] = mass
    report["tail_mass"] = tail_mass
    if boxes and mass >= tail_mass:
        raise ValueError(
            f"rare-region mass {mass:.4f} under the pre-model reaches the "
            f"tail target {tail_mass:.4f}; the boxes are not rare enough")
    return report


# ---------------------------------------------------------------------------
# scenario bundles
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PretrainSettings:
    """How the shared pre-model is trained for every scenario."""
    hidden: Tuple[int, ...] = (64, 64)
    steps: int = 25000
    batch: int = 512
    lr: float = 1e-3
    lr_final: Optional[float] = 5e-5
    activation: str = "silu"
    seed: int = 7


def pretrain_field(scn: "Scenario", verbose: bool = False) -> Tuple[flow.VelocityField, Array]:
    """Train the scenario's pre-model from its pretraining settings."""
    p = scn.pre
    return pretrain.cfm_train(
        scn.target, hidden=p.hidden, steps=p.steps, batch=p.batch, lr=p.lr,
        rng=np.random.default_rng(p.seed), activation=p.activation,
        lr_final=p.lr_final, verbose=verbose)


@dataclasses.dataclass
class Scenario:
    """Everything one experiment needs: target, landscape, specs, solver configs.

    am is the expected-reward baseline solver (its eta is the reciprocal of
    the baseline's divergence weight); the outer-loop solver settings live
    in fdc.am.  Iterating the bundle yields the (target, landscape, spec,
    fdc, am) tuple.
    """
    name: str
    target: pretrain.TargetDistribution
    landscape: Landscape
    spec: functionals.FunctionalSpec
    fdc: fdc_mod.FdcConfig
    am: AmConfig
    critic: Optional[functionals.CriticConfig] = None
    alphas: Tuple[float, ...] = ()
    metric: str = "euclidean"
    pre: PretrainSettings = dataclasses.field(default_factory=PretrainSettings)

    def __iter__(self) -> Iterator:
        return iter((self.target, self.landscape, self.spec, self.fdc, self.am))


def _std_normal_target() -> pretrain.TargetDistribution:
    return pretrain.TargetDistribution.gaussian(np.zeros(2), np.eye(2))


def _risk_target() -> pretrain.TargetDistribution:
    """Safe bulk on the low-cost floor plus a rare cluster on the plateau."""
    return pretrain.TargetDistribution.mixture(
        means=[np.array([0.15, 0.0]), np.array([-2.95, 0.0])],
        covs=[0.72 ** 2 * np.eye(2), 0.3 ** 2 * np.eye(2)],
        weights=[0.98, 0.02])


def _risk_averse() -> Scenario:
    landscape = Landscape(
        kind="stripe_cost",
        base=Bump((-14.0, -14.0), (14.0, 14.0), 90.0, tau=0.1),
        plateau=Bump((-9.0, -12.0), (-2.3, 12.0), 160.0, tau=0.15),
        stripes=(Bump((-3.5, -12.0), (-3.3, 12.0), 70.0, tau=0.06),
                 Bump((-3.9, -12.0), (-3.7, 12.0), 70.0, tau=0.06)),
    )
    reward, reward_grad = reward_handles(landscape)
    spec = functionals.FunctionalSpec(kind="cvar", beta=0.01,
                                      reward=reward, reward_grad=reward_grad)
    inner = AmConfig(eta=10.0, inner_steps=500, batch=192, lr=2e-2,
                     schedule=flow.NoiseSchedule(T=30))
    cfg = fdc_mod.FdcConfig(objective=functionals.Objective(utility=spec),
                            am=inner, K=2, eta_schedule=10.0, n_fv=1000)
    baseline = AmConfig(eta=3.5, inner_steps=1000, batch=128, lr=3e-6,
                        schedule=flow.NoiseSchedule(T=30))
    return Scenario(name="risk_averse", target=_risk_target(),
                    landscape=landscape, spec=spec, fdc=cfg, am=baseline)


def _novelty() -> Scenario:
    landscape = Landscape(
        kind="spike_reward",
        tilt=(20.0, 0.0),
        spikes=(Bump((2.9, -12.0), (3.1, 12.0), 400.0),
                Bump((3.9, -12.0), (4.1, 12.0), 560.0),
                Bump((4.9, -12.0), (5.1, 12.0), 720.0)),
    )
    reward, reward_grad = reward_handles(landscape)
    spec = functionals.FunctionalSpec(kind="sq", beta=0.99,
                                      reward=reward, reward_grad=reward_grad)
    inner = AmConfig(eta=0.625, inner_steps=600, batch=128, lr=2e-3,
                     schedule=flow.NoiseSchedule(T=30))
    cfg = fdc_mod.FdcConfig(objective=functionals.Objective(utility=spec),
                            am=inner, K=2, eta_schedule=0.625, n_fv=8000)
    baseline = AmConfig(eta=1.5, inner_steps=1000, batch=128, lr=2e-5,
                        schedule=flow.NoiseSchedule(T=30))
    return Scenario(name="novelty", target=_std_normal_target(),
                    landscape=landscape, spec=spec, fdc=cfg, am=baseline)


def _ot(name: str) -> Scenario:
    weights = (1.0, 7.0) if name == "ot_a" else (7.0, 1.0)
    landscape = Landscape(kind="tilt_reward", tilt=(0.35, 0.35))
    reward, reward_grad = reward_handles(landscape)
    spec = functionals.FunctionalSpec(kind="expectation",
                                      reward=reward, reward_grad=reward_grad)
    divergence = functionals.FunctionalSpec(
        kind="w1_to_pre", metric_weights=np.asarray(weights))
    critic = functionals.CriticConfig(steps=800, batch=512, lr=1e-4,
                                      lambda_gp=10.0,
                                      input_scale=np.asarray(weights))
    objective = functionals.Objective(utility=spec, divergence=divergence,
                                      alpha=0.15)
    inner = AmConfig(eta=6.666, inner_steps=300, batch=96, lr=2e-3,
                     schedule=flow.NoiseSchedule(T=30))
    cfg = fdc_mod.FdcConfig(objective=objective, am=inner, K=6,
                            eta_schedule=6.666, n_fv=768, critic=critic)
    baseline = AmConfig(eta=2.35, inner_steps=1000, batch=128, lr=1e-3,
                        schedule=flow.NoiseSchedule(T=30))
    return Scenario(name=name, target=_std_normal_target(),
                    landscape=landscape, spec=spec, fdc=cfg, am=baseline,
                    critic=critic, metric="d_A" if name == "ot_a" else "d_B")


def _explore() -> Scenario:
    landscape = Landscape(kind="tilt_reward", tilt=(0.0, 0.0))
    spec = functionals.FunctionalSpec(kind="entropy", score_time=0.9)
    divergence = functionals.FunctionalSpec(kind="kl_to_pre", score_time=0.9)
    objective = functionals.Objective(utility=spec, divergence=divergence,
                                      alpha=0.5)
    inner = AmConfig(eta=10.0, inner_steps=50, batch=48, lr=2e-3,
                     schedule=flow.NoiseSchedule(T=25))
    cfg = fdc_mod.FdcConfig(objective=objective, am=inner, K=50,
                            eta_schedule=10.0, n_fv=256)
    baseline = AmConfig(eta=1.0, inner_steps=500, batch=128, lr=1e-3,
                        schedule=flow.NoiseSchedule(T=25))
    return Scenario(name="explore", target=_std_normal_target(),
                    landscape=landscape, spec=spec, fdc=cfg, am=baseline,
                    alphas=(0.0, 0.01, 0.1, 0.5, 1.0))


_BUILDERS = {
    "risk_averse": _risk_averse,
    "novelty": _novelty,
    "ot_a": lambda: _ot("ot_a"),
    "ot_b": lambda: _ot("ot_b"),
    "explore": _explore,
}


def make_scenario(name: str) -> Scenario:
    """Build a named scenario bundle and assert its design invariants."""
    if name not in _BUILDERS:
        raise ValueError(
            f"unknown scenario '{name}'; available scenarios are "
            f"{', '.join(SCENARIO_NAMES)}")
    scn = _BUILDERS[name]()
    beta = scn.spec.beta
    tail = 1.0 if beta is None else (beta if scn.spec.kind == "cvar" else 1.0 - beta)
    design_report(scn.landscape, scn.target, tail)
    return scn
