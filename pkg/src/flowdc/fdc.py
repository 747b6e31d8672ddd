"""Outer mirror-descent loop for functional fine-tuning of a flow model.

Each outer iteration freezes the population statistics of the objective at
the current model (a terminal sample set plus any derived aux: tail
quantiles, a trained critic, score handles, a pinned kernel bandwidth),
forms the first-variation gradient as a linear reward, and hands the
resulting entropy-regularized linear problem to the adjoint-matching
solver.  The solver is warm-started from the current iterate and uses it
as its proximal anchor, so iteration k solves

    argmax_p <g_k, p> - (1/eta_k) KL(p || pi_{k-1}),   g_k = grad dG(pi_{k-1}).

Two distinct anchors are involved when the objective itself contains a
divergence-to-reference term: that term is always taken against the
original pre-trained model and its gradient is folded into the reward,
while the solver's own KL term anchors at the previous iterate.
"""

import dataclasses
import hashlib
import time
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import amsolver
from . import flow
from . import functionals

Array = np.ndarray


class FdcError(RuntimeError):
    """Outer-loop failure that names the iteration and keeps finished records."""

    def __init__(self, iteration: int, records: List["IterateRecord"],
                 cause: BaseException):
        super().__init__(f"fdc iteration {iteration} aborted: {cause}")
        self.iteration = iteration
        self.records = records


@dataclasses.dataclass
class FdcConfig:
    """Outer-loop settings.

    eta_schedule is either one positive number or a sequence of K numbers,
    one per iteration.  With a scalar, eta_mode picks the shape: `constant`
    repeats it, `geometric` uses eta_k = eta_1 * k so the mirror-descent
    step size 1/eta_k decays like 1/k.  The solver's KL weight at iteration
    k is 1/eta_k.  n_fv terminal samples per iteration feed the
    first-variation estimate and the per-iterate value estimates.
    """
    objective: Union[functionals.Objective, functionals.FunctionalSpec]
    am: amsolver.AmConfig
    K: int = 1
    eta_schedule: Union[float, Sequence[float]] = 1.0
    eta_mode: str = "constant"
    n_fv: int = 256
    seed: int = 0
    critic: Optional[functionals.CriticConfig] = None
    verbose: bool = False

    def __post_init__(self):
        if isinstance(self.objective, functionals.FunctionalSpec):
            self.objective = functionals.Objective(utility=self.objective)
        if self.K < 1:
            raise ValueError(f"outer iteration count K must be >= 1, got {self.K}")
        if self.n_fv < 64:
            raise ValueError(
                f"first-variation sample budget n_fv must be >= 64, got {self.n_fv}")
        if self.eta_mode not in ("constant", "geometric"):
            raise ValueError(
                f"eta_mode must be 'constant' or 'geometric', got '{self.eta_mode}'")
        if isinstance(self.eta_schedule, (int, float)):
            if float(self.eta_schedule) <= 0.0:
                raise ValueError(
                    f"eta must be positive, got {self.eta_schedule}")
        else:
            sched = [float(e) for e in self.eta_schedule]
            if len(sched) != self.K:
                raise ValueError(
                    f"eta_schedule has {len(sched)} entries but K={self.K} "
                    f"iterations")
            if any(e <= 0.0 for e in sched):
                raise ValueError(f"every eta_k must be positive, got {sched}")

    def etas(self) -> List[float]:
        """Per-iteration eta values, length K."""
        if not isinstance(self.eta_schedule, (int, float)):
            return [float(e) for e in self.eta_schedule]
        base = float(self.eta_schedule)
        if self.eta_mode == "geometric":
            return [base * k for k in range(1, self.K + 1)]
        return [base] * self.K


@dataclasses.dataclass
class IterateRecord:
    """Per-iterate snapshot; iteration 0 is the pre-trained model itself.

    functional_value and divergence are plug-in estimates on n_fv fresh
    terminal samples of this iterate; grad_norm is the mean row norm of the
    estimated first-variation gradient on the same samples.  seconds is the
    wall time of the iteration that produced this iterate (0 for the pre
    model).  aux_checksum hashes the aux inputs the producing iteration
    froze (previous-iterate weights plus the frozen sample sets), so a
    record proves its solve saw statistics of the previous iterate only.
    """
    iteration: int
    field: flow.VelocityField
    functional_value: float
    divergence: float
    grad_norm: float
    seconds: float
    aux_checksum: str = ""


def iteration_streams(seed: int, K: int) -> List[Tuple[np.random.Generator,
                                                       np.random.Generator]]:
    """Independent (sampling, solver) generator pairs for K iterations.

    One root SeedSequence spawns 2K children; iteration k (1-based) draws
    sampling/aux randomness from child 2(k-1) and inner-solver randomness
    from child 2(k-1)+1.  Keeping the streams separate means sampling work
    never advances the solver stream, so a K=1 run reproduces a direct
    amsolver.solve call bit for bit when handed the same solver stream.
    """
    root = np.random.SeedSequence(seed)
    children = root.spawn(2 * K)
    return [(np.random.default_rng(children[2 * i]),
             np.random.default_rng(children[2 * i + 1]))
            for i in range(K)]


def _specs(obj: functionals.Objective) -> List[functionals.FunctionalSpec]:
    out = [obj.utility]
    if obj.divergence is not None:
        out.append(obj.divergence)
    return out


def _kinds(obj: functionals.Objective) -> set:
    return {s.kind for s in _specs(obj)}


def _needs_pre_samples(obj: functionals.Objective) -> bool:
    return bool(_kinds(obj) & {"kl_to_pre", "w1_to_pre", "mmd_to_pre"})


def _score_time(obj: functionals.Objective) -> Optional[float]:
    for s in _specs(obj):
        if s.score_time is not None:
            return s.score_time
    return None


def _build_aux(obj: functionals.Objective, cur: flow.VelocityField,
               pre: flow.VelocityField, p_samples: Array,
               pre_samples: Optional[Array], schedule: flow.NoiseSchedule,
               critic_cfg: Optional[functionals.CriticConfig],
               rng: np.random.Generator) -> functionals.ModelHandles:
    """Freeze the evaluation context of one outer iteration.

    Score handles wrap the current and reference fields at the requested
    score time; a critic is trained fresh on the frozen sample sets when a
    Wasserstein term is present; the kernel bandwidth is pinned so value
    and gradient see the same width all iteration.
    """
    kinds = _kinds(obj)
    t_score = _score_time(obj)
    handles = functionals.ModelHandles(pre_samples=pre_samples)
    if kinds & {"entropy", "kl_to_pre"}:
        handles.score_cur = functionals.score_handle(cur, schedule, t=t_score)
    if "kl_to_pre" in kinds:
        handles.score_pre = functionals.score_handle(pre, schedule, t=t_score)
    if "w1_to_pre" in kinds:
        handles.critic = functionals.train_critic(
            p_samples, pre_samples, critic_cfg or functionals.CriticConfig(),
            rng=rng)
    if "mmd_to_pre" in kinds:
        spec = next(s for s in _specs(obj) if s.kind == "mmd_to_pre")
        if spec.bandwidth is not None:
            handles.mmd_bandwidth = spec.bandwidth
        else:
            handles.mmd_bandwidth = functionals.median_bandwidth(
                p_samples, pre_samples)
    return handles


def aux_checksum(field: flow.VelocityField, p_samples: Array,
                 pre_samples: Optional[Array] = None) -> str:
    """sha256 over the aux inputs of one iteration.

    Covers the weights of the field the aux was frozen at plus the frozen
    sample sets, so the digest changes whenever the iterate or its frozen
    statistics do.
    """
    digest = hashlib.sha256()
    net = getattr(field, "net", None)
    if net is not None:
        for arr in net.params():
            digest.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    digest.update(np.ascontiguousarray(p_samples, dtype=float).tobytes())
    if pre_samples is not None:
        digest.update(np.ascontiguousarray(pre_samples, dtype=float).tobytes())
    return digest.hexdigest()


def _iterate_stats(obj: functionals.Objective, p_samples: Array,
                   aux: functionals.ModelHandles) -> Tuple[float, float, float]:
    """Value, divergence, and mean gradient row norm on one sample set."""
    util, div = functionals.objective_values(obj, p_samples, aux)
    g_rows = functionals.objective_grad(obj, p_samples, p_samples, aux)
    grad_norm = float(np.mean(np.linalg.norm(g_rows, axis=1)))
    return util, div, grad_norm


def run(pre: flow.VelocityField,
        cfg: FdcConfig) -> Tuple[flow.VelocityField, List[IterateRecord]]:
    """Run K outer iterations from the pre-trained model.

    Returns the final field and one record per iterate, including iteration
    0 for the pre model.  Terminal samples are drawn with the memoryless
    sampler, the same chain the inner solver tilts.  Any failure raises
    FdcError carrying the iteration index and the records finished so far.
    """
    obj = cfg.objective
    sch = cfg.am.schedule
    etas = cfg.etas()
    streams = iteration_streams(cfg.seed, cfg.K)
    need_pre = _needs_pre_samples(obj)

    records: List[IterateRecord] = []
    cur = pre
    prev_seconds = 0.0
    prev_checksum = ""
    for k in range(1, cfg.K + 1):
        fv_rng, solve_rng = streams[k - 1]
        t0 = time.perf_counter()
        try:
            p_samples = flow.sample_memoryless(cur, cfg.n_fv, sch, fv_rng).terminal
            pre_samples = None
            if need_pre:
                pre_samples = flow.sample_memoryless(
                    pre, cfg.n_fv, sch, fv_rng).terminal
            aux = _build_aux(obj, cur, pre, p_samples, pre_samples, sch,
                             cfg.critic, fv_rng)
            checksum = aux_checksum(cur, p_samples, pre_samples)
            util, div, grad_norm = _iterate_stats(obj, p_samples, aux)
            records.append(IterateRecord(
                iteration=k - 1, field=cur, functional_value=util,
                divergence=div, grad_norm=grad_norm, seconds=prev_seconds,
                aux_checksum=prev_checksum))
            if cfg.verbose:
                print(f"[fdc] iter={k - 1} value={util:.6g} div={div:.6g} "
                      f"gnorm={grad_norm:.6g} sec={prev_seconds:.2f}")

            def reward_grad(x: Array, _p: Array = p_samples,
                            _aux: functionals.ModelHandles = aux) -> Array:
                return functionals.objective_grad(obj, _p, x, _aux)

            am_k = dataclasses.replace(cfg.am, eta=etas[k - 1])
            cur = amsolver.solve(cur, cur, reward_grad, am_k, rng=solve_rng)
            prev_seconds = time.perf_counter() - t0
            prev_checksum = checksum
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            if isinstance(exc, FdcError):
                raise
            raise FdcError(k, records, exc) from exc

    fv_rng = streams[-1][0]
    try:
        p_samples = flow.sample_memoryless(cur, cfg.n_fv, sch, fv_rng).terminal
        pre_samples = None
        if need_pre:
            pre_samples = flow.sample_memoryless(
                pre, cfg.n_fv, sch, fv_rng).terminal
        aux = _build_aux(obj, cur, pre, p_samples, pre_samples, sch,
                         cfg.critic, fv_rng)
        util, div, grad_norm = _iterate_stats(obj, p_samples, aux)
        records.append(IterateRecord(
            iteration=cfg.K, field=cur, functional_value=util,
            divergence=div, grad_norm=grad_norm, seconds=prev_seconds,
            aux_checksum=prev_checksum))
        if cfg.verbose:
            print(f"[fdc] iter={cfg.K} value={util:.6g} div={div:.6g} "
                  f"gnorm={grad_norm:.6g} sec={prev_seconds:.2f}")
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        raise FdcError(cfg.K, records, exc) from exc
    return cur, records


def monitor_stationarity(records: Sequence[IterateRecord]) -> dict:
    """Convergence report over a trajectory of iterate records.

    Reports per-iterate functional values, their first differences, and the
    gradient-norm trace, and flags the iterations whose value dropped below
    the previous one.  A run stalling at a stationary point shows both the
    differences and the gradient norms shrinking toward zero.
    """
    if len(records) < 2:
        raise ValueError(
            f"stationarity monitor needs at least 2 records, got {len(records)}")
    values = [float(r.functional_value) for r in records]
    grad_norms = [float(r.grad_norm) for r in records]
    diffs = [values[i + 1] - values[i] for i in range(len(values) - 1)]
    non_monotone = [i + 1 for i, d in enumerate(diffs) if d < 0.0]
    return {
        "values": values,
        "first_differences": diffs,
        "grad_norms": grad_norms,
        "non_monotone": non_monotone,
        "monotone": not non_monotone,
    }
