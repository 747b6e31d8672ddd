"""Command-line front end: config files, run artifacts, and the K ablation.

Every run writes its artifacts into a directory the caller names: a
checkpoint in the text format of numkit.save_checkpoint, CSV traces, the
fully resolved config, and a provenance file recording the seed and the
SHA-256 of every input.  Configs are flat ``section.key = value`` text;
any key omitted falls back to the named scenario's bundled value, unknown
keys are rejected, and validation reports every violated key at once.

Thread control: set FDC_THREADS before launch to pin the BLAS pool size.
This module reads it before importing numpy, which is why the env fixup
sits above the imports.
"""

import os

_threads = os.environ.get("FDC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import dataclasses
import hashlib
import sys
import time
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import amsolver
from . import evalkit
from . import fdc as fdc_mod
from . import flow
from . import functionals
from . import numkit
from . import scenarios
from . import simplexlab

Array = np.ndarray

DIVERGENCE_KINDS = ("kl_to_pre", "w1_to_pre", "mmd_to_pre")

# Value grammar, one tag per key.  "opt_*" accepts the literal "none";
# list tags are comma separated and "none" means the empty tuple.
SCHEMA: Dict[str, str] = {
    "scenario": "str",
    "seed": "int",
    "pretrain.hidden": "ints",
    "pretrain.steps": "int",
    "pretrain.batch": "int",
    "pretrain.lr": "float",
    "pretrain.lr_final": "opt_float",
    "pretrain.activation": "str",
    "pretrain.seed": "int",
    "flow.sigma0": "float",
    "flow.t_min": "float",
    "flow.t_eps": "float",
    "flow.sigma_mode": "str",
    "functional.kind": "str",
    "functional.beta": "opt_float",
    "functional.score_time": "opt_float",
    "functional.div_kind": "opt_str",
    "functional.alpha": "float",
    "functional.metric_weights": "opt_floats",
    "functional.alphas": "opt_floats",
    "functional.critic_steps": "int",
    "functional.critic_batch": "int",
    "functional.critic_lr": "float",
    "functional.critic_lambda_gp": "float",
    "am.eta": "float",
    "am.inner_steps": "int",
    "am.batch": "int",
    "am.lr": "float",
    "am.t": "int",
    "fdc.k": "int",
    "fdc.eta": "float",
    "fdc.n_fv": "int",
    "fdc.inner_steps": "int",
    "fdc.batch": "int",
    "fdc.lr": "float",
    "fdc.t": "int",
    "eval.n": "int",
    "eval.seed": "int",
    "output.svg": "int",
}

_CHOICES: Dict[str, Tuple[str, ...]] = {
    "scenario": scenarios.SCENARIO_NAMES,
    "pretrain.activation": numkit.ACTIVATIONS,
    "flow.sigma_mode": ("memoryless", "linear"),
    "functional.kind": functionals.VALID_KINDS,
    "functional.div_kind": DIVERGENCE_KINDS,
}


class ConfigError(ValueError):
    """Config text failed validation; .violations lists every problem."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n" + "\n".join(
            "  - " + v for v in self.violations))


@dataclasses.dataclass
class ExperimentConfig:
    """Parsed key/value overrides; only the keys present in the text."""

    values: Dict[str, object]


def _parse_value(key: str, raw: str):
    tag = SCHEMA[key]
    opt = tag.startswith("opt_")
    if opt and raw == "none":
        return () if tag.endswith("s") else None
    base = tag[4:] if opt else tag
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    if base == "str":
        choices = _CHOICES.get(key)
        if choices is not None and raw not in choices:
            raise ValueError(
                f"must be one of {', '.join(choices)}, got '{raw}'")
        return raw
    if base == "ints":
        return tuple(int(p) for p in raw.split(","))
    if base == "floats":
        return tuple(float(p) for p in raw.split(","))
    raise AssertionError(f"unhandled schema tag {tag}")


def _format_value(key: str, value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if not value:
            return "none"
        return ",".join(_format_value(key, v) for v in value)
    if isinstance(value, bool):
        raise AssertionError(f"no boolean keys in the schema ({key})")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat key = value text; raise ConfigError listing every issue."""
    values: Dict[str, object] = {}
    violations: List[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            violations.append(f"line {lineno}: expected 'key = value', "
                              f"got '{stripped}'")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            violations.append(f"line {lineno}: unknown key '{key}'")
            continue
        if key in values:
            violations.append(f"line {lineno}: duplicate key '{key}'")
            continue
        if key == "functional.kind" and raw in functionals.UNSUPPORTED_KINDS:
            violations.append(
                f"line {lineno}: functional.kind '{raw}' is out of scope: "
                + functionals.UNSUPPORTED_KINDS[raw])
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as err:
            violations.append(f"line {lineno}: {key}: {err}")
    if violations:
        raise ConfigError(violations)
    return ExperimentConfig(values=values)


def dump_config(values: Dict[str, object]) -> str:
    """Render a full or partial value dict in schema order."""
    lines = [f"{key} = {_format_value(key, values[key])}"
             for key in SCHEMA if key in values]
    extra = set(values) - set(SCHEMA)
    if extra:
        raise ValueError(f"keys outside the schema: {sorted(extra)}")
    return "\n".join(lines) + "\n"


def bundle_config(scn: "scenarios.Scenario") -> Dict[str, object]:
    """Flatten a scenario bundle into a complete config value dict."""
    obj = scn.fdc.objective
    util = obj.utility
    div = obj.divergence
    inner_sched = scn.fdc.am.schedule
    critic = scn.critic if scn.critic is not None else functionals.CriticConfig()
    mw = div.metric_weights if div is not None else None
    if mw is not None:
        mw = tuple(float(w) for w in np.asarray(mw, dtype=float))
    score_time = util.score_time
    if score_time is None and div is not None:
        score_time = div.score_time
    return {
        "scenario": scn.name,
        "seed": scn.fdc.seed,
        "pretrain.hidden": tuple(scn.pre.hidden),
        "pretrain.steps": scn.pre.steps,
        "pretrain.batch": scn.pre.batch,
        "pretrain.lr": scn.pre.lr,
        "pretrain.lr_final": scn.pre.lr_final,
        "pretrain.activation": scn.pre.activation,
        "pretrain.seed": scn.pre.seed,
        "flow.sigma0": inner_sched.sigma0,
        "flow.t_min": inner_sched.t_min,
        "flow.t_eps": inner_sched.t_eps,
        "flow.sigma_mode": inner_sched.sigma_mode,
        "functional.kind": util.kind,
        "functional.beta": util.beta,
        "functional.score_time": score_time,
        "functional.div_kind": div.kind if div is not None else None,
        "functional.alpha": obj.alpha,
        "functional.metric_weights": mw,
        "functional.alphas": tuple(float(a) for a in scn.alphas),
        "functional.critic_steps": critic.steps,
        "functional.critic_batch": critic.batch,
        "functional.critic_lr": critic.lr,
        "functional.critic_lambda_gp": critic.lambda_gp,
        "am.eta": scn.am.eta,
        "am.inner_steps": scn.am.inner_steps,
        "am.batch": scn.am.batch,
        "am.lr": scn.am.lr,
        "am.t": scn.am.schedule.T,
        "fdc.k": scn.fdc.K,
        "fdc.eta": float(scn.fdc.eta_schedule) if isinstance(
            scn.fdc.eta_schedule, (int, float)) else float(
            scn.fdc.eta_schedule[0]),
        "fdc.n_fv": scn.fdc.n_fv,
        "fdc.inner_steps": scn.fdc.am.inner_steps,
        "fdc.batch": scn.fdc.am.batch,
        "fdc.lr": scn.fdc.am.lr,
        "fdc.t": inner_sched.T,
        "eval.n": 10000,
        "eval.seed": 1000,
        "output.svg": 1,
    }


_REWARDED_KINDS = ("expectation", "cvar", "sq", "mean_variance")


def resolve_values(cfg: ExperimentConfig) -> Dict[str, object]:
    """Merge overrides onto the named scenario's full value dict."""
    name = cfg.values.get("scenario")
    if name is None:
        raise ConfigError(["missing required key 'scenario'"])
    values = bundle_config(scenarios.make_scenario(str(name)))
    values.update(cfg.values)
    return values


def build_bundle(cfg: ExperimentConfig) -> "scenarios.Scenario":
    """Materialise a scenario bundle: named defaults plus the overrides."""
    v = resolve_values(cfg)
    scn = scenarios.make_scenario(str(v["scenario"]))

    reward, reward_grad = scenarios.reward_handles(scn.landscape)
    kind = str(v["functional.kind"])
    spec_kwargs: Dict[str, object] = {"kind": kind}
    if kind in _REWARDED_KINDS:
        spec_kwargs["reward"] = reward
        spec_kwargs["reward_grad"] = reward_grad
    if v["functional.beta"] is not None:
        spec_kwargs["beta"] = v["functional.beta"]
    if kind == "entropy" and v["functional.score_time"] is not None:
        spec_kwargs["score_time"] = v["functional.score_time"]
    util = functionals.FunctionalSpec(**spec_kwargs)

    divergence = None
    critic = None
    div_kind = v["functional.div_kind"]
    if div_kind is not None:
        div_kwargs: Dict[str, object] = {"kind": str(div_kind)}
        if div_kind == "w1_to_pre" and v["functional.metric_weights"]:
            div_kwargs["metric_weights"] = np.asarray(
                v["functional.metric_weights"], dtype=float)
        if div_kind == "kl_to_pre" and v["functional.score_time"] is not None:
            div_kwargs["score_time"] = v["functional.score_time"]
        divergence = functionals.FunctionalSpec(**div_kwargs)
    if div_kind == "w1_to_pre":
        scale = None
        if v["functional.metric_weights"]:
            scale = np.asarray(v["functional.metric_weights"], dtype=float)
        critic = functionals.CriticConfig(
            steps=int(v["functional.critic_steps"]),
            batch=int(v["functional.critic_batch"]),
            lr=float(v["functional.critic_lr"]),
            lambda_gp=float(v["functional.critic_lambda_gp"]),
            input_scale=scale)
    objective = functionals.Objective(
        utility=util, divergence=divergence, alpha=float(v["functional.alpha"]))

    def _sched(steps_key: str) -> flow.NoiseSchedule:
        return flow.NoiseSchedule(
            T=int(v[steps_key]), sigma0=float(v["flow.sigma0"]),
            t_min=float(v["flow.t_min"]), t_eps=float(v["flow.t_eps"]),
            sigma_mode=str(v["flow.sigma_mode"]))

    am = amsolver.AmConfig(
        eta=float(v["am.eta"]), inner_steps=int(v["am.inner_steps"]),
        batch=int(v["am.batch"]), lr=float(v["am.lr"]), schedule=_sched("am.t"))
    inner = amsolver.AmConfig(
        eta=float(v["fdc.eta"]), inner_steps=int(v["fdc.inner_steps"]),
        batch=int(v["fdc.batch"]), lr=float(v["fdc.lr"]),
        schedule=_sched("fdc.t"))
    fdc_cfg = fdc_mod.FdcConfig(
        objective=objective, am=inner, K=int(v["fdc.k"]),
        eta_schedule=float(v["fdc.eta"]), n_fv=int(v["fdc.n_fv"]),
        seed=int(v["seed"]), critic=critic)
    pre = dataclasses.replace(
        scn.pre, hidden=tuple(int(h) for h in v["pretrain.hidden"]),
        steps=int(v["pretrain.steps"]), batch=int(v["pretrain.batch"]),
        lr=float(v["pretrain.lr"]), lr_final=v["pretrain.lr_final"],
        activation=str(v["pretrain.activation"]), seed=int(v["pretrain.seed"]))
    return dataclasses.replace(
        scn, spec=util, fdc=fdc_cfg, am=am, critic=critic,
        alphas=tuple(v["functional.alphas"]), pre=pre)


def load_bundle(config_path: Optional[str], scenario: Optional[str],
                seed: Optional[int]
                ) -> Tuple["scenarios.Scenario", Dict[str, object]]:
    """Build a bundle plus its resolved value dict from file and flags."""
    values: Dict[str, object] = {}
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            values.update(parse_config(fh.read()).values)
    if scenario is not None:
        values["scenario"] = scenario
    if seed is not None:
        values["seed"] = int(seed)
    cfg = ExperimentConfig(values=values)
    return build_bundle(cfg), resolve_values(cfg)


# ---------------------------------------------------------------------------
# run artifacts


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_csv(path: str, header: Sequence[str],
               rows: Sequence[Sequence[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(c) for c in row])


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_provenance(outdir: str, command: str, seed: int,
                      inputs: Dict[str, bytes]) -> None:
    lines = [f"command = {command}", f"seed = {seed}"]
    for label in sorted(inputs):
        lines.append(f"input_sha256.{label} = {_sha256(inputs[label])}")
    _write_text(os.path.join(outdir, "provenance.txt"), "\n".join(lines) + "\n")


def _write_run_config(outdir: str, values: Dict[str, object]) -> str:
    text = dump_config(values)
    _write_text(os.path.join(outdir, "config.txt"), text)
    return text


def _require_file(path: str, what: str) -> Optional[str]:
    if not os.path.isfile(path):
        return f"[cli] {what} not found: {path}"
    return None


# ---------------------------------------------------------------------------
# plotting (self-contained SVG, no drawing dependency)


def _svg_open(width: int, height: int, title: str) -> List[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="18" font-size="13" '
        f'text-anchor="middle" font-family="sans-serif">{title}</text>',
    ]


def svg_scatter(path: str, points: Array, title: str = "") -> None:
    """Write a 2-d scatter plot; points is (n, 2)."""
    pts = np.asarray(points, dtype=float)[:, :2]
    w, h, pad = 480, 480, 40
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    xs = pad + (pts[:, 0] - lo[0]) / span[0] * (w - 2 * pad)
    ys = h - pad - (pts[:, 1] - lo[1]) / span[1] * (h - 2 * pad)
    out = _svg_open(w, h, title)
    out.append(f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" '
               f'height="{h - 2 * pad}" fill="none" stroke="#888"/>')
    for x, y in zip(xs, ys):
        out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.5" '
                   f'fill="#36c" fill-opacity="0.5"/>')
    for frac in (0.0, 0.5, 1.0):
        vx = lo[0] + frac * span[0]
        vy = lo[1] + frac * span[1]
        px = pad + frac * (w - 2 * pad)
        py = h - pad - frac * (h - 2 * pad)
        out.append(f'<text x="{px:.0f}" y="{h - pad + 16}" font-size="10" '
                   f'text-anchor="middle" font-family="sans-serif">'
                   f'{vx:.2f}</text>')
        out.append(f'<text x="{pad - 6}" y="{py:.0f}" font-size="10" '
                   f'text-anchor="end" font-family="sans-serif">{vy:.2f}</text>')
    out.append("</svg>")
    _write_text(path, "\n".join(out) + "\n")


def svg_curve(path: str, ys: Sequence[float], title: str = "",
              xlabel: str = "iteration") -> None:
    """Write a polyline plot of ys against its index."""
    vals = np.asarray(list(ys), dtype=float)
    w, h, pad = 480, 320, 40
    lo = float(vals.min())
    hi = float(vals.max())
    span = max(hi - lo, 1e-9)
    n = len(vals)
    xs = pad + np.arange(n) / max(n - 1, 1) * (w - 2 * pad)
    py = h - pad - (vals - lo) / span * (h - 2 * pad)
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, py))
    out = _svg_open(w, h, title)
    out.append(f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" '
               f'height="{h - 2 * pad}" fill="none" stroke="#888"/>')
    out.append(f'<polyline points="{pts}" fill="none" stroke="#c33" '
               f'stroke-width="1.5"/>')
    out.append(f'<text x="{w // 2}" y="{h - 8}" font-size="11" '
               f'text-anchor="middle" font-family="sans-serif">{xlabel}</text>')
    out.append(f'<text x="{pad - 6}" y="{h - pad}" font-size="10" '
               f'text-anchor="end" font-family="sans-serif">{lo:.3g}</text>')
    out.append(f'<text x="{pad - 6}" y="{pad + 4}" font-size="10" '
               f'text-anchor="end" font-family="sans-serif">{hi:.3g}</text>')
    out.append("</svg>")
    _write_text(path, "\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# metrics


def headline_metric(scn: "scenarios.Scenario", field, n: int = 10000,
                    seed: int = 1000) -> Tuple[str, float]:
    """The scenario's primary scalar: tail cost, tail reward, mean, or entropy."""
    x = flow.sample_memoryless(
        field, n, scn.fdc.am.schedule, np.random.default_rng(seed)).terminal
    reward, _ = scenarios.reward_handles(scn.landscape)
    kind = scn.spec.kind
    if kind == "cvar":
        cost = scn.landscape.value(x)
        return "cvar_tail_cost", float(
            evalkit.tail_report(cost, 1.0 - scn.spec.beta).sq)
    if kind == "sq":
        return "sq_tail_reward", float(
            evalkit.tail_report(reward(x), scn.spec.beta).sq)
    if kind == "entropy":
        return "mc_entropy", float(evalkit.mc_entropy(x))
    return "mean_reward", float(np.mean(reward(x)))


def ablate_k(scenario: Union[str, "scenarios.Scenario"],
             k_list: Sequence[int], n_inner: int, out: str,
             pre=None, seed: int = 0, eval_n: int = 10000
             ) -> List[Tuple[int, float, float]]:
    """Vary the outer iteration count at fixed per-iteration inner steps.

    Runs the outer loop once per K in k_list with the scenario's bundle,
    overriding K and the inner gradient-step count, and writes one CSV row
    (K, runtime_seconds, metric) per run.  The K=0 row is the untouched
    pre-model, so total budget K * n_inner scales the runtime linearly and
    the metric column shows what the extra proximal restarts buy.
    """
    scn = scenarios.make_scenario(scenario) if isinstance(
        scenario, str) else scenario
    if not k_list:
        raise ValueError("k_list must be non-empty")
    if pre is None:
        pre, _ = scenarios.pretrain_field(scn)
    name, base = headline_metric(scn, pre, n=eval_n)
    rows: List[Tuple[int, float, float]] = [(0, 0.0, base)]
    for k in k_list:
        inner = dataclasses.replace(scn.fdc.am, inner_steps=int(n_inner))
        cfg = dataclasses.replace(
            scn.fdc, am=inner, K=int(k), seed=int(seed))
        t0 = time.perf_counter()
        field, _ = fdc_mod.run(pre, cfg)
        runtime = time.perf_counter() - t0
        _, metric = headline_metric(scn, field, n=eval_n)
        rows.append((int(k), float(runtime), float(metric)))
        print(f"[ablate-k] K={k} n_inner={n_inner} runtime={runtime:.1f}s "
              f"{name}={metric:.4f}")
    _write_csv(out, ("K", "runtime_seconds", "metric"), rows)
    return rows


# ---------------------------------------------------------------------------
# subcommands


def _cmd_scenario(args) -> int:
    if args.action != "dump":
        print(f"[cli] unknown scenario action '{args.action}'")
        return 2
    scn = scenarios.make_scenario(args.name)
    sys.stdout.write(dump_config(bundle_config(scn)))
    return 0


def _cmd_pretrain(args) -> int:
    scn, values = load_bundle(args.config, args.scenario, None)
    os.makedirs(args.outdir, exist_ok=True)
    field, losses = scenarios.pretrain_field(scn, verbose=args.verbose)
    ckpt = os.path.join(args.outdir, "ckpt.txt")
    field.save(ckpt)
    _write_csv(os.path.join(args.outdir, "pretrain_steps.csv"),
               ("step", "loss"),
               [(i, float(l)) for i, l in enumerate(losses)])
    text = _write_run_config(args.outdir, values)
    _write_provenance(args.outdir, "pretrain", scn.pre.seed,
                      {"config": text.encode("utf-8")})
    tail = float(np.mean(losses[-200:]))
    print(f"[pretrain] scenario={scn.name} steps={scn.pre.steps} "
          f"tail_loss={tail:.4f} ckpt={ckpt}")
    return 0


def _load_ckpt(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    return flow.VelocityField.load(path), raw


def _cmd_finetune_am(args) -> int:
    msg = _require_file(args.ckpt, "checkpoint")
    if msg:
        print(msg)
        return 1
    scn, values = load_bundle(args.config, args.scenario, args.seed)
    seed = scn.fdc.seed
    os.makedirs(args.outdir, exist_ok=True)
    pre, raw = _load_ckpt(args.ckpt)
    _, reward_grad = scenarios.reward_handles(scn.landscape)
    history: List[dict] = []
    tuned = amsolver.solve(pre, pre, reward_grad, scn.am,
                           rng=np.random.default_rng(seed + 500),
                           history=history)
    tuned.save(os.path.join(args.outdir, "ckpt.txt"))
    _write_csv(os.path.join(args.outdir, "am_steps.csv"),
               ("step", "loss", "mean_reward"),
               [(row["step"], row["loss"], row["mean_reward"])
                for row in history])
    text = _write_run_config(args.outdir, values)
    _write_provenance(args.outdir, "finetune-am", seed,
                      {"config": text.encode("utf-8"), "ckpt": raw})
    last = history[-1] if history else {"mean_reward": float("nan")}
    print(f"[finetune-am] scenario={scn.name} steps={scn.am.inner_steps} "
          f"mean_reward={last['mean_reward']:.4f}")
    return 0


def _cmd_finetune_fdc(args) -> int:
    msg = _require_file(args.ckpt, "checkpoint")
    if msg:
        print(msg)
        return 1
    scn, values = load_bundle(args.config, args.scenario, args.seed)
    seed = scn.fdc.seed
    os.makedirs(args.outdir, exist_ok=True)
    pre, raw = _load_ckpt(args.ckpt)
    text = _write_run_config(args.outdir, values)
    _write_provenance(args.outdir, "finetune-fdc", seed,
                      {"config": text.encode("utf-8"), "ckpt": raw})
    failed: Optional[fdc_mod.FdcError] = None
    try:
        field, records = fdc_mod.run(pre, scn.fdc)
    except fdc_mod.FdcError as err:
        failed = err
        field = None
        records = err.records
    # records.csv must be bit-identical under a repeated seed, so the
    # wall-clock column lives in its own file.
    _write_csv(os.path.join(args.outdir, "records.csv"),
               ("iteration", "functional_value", "divergence", "grad_norm"),
               [(i, rec.functional_value, rec.divergence, rec.grad_norm)
                for i, rec in enumerate(records)])
    _write_csv(os.path.join(args.outdir, "timings.csv"),
               ("iteration", "seconds"),
               [(i, rec.seconds) for i, rec in enumerate(records)])
    if records and values["output.svg"]:
        svg_curve(os.path.join(args.outdir, "values.svg"),
                  [rec.functional_value for rec in records],
                  title=f"{scn.name}: functional value per outer iteration")
    if failed is not None:
        print(f"[finetune-fdc] failed at iteration {failed.iteration}: "
              f"{failed}")
        return 1
    field.save(os.path.join(args.outdir, "ckpt.txt"))
    print(f"[finetune-fdc] scenario={scn.name} K={scn.fdc.K} "
          f"value={records[-1].functional_value:.4f} "
          f"divergence={records[-1].divergence:.4f}")
    return 0


def _cmd_eval(args) -> int:
    msg = _require_file(args.ckpt, "checkpoint")
    if msg:
        print(msg)
        return 1
    scn, values = load_bundle(args.config, args.scenario, None)
    field, _ = _load_ckpt(args.ckpt)
    n = int(values["eval.n"]) if args.n is None else args.n
    seed = int(values["eval.seed"]) if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    x = flow.sample_memoryless(field, n, scn.fdc.am.schedule, rng).terminal
    reward, _ = scenarios.reward_handles(scn.landscape)
    rows: List[Tuple[str, float, int, int]] = [
        ("mean_reward", float(np.mean(reward(x))), n, seed)]
    kind = scn.spec.kind
    if kind == "cvar":
        rows.append(("cvar_tail_cost",
                     float(evalkit.tail_report(
                         scn.landscape.value(x), 1.0 - scn.spec.beta).sq),
                     n, seed))
    elif kind == "sq":
        rows.append(("sq_tail_reward",
                     float(evalkit.tail_report(reward(x), scn.spec.beta).sq),
                     n, seed))
    if n >= 100:
        rows.append(("mc_entropy", float(evalkit.mc_entropy(x)), n, seed))
    _write_csv(args.out, ("metric", "value", "n", "seed"), rows)
    if values["output.svg"]:
        svg_scatter(os.path.splitext(args.out)[0] + ".svg", x,
                    title=f"{scn.name}: {n} samples")
    for name, value, _, _ in rows:
        print(f"[eval] {name}={value:.4f}")
    return 0


def _cmd_simplex_check(args) -> int:
    rows = []
    for trial in range(args.trials):
        rng = np.random.default_rng(trial)
        r = rng.normal(size=args.n) * 2.0
        p0 = rng.dirichlet(np.ones(args.n))
        alpha = float(rng.uniform(0.5, 2.0))
        res1 = simplexlab.verify_theorem1(r, p0, alpha)
        u = rng.dirichlet(np.ones(args.n))
        res2 = simplexlab.verify_rate_quadratic(u, p0, K=50)
        rows.append((trial, args.n, alpha,
                     float(res1["one_step_sup_err"]),
                     float(res2["slack_factor"])))
    _write_csv(args.out, ("trial", "n", "alpha", "one_step_sup_err",
                          "rate_slack_factor"), rows)
    worst = max(row[3] for row in rows)
    print(f"[simplex-check] trials={args.trials} n={args.n} "
          f"worst_one_step_err={worst:.3e}")
    return 0


def _cmd_ablate_k(args) -> int:
    scn, _ = load_bundle(args.config, args.scenario, None)
    pre = None
    if args.ckpt is not None:
        msg = _require_file(args.ckpt, "checkpoint")
        if msg:
            print(msg)
            return 1
        pre, _ = _load_ckpt(args.ckpt)
    k_list = [int(p) for p in args.k_list.split(",") if p.strip()]
    ablate_k(scn, k_list, args.n_inner, args.out, pre=pre, seed=args.seed)
    print(f"[ablate-k] wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_bundle_args(sub, require_scenario: bool) -> None:
    sub.add_argument("--scenario", required=require_scenario,
                     choices=scenarios.SCENARIO_NAMES, default=None)
    sub.add_argument("--config", default=None,
                     help="optional key = value override file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowdc",
        description="Train, fine-tune, and evaluate the bundled 2-d "
                    "flow-matching scenarios.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("scenario", help="print a scenario's resolved config")
    p.add_argument("action", choices=("dump",))
    p.add_argument("--name", required=True, choices=scenarios.SCENARIO_NAMES)
    p.set_defaults(func=_cmd_scenario)

    p = subs.add_parser("pretrain", help="train a pre-model by flow matching")
    _add_bundle_args(p, require_scenario=False)
    p.add_argument("--outdir", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_pretrain)

    p = subs.add_parser("finetune-am",
                        help="one-shot reward fine-tune of a checkpoint")
    _add_bundle_args(p, require_scenario=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_finetune_am)

    p = subs.add_parser("finetune-fdc",
                        help="proximal outer-loop fine-tune of a checkpoint")
    _add_bundle_args(p, require_scenario=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_finetune_fdc)

    p = subs.add_parser("eval", help="sample a checkpoint and report metrics")
    _add_bundle_args(p, require_scenario=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("simplex-check",
                        help="re-verify the finite-simplex guarantees")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simplex_check)

    p = subs.add_parser("ablate-k",
                        help="outer-iteration ablation at fixed inner steps")
    _add_bundle_args(p, require_scenario=False)
    p.add_argument("--k-list", required=True,
                   help="comma-separated outer iteration counts")
    p.add_argument("--n-inner", type=int, required=True,
                   help="inner gradient steps per outer iteration")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None,
                   help="pre-model checkpoint (trained fresh when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ablate_k)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"[cli] {err}")
        return 2
    except (OSError, ValueError, RuntimeError) as err:
        print(f"[cli] error: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
