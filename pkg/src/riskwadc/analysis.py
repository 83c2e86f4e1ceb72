"""Modal damping reports and multi-scenario sweeps."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .comms import PacketLossModel
from .errors import RiskWadcError, ValidationError
from .netmodel import build_continuous, discretize
from .sim import (
    ScenarioConfig,
    batch_lqr_cost,
    batch_msfd,
    batch_risk_sample,
    batch_state_cost,
    draw_scenario,
    scenario_seed,
    simulate_batch,
)
from .systems import perturb_vsc_injections

AXES = ("delay", "loss", "risk-c", "op-perturb")


@dataclass(frozen=True)
class ModeReport:
    lambda_d: complex
    lambda_c: complex
    freq_hz: float
    damping: float
    branch_warning: bool = False


def damping_ratio(lambda_c: complex) -> float:
    """``-sigma/|lambda|``; real modes get +1 (stable) or -1 (unstable), the origin 0."""
    sigma, omega = lambda_c.real, abs(lambda_c.imag)
    if omega == 0.0:
        return 0.0 if sigma == 0.0 else math.copysign(1.0, -sigma)
    return -sigma / math.hypot(sigma, omega)


def continuous_mode(lambda_c: complex) -> tuple[float, float]:
    """``(frequency in Hz, damping ratio)`` of a continuous-time eigenvalue."""
    lambda_c = complex(lambda_c)
    return abs(lambda_c.imag) / (2 * math.pi), damping_ratio(lambda_c)


def mode_from_discrete(lambda_d: complex, dt: float) -> ModeReport:
    lambda_d = complex(lambda_d)
    if lambda_d == 0:
        return ModeReport(lambda_d, complex(-math.inf, 0.0), 0.0, 1.0, False)
    lambda_c = np.log(lambda_d) / dt
    f, z = continuous_mode(lambda_c)
    # the principal log cannot tell +pi from -pi on the negative real axis
    warn = lambda_d.real < 0 and abs(lambda_d.imag) <= 1e-12 * abs(lambda_d)
    return ModeReport(lambda_d, complex(lambda_c), f, z, bool(warn))


def closed_loop_modes(sys, K=None, band_hz=(0.1, 2.0)) -> list[ModeReport]:
    """Modes of ``A - BK`` mapped to continuous time, one per conjugate pair, sorted by frequency.

    ``band_hz=None`` keeps every mode.
    """
    A = sys.A if K is None else sys.A - sys.B @ np.asarray(K, dtype=float)
    eig = np.linalg.eigvals(A)
    out = [mode_from_discrete(l, sys.dt) for l in eig if l.imag >= 0.0]
    if band_hz is not None:
        lo, hi = band_hz
        out = [m for m in out if lo <= m.freq_hz <= hi]
    return sorted(out, key=lambda m: (m.freq_hz, m.damping))


def match_modes(reference: list[ModeReport], other: list[ModeReport]) -> list[tuple[ModeReport, ModeReport | None]]:
    """Pair each reference mode with the closest-frequency unused mode of ``other``."""
    free = list(other)
    pairs = []
    for m in reference:
        if not free:
            pairs.append((m, None))
            continue
        k = min(range(len(free)), key=lambda i: abs(free[i].freq_hz - m.freq_hz))
        pairs.append((m, free.pop(k)))
    return pairs


def format_modes(modes: list[ModeReport]) -> str:
    lines = [f"{'sigma':>10} {'omega':>10} {'f [Hz]':>8} {'zeta':>7}"]
    for m in modes:
        flag = "  (branch)" if m.branch_warning else ""
        lines.append(f"{m.lambda_c.real:10.4f} {m.lambda_c.imag:10.4f} {m.freq_hz:8.4f} {m.damping:7.4f}{flag}")
    return "\n".join(lines)


@dataclass(frozen=True)
class Summary:
    n: int
    median: float
    q1: float
    q3: float
    min: float
    max: float
    mean: float
    var: float

    def as_dict(self):
        return {k: getattr(self, k) for k in ("n", "median", "q1", "q3", "min", "max", "mean", "var")}


def summarize(values) -> Summary:
    """Box-plot statistics; linear-interpolation quartiles and unbiased variance."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValidationError("cannot summarize an empty sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75], method="linear")
    var = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
    return Summary(int(x.size), float(med), float(q1), float(q3), float(x.min()), float(x.max()),
                   math.fsum(x) / x.size, var)


METRICS = ("objective", "state_cost", "risk_sample", "msfd")


@dataclass
class ScenarioStats:
    level: float
    design: str
    scenario: np.ndarray
    values: dict
    excluded: int = 0

    def summary(self, metric="objective") -> Summary:
        return summarize(self.values[metric])


@dataclass
class SweepResult:
    axis: str
    levels: list
    designs: list
    stats: list = field(default_factory=list)

    def get(self, level, design) -> ScenarioStats:
        for s in self.stats:
            if s.level == level and s.design == design:
                return s
        raise KeyError((level, design))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "design", "scenario", *METRICS])
            for s in self.stats:
                for k, idx in enumerate(s.scenario):
                    w.writerow([repr(float(s.level)), s.design, int(idx), *(repr(float(s.values[m][k])) for m in METRICS)])

    def summary_json(self) -> dict:
        return {
            "axis": self.axis,
            "levels": [float(v) for v in self.levels],
            "designs": list(self.designs),
            "results": [
                {"level": float(s.level), "design": s.design, "excluded": s.excluded,
                 **{m: s.summary(m).as_dict() for m in METRICS
                    if len(s.values[m]) and not np.isnan(s.values[m]).any()}}
                for s in self.stats
            ],
        }

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _level_config(base: ScenarioConfig, axis: str, level: float) -> ScenarioConfig:
    if axis == "delay":
        return replace(base, max_delay_s=float(level), delays=None)
    if axis == "loss":
        per_link = base.loss.per_link if base.loss is not None else False
        return replace(base, loss=PacketLossModel(float(level), per_link=per_link))
    return base


def _evaluate(bts, systems, K, Q, R, moments, msfd_sg):
    obj, sc, rs, mf = [], [], [], []
    for bt, sys in zip(bts, systems):
        obj.append(batch_lqr_cost(bt, Q, R))
        sc.append(batch_state_cost(bt, Q))
        rs.append(batch_risk_sample(bt, sys, Q, moments) if moments is not None else np.full(bt.states.shape[0], np.nan))
        mf.append(batch_msfd(bt, msfd_sg))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)  # noqa: E731
    return {"objective": cat(obj), "state_cost": cat(sc), "risk_sample": cat(rs), "msfd": cat(mf)}


def _perturbation_factors(seed, index, n_vsc, level):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),)).spawn(5)[4]
    return 1.0 + np.random.default_rng(ss).uniform(-level, level, n_vsc)


def _run_cell(task):
    (sys, K, design, level, axis, base, n_scenarios, Q, R, moments, msfd_sg, network, op) = task
    cfg = _level_config(base, axis, level)
    if axis == "risk-c" and moments is not None:
        moments = moments.with_tolerance(float(level))
    if axis != "op-perturb":
        scen = [draw_scenario(sys, cfg, scenario_seed(cfg.seed, i)) for i in range(n_scenarios)]
        bt = simulate_batch(sys, K, scen)
        vals = _evaluate([bt], [sys], K, Q, R, moments, msfd_sg)
        return ScenarioStats(level, design, np.arange(n_scenarios), vals, 0)
    kept, bts, systems = [], [], []
    for i in range(n_scenarios):
        f = _perturbation_factors(cfg.seed, i, network.n_vsc, float(level))
        try:
            net2, op2, _ = perturb_vsc_injections(network, op, f)
            sys_i = discretize(build_continuous(net2, op2), sys.dt)
        except RiskWadcError:
            continue
        sc = draw_scenario(sys_i, cfg, scenario_seed(cfg.seed, i))
        bts.append(simulate_batch(sys_i, K, [sc]))
        systems.append(sys_i)
        kept.append(i)
    vals = _evaluate(bts, systems, K, Q, R, moments, msfd_sg)
    return ScenarioStats(level, design, np.array(kept, dtype=int), vals, n_scenarios - len(kept))


def scenario_sweep(sys, designs: dict, axis: str, levels, n_scenarios: int, base: ScenarioConfig, Q, R,
                   moments=None, msfd_sg=None, network=None, op=None, jobs: int = 1) -> SweepResult:
    """Evaluate each design at each level over ``n_scenarios`` seeded scenarios.

    Scenario ``i`` uses the same impulse, noise and delay/loss draws at every
    level and for every design. On the ``risk-c`` axis ``designs`` holds one
    gain per level (in order) and the tolerance only changes the moments
    used for reporting. On ``op-perturb`` each VSC's injection is scaled by a
    factor drawn uniformly from ``[1 - level, 1 + level]`` and the model is
    rebuilt; scenarios whose rebuild fails are excluded and counted.
    """
    if axis not in AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    levels = [float(v) for v in levels]
    if not levels:
        raise ValidationError("at least one level is required")
    if n_scenarios < 1:
        raise ValidationError("at least one scenario is required")
    if axis == "op-perturb" and (network is None or op is None):
        raise ValidationError("op-perturb sweeps need the network and operating point")
    names = list(designs)
    for name in names:
        if np.shape(designs[name]) != (sys.n_inputs, sys.n_states):
            raise ValidationError(f"design {name!r} has shape {np.shape(designs[name])}, expected {(sys.n_inputs, sys.n_states)}")
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    if axis == "risk-c":
        if len(names) != len(levels):
            raise ValidationError("risk-c sweeps need one design per tolerance level")
        cells = [(lvl, name) for lvl, name in zip(levels, names)]
    else:
        cells = [(lvl, name) for lvl in levels for name in names]
    tasks = [(sys, np.asarray(designs[name], dtype=float), name, lvl, axis, base, n_scenarios, Q, R, moments, msfd_sg, network, op)
             for lvl, name in cells]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            stats = list(pool.map(_run_cell, tasks))
    else:
        stats = [_run_cell(t) for t in tasks]
    stats.sort(key=lambda st: (st.level, st.design))
    return SweepResult(axis, levels, names, stats)
