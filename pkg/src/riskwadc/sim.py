"""Closed-loop rollouts under noise, measurement delays and packet loss.

Seed splitting
--------------
Every scenario is driven by ``numpy.random.SeedSequence(root, spawn_key=key)``
where ``key`` is ``(index,)`` for evaluation scenarios and ``(j, s, 1)`` for
sample ``s`` of training iteration ``j``. Each scenario sequence spawns four
children, consumed in order by the initial impulse, the process noise, the
delay draw and the packet-loss draw. Changing the delay or loss level
therefore leaves the impulse and noise of a scenario untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .comms import DelayProfile, PacketLossModel, sample_delays
from .errors import ValidationError
from .netmodel import DiscreteSystem

DIVERGENCE_THRESHOLD = 1e6
DIVERGENCE_PENALTY = 1e9
DEFAULT_HORIZON = 2000


@dataclass(frozen=True)
class NoiseModel:
    """Additive process noise; ``kind`` is ``"gaussian"`` or ``"empirical"``.

    The empirical kind resamples rows of ``samples`` with replacement.
    """

    mean: np.ndarray
    cov: np.ndarray
    kind: str = "gaussian"
    samples: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValidationError("noise covariance must be square and match the mean")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValidationError("noise covariance must be symmetric")
        w, V = np.linalg.eigh(cov)
        if w.size and w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ValidationError("noise covariance must be positive semidefinite")
        if self.kind not in ("gaussian", "empirical"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if self.kind == "empirical" and self.samples is None:
            raise ValidationError("empirical noise needs samples")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factor", V * np.sqrt(np.clip(w, 0.0, None)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def gaussian(cls, cov, mean=None, seed=None):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        mean = np.zeros(cov.shape[0]) if mean is None else mean
        return cls(mean, cov, "gaussian", None, seed)

    @classmethod
    def isotropic(cls, dim, std, mean=None, seed=None):
        return cls.gaussian(std**2 * np.eye(dim), mean, seed)

    @classmethod
    def empirical(cls, samples, seed=None):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        mean = samples.mean(axis=0)
        d = samples - mean
        return cls(mean, d.T @ d / len(samples), "empirical", samples, seed)

    def draw(self, rng, size) -> np.ndarray:
        if self.kind == "empirical":
            return self.samples[rng.integers(0, len(self.samples), size=size)]
        z = rng.standard_normal((size, self.dim))
        return self.mean + z @ self._factor.T


@dataclass(frozen=True)
class ScenarioConfig:
    """Template for seeded rollouts.

    When ``delays`` is None, each scenario draws its own per-generator delays
    bounded by ``max_delay_s``.
    """

    horizon: int = DEFAULT_HORIZON
    impulse_scale: float = 0.0
    noise: NoiseModel | None = None
    max_delay_s: float = 0.0
    delays: DelayProfile | None = None
    loss: PacketLossModel | None = None
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("horizon must be at least one step")
        if self.impulse_scale < 0 or self.max_delay_s < 0:
            raise ValidationError("impulse scale and max delay must be non-negative")


@dataclass
class Scenario:
    x0: np.ndarray
    noise: np.ndarray
    link_delays: np.ndarray | None = None
    gamma: np.ndarray | None = None


@dataclass
class BatchTrajectory:
    states: np.ndarray
    inputs: np.ndarray
    diverged_at: np.ndarray

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_at >= 0


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    state_cost: np.ndarray
    input_cost: np.ndarray
    diverged_at: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def as_batch(self) -> BatchTrajectory:
        return BatchTrajectory(self.states[None], self.inputs[None], np.array([-1 if self.diverged_at is None else self.diverged_at]))


def scenario_seed(root: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in key))


def impulse_init(n_sg: int, scale: float, seed=None, rng=None) -> np.ndarray:
    """Initial state with uniform speed deviations in ``[-scale, scale]``, all else zero."""
    if scale < 0:
        raise ValidationError("impulse scale must be non-negative")
    if rng is None:
        rng = np.random.default_rng(seed)
    x0 = np.zeros(4 * n_sg)
    x0[1::4] = rng.uniform(-scale, scale, n_sg)
    return x0


def _n_sg(sys: DiscreteSystem) -> int | None:
    if sys.n_sg is not None:
        return sys.n_sg
    return sys.n_states // 4 if sys.n_states % 4 == 0 else None


def draw_scenario(sys: DiscreteSystem, cfg: ScenarioConfig, seed_seq: np.random.SeedSequence, x0=None) -> Scenario:
    n, m = sys.n_states, sys.n_inputs
    r_x0, r_noise, r_delay, r_loss = (np.random.default_rng(s) for s in seed_seq.spawn(4))
    ng = _n_sg(sys)
    if x0 is None:
        if cfg.impulse_scale > 0:
            if ng is None:
                x0 = r_x0.uniform(-cfg.impulse_scale, cfg.impulse_scale, n)
            else:
                x0 = impulse_init(ng, cfg.impulse_scale, rng=r_x0)
        else:
            x0 = np.zeros(n)
    x0 = np.asarray(x0, dtype=float)
    if cfg.noise is not None:
        if cfg.noise.dim != n:
            raise ValidationError(f"noise dimension {cfg.noise.dim} does not match state dimension {n}")
        noise = cfg.noise.draw(r_noise, cfg.horizon)
    else:
        noise = np.zeros((cfg.horizon, n))

    link = None
    profile = cfg.delays
    if profile is None and cfg.max_delay_s > 0:
        if ng is None:
            raise ValidationError("delays need a generator-structured state")
        profile = sample_delays(cfg.max_delay_s, sys.dt, ng, rng=r_delay)
    if profile is not None and profile.max_steps > 0:
        link = profile.link_matrix(m)

    gamma = None
    if cfg.loss is not None and cfg.loss.p > 0:
        if cfg.loss.per_link and ng is None:
            raise ValidationError("per-link loss needs a generator-structured state")
        gamma = cfg.loss.draw(cfg.horizon, ng or 1, rng=r_loss)
    return Scenario(x0, noise, link, gamma)


def simulate_batch(sys: DiscreteSystem, K, scenarios: list[Scenario]) -> BatchTrajectory:
    """Roll out ``x+ = A x + B u + noise`` with ``u_l = -K_l . view_l`` for each scenario.

    ``K`` is one gain ``(m, n)`` shared by all scenarios or a stack ``(S, m, n)``.
    Controller ``l`` reads the delayed, loss-filtered view of the state; with
    no delay and no loss the view is the current state itself.
    """
    S = len(scenarios)
    n, m = sys.n_states, sys.n_inputs
    T = scenarios[0].noise.shape[0]
    K = np.asarray(K, dtype=float)
    Kb = np.broadcast_to(K, (S, m, n))

    X = np.zeros((S, T + 1, n))
    U = np.zeros((S, T, m))
    X[:, 0] = np.stack([sc.x0 for sc in scenarios])
    noise = np.stack([sc.noise for sc in scenarios])

    delayed = any(sc.link_delays is not None for sc in scenarios)
    if delayed:
        lag = np.zeros((S, m, n), dtype=np.int64)
        for s, sc in enumerate(scenarios):
            if sc.link_delays is not None:
                lag[s] = np.repeat(sc.link_delays, 4, axis=1)
        s_idx = np.arange(S)[:, None, None]
        n_idx = np.arange(n)[None, None, :]

    lossy = any(sc.gamma is not None for sc in scenarios)
    if lossy:
        per_link = any(sc.gamma is not None and sc.gamma.ndim == 2 for sc in scenarios)
        if per_link:
            gam = np.ones((S, T, n), dtype=bool)
            for s, sc in enumerate(scenarios):
                if sc.gamma is not None:
                    gam[s] = np.repeat(sc.gamma, 4, axis=1) if sc.gamma.ndim == 2 else sc.gamma[:, None]
        else:
            gam = np.ones((S, T), dtype=bool)
            for s, sc in enumerate(scenarios):
                if sc.gamma is not None:
                    gam[s] = sc.gamma
        held = None

    AT, BT = sys.A.T, sys.B.T
    alive = np.ones(S, dtype=bool)
    diverged_at = np.full(S, -1, dtype=np.int64)
    for t in range(T):
        x = X[:, t]
        if delayed:
            view = X[s_idx, np.maximum(t - lag, 0), n_idx]
        elif lossy:
            view = np.broadcast_to(x[:, None, :], (S, m, n))
        else:
            view = None
        if lossy:
            if held is None:
                held = np.array(view)
            g = gam[:, t]
            g = g[:, None, :] if g.ndim == 2 else g[:, None, None]
            held = np.where(g, view, held)
            view = held
        # one reduction for every path keeps zero-delay/no-loss runs bitwise identical
        u = -(Kb * (x[:, None, :] if view is None else view)).sum(axis=-1)
        U[:, t] = u
        xn = x @ AT + u @ BT + noise[:, t]
        bad = alive & ~(np.abs(xn).max(axis=1) <= DIVERGENCE_THRESHOLD)
        if bad.any():
            diverged_at[bad] = t + 1
            alive &= ~bad
        if not alive.all():
            xn[~alive] = 0.0
        X[:, t + 1] = xn
    return BatchTrajectory(X, U, diverged_at)


def rollout(sys: DiscreteSystem, K, cfg: ScenarioConfig, index: int = 0, Q=None, R=None, x0=None) -> Trajectory:
    """Single seeded rollout, scenario ``index`` under root seed ``cfg.seed``."""
    K = np.asarray(K, dtype=float)
    if K.shape != (sys.n_inputs, sys.n_states):
        raise ValidationError(f"gain shape {K.shape} does not match ({sys.n_inputs}, {sys.n_states})")
    sc = draw_scenario(sys, cfg, scenario_seed(cfg.seed, index), x0=x0)
    bt = simulate_batch(sys, K, [sc])
    Q = np.eye(sys.n_states) if Q is None else np.atleast_2d(Q)
    R = np.eye(sys.n_inputs) if R is None else np.atleast_2d(R)
    X, U = bt.states[0], bt.inputs[0]
    d = int(bt.diverged_at[0])
    return Trajectory(
        X, U,
        _quad(X[:-1], Q),
        _quad(U, R),
        None if d < 0 else d,
        {"index": index, "seed": cfg.seed},
    )


def _quad(Z, G):
    """``z'Gz`` along the last axis."""
    return np.sum((Z @ G) * Z, axis=-1)


def _penalize(values, bt: BatchTrajectory):
    values = np.asarray(values, dtype=float)
    return np.where(bt.diverged, DIVERGENCE_PENALTY, values)


def batch_state_cost(bt: BatchTrajectory, Q) -> np.ndarray:
    X = bt.states[:, :-1]
    return _penalize(_quad(X, Q).sum(axis=1) / bt.horizon, bt)


def batch_input_cost(bt: BatchTrajectory, R) -> np.ndarray:
    U = bt.inputs
    return _penalize(_quad(U, R).sum(axis=1) / bt.horizon, bt)


def batch_lqr_cost(bt: BatchTrajectory, Q, R) -> np.ndarray:
    return _penalize(batch_state_cost(bt, Q) + batch_input_cost(bt, R), bt)


def batch_quadratic_average(bt: BatchTrajectory, G, g=None) -> np.ndarray:
    """Time average of ``x'Gx + g'x`` over steps ``0..T-1``."""
    X = bt.states[:, :-1]
    val = _quad(X, G).sum(axis=1)
    if g is not None:
        val = val + X.sum(axis=1) @ g
    return _penalize(val / bt.horizon, bt)


def batch_risk_sample(bt: BatchTrajectory, sys: DiscreteSystem, Q, moments) -> np.ndarray:
    """Sample of the conditional state-cost variance along each trajectory.

    The conditional mean of ``x_t'Q x_t`` given the past is ``m'Qm + tr(QW)``
    with the one-step predictor ``m = A x_{t-1} + B u_{t-1} + mean``. Steps
    ``1..T`` are averaged.
    """
    X, U = bt.states, bt.inputs
    pred = X[:, :-1] @ sys.A.T + U @ sys.B.T + moments.mean
    actual = _quad(X[:, 1:], Q)
    expected = _quad(pred, Q) + np.trace(Q @ moments.W)
    return _penalize(np.mean((actual - expected) ** 2, axis=1), bt)


def _speed_columns(n_states, sg):
    if sg is None or sg == "all":
        return np.arange(1, n_states, 4)
    return np.atleast_1d(4 * np.asarray(sg, dtype=int) + 1)


def batch_msfd(bt: BatchTrajectory, sg=0) -> np.ndarray:
    """Mean-squared frequency deviation (Hz^2).

    ``sg`` selects one generator, a list of generators (averaged) or, with
    ``None``/``"all"``, every generator.
    """
    dev = bt.states[:, :-1, _speed_columns(bt.states.shape[-1], sg)] / (2 * np.pi)
    return _penalize(np.mean(dev**2, axis=(1, 2)), bt)


def lqr_cost(traj: Trajectory, Q, R) -> float:
    return float(batch_lqr_cost(traj.as_batch(), np.atleast_2d(Q), np.atleast_2d(R))[0])


def state_cost(traj: Trajectory, Q) -> float:
    return float(batch_state_cost(traj.as_batch(), np.atleast_2d(Q))[0])


def risk_sample(traj: Trajectory, sys: DiscreteSystem, Q, moments) -> float:
    return float(batch_risk_sample(traj.as_batch(), sys, np.atleast_2d(Q), moments)[0])


def msfd(traj: Trajectory, f_ref: float = 60.0, sg=0) -> float:
    """MSFD with ``f_t = f_ref + omega_t / (2 pi)``; ``sg`` as in :func:`batch_msfd`."""
    if traj.diverged:
        return DIVERGENCE_PENALTY
    f = f_ref + traj.states[:-1, _speed_columns(traj.states.shape[-1], sg)] / (2 * np.pi)
    return float(np.mean((f - f_ref) ** 2))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    n, m = traj.states.shape[1], traj.inputs.shape[1]
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)] + ["state_cost", "input_cost"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(traj.horizon):
            w.writerow([t, *map(repr, map(float, traj.states[t])), *map(repr, map(float, traj.inputs[t])),
                        repr(float(traj.state_cost[t])), repr(float(traj.input_cost[t]))])
