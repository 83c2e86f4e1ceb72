"""Zero-order policy gradients on the sparse gain set and the SGDmax training loop.

Randomness: sample ``s`` of iteration ``j`` draws its sphere perturbation from
``SeedSequence(root, spawn_key=(j, s, 0))`` and, for the Monte-Carlo
evaluator, its rollout scenario from ``SeedSequence(root, spawn_key=(j, s, 1))``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .comms import SparsityMask
from .errors import InfeasibleGainError, ValidationError
from .risklqr import (
    DEFAULT_LAMBDA_MAX,
    NoiseMoments,
    estimate_perturbation_moments,
    is_schur_stable,
    max_oracle_batch,
    mc_batch,
    spectral_radius,
)
from .sim import DIVERGENCE_PENALTY, ScenarioConfig

GRADIENT_CLIP = 1e6


@dataclass(frozen=True)
class ZopgConfig:
    radius: float = 0.1
    samples: int = 100
    distribution: str = "gaussian-normalized"
    estimator: str = "one-point"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError("smoothing radius must be positive")
        if self.samples < 1:
            raise ValidationError("need at least one ZOPG sample per iteration")
        if self.distribution != "gaussian-normalized":
            raise ValidationError(f"unsupported perturbation distribution {self.distribution!r}")
        if self.estimator not in ("one-point", "antithetic"):
            raise ValidationError(f"unknown estimator {self.estimator!r}")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-4
    iters: int = 15000
    seed: int = 0
    K0: np.ndarray | None = None
    moment_source: str = "nominal"
    moment_refresh: int = 1000
    log_every: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError("step size must be positive")
        if self.iters < 0:
            raise ValidationError("iteration count must be non-negative")
        if self.moment_source not in ("nominal", "perturbation"):
            raise ValidationError(f"unknown moment source {self.moment_source!r}")
        if self.moment_refresh < 1 or self.log_every < 1:
            raise ValidationError("refresh period and log cadence must be positive")


@dataclass
class EvalBatch:
    phi: np.ndarray
    lam: np.ndarray
    rc: np.ndarray


class AnalyticEvaluator:
    """Lyapunov-based Phi on the undelayed loop; scenario keys are ignored."""

    def __init__(self, sys, moments: NoiseMoments, Q, R, lambda_max=DEFAULT_LAMBDA_MAX):
        self.sys, self.moments, self.Q, self.R, self.lambda_max = sys, moments, Q, R, lambda_max

    def with_moments(self, moments):
        return AnalyticEvaluator(self.sys, moments, self.Q, self.R, self.lambda_max)

    def evaluate(self, Ks, keys) -> EvalBatch:
        lam, phi, _, rc = max_oracle_batch(self.sys, Ks, self.moments, self.Q, self.R, self.lambda_max)
        return EvalBatch(phi, lam, rc)


class McEvaluator:
    """Phi from one seeded rollout per sample, with delays and loss as configured in ``scenario``."""

    def __init__(self, sys, moments: NoiseMoments, Q, R, scenario: ScenarioConfig, lambda_max=DEFAULT_LAMBDA_MAX):
        self.sys, self.moments, self.Q, self.R = sys, moments, Q, R
        self.scenario, self.lambda_max = scenario, lambda_max

    def with_moments(self, moments):
        return McEvaluator(self.sys, moments, self.Q, self.R, self.scenario, self.lambda_max)

    def evaluate(self, Ks, keys) -> EvalBatch:
        est = mc_batch(self.sys, np.asarray(Ks), self.moments, self.Q, self.R, self.scenario, keys)
        cbar = self.moments.cbar
        lam = np.where(est.rc > cbar, float(self.lambda_max), 0.0)
        phi = est.lqr + lam * (est.rc - cbar)
        phi = np.where(est.diverged, DIVERGENCE_PENALTY, np.minimum(phi, DIVERGENCE_PENALTY))
        lam = np.where(est.diverged, float(self.lambda_max), lam)
        return EvalBatch(phi, lam, est.rc)


class FunctionEvaluator:
    """Wraps a plain ``f(K) -> float``; the multiplier is reported as 0."""

    def __init__(self, f):
        self.f = f

    def evaluate(self, Ks, keys) -> EvalBatch:
        phi = np.array([float(self.f(K)) for K in Ks])
        z = np.zeros(len(phi))
        return EvalBatch(phi, z, z.copy())


def sample_sphere(mask: SparsityMask, seed=None, rng=None) -> np.ndarray:
    """Uniform draw from the unit Frobenius sphere restricted to the mask."""
    if mask.n_nonzero == 0:
        raise ValidationError("mask has no free entries")
    if rng is None:
        rng = np.random.default_rng(seed)
    U = rng.standard_normal(mask.shape) * mask.pattern
    return U / np.linalg.norm(U)


def _clip(G):
    nrm = np.linalg.norm(G)
    return G * (GRADIENT_CLIP / nrm) if nrm > GRADIENT_CLIP else G


def zopg_estimate(phi_value, U, r, n_free=None) -> np.ndarray:
    """Single-point estimate ``(n_free / r) * phi(K + rU) * U``, norm-clipped."""
    n_free = np.count_nonzero(U) if n_free is None else n_free
    return _clip((n_free / r) * float(phi_value) * np.asarray(U))


def antithetic_estimate(phi_plus, phi_minus, U, r, n_free=None) -> np.ndarray:
    """Two-point estimate ``(n_free / 2r) * (phi(K + rU) - phi(K - rU)) * U``, norm-clipped."""
    n_free = np.count_nonzero(U) if n_free is None else n_free
    return _clip((n_free / (2.0 * r)) * (float(phi_plus) - float(phi_minus)) * np.asarray(U))


def _fsum_mean(stack):
    flat = stack.reshape(stack.shape[0], -1)
    return np.array([math.fsum(col) for col in flat.T]).reshape(stack.shape[1:]) / stack.shape[0]


@dataclass
class GradientSample:
    G: np.ndarray
    batch: EvalBatch


def average_gradient(evaluator, K, mask: SparsityMask, zopg: ZopgConfig, seed: int, j: int = 0) -> GradientSample:
    """Mean of ``zopg.samples`` independent estimates at ``K`` for iteration ``j``.

    The antithetic estimator evaluates both ``K + rU`` and ``K - rU`` on the
    same scenario, so scenario noise largely cancels in the difference.
    """
    K = np.asarray(K, dtype=float)
    M, r = zopg.samples, zopg.radius
    Us = np.stack([sample_sphere(mask, rng=np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j, s, 0))))
                   for s in range(M)])
    keys = [(j, s, 1) for s in range(M)]
    n_free = mask.n_nonzero
    if zopg.estimator == "antithetic":
        both = evaluator.evaluate(np.concatenate([K + r * Us, K - r * Us]), keys + keys)
        ests = np.stack([antithetic_estimate(both.phi[s], both.phi[M + s], Us[s], r, n_free) for s in range(M)])
        batch = EvalBatch(both.phi[:M], both.lam[:M], both.rc[:M])
    else:
        batch = evaluator.evaluate(K + r * Us, keys)
        ests = np.stack([zopg_estimate(batch.phi[s], Us[s], r, n_free) for s in range(M)])
    return GradientSample(mask.apply(_fsum_mean(ests)), batch)


def lqr_gain(A, B, Q=None, R=None) -> np.ndarray:
    n, m = B.shape
    Q = np.eye(n) if Q is None else Q
    R = np.eye(m) if R is None else R
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def initial_gain(sys, mask: SparsityMask, Q=None, R=None, halvings: int = 12) -> np.ndarray:
    """Feasible starting gain.

    Zero if the open loop is already Schur stable; otherwise the LQR gain of
    the actuated inputs (rows of the mask with any free entry), projected
    onto the mask and scaled by the largest factor in ``1, 1/2, 1/4, ...``
    that stabilizes the undelayed loop.
    """
    A, B = sys.A, sys.B
    if is_schur_stable(A):
        return np.zeros(mask.shape)
    act = mask.pattern.any(axis=1)
    if not act.any():
        raise InfeasibleGainError(spectral_radius(A))
    R_act = None if R is None else np.asarray(R)[np.ix_(act, act)]
    Kd = np.zeros(mask.shape)
    try:
        Kd[act] = lqr_gain(A, B[:, act], Q, R_act)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise InfeasibleGainError(spectral_radius(A)) from exc
    Kp = mask.apply(Kd)
    best = math.inf
    for k in range(halvings + 1):
        K = Kp * 0.5**k
        rho = spectral_radius(A - B @ K)
        best = min(best, rho)
        if is_schur_stable(A - B @ K):
            return K
    raise InfeasibleGainError(best)


@dataclass
class TrainLog:
    phi: list = field(default_factory=list)
    lambda_frac: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    rc_est: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    iters: list = field(default_factory=list)
    K0: np.ndarray | None = None
    K: np.ndarray | None = None
    mask: SparsityMask | None = None
    seed: int = 0
    moments: NoiseMoments | None = None

    def __len__(self):
        return len(self.phi)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "phi", "lambda_frac", "grad_norm", "rc_est"])
            for row in zip(self.iters, self.phi, self.lambda_frac, self.grad_norm, self.rc_est):
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def train(evaluator, mask: SparsityMask, cfg: TrainConfig, zopg: ZopgConfig, sys=None, callback=None,
          perturbation_scenario: ScenarioConfig | None = None) -> TrainLog:
    """SGDmax: ``K <- K - eta * G(K)`` for ``cfg.iters`` iterations.

    ``callback(j, K)`` sees every iterate. With ``moment_source="perturbation"``
    the evaluator's moments are re-estimated from delayed rollouts of the
    current gain every ``moment_refresh`` iterations.
    """
    sys = getattr(evaluator, "sys", None) if sys is None else sys
    if cfg.K0 is not None:
        K = np.array(cfg.K0, dtype=float)
    elif sys is not None:
        K = initial_gain(sys, mask, getattr(evaluator, "Q", None), getattr(evaluator, "R", None))
    else:
        K = np.zeros(mask.shape)
    if K.shape != mask.shape:
        raise ValidationError(f"initial gain shape {K.shape} does not match mask {mask.shape}")
    if not mask.respects(K):
        raise ValidationError("initial gain has entries outside the mask")
    if sys is not None:
        if not is_schur_stable(sys.A - sys.B @ K):
            raise InfeasibleGainError(spectral_radius(sys.A - sys.B @ K))

    log = TrainLog(K0=K.copy(), mask=mask, seed=cfg.seed, moments=getattr(evaluator, "moments", None))
    if callback is not None:
        callback(0, K)
    t0 = time.perf_counter()
    for j in range(cfg.iters):
        if cfg.moment_source == "perturbation" and j % cfg.moment_refresh == 0:
            if perturbation_scenario is None:
                raise ValidationError("perturbation moments need a scenario configuration")
            m = evaluator.moments
            evaluator = evaluator.with_moments(estimate_perturbation_moments(
                sys, K, perturbation_scenario, evaluator.Q, m.c, seed=cfg.seed, checkpoint=j))
            log.moments = evaluator.moments
        gs = average_gradient(evaluator, K, mask, zopg, cfg.seed, j)
        K = mask.apply(K - cfg.eta * gs.G)
        if j % cfg.log_every == 0 or j == cfg.iters - 1:
            b = gs.batch
            log.iters.append(j)
            log.phi.append(math.fsum(b.phi) / len(b.phi))
            log.lambda_frac.append(float(np.mean(b.lam > 0)))
            log.grad_norm.append(float(np.linalg.norm(gs.G)))
            log.rc_est.append(math.fsum(b.rc) / len(b.rc) if np.all(np.isfinite(b.rc)) else math.inf)
            log.wall.append(time.perf_counter() - t0)
        if callback is not None:
            callback(j + 1, K)
    log.K = K
    return log


def save_checkpoint(path, K, mask: SparsityMask, iteration: int, seed: int, moments_ref=None, extra=None) -> None:
    doc = {
        "K": np.asarray(K).tolist(),
        "mask": mask.pattern.astype(int).tolist(),
        "mask_blocked": bool(mask.blocked),
        "iteration": int(iteration),
        "seed": int(seed),
        "moments": moments_ref,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        K = np.asarray(doc["K"], dtype=float)
        mask = SparsityMask(np.asarray(doc["mask"], dtype=bool), bool(doc.get("mask_blocked", True)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed checkpoint ({exc})") from exc
    if K.shape != mask.shape:
        raise ValidationError(f"{path}: gain and mask shapes differ")
    return K, mask, doc
