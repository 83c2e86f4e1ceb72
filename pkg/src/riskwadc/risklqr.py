"""Analytic and Monte-Carlo evaluators for the LQR cost, the risk functional and the Lagrangian.

Conventions
-----------
``rc`` values returned by the evaluators are the steady-state average of
``4 x'QWQx + 4 x'QM3``, the quantity compared against the adjusted threshold
``cbar = c - m4 + 4 tr((WQ)^2)``. The conditional variance itself equals
``rc + c - cbar``; :meth:`NoiseMoments.conditional_variance` performs that
conversion and is what per-trajectory ``risk_sample`` values estimate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .comms import SparsityMask
from .errors import ValidationError
from .sim import (
    DIVERGENCE_PENALTY,
    ScenarioConfig,
    batch_lqr_cost,
    batch_quadratic_average,
    batch_risk_sample,
    draw_scenario,
    scenario_seed,
    simulate_batch,
)

DEFAULT_LAMBDA_MAX = 100.0
# spectral radii within this distance of 1 count as marginal, not stable
STABILITY_TOL = 1e-9


def _check_psd(M, name, strict=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValidationError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValidationError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(M)
    tol = 1e-12 * max(1.0, np.abs(w).max())
    if (strict and w.min() <= tol) or w.min() < -tol:
        raise ValidationError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return M


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_psd(self.Q, "Q"))
        object.__setattr__(self, "R", _check_psd(self.R, "R", strict=True))

    @classmethod
    def identity(cls, n_states, n_inputs):
        return cls(np.eye(n_states), np.eye(n_inputs))


@dataclass(frozen=True)
class RiskConfig:
    c: float = 0.5
    lambda_max: float = DEFAULT_LAMBDA_MAX

    def __post_init__(self):
        if not self.c > 0:
            raise ValidationError("risk tolerance must be positive")
        if self.lambda_max < 0:
            raise ValidationError("multiplier bound must be non-negative")


@dataclass(frozen=True)
class GainMatrix:
    """A gain together with the sparsity pattern it must respect."""

    K: np.ndarray
    mask: SparsityMask

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.shape != self.mask.shape:
            raise ValidationError(f"gain shape {K.shape} does not match mask {self.mask.shape}")
        if not self.mask.respects(K):
            raise ValidationError("gain has nonzero entries outside the mask")
        object.__setattr__(self, "K", K)


@dataclass(frozen=True)
class NoiseMoments:
    mean: np.ndarray
    W: np.ndarray
    M3: np.ndarray
    m4: float
    c: float
    cbar: float
    provenance: dict = field(default_factory=dict)
    stderr: dict | None = None

    def conditional_variance(self, rc_form):
        """Convert the thresholded form into the conditional variance of the state cost."""
        return rc_form + self.c - self.cbar

    def with_tolerance(self, c):
        return NoiseMoments(self.mean, self.W, self.M3, self.m4, c, c - (self.c - self.cbar), self.provenance, self.stderr)

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(), "W": self.W.tolist(), "M3": self.M3.tolist(),
            "m4": self.m4, "c": self.c, "cbar": self.cbar,
            "provenance": self.provenance, "stderr": self.stderr,
        }

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["W"], float), np.asarray(d["M3"], float),
                   float(d["m4"]), float(d["c"]), float(d["cbar"]), d.get("provenance", {}), d.get("stderr"))


def save_moments(moments: NoiseMoments, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(moments.to_json(), fh, indent=2, sort_keys=True)


def load_moments(path) -> NoiseMoments:
    try:
        with open(path, encoding="utf-8") as fh:
            return NoiseMoments.from_json(json.load(fh))
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed moments file ({exc})") from exc


def _adjusted(c, m4, W, Q):
    WQ = W @ Q
    return c - m4 + 4.0 * float(np.trace(WQ @ WQ))


def moments_from_samples(samples, Q, c, provenance=None) -> NoiseMoments:
    """Sample moments of noise draws (rows), with standard errors of ``m4`` and ``M3``."""
    xs = np.asarray(samples, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    N = xs.shape[0]
    if N < 2:
        raise ValidationError("need at least two samples")
    Q = np.atleast_2d(Q)
    mean = xs.mean(axis=0)
    d = xs - mean
    W = d.T @ d / N
    q = np.einsum("ni,ij,nj->n", d, Q, d)
    m3_terms = d * q[:, None]
    M3 = m3_terms.mean(axis=0)
    m4_terms = (q - np.trace(W @ Q)) ** 2
    m4 = float(m4_terms.mean())
    stderr = {
        "m4": float(m4_terms.std(ddof=1) / math.sqrt(N)),
        "M3": (m3_terms.std(axis=0, ddof=1) / math.sqrt(N)).tolist(),
        "n": N,
    }
    prov = {"source": "empirical", "n_samples": N}
    prov.update(provenance or {})
    return NoiseMoments(mean, W, M3, m4, float(c), _adjusted(c, m4, W, Q), prov, stderr)


def compute_moments(noise, Q, c, n_samples: int = 100_000, seed=None) -> NoiseMoments:
    """Moments used by the risk functional.

    Gaussian noise uses closed forms (odd central moments vanish and the
    quadratic-form variance is ``2 tr((WQ)^2)``). Empirical noise uses sample
    moments of its stored draws, or of ``n_samples`` bootstrap draws when
    none are stored.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if noise is None:
        raise ValidationError("a noise model is required")
    if noise.kind == "gaussian":
        W = noise.cov
        WQ = W @ Q
        m4 = 2.0 * float(np.trace(WQ @ WQ))
        return NoiseMoments(noise.mean.copy(), W.copy(), np.zeros(noise.dim), m4, float(c),
                            _adjusted(c, m4, W, Q), {"source": "gaussian-closed-form"})
    samples = noise.samples
    if samples is None:
        samples = noise.draw(np.random.default_rng(seed), n_samples)
    return moments_from_samples(samples, Q, c)


def estimate_perturbation_moments(sys, K, cfg: ScenarioConfig, Q, c, n_scenarios=20, seed=0, checkpoint=None) -> NoiseMoments:
    """Moments of the effective perturbation ``x+ - (A - BK) x`` under delays and loss.

    The perturbation folds the delay-induced input error into the noise; it
    is sampled from seeded rollouts of the current policy.
    """
    K = np.asarray(K, dtype=float)
    scen = [draw_scenario(sys, cfg, scenario_seed(seed, i)) for i in range(n_scenarios)]
    bt = simulate_batch(sys, K, scen)
    keep = ~bt.diverged
    if not keep.any():
        raise ValidationError("every rollout diverged while estimating perturbation moments")
    AK = sys.A - sys.B @ K
    X = bt.states[keep]
    xi = (X[:, 1:] - X[:, :-1] @ AK.T).reshape(-1, X.shape[-1])
    return moments_from_samples(xi, Q, c, {"source": "delay-perturbation", "checkpoint": checkpoint,
                                           "n_scenarios": int(keep.sum()), "seed": seed})


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if np.size(A) else 0.0


def is_schur_stable(A) -> bool:
    return spectral_radius(A) < 1.0 - STABILITY_TOL


def closed_loop(sys, K) -> np.ndarray:
    return sys.A - sys.B @ np.asarray(K, dtype=float)


def lyapunov_residual(A, X, W) -> float:
    nw = np.linalg.norm(W)
    return float(np.linalg.norm(X - A @ X @ A.T - W) / (nw if nw > 0 else 1.0))


def solve_lyapunov(A, W) -> np.ndarray:
    """Solve ``X = A X A' + W`` (``A`` Schur stable), refined until the residual is tiny."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    X = scipy.linalg.solve_discrete_lyapunov(A, W)
    X = 0.5 * (X + X.T)
    for _ in range(3):
        E = A @ X @ A.T + W - X
        if np.linalg.norm(E) <= 1e-13 * max(np.linalg.norm(W), 1e-300):
            break
        dX = scipy.linalg.solve_discrete_lyapunov(A, E)
        X = X + 0.5 * (dX + dX.T)
    return X


@dataclass(frozen=True)
class SteadyState:
    cov: np.ndarray
    mean: np.ndarray

    @property
    def second_moment(self):
        return self.cov + np.outer(self.mean, self.mean)


def steady_state(sys, K, moments: NoiseMoments) -> SteadyState | None:
    """Stationary covariance and mean of the undelayed closed loop, or None if unstable."""
    AK = closed_loop(sys, K)
    if not is_schur_stable(AK):
        return None
    cov = solve_lyapunov(AK, moments.W)
    mean = np.linalg.solve(np.eye(AK.shape[0]) - AK, moments.mean)
    return SteadyState(cov, mean)


def eval_R0_analytic(sys, K, moments: NoiseMoments, Q, R) -> float:
    ss = steady_state(sys, K, moments)
    if ss is None:
        return math.inf
    K = np.asarray(K, dtype=float)
    return float(np.trace((Q + K.T @ R @ K) @ ss.second_moment))


def eval_Rc_analytic(sys, K, moments: NoiseMoments, Q) -> float:
    ss = steady_state(sys, K, moments)
    if ss is None:
        return math.inf
    return float(4.0 * np.trace(Q @ moments.W @ Q @ ss.second_moment) + 4.0 * ss.mean @ Q @ moments.M3)


def eval_lagrangian(sys, K, lam, moments: NoiseMoments, Q, R) -> float:
    """Lagrangian with the multiplier folded into the state weight."""
    ss = steady_state(sys, K, moments)
    if ss is None:
        return math.inf
    K = np.asarray(K, dtype=float)
    Q_lam = Q + 4.0 * lam * Q @ moments.W @ Q
    return float(np.trace((Q_lam + K.T @ R @ K) @ ss.second_moment)
                 + 4.0 * lam * ss.mean @ Q @ moments.M3 - lam * moments.cbar)


def oracle_multiplier(rc, cbar, lambda_max) -> float:
    """Maximizer over ``[0, lambda_max]`` of an affine function with slope ``rc - cbar``; ties go to 0."""
    return float(lambda_max) if rc > cbar else 0.0


@dataclass(frozen=True)
class OracleResult:
    lam: float
    phi: float
    r0: float
    rc: float


def max_oracle(sys, K, moments: NoiseMoments, Q, R, lambda_max=DEFAULT_LAMBDA_MAX) -> OracleResult:
    r0 = eval_R0_analytic(sys, K, moments, Q, R)
    rc = eval_Rc_analytic(sys, K, moments, Q)
    if not (math.isfinite(r0) and math.isfinite(rc)):
        return OracleResult(float(lambda_max), DIVERGENCE_PENALTY, math.inf, math.inf)
    lam = oracle_multiplier(rc, moments.cbar, lambda_max)
    phi = r0 + lam * (rc - moments.cbar)
    return OracleResult(lam, float(min(phi, DIVERGENCE_PENALTY)), r0, rc)


KRON_MAX_STATES = 8


def _batched_lyapunov(AK, W):
    """``X = A X A' + W`` for a stack of small ``A`` via the Kronecker form, with one refinement."""
    S, n, _ = AK.shape
    I = np.eye(n * n)
    M = I - np.einsum("sij,skl->sikjl", AK, AK).reshape(S, n * n, n * n)
    w = np.broadcast_to(W.reshape(-1), (S, n * n))
    x = np.linalg.solve(M, w[..., None])[..., 0]
    x = x + np.linalg.solve(M, (w - np.einsum("sij,sj->si", M, x))[..., None])[..., 0]
    X = x.reshape(S, n, n)
    return 0.5 * (X + np.swapaxes(X, 1, 2))


def max_oracle_batch(sys, Ks, moments: NoiseMoments, Q, R, lambda_max=DEFAULT_LAMBDA_MAX):
    """Vectorized :func:`max_oracle` over a stack of gains; returns ``(lam, phi, r0, rc)`` arrays."""
    Ks = np.asarray(Ks, dtype=float)
    S, n = Ks.shape[0], sys.n_states
    if n > KRON_MAX_STATES:
        res = [max_oracle(sys, K, moments, Q, R, lambda_max) for K in Ks]
        return tuple(np.array([getattr(r, f) for r in res]) for f in ("lam", "phi", "r0", "rc"))
    AK = sys.A[None] - np.einsum("ij,sjk->sik", sys.B, Ks)
    rho = np.abs(np.linalg.eigvals(AK)).max(axis=1)
    ok = rho < 1.0 - STABILITY_TOL
    lam = np.full(S, float(lambda_max))
    phi = np.full(S, DIVERGENCE_PENALTY)
    r0 = np.full(S, math.inf)
    rc = np.full(S, math.inf)
    if ok.any():
        A_ok, K_ok = AK[ok], Ks[ok]
        X = _batched_lyapunov(A_ok, moments.W)
        mu = np.linalg.solve(np.eye(n)[None] - A_ok, np.broadcast_to(moments.mean, (len(A_ok), n))[..., None])[..., 0]
        M2 = X + mu[:, :, None] * mu[:, None, :]
        G = Q[None] + np.einsum("sji,jk,skl->sil", K_ok, R, K_ok)
        r0_ok = np.einsum("sij,sji->s", G, M2)
        QWQ = Q @ moments.W @ Q
        rc_ok = 4.0 * np.einsum("ij,sji->s", QWQ, M2) + 4.0 * mu @ (Q @ moments.M3)
        lam_ok = np.where(rc_ok > moments.cbar, float(lambda_max), 0.0)
        r0[ok], rc[ok], lam[ok] = r0_ok, rc_ok, lam_ok
        phi[ok] = np.minimum(r0_ok + lam_ok * (rc_ok - moments.cbar), DIVERGENCE_PENALTY)
    return lam, phi, r0, rc


@dataclass
class McEstimate:
    """Per-scenario Monte-Carlo samples of the cost terms."""

    lqr: np.ndarray
    rc: np.ndarray
    risk: np.ndarray
    diverged: np.ndarray

    @property
    def r0(self) -> float:
        return math.fsum(self.lqr) / len(self.lqr)

    @property
    def rc_mean(self) -> float:
        return math.fsum(self.rc) / len(self.rc)

    @property
    def risk_mean(self) -> float:
        return math.fsum(self.risk) / len(self.risk)


def mc_batch(sys, Ks, moments: NoiseMoments, Q, R, cfg: ScenarioConfig, keys) -> McEstimate:
    """One rollout per key; ``Ks`` is a single gain or a stack aligned with ``keys``."""
    scen = [draw_scenario(sys, cfg, scenario_seed(cfg.seed, *k)) for k in keys]
    bt = simulate_batch(sys, Ks, scen)
    lqr = batch_lqr_cost(bt, Q, R)
    rc = batch_quadratic_average(bt, 4.0 * Q @ moments.W @ Q, 4.0 * Q @ moments.M3)
    risk = batch_risk_sample(bt, sys, Q, moments)
    return McEstimate(lqr, rc, risk, bt.diverged)


def mc_estimate(sys, K, moments: NoiseMoments, Q, R, cfg: ScenarioConfig, n_scenarios=100, chunk=200) -> McEstimate:
    """Monte-Carlo cost samples over scenarios ``0..n_scenarios-1`` of ``cfg.seed``."""
    parts = []
    for lo in range(0, n_scenarios, chunk):
        keys = [(i,) for i in range(lo, min(lo + chunk, n_scenarios))]
        parts.append(mc_batch(sys, K, moments, Q, R, cfg, keys))
    return McEstimate(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("lqr", "rc", "risk", "diverged")))


def mc_oracle(est: McEstimate, moments: NoiseMoments, lambda_max=DEFAULT_LAMBDA_MAX) -> OracleResult:
    if est.diverged.any():
        return OracleResult(float(lambda_max), DIVERGENCE_PENALTY, math.inf, math.inf)
    r0, rc = est.r0, est.rc_mean
    lam = oracle_multiplier(rc, moments.cbar, lambda_max)
    return OracleResult(lam, float(min(r0 + lam * (rc - moments.cbar), DIVERGENCE_PENALTY)), r0, rc)


def eval_phi(sys, K, moments: NoiseMoments, Q, R, lambda_max=DEFAULT_LAMBDA_MAX, backend="analytic",
             scenario: ScenarioConfig | None = None, n_scenarios=100) -> OracleResult:
    """Value of the inner maximization at ``K``.

    The Monte-Carlo backend rolls out ``n_scenarios`` seeded scenarios of
    ``scenario`` (delays and loss included) and applies the oracle to the
    averaged estimates.
    """
    if backend == "analytic":
        return max_oracle(sys, K, moments, Q, R, lambda_max)
    if backend != "mc":
        raise ValidationError(f"unknown backend {backend!r}")
    if scenario is None:
        raise ValidationError("the Monte-Carlo backend needs a scenario configuration")
    est = mc_estimate(sys, K, moments, Q, R, scenario, n_scenarios)
    return mc_oracle(est, moments, lambda_max)
