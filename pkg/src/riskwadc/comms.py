"""Communication layer: feedback sparsity, per-generator delays, packet loss.

Controller nodes are numbered ``0..Ng-1`` for generators and
``Ng..Ng+Nv-1`` for VSCs, matching the input ordering of the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class CommGraph:
    """Directed links ``(i, l)``: generator ``i`` is measurable at controller ``l``."""

    n_sg: int
    n_vsc: int
    links: frozenset = field(default_factory=frozenset)
    areas: dict | None = None

    def __post_init__(self):
        n_ctrl = self.n_sg + self.n_vsc
        links = frozenset((int(i), int(l)) for i, l in self.links)
        for i, l in links:
            if not (0 <= i < self.n_sg and 0 <= l < n_ctrl):
                raise ValidationError(f"link {i}->{l} references a missing node")
        object.__setattr__(self, "links", links)

    @property
    def n_ctrl(self) -> int:
        return self.n_sg + self.n_vsc

    @classmethod
    def complete(cls, n_sg, n_vsc):
        return cls(n_sg, n_vsc, frozenset((i, l) for i in range(n_sg) for l in range(n_sg + n_vsc)))

    @classmethod
    def empty(cls, n_sg, n_vsc):
        return cls(n_sg, n_vsc, frozenset())

    @classmethod
    def from_areas(cls, n_sg, n_vsc, areas, area_links=(), edges=()):
        """Links between nodes in the same or adjacent areas, plus explicit ``edges``."""
        areas = {int(k): v for k, v in areas.items()}
        missing = [k for k in range(n_sg + n_vsc) if k not in areas]
        if missing:
            raise ValidationError(f"no area assigned to nodes {missing}")
        adjacent = {frozenset((a, b)) for a, b in area_links}
        links = set()
        for i in range(n_sg):
            for l in range(n_sg + n_vsc):
                a, b = areas[i], areas[l]
                if a == b or frozenset((a, b)) in adjacent:
                    links.add((i, l))
        links.update((int(i), int(l)) for i, l in edges)
        return cls(n_sg, n_vsc, frozenset(links), dict(areas))


@dataclass(frozen=True)
class SparsityMask:
    """Boolean pattern over the gain matrix.

    With ``blocked`` (the default for generator-state models) the pattern must
    be constant on each 1x4 block of a generator's states; unstructured
    patterns serve generic (A, B) problems.
    """

    pattern: np.ndarray
    blocked: bool = True

    def __post_init__(self):
        p = np.asarray(self.pattern, dtype=bool)
        if p.ndim != 2:
            raise ValidationError("mask must be two-dimensional")
        if self.blocked:
            if p.shape[1] % 4:
                raise ValidationError("mask must be (n_ctrl, 4*n_sg)")
            blocks = p.reshape(p.shape[0], -1, 4)
            if np.any(blocks.any(axis=2) != blocks.all(axis=2)):
                raise ValidationError("mask must be constant on each 1x4 block")
        object.__setattr__(self, "pattern", p)

    @classmethod
    def dense(cls, m, n):
        return cls(np.ones((m, n), dtype=bool), blocked=False)

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def n_nonzero(self) -> int:
        return int(self.pattern.sum())

    def block(self, l, i) -> bool:
        return bool(self.pattern[l, 4 * i])

    def apply(self, K) -> np.ndarray:
        return np.where(self.pattern, K, 0.0)

    def respects(self, K) -> bool:
        return bool(np.all(np.asarray(K)[~self.pattern] == 0))

    @classmethod
    def full(cls, n_ctrl, n_sg):
        return cls(np.ones((n_ctrl, 4 * n_sg), dtype=bool))


def mask_from_graph(graph: CommGraph, actuators: str = "all") -> SparsityMask:
    """Gain pattern allowed by ``graph``; generators always see their own block.

    ``actuators`` restricts which controllers act: ``"all"``, ``"sg"``
    (exciters only) or ``"vsc"`` (converters only).
    """
    if actuators not in ("all", "sg", "vsc"):
        raise ValidationError(f"unknown actuator set {actuators!r}")
    pattern = np.zeros((graph.n_ctrl, 4 * graph.n_sg), dtype=bool)
    for i, l in graph.links:
        pattern[l, 4 * i : 4 * i + 4] = True
    for l in range(graph.n_sg):
        pattern[l, 4 * l : 4 * l + 4] = True
    if actuators == "sg":
        pattern[graph.n_sg :] = False
    elif actuators == "vsc":
        pattern[: graph.n_sg] = False
    return SparsityMask(pattern)


@dataclass(frozen=True)
class DelayProfile:
    """Delays in whole steps.

    ``h`` is either one delay per generator (shared by every remote
    controller) or an ``(n_ctrl, Ng)`` matrix of per-link delays. Local
    measurements are never delayed.
    """

    h: np.ndarray
    max_delay_s: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        h = np.asarray(self.h)
        if h.size and (np.any(h < 0) or np.any(h != np.round(h))):
            raise ValidationError("delays must be non-negative whole steps")
        object.__setattr__(self, "h", h.astype(np.int64))

    @property
    def n_sg(self) -> int:
        return self.h.shape[-1]

    @property
    def max_steps(self) -> int:
        return int(self.h.max()) if self.h.size else 0

    def link_matrix(self, n_ctrl: int) -> np.ndarray:
        """Per-link delays ``(n_ctrl, Ng)`` with local links zeroed."""
        ng = self.n_sg
        H = np.broadcast_to(self.h, (n_ctrl, ng)).copy() if self.h.ndim == 1 else self.h.copy()
        k = min(n_ctrl, ng)
        H[np.arange(k), np.arange(k)] = 0
        return H

    @classmethod
    def zeros(cls, n_sg):
        return cls(np.zeros(n_sg, dtype=np.int64))


def delay_steps(max_delay_s: float, dt: float) -> int:
    return int(round(max_delay_s / dt))


def sample_delays(max_delay_s: float, dt: float, n_sg: int, seed=None, rng=None) -> DelayProfile:
    """Per-generator delays drawn uniformly from ``{0, ..., round(max_delay_s/dt)}``.

    The draw maps one uniform variate per generator onto the grid, so a fixed
    seed yields delays that grow monotonically with ``max_delay_s``.
    """
    if max_delay_s < 0:
        raise ValidationError("max delay must be non-negative")
    if rng is None:
        rng = np.random.default_rng(seed)
    levels = delay_steps(max_delay_s, dt)
    u = rng.random(n_sg)
    h = np.minimum(np.floor(u * (levels + 1)), levels).astype(np.int64)
    return DelayProfile(h, float(max_delay_s), seed)


def delayed_view(history, profile: DelayProfile, ctrl: int, t: int) -> np.ndarray:
    """State vector seen by controller ``ctrl`` at step ``t``.

    ``history[k]`` is the state at step ``k``; steps before 0 read ``history[0]``.
    """
    history = np.asarray(history)
    ng = profile.n_sg
    n_ctrl = max(ctrl + 1, ng)
    H = profile.link_matrix(n_ctrl)[ctrl]
    out = np.empty(4 * ng)
    for i in range(ng):
        out[4 * i : 4 * i + 4] = history[max(t - H[i], 0), 4 * i : 4 * i + 4]
    return out


def delay_perturbation(K, x_view, x, ctrl: int, n_sg: int) -> float:
    """Input error at controller ``ctrl`` caused by reading ``x_view`` instead of ``x``.

    Sums ``K[l, block i] (x_view_i - x_i)`` over generators ``i != l``.
    """
    K = np.asarray(K)
    diff = np.asarray(x_view) - np.asarray(x)
    total = 0.0
    for i in range(n_sg):
        if i == ctrl:
            continue
        total += K[ctrl, 4 * i : 4 * i + 4] @ diff[4 * i : 4 * i + 4]
    return float(total)


@dataclass(frozen=True)
class PacketLossModel:
    """Bernoulli packet loss with hold-last-sample at the receiver.

    With ``per_link`` off a single draw per step governs the whole
    measurement vector; with it on, each generator's block is lost
    independently.
    """

    p: float = 0.0
    seed: int | None = None
    per_link: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"loss probability must lie in [0, 1], got {self.p}")

    def draw(self, n_steps: int, n_sg: int = 1, rng=None) -> np.ndarray:
        """Receipt flags ``gamma`` (True = delivered), shape ``(T,)`` or ``(T, Ng)``."""
        if rng is None:
            rng = np.random.default_rng(self.seed)
        shape = (n_steps, n_sg) if self.per_link else (n_steps,)
        return rng.random(shape) >= self.p


def apply_loss(model: PacketLossModel, xs, gamma=None) -> np.ndarray:
    """Hold-last-sample filtering of a measurement stream ``xs`` of shape ``(T, n)``."""
    xs = np.asarray(xs, dtype=float)
    T, n = xs.shape
    if gamma is None:
        gamma = model.draw(T, n // 4 if model.per_link else 1)
    gamma = np.asarray(gamma, dtype=bool)
    if gamma.ndim == 1:
        gamma = np.repeat(gamma[:, None], n, axis=1)
    else:
        gamma = np.repeat(gamma, 4, axis=1)
    out = np.empty_like(xs)
    held = xs[0].copy()
    for t in range(T):
        held = np.where(gamma[t], xs[t], held)
        out[t] = held
    return out
