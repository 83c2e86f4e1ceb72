"""Linearized power-network dynamics with synchronous generators and VSCs.

State ordering is fixed across the package: one block ``[delta, omega, E, Efd]``
per generator, in generator-index order. Inputs are all reference-voltage
adjustments first, then all VSC active-power adjustments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateOperatingPointError, NonReducibleNetworkError, ValidationError

STATE_NAMES = ("delta", "omega", "E", "Efd")


@dataclass(frozen=True)
class SgParams:
    H: float
    D: float
    xd: float
    xdp: float
    Tdp: float
    Ta: float
    Ka: float
    Pm: float = 0.0
    Vbar: float = 1.0

    def __post_init__(self):
        if not self.H > 0:
            raise ValidationError(f"inertia H must be positive, got {self.H}")
        if not self.Tdp > 0 or not self.Ta > 0:
            raise ValidationError("time constants Tdp and Ta must be positive")
        if not self.xd >= self.xdp > 0:
            raise ValidationError(f"need xd >= xdp > 0, got xd={self.xd}, xdp={self.xdp}")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float


@dataclass(frozen=True)
class Generator:
    bus: int
    params: SgParams


@dataclass(frozen=True)
class Vsc:
    bus: int
    Pv: float
    Qv: float = 0.0


@dataclass
class NetworkDescription:
    """Bus-branch network with generator and converter attachments.

    ``shunts`` holds a complex shunt admittance per bus (constant-impedance loads).
    Each generator gets an internal node behind its transient reactance; the
    retained set for Kron reduction is those internal nodes plus the VSC buses.
    """

    n_bus: int
    branches: list[Branch]
    generators: list[Generator]
    vscs: list[Vsc] = field(default_factory=list)
    shunts: np.ndarray | None = None

    def __post_init__(self):
        if self.shunts is None:
            self.shunts = np.zeros(self.n_bus, dtype=complex)
        self.shunts = np.asarray(self.shunts, dtype=complex)
        if self.shunts.shape != (self.n_bus,):
            raise ValidationError("shunts must have one entry per bus")
        for br in self.branches:
            for bus in (br.from_bus, br.to_bus):
                if not 0 <= bus < self.n_bus:
                    raise ValidationError(f"branch references missing bus {bus}")
            if br.from_bus == br.to_bus:
                raise ValidationError(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
        for kind, items in (("generator", self.generators), ("vsc", self.vscs)):
            for k, item in enumerate(items):
                if not 0 <= item.bus < self.n_bus:
                    raise ValidationError(f"{kind} {k} attaches to missing bus {item.bus}")
        vsc_buses = [v.bus for v in self.vscs]
        if len(set(vsc_buses)) != len(vsc_buses):
            raise ValidationError("at most one VSC per bus")
        if not self.generators and not self.vscs:
            raise ValidationError("retained-node set is empty")

    @property
    def n_sg(self) -> int:
        return len(self.generators)

    @property
    def n_vsc(self) -> int:
        return len(self.vscs)

    @property
    def sg_params(self) -> list[SgParams]:
        return [g.params for g in self.generators]

    def retained_nodes(self) -> list[int]:
        """Indices into the augmented admittance (buses, then SG internal nodes)."""
        internal = [self.n_bus + i for i in range(self.n_sg)]
        return internal + [v.bus for v in self.vscs]

    def augmented_admittance(self) -> np.ndarray:
        n = self.n_bus + self.n_sg
        Y = np.zeros((n, n), dtype=complex)
        for br in self.branches:
            y = complex(br.g, br.b)
            f, t = br.from_bus, br.to_bus
            Y[f, f] += y
            Y[t, t] += y
            Y[f, t] -= y
            Y[t, f] -= y
        Y[np.arange(self.n_bus), np.arange(self.n_bus)] += self.shunts
        for i, gen in enumerate(self.generators):
            y = 1.0 / complex(0.0, gen.params.xdp)
            k = self.n_bus + i
            Y[k, k] += y
            Y[gen.bus, gen.bus] += y
            Y[k, gen.bus] -= y
            Y[gen.bus, k] -= y
        return Y

    def with_vsc_injections(self, Pv) -> "NetworkDescription":
        vscs = [Vsc(v.bus, float(p), v.Qv) for v, p in zip(self.vscs, Pv)]
        return NetworkDescription(self.n_bus, list(self.branches), list(self.generators), vscs, self.shunts.copy())

    def with_params(self, params) -> "NetworkDescription":
        gens = [Generator(g.bus, p) for g, p in zip(self.generators, params)]
        return NetworkDescription(self.n_bus, list(self.branches), gens, list(self.vscs), self.shunts.copy())


@dataclass(frozen=True)
class OperatingPoint:
    E: np.ndarray
    delta: np.ndarray
    V: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for name in ("E", "delta", "V", "theta"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.E.shape != self.delta.shape or self.V.shape != self.theta.shape:
            raise ValidationError("magnitude and angle arrays must have matching lengths")
        if np.any(self.E <= 0) or np.any(self.V <= 0):
            raise ValidationError("voltage magnitudes must be positive")

    @property
    def n_sg(self) -> int:
        return self.E.size

    @property
    def n_vsc(self) -> int:
        return self.V.size

    def magnitudes(self) -> np.ndarray:
        return np.concatenate([self.E, self.V])

    def angles(self) -> np.ndarray:
        return np.concatenate([self.delta, self.theta])


@dataclass(frozen=True)
class LinearSystem:
    """Continuous-time model ``xdot = Ac x + Bc u`` (per-second rates)."""

    Ac: np.ndarray
    Bc: np.ndarray
    n_sg: int
    n_vsc: int

    def __post_init__(self):
        n, m = 4 * self.n_sg, self.n_sg + self.n_vsc
        if self.Ac.shape != (n, n) or self.Bc.shape != (n, m):
            raise ValidationError(
                f"expected Ac {n}x{n} and Bc {n}x{m}, got {self.Ac.shape} and {self.Bc.shape}"
            )
        if not (np.all(np.isfinite(self.Ac)) and np.all(np.isfinite(self.Bc))):
            raise ValidationError("system matrices must be finite")


@dataclass(frozen=True)
class DiscreteSystem:
    A: np.ndarray
    B: np.ndarray
    dt: float
    n_sg: int | None = None
    n_vsc: int | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if not self.dt > 0:
            raise ValidationError(f"time step must be positive, got {self.dt}")
        if A.shape[0] != A.shape[1]:
            raise ValidationError("A must be square")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValidationError("system matrices must be finite")
        if self.n_sg is not None and A.shape[0] != 4 * self.n_sg:
            raise ValidationError("state dimension inconsistent with generator count")

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class AlgebraicCoefficients:
    """Sensitivities of generator power and d-axis current after eliminating VSC voltages."""

    AP1: np.ndarray
    AP2: np.ndarray
    AP3: np.ndarray
    AP4: np.ndarray
    AI1: np.ndarray
    AI2: np.ndarray
    AI3: np.ndarray
    AI4: np.ndarray


def kron_reduce_matrix(Y: np.ndarray, keep) -> np.ndarray:
    """Schur complement of ``Y`` onto the nodes in ``keep`` (order preserved)."""
    Y = np.asarray(Y)
    keep = list(keep)
    elim = [k for k in range(Y.shape[0]) if k not in set(keep)]
    if not elim:
        return Y[np.ix_(keep, keep)].copy()
    Yee = Y[np.ix_(elim, elim)]
    if np.linalg.cond(Yee) > 1e14:
        raise NonReducibleNetworkError(elim)
    Yke = Y[np.ix_(keep, elim)]
    Yek = Y[np.ix_(elim, keep)]
    try:
        return Y[np.ix_(keep, keep)] - Yke @ np.linalg.solve(Yee, Yek)
    except np.linalg.LinAlgError:
        raise NonReducibleNetworkError(elim) from None


def kron_reduce(network: NetworkDescription) -> np.ndarray:
    """Reduced admittance over [SG internal nodes..., VSC buses...]."""
    return kron_reduce_matrix(network.augmented_admittance(), network.retained_nodes())


def _reduced(network_or_y) -> np.ndarray:
    if isinstance(network_or_y, NetworkDescription):
        return kron_reduce(network_or_y)
    return np.asarray(network_or_y, dtype=complex)


def _node_injections(Y, vm, va):
    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def algebraic_outputs(network, op: OperatingPoint):
    """Generator ``(Pe, Qe, Id)`` and VSC ``(Pv, Qv)`` at the operating point.

    ``network`` is a :class:`NetworkDescription` or an already reduced
    admittance ordered as generator internal nodes then VSC buses.
    """
    Y = _reduced(network)
    ng = op.n_sg
    P, Q = _node_injections(Y, op.magnitudes(), op.angles())
    Pe, Qe = P[:ng], Q[:ng]
    return Pe, Qe, Qe / op.E, P[ng:], Q[ng:]


def _injection_derivatives(Y, vm, va):
    # dS/dva and dS/dvm for S = V conj(Y V), with V = vm exp(j va)
    V = vm * np.exp(1j * va)
    I = Y @ V
    dV = np.diag(V)
    dS_dva = 1j * dV @ np.conj(np.diag(I) - Y @ dV)
    Vn = np.diag(V / vm)
    dS_dvm = dV @ np.conj(Y @ Vn) + np.conj(np.diag(I)) @ Vn
    return dS_dva, dS_dvm


def jacobian(network, op: OperatingPoint) -> np.ndarray:
    """Jacobian of ``(Pe, Id, Pv, Qv)`` with respect to ``(delta, E, theta, V)``.

    Rows and columns are stacked in that block order, so the result is square
    with side ``2*Ng + 2*Nv``.
    """
    Y = _reduced(network)
    ng, nv = op.n_sg, op.n_vsc
    vm, va = op.magnitudes(), op.angles()
    dS_dva, dS_dvm = _injection_derivatives(Y, vm, va)
    # columns: angles then magnitudes of all nodes -> reorder to (delta, E, theta, V)
    dS = np.hstack([dS_dva, dS_dvm])
    col = np.r_[np.arange(ng), ng + nv + np.arange(ng), ng + np.arange(nv), 2 * ng + nv + np.arange(nv)]
    dS = dS[:, col]
    dP, dQ = dS.real, dS.imag

    _, Q = _node_injections(Y, vm, va)
    E = op.E
    dId = dQ[:ng] / E[:, None]
    dId[np.arange(ng), ng + np.arange(ng)] -= Q[:ng] / E**2

    return np.vstack([dP[:ng], dId, dP[ng:], dQ[ng:]])


def jacobian_blocks(J: np.ndarray, n_sg: int, n_vsc: int):
    """Split a full Jacobian into generator/VSC row and column blocks."""
    g = 2 * n_sg
    return J[:g, :g], J[:g, g:], J[g:, :g], J[g:, g:]


def eliminate_algebraic(J: np.ndarray, n_sg: int, n_vsc: int) -> AlgebraicCoefficients:
    """Solve VSC voltage deviations out of the linearized power flow.

    VSC injections ``(dPv, dQv)`` are treated as inputs; the resulting map is
    ``dPe = AP1 ddelta + AP2 dE + AP3 dPv + AP4 dQv`` and likewise for ``dId``.
    """
    ng, nv = n_sg, n_vsc
    Jgg, Jgv, Jvg, Jvv = jacobian_blocks(J, ng, nv)
    if nv == 0:
        red = Jgg
        inj = np.zeros((2 * ng, 0))
    else:
        if np.linalg.cond(Jvv) > 1e12:
            raise DegenerateOperatingPointError("VSC voltage block of the Jacobian is singular")
        sol = np.linalg.solve(Jvv, np.hstack([Jvg, np.eye(2 * nv)]))
        red = Jgg - Jgv @ sol[:, : 2 * ng]
        inj = Jgv @ sol[:, 2 * ng :]
    P, I = slice(0, ng), slice(ng, 2 * ng)
    d, e = slice(0, ng), slice(ng, 2 * ng)
    p, q = slice(0, nv), slice(nv, 2 * nv)
    return AlgebraicCoefficients(
        AP1=red[P, d], AP2=red[P, e], AP3=inj[P, p], AP4=inj[P, q],
        AI1=red[I, d], AI2=red[I, e], AI3=inj[I, p], AI4=inj[I, q],
    )


def assemble_continuous(coef: AlgebraicCoefficients, params) -> LinearSystem:
    """Substitute the algebraic sensitivities into the fourth-order generator model.

    VSC reactive-power adjustments are held at zero, so ``AP4``/``AI4`` do
    not enter ``Bc``.
    """
    ng = len(params)
    nv = coef.AP3.shape[1]
    n, m = 4 * ng, ng + nv
    Ac = np.zeros((n, n))
    Bc = np.zeros((n, m))
    dl = 4 * np.arange(ng)
    ee = dl + 2
    for i, p in enumerate(params):
        r = 4 * i
        Ac[r, r + 1] = 1.0

        Ac[r + 1, dl] = -coef.AP1[i] / (2 * p.H)
        Ac[r + 1, ee] = -coef.AP2[i] / (2 * p.H)
        Ac[r + 1, r + 1] = -p.D / (2 * p.H)
        Bc[r + 1, ng:] = -coef.AP3[i] / (2 * p.H)

        kd = p.xd - p.xdp
        Ac[r + 2, dl] = kd * coef.AI1[i] / p.Tdp
        Ac[r + 2, ee] = kd * coef.AI2[i] / p.Tdp
        Ac[r + 2, r + 2] -= p.xd / p.xdp / p.Tdp
        Ac[r + 2, r + 3] = 1.0 / p.Tdp
        Bc[r + 2, ng:] = kd * coef.AI3[i] / p.Tdp

        Ac[r + 3, dl] = p.Ka * p.xdp * coef.AI1[i] / p.Ta
        Ac[r + 3, ee] = p.Ka * p.xdp * coef.AI2[i] / p.Ta
        Ac[r + 3, r + 2] -= p.Ka / p.Ta
        Ac[r + 3, r + 3] = -1.0 / p.Ta
        Bc[r + 3, i] = p.Ka / p.Ta
        Bc[r + 3, ng:] = p.Ka * p.xdp * coef.AI3[i] / p.Ta
    return LinearSystem(Ac, Bc, ng, nv)


def build_continuous(network: NetworkDescription, op: OperatingPoint, sg_params=None) -> LinearSystem:
    if sg_params is None:
        sg_params = network.sg_params
    if len(sg_params) != op.n_sg or op.n_sg != network.n_sg or op.n_vsc != network.n_vsc:
        raise ValidationError("operating point does not match the network's generator/VSC counts")
    J = jacobian(network, op)
    coef = eliminate_algebraic(J, op.n_sg, op.n_vsc)
    return assemble_continuous(coef, sg_params)


def discretize(sys: LinearSystem, dt: float) -> DiscreteSystem:
    """Zero-order-hold discretization via the augmented matrix exponential."""
    if not dt > 0:
        raise ValidationError(f"time step must be positive, got {dt}")
    n, m = sys.Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = sys.Ac
    M[:n, n:] = sys.Bc
    Phi = scipy.linalg.expm(M * dt)
    return DiscreteSystem(Phi[:n, :n], Phi[:n, n:], dt, sys.n_sg, sys.n_vsc)


def state_labels(n_sg: int) -> list[str]:
    return [f"{name}[{i}]" for i in range(n_sg) for name in STATE_NAMES]


def input_labels(n_sg: int, n_vsc: int) -> list[str]:
    return [f"dVbar[{i}]" for i in range(n_sg)] + [f"dPv[{j}]" for j in range(n_vsc)]
