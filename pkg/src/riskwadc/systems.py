"""Built-in test systems and operating-point construction helpers.

Generator inertia and damping are stated in the convention of the swing
equation used by :mod:`riskwadc.netmodel` (speed in rad/s), i.e. the usual
per-unit values divided by the synchronous speed.
"""

from __future__ import annotations

import re

import numpy as np
import scipy.optimize

from .errors import DegenerateOperatingPointError, UnknownSystemError
from .netmodel import (
    Branch,
    Generator,
    NetworkDescription,
    OperatingPoint,
    SgParams,
    Vsc,
    algebraic_outputs,
    jacobian,
    kron_reduce,
)

OMEGA_S = 2 * np.pi * 60.0


def _line(f, t, r, x):
    y = 1.0 / complex(r, x)
    return Branch(f, t, y.real, y.imag)


def _solve(fun, jac, x0, what):
    if x0.size == 0:
        return x0
    sol = scipy.optimize.root(fun, x0, jac=jac, method="hybr", options={"xtol": 1e-13})
    # hybr reports "no progress" when started at the root; the residual decides
    if not np.all(np.isfinite(sol.x)) or np.max(np.abs(fun(sol.x))) > 1e-9:
        raise DegenerateOperatingPointError(f"{what} did not converge: {sol.message}")
    return sol.x


def solve_vsc_terminals(network: NetworkDescription, E, delta, guess: OperatingPoint | None = None) -> OperatingPoint:
    """VSC terminal voltages that deliver the scheduled (Pv, Qv) for fixed SG internal voltages."""
    Y = kron_reduce(network)
    ng, nv = network.n_sg, network.n_vsc
    E, delta = np.asarray(E, float), np.asarray(delta, float)
    target = np.r_[[v.Pv for v in network.vscs], [v.Qv for v in network.vscs]]
    if nv == 0:
        return OperatingPoint(E, delta, np.zeros(0), np.zeros(0))

    def op_of(z):
        return OperatingPoint(E, delta, z[nv:], z[:nv])

    def fun(z):
        _, _, _, Pv, Qv = algebraic_outputs(Y, op_of(z))
        return np.r_[Pv, Qv] - target

    def jac(z):
        return jacobian(Y, op_of(z))[2 * ng :, 2 * ng :]

    z0 = np.r_[guess.theta, guess.V] if guess is not None else np.r_[np.full(nv, delta.mean()), np.ones(nv)]
    return op_of(_solve(fun, jac, z0, "VSC terminal solve"))


def solve_operating_point(network: NetworkDescription, E, p_targets, delta_ref=0.0, guess=None) -> OperatingPoint:
    """Generator angles and VSC voltages matching active-power schedules.

    Generator 0 is the angle reference and absorbs the mismatch; ``p_targets``
    gives the electrical output of generators ``1..Ng-1``.
    """
    Y = kron_reduce(network)
    ng, nv = network.n_sg, network.n_vsc
    E = np.asarray(E, float)
    target = np.r_[np.asarray(p_targets, float), [v.Pv for v in network.vscs], [v.Qv for v in network.vscs]]

    def op_of(z):
        delta = np.r_[delta_ref, z[: ng - 1]]
        return OperatingPoint(E, delta, z[ng - 1 + nv :], z[ng - 1 : ng - 1 + nv])

    def fun(z):
        Pe, _, _, Pv, Qv = algebraic_outputs(Y, op_of(z))
        return np.r_[Pe[1:], Pv, Qv] - target

    rows = np.r_[1:ng, 2 * ng : 2 * ng + 2 * nv]
    cols = np.r_[1:ng, 2 * ng : 2 * ng + 2 * nv]

    def jac(z):
        return jacobian(Y, op_of(z))[np.ix_(rows, cols)]

    if guess is None:
        z0 = np.r_[np.zeros(ng - 1), np.zeros(nv), np.ones(nv)]
    else:
        z0 = np.r_[guess.delta[1:], guess.theta, guess.V]
    return op_of(_solve(fun, jac, z0, "operating-point solve"))


def equilibrium_params(network: NetworkDescription, op: OperatingPoint) -> list[SgParams]:
    """Set Pm and Vbar so that ``op`` is an equilibrium of the generator dynamics."""
    Pe, _, Id, _, _ = algebraic_outputs(network, op)
    out = []
    for i, p in enumerate(network.sg_params):
        efd = p.xd / p.xdp * op.E[i] - (p.xd - p.xdp) * Id[i]
        vbar = op.E[i] - p.xdp * Id[i] + efd / p.Ka
        out.append(SgParams(p.H, p.D, p.xd, p.xdp, p.Tdp, p.Ta, p.Ka, float(Pe[i]), float(vbar)))
    return out


def algebraic_residual(network: NetworkDescription, op: OperatingPoint, params=None) -> float:
    """Largest violation of the steady-state algebraic and equilibrium equations."""
    if params is None:
        params = network.sg_params
    Pe, _, Id, Pv, Qv = algebraic_outputs(network, op)
    res = [Pv - [v.Pv for v in network.vscs], Qv - [v.Qv for v in network.vscs]]
    for i, p in enumerate(params):
        efd = p.xd / p.xdp * op.E[i] - (p.xd - p.xdp) * Id[i]
        res.append([p.Pm - Pe[i], -efd - p.Ka * (op.E[i] - p.xdp * Id[i] - p.Vbar)])
    return float(max((np.max(np.abs(r)) if np.size(r) else 0.0) for r in res))


def two_area():
    """Four-machine, two-area system (11 buses, 100 MVA base) with one VSC per area."""
    xt = 0.15 / 9
    r_km, x_km, b_km = 1e-4, 1e-3, 1.75e-3
    # 1-indexed bus pairs and lengths (km); double circuits listed twice
    lines = [(5, 6, 25), (6, 7, 10), (7, 8, 110), (7, 8, 110), (8, 9, 110), (8, 9, 110), (9, 10, 10), (10, 11, 25)]
    branches = [_line(1 - 1, 5 - 1, 0.0, xt), _line(2 - 1, 6 - 1, 0.0, xt), _line(3 - 1, 11 - 1, 0.0, xt), _line(4 - 1, 10 - 1, 0.0, xt)]
    shunts = np.zeros(11, dtype=complex)
    for f, t, km in lines:
        branches.append(_line(f - 1, t - 1, r_km * km, x_km * km))
        shunts[f - 1] += 0.5j * b_km * km
        shunts[t - 1] += 0.5j * b_km * km
    # constant-impedance loads with shunt compensation at buses 7 and 9
    shunts[6] += complex(9.67, -(1.00 - 2.00))
    shunts[8] += complex(17.67, -(1.00 - 3.50))

    def sg(H):
        return SgParams(H=9 * H / OMEGA_S, D=9 * 10.0 / OMEGA_S, xd=1.8 / 9, xdp=0.3 / 9, Tdp=8.0, Ta=0.05, Ka=20.0)

    gens = [Generator(0, sg(6.5)), Generator(1, sg(6.5)), Generator(2, sg(6.175)), Generator(3, sg(6.175))]
    vscs = [Vsc(6, 1.0, 0.0), Vsc(8, 1.0, 0.0)]
    net = NetworkDescription(11, branches, gens, vscs, shunts)
    op = solve_operating_point(net, E=[1.12, 1.10, 1.12, 1.10], p_targets=[7.0, 7.19, 7.0])
    params = equilibrium_params(net, op)
    return net.with_params(params), op, params


def ring(n_sg: int, n_vsc: int, seed: int = 0):
    """Seeded synthetic ring: SG buses first, VSC buses interleaved after them."""
    rng = np.random.default_rng(seed)
    n_bus = n_sg + n_vsc
    order = []
    for k in range(max(n_sg, n_vsc)):
        if k < n_sg:
            order.append(k)
        if k < n_vsc:
            order.append(n_sg + k)
    branches = []
    for k in range(n_bus if n_bus > 2 else n_bus - 1):
        x = rng.uniform(0.03, 0.08)
        branches.append(_line(order[k], order[(k + 1) % n_bus], x / 10, x))
    shunts = np.zeros(n_bus, dtype=complex)
    shunts += rng.uniform(0.6, 1.0, n_bus) + 1j * rng.uniform(-0.1, 0.1, n_bus)
    gens = []
    for i in range(n_sg):
        H = rng.uniform(3.0, 6.0)
        xd = rng.uniform(1.2, 1.8) / 9
        gens.append(Generator(i, SgParams(H=9 * H / OMEGA_S, D=9 * 10.0 / OMEGA_S, xd=xd, xdp=rng.uniform(0.2, 0.35) / 9, Tdp=rng.uniform(5.0, 8.0), Ta=0.05, Ka=rng.uniform(10.0, 20.0))))
    vscs = [Vsc(n_sg + j, float(rng.uniform(0.1, 0.3)), 0.0) for j in range(n_vsc)]
    net = NetworkDescription(n_bus, branches, gens, vscs, shunts)
    total = shunts.real.sum() - sum(v.Pv for v in vscs)
    p = total / n_sg * rng.uniform(0.9, 1.1, n_sg - 1)
    E = rng.uniform(1.02, 1.08, n_sg)
    op = solve_operating_point(net, E=E, p_targets=p)
    params = equilibrium_params(net, op)
    return net.with_params(params), op, params


_RING = re.compile(r"^ring\((\d+)\s*,\s*(\d+)\s*(?:,\s*(-?\d+))?\)$")


def builtin_system(name: str):
    """Return ``(network, operating_point, sg_params)`` for a named fixture.

    Recognised names are ``"two-area"`` and ``"ring(Ng, Nv, seed)"``.
    """
    key = name.strip().lower().replace(" ", "")
    if key in ("two-area", "two_area", "twoarea"):
        return two_area()
    m = _RING.match(key)
    if m:
        ng, nv = int(m.group(1)), int(m.group(2))
        if ng < 1:
            raise UnknownSystemError("ring needs at least one generator")
        return ring(ng, nv, int(m.group(3) or 0))
    raise UnknownSystemError(f"unknown built-in system {name!r}; try 'two-area' or 'ring(Ng, Nv, seed)'")


def builtin_areas(name: str, network: NetworkDescription | None = None):
    """Area map ``{node: area}`` and adjacent-area pairs for a named fixture.

    Nodes ``0..Ng-1`` are generators and ``Ng..Ng+Nv-1`` are VSC controllers.
    """
    key = name.strip().lower().replace(" ", "")
    if key in ("two-area", "two_area", "twoarea"):
        return {0: 1, 1: 1, 2: 2, 3: 2, 4: 1, 5: 2}, [(1, 2)]
    m = _RING.match(key)
    if m is None:
        raise UnknownSystemError(f"unknown built-in system {name!r}")
    ng, nv = int(m.group(1)), int(m.group(2))
    areas = {i: 1 + i // 2 for i in range(ng)}
    n_areas = max(areas.values())
    for j in range(nv):
        areas[ng + j] = 1 + (j * n_areas) // max(nv, 1)
    links = [(a, a + 1) for a in range(1, n_areas)]
    return areas, links


def perturb_vsc_injections(network: NetworkDescription, op: OperatingPoint, factors):
    """Re-solve the operating point with each VSC's active power scaled by ``factors``.

    Generator internal voltages and the scheduled output of generators
    ``1..Ng-1`` are kept; generator 0 picks up the difference.
    """
    factors = np.asarray(factors, dtype=float)
    Pv = np.array([v.Pv for v in network.vscs]) * factors
    net = network.with_vsc_injections(Pv)
    p_targets = [p.Pm for p in network.sg_params[1:]]
    op2 = solve_operating_point(net, E=op.E, p_targets=p_targets, delta_ref=float(op.delta[0]), guess=op)
    params = equilibrium_params(net, op2)
    return net.with_params(params), op2, params
