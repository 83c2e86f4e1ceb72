import numpy as np
import pytest
import scipy.linalg
import scipy.optimize
from hypothesis import given, settings, strategies as st

from riskwadc.errors import NonReducibleNetworkError, ValidationError
from riskwadc.netmodel import (
    Branch, Generator, LinearSystem, NetworkDescription, OperatingPoint, SgParams, Vsc,
    algebraic_outputs, assemble_continuous, build_continuous, discretize, eliminate_algebraic,
    input_labels, jacobian, kron_reduce, kron_reduce_matrix, state_labels,
)
from riskwadc.systems import equilibrium_params, ring, solve_vsc_terminals

SG = SgParams(H=6.5, D=2.0, xd=1.8, xdp=0.3, Tdp=8.0, Ta=0.05, Ka=50.0)


def chain_y(y):
    return np.array([[y, -y, 0], [-y, 2 * y, -y], [0, -y, y]], dtype=complex)


# --- Kron reduction -----------------------------------------------------------

def test_chain_series_combination():
    Yr = kron_reduce_matrix(chain_y(2.0), [0, 2])
    # series of two 2 pu links is 1 pu
    assert np.allclose(Yr, [[1, -1], [-1, 1]])


def test_keep_all_nodes_is_identity():
    Y = chain_y(1 - 3j)
    assert np.array_equal(kron_reduce_matrix(Y, [0, 1, 2]), Y)


def test_star_hub_elimination():
    y = 0.7 - 2.1j
    Y = np.zeros((4, 4), dtype=complex)
    for leg in (1, 2, 3):
        Y[0, 0] += y
        Y[leg, leg] += y
        Y[0, leg] = Y[leg, 0] = -y
    Yr = kron_reduce_matrix(Y, [1, 2, 3])
    off = Yr[~np.eye(3, dtype=bool)]
    assert np.allclose(off, -y / 3)
    assert np.allclose(Yr.sum(axis=1), 0)


def test_floating_island_is_not_reducible():
    Y = np.zeros((3, 3), dtype=complex)
    Y[:2, :2] = chain_y(1.0)[:2, :2] - np.diag([0, 1.0])  # node 2 isolated
    with pytest.raises(NonReducibleNetworkError) as exc:
        kron_reduce_matrix(Y, [0, 1])
    assert exc.value.nodes == [2]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_kron_reduction_idempotent(seed):
    net, op, _ = ring(3, 2, seed)
    Yr = kron_reduce(net)
    again = kron_reduce_matrix(Yr, range(Yr.shape[0]))
    assert np.array_equal(again, Yr)


# --- algebraic outputs ------------------------------------------------------------

def _two_gen(g, b, E, delta):
    net = NetworkDescription(2, [Branch(0, 1, g, b)], [Generator(0, SG), Generator(1, SG)])
    op = OperatingPoint(E, delta, [], [])
    return net, op


def test_single_sg_no_branches_has_zero_output():
    Y = np.zeros((1, 1), dtype=complex)
    Pe, Qe, Id, _, _ = algebraic_outputs(Y, OperatingPoint([1.0], [0.3], [], []))
    assert Pe[0] == 0 and Qe[0] == 0 and Id[0] == 0


def test_equal_angles_pure_susceptance_no_power():
    Y = np.array([[-5j, 5j], [5j, -5j]])
    Pe, _, _, _, _ = algebraic_outputs(Y, OperatingPoint([1.1, 1.1], [0.2, 0.2], [], []))
    assert abs(Pe[0]) < 1e-14


def test_two_bus_direct_formula():
    # reduced admittance with G = 1, B = -5 on the off-diagonal
    G, B = 1.0, -5.0
    Y = np.array([[-G - 1j * B, G + 1j * B], [G + 1j * B, -G - 1j * B]])
    E = np.array([1.05, 1.0])
    d = np.array([0.1, 0.0])
    Pe, Qe, Id, _, _ = algebraic_outputs(Y, OperatingPoint(E, d, [], []))
    Gm, Bm = Y.real, Y.imag
    for i in range(2):
        P = sum(E[i] * E[k] * (Gm[i, k] * np.cos(d[i] - d[k]) + Bm[i, k] * np.sin(d[i] - d[k])) for k in range(2))
        Qv = sum(E[i] * E[k] * (Gm[i, k] * np.sin(d[i] - d[k]) - Bm[i, k] * np.cos(d[i] - d[k])) for k in range(2))
        assert Pe[i] == pytest.approx(P, abs=1e-14)
        assert Qe[i] == pytest.approx(Qv, abs=1e-14)
        assert Id[i] == pytest.approx(Qv / E[i], abs=1e-14)


# --- Jacobian -----------------------------------------------------------------

def _outputs_vec(net, ng, nv, z):
    op = OperatingPoint(z[ng:2 * ng], z[:ng], z[2 * ng + nv:], z[2 * ng:2 * ng + nv])
    Pe, _, Id, Pv, Qv = algebraic_outputs(net, op)
    return np.concatenate([Pe, Id, Pv, Qv])


def _fd_jacobian(net, op, h=1e-6):
    ng, nv = op.n_sg, op.n_vsc
    z0 = np.concatenate([op.delta, op.E, op.theta, op.V])
    J = np.empty((z0.size, z0.size))
    for k in range(z0.size):
        e = np.zeros_like(z0)
        e[k] = h
        J[:, k] = (_outputs_vec(net, ng, nv, z0 + e) - _outputs_vec(net, ng, nv, z0 - e)) / (2 * h)
    return J


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_jacobian_matches_finite_differences(seed):
    net, op, _ = ring(3, 2, seed)
    J = jacobian(net, op)
    Jfd = _fd_jacobian(net, op)
    scale = max(1.0, np.abs(J).max())
    assert np.abs(J - Jfd).max() / scale < 1e-5


def test_zero_coupling_gives_block_diagonal_jacobian():
    Y = np.diag([-3j, -4j])
    op = OperatingPoint([1.0, 1.1], [0.1, -0.2], [], [])
    J = jacobian(Y, op)
    # rows/cols (delta0, delta1, E0, E1): no cross-generator terms
    for i, j in ((0, 1), (1, 0)):
        for r in (i, 2 + i):
            for c in (j, 2 + j):
                assert J[r, c] == 0


def test_angle_row_sum_identity():
    net, op, _ = ring(4, 0, 3)
    J = jacobian(net, op)
    ng = op.n_sg
    dP_ddelta = J[:ng, :ng]
    off = dP_ddelta.sum(axis=1) - np.diag(dP_ddelta)
    assert np.allclose(np.diag(dP_ddelta), -off, rtol=1e-12, atol=1e-12)


# --- algebraic elimination -------------------------------------------------------------

def test_no_vsc_coefficients_are_jacobian_blocks():
    net, op, _ = ring(3, 0, 1)
    J = jacobian(net, op)
    coef = eliminate_algebraic(J, 3, 0)
    assert coef.AP3.shape == (3, 0) and coef.AI4.shape == (3, 0)
    assert np.array_equal(coef.AP1, J[:3, :3])
    assert np.array_equal(coef.AP2, J[:3, 3:6])


def test_elimination_reconstructs_full_jacobian_response():
    net, op, _ = ring(2, 1, 7)
    J = jacobian(net, op)
    coef = eliminate_algebraic(J, 2, 1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        dd, dE, dPv = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(1)
        # solve VSC voltage deviations from the full linearization with dQv = 0
        Jvg, Jvv = J[4:, :4], J[4:, 4:]
        dv = np.linalg.solve(Jvv, np.r_[dPv, 0.0] - Jvg @ np.r_[dd, dE])
        full = J[:4] @ np.r_[dd, dE, dv]
        assert np.allclose(full[:2], coef.AP1 @ dd + coef.AP2 @ dE + coef.AP3 @ dPv, atol=1e-10)
        assert np.allclose(full[2:], coef.AI1 @ dd + coef.AI2 @ dE + coef.AI3 @ dPv, atol=1e-10)


def test_null_direction_of_vsc_coupling_leaves_power_unchanged():
    net, op, _ = ring(2, 2, 4)
    J = jacobian(net, op)
    coef = eliminate_algebraic(J, 2, 2)
    A = np.hstack([coef.AP3, coef.AP4])
    _, s, Vt = np.linalg.svd(A)
    v = Vt[-1] if s.size < A.shape[1] or s[-1] < 1e-12 else None
    if v is None:
        # 2 outputs, 4 inputs: a null direction always exists
        v = scipy.linalg.null_space(A)[:, 0]
    assert np.allclose(A @ v, 0, atol=1e-10)


# --- continuous model -------------------------------------------------------------------

def test_delta_row_and_exciter_input(two_area_model):
    net, op, _ = two_area_model
    lin = build_continuous(net, op)
    for i, p in enumerate(net.sg_params):
        row = lin.Ac[4 * i]
        expected = np.zeros_like(row)
        expected[4 * i + 1] = 1.0
        assert np.array_equal(row, expected)
        assert np.all(lin.Bc[4 * i] == 0)
        assert lin.Bc[4 * i + 3, i] == pytest.approx(p.Ka / p.Ta)
        assert lin.Bc[4 * i + 3, i] > 0


def test_zero_coupling_gives_block_diagonal_state_matrix():
    gens = [Generator(k, SG) for k in range(3)]
    net = NetworkDescription(3, [], gens, shunts=np.full(3, 0.5 - 0.2j))
    op = OperatingPoint([1.0, 1.05, 0.95], [0.0, 0.1, -0.1], [], [])
    lin = build_continuous(net, op, equilibrium_params(net, op))
    mask = np.kron(np.eye(3), np.ones((4, 4))).astype(bool)
    assert np.all(lin.Ac[~mask] == 0)


def _nonlinear_rhs(net, params, x, u, op_guess):
    """Fourth-order generator dynamics with VSC voltages solved from the power flow."""
    ng, nv = net.n_sg, net.n_vsc
    delta, omega, E, Efd = x[0::4], x[1::4], x[2::4], x[3::4]
    dVbar, Pv = u[:ng], u[ng:]
    net_u = net.with_vsc_injections([v.Pv + p for v, p in zip(net.vscs, Pv)])
    op = solve_vsc_terminals(net_u, E, delta, guess=op_guess)
    Pe, _, Id, _, _ = algebraic_outputs(net_u, op)
    f = np.empty_like(x)
    for i, p in enumerate(params):
        f[4 * i] = omega[i]
        f[4 * i + 1] = (p.Pm - Pe[i] - p.D * omega[i]) / (2 * p.H)
        f[4 * i + 2] = (-p.xd / p.xdp * E[i] + (p.xd - p.xdp) * Id[i] + Efd[i]) / p.Tdp
        f[4 * i + 3] = (-Efd[i] - p.Ka * (E[i] - p.xdp * Id[i] - p.Vbar - dVbar[i])) / p.Ta
    return f


@pytest.mark.parametrize("seed", [0, 5])
def test_state_matrix_matches_nonlinear_linearization(seed):
    net, op, params = ring(2, 1, seed)
    lin = build_continuous(net, op)
    ng, nv = net.n_sg, net.n_vsc
    Pe, _, Id, _, _ = algebraic_outputs(net, op)
    x0 = np.zeros(4 * ng)
    x0[0::4], x0[2::4] = op.delta, op.E
    x0[3::4] = [p.xd / p.xdp * op.E[i] - (p.xd - p.xdp) * Id[i] for i, p in enumerate(params)]
    u0 = np.zeros(ng + nv)
    f0 = _nonlinear_rhs(net, params, x0, u0, op)
    assert np.abs(f0).max() < 1e-8
    h = 1e-6
    Afd = np.empty_like(lin.Ac)
    for k in range(x0.size):
        e = np.zeros_like(x0)
        e[k] = h
        Afd[:, k] = (_nonlinear_rhs(net, params, x0 + e, u0, op) - _nonlinear_rhs(net, params, x0 - e, u0, op)) / (2 * h)
    Bfd = np.empty_like(lin.Bc)
    for k in range(u0.size):
        e = np.zeros_like(u0)
        e[k] = h
        Bfd[:, k] = (_nonlinear_rhs(net, params, x0, u0 + e, op) - _nonlinear_rhs(net, params, x0, u0 - e, op)) / (2 * h)
    assert np.abs(lin.Ac - Afd).max() / np.abs(lin.Ac).max() < 1e-5
    assert np.abs(lin.Bc - Bfd).max() / np.abs(lin.Bc).max() < 1e-5


def test_model_dimensions_are_checked():
    with pytest.raises(ValidationError):
        LinearSystem(np.zeros((4, 4)), np.zeros((4, 3)), 1, 1)


# --- discretization ----------------------------------------------------------------------------

def test_zero_dynamics_discretize_to_identity():
    lin = LinearSystem(np.zeros((4, 4)), np.arange(8.0).reshape(4, 2), 1, 1)
    d = discretize(lin, 0.01)
    assert np.allclose(d.A, np.eye(4), atol=0)
    assert np.allclose(d.B, 0.01 * lin.Bc, rtol=1e-14)


def test_scalar_exponential():
    from riskwadc.netmodel import DiscreteSystem  # noqa: F401
    a, dt = -1.7, 0.01
    Ac = np.diag([a, 0, 0, 0])
    d = discretize(LinearSystem(Ac, np.zeros((4, 1)), 1, 0), dt)
    assert d.A[0, 0] == pytest.approx(np.exp(a * dt), rel=1e-14)


def test_eigenvalue_mapping(two_area_model):
    net, op, sys = two_area_model
    lin = build_continuous(net, op)
    ec = np.sort_complex(np.exp(np.linalg.eigvals(lin.Ac) * sys.dt))
    ed = np.sort_complex(np.linalg.eigvals(sys.A))
    assert np.abs(ec - ed).max() < 1e-10
    assert sys.dt == 0.01


def test_nonpositive_step_rejected(two_area_model):
    net, op, _ = two_area_model
    with pytest.raises(ValidationError):
        discretize(build_continuous(net, op), 0.0)


def test_labels():
    assert state_labels(2)[:4] == ["delta[0]", "omega[0]", "E[0]", "Efd[0]"]
    assert input_labels(2, 1) == ["dVbar[0]", "dVbar[1]", "dPv[0]"]


def test_bad_parameters_rejected():
    with pytest.raises(ValidationError):
        SgParams(H=0.0, D=1, xd=1, xdp=0.3, Tdp=5, Ta=0.05, Ka=50)
    with pytest.raises(ValidationError):
        SgParams(H=5.0, D=1, xd=0.2, xdp=0.3, Tdp=5, Ta=0.05, Ka=50)
    with pytest.raises(ValidationError):
        NetworkDescription(2, [Branch(0, 5, 1, -5)], [Generator(0, SG)])
    with pytest.raises(ValidationError):
        NetworkDescription(2, [], [Generator(0, SG)], [Vsc(1, 0.1), Vsc(1, 0.2)])
