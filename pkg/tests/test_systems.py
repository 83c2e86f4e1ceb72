import numpy as np
import pytest

from riskwadc.errors import UnknownSystemError
from riskwadc.systems import algebraic_residual, builtin_areas, builtin_system, perturb_vsc_injections, ring, two_area


def test_two_area_shape():
    net, op, params = builtin_system("two-area")
    assert net.n_sg == 4 and net.n_vsc == 2
    areas, links = builtin_areas("two-area")
    assert len(set(areas.values())) == 2


def test_ring_is_deterministic():
    a = builtin_system("ring(5, 2, 3)")
    b = ring(5, 2, 3)
    assert np.array_equal(a[1].delta, b[1].delta)
    assert a[0].branches == b[0].branches


@pytest.mark.parametrize("name", ["two-area", "ring(3,1,0)", "ring(6,3,11)", "ring(2,0,4)"])
def test_fixture_is_an_equilibrium(name):
    net, op, params = builtin_system(name)
    assert algebraic_residual(net, op, params) < 1e-8


def test_unknown_name():
    with pytest.raises(UnknownSystemError):
        builtin_system("ieee-68")


def test_vsc_perturbation_keeps_equilibrium():
    net, op, _ = two_area()
    net2, op2, params = perturb_vsc_injections(net, op, [1.1, 0.9])
    assert [v.Pv for v in net2.vscs] == pytest.approx([f * v.Pv for f, v in zip((1.1, 0.9), net.vscs)])
    assert algebraic_residual(net2, op2, params) < 1e-8
    assert np.allclose(op2.E, op.E)
