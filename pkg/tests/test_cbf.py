import math

import numpy as np
import pytest

from safectrl.cbf import (
    BarrierSpec,
    DynamicsModel,
    SeparabilityViolation,
    assemble_deg1,
    assemble_deg2,
    assemble_deg2_terms,
    fd_gradient,
    fd_jacobian,
    lie_first,
    psi_chain_eval,
    rk4_step,
    validate_fd,
)
from safectrl.scenarios import build_example1, build_unicycle
from safectrl.wopt import DisturbanceBox


def example1_psi2_reference(x, u, w):
    """Hand-expanded psi_2 for the double-integrator barrier h = x1^2 - 1,
    gains k1 = k2 = 1: 2 x1 u + (4 x2 + 4 x1) w + 2 w^2 + 2 x2^2 + 4 x1 x2 + x1^2 - 1."""
    x1, x2 = x
    return 2 * x1 * u + (4 * x2 + 4 * x1) * w + 2 * w**2 + 2 * x2**2 + 4 * x1 * x2 + x1**2 - 1


def unicycle_psi2_reference(x, u, w):
    """Hand-expanded psi_2 for the first unicycle obstacle (center (4, 2.5),
    squared radius 0.7, gains k1 = k2 = 2, v = 1)."""
    x1, x2, th = x
    a_u = -(2 * math.sin(th) * (x1 - 4) - 2 * math.cos(th) * (x2 - 2.5))
    p = 4 * w**2 + 4 * (math.cos(th) + math.sin(th) + 2 * ((x1 - 4) + (x2 - 2.5))) * w
    state = (4 * (x1 - 4) ** 2 + 4 * (x2 - 2.5) ** 2
             + 4 * math.cos(th) * (2 * x1 - 8) + 4 * math.sin(th) * (2 * x2 - 5) - 0.8)
    return a_u * u + p + state


@pytest.fixture(scope="module")
def example1():
    return build_example1()


@pytest.fixture(scope="module")
def unicycle():
    return build_unicycle()


def scalar_integrator(k1=1.0):
    """xdot = u + w in one dimension with the degree-1 barrier h = x."""
    dyn = DynamicsModel(
        n=1, mu=1, l=1,
        f=lambda x: np.zeros(1),
        g=lambda x: np.ones((1, 1)),
        M=np.ones((1, 1)),
        jac_f=lambda x: np.zeros((1, 1)),
    )
    bar = BarrierSpec(h=lambda x: float(x[0]), grad_h=lambda x: np.ones(1),
                      degree=1, k=[k1], barrier_id="wall")
    return dyn, bar


class TestLieFirst:
    def test_example1_hand_values(self, example1):
        dyn, bar = example1.dynamics, example1.barriers[0]
        Lfh, Lgh, LMh = lie_first(dyn, bar, np.array([2.0, 3.0]))
        assert Lfh == pytest.approx(12.0)
        assert Lgh[0] == pytest.approx(0.0)
        assert LMh[0] == pytest.approx(4.0)

    def test_constant_h_gives_zeros(self, example1):
        dyn = example1.dynamics
        bar = BarrierSpec(h=lambda x: 7.0, grad_h=lambda x: np.zeros(2),
                          degree=1, k=[1.0])
        Lfh, Lgh, LMh = lie_first(dyn, bar, np.array([0.3, -2.0]))
        assert Lfh == 0.0 and Lgh[0] == 0.0 and LMh[0] == 0.0

    def test_unicycle_h_independent_of_heading(self, unicycle):
        dyn, bar = unicycle.dynamics, unicycle.barriers[0]
        for th in np.linspace(-math.pi, math.pi, 9):
            _, Lgh, _ = lie_first(dyn, bar, np.array([4.0, 2.5 + math.sqrt(0.7), th]))
            assert Lgh[0] == 0.0


class TestAssembleDeg1:
    def test_scalar_integrator_worst_case(self):
        dyn, bar = scalar_integrator()
        row = assemble_deg1(dyn, bar, np.array([0.5]), DisturbanceBox(lo=[-0.1], hi=[0.1]))
        assert row.a[0] == pytest.approx(1.0)
        assert row.b == pytest.approx(-0.4)  # w_opt = -0.1 since LM h = 1 > 0

    def test_degenerate_box_drops_disturbance(self):
        dyn, bar = scalar_integrator()
        row = assemble_deg1(dyn, bar, np.array([0.5]), DisturbanceBox(lo=[0.0], hi=[0.0]))
        assert row.b == pytest.approx(-0.5)

    def test_orthogonal_disturbance_ignores_box(self):
        # M feeds only the second state; h depends only on the first.
        dyn = DynamicsModel(
            n=2, mu=1, l=1,
            f=lambda x: np.zeros(2),
            g=lambda x: np.array([[1.0], [0.0]]),
            M=np.array([[0.0], [1.0]]),
            jac_f=lambda x: np.zeros((2, 2)),
        )
        bar = BarrierSpec(h=lambda x: float(x[0]), grad_h=lambda x: np.array([1.0, 0.0]),
                          degree=1, k=[2.0])
        x = np.array([1.5, -3.0])
        b_small = assemble_deg1(dyn, bar, x, DisturbanceBox(lo=[-0.1], hi=[0.1])).b
        b_large = assemble_deg1(dyn, bar, x, DisturbanceBox(lo=[-9.0], hi=[9.0])).b
        assert b_small == pytest.approx(b_large)

    def test_rejects_degree_two_barrier(self, example1):
        with pytest.raises(ValueError):
            assemble_deg1(example1.dynamics, example1.barriers[0], np.array([1.0, 0.0]),
                          example1.dist_box)


class TestAssembleDeg2Terms:
    def test_example1_hand_values(self, example1):
        t = assemble_deg2_terms(example1.dynamics, example1.barriers[0], np.array([1.0, 2.0]))
        assert t.a_u[0] == pytest.approx(2.0)
        assert t.Qw[0, 0] == pytest.approx(2.0)
        assert t.cw[0] == pytest.approx(12.0)
        assert t.psi_const == pytest.approx(16.0)

    def test_example1_matches_reference_polynomial(self, example1):
        dyn, bar = example1.dynamics, example1.barriers[0]
        rng = np.random.default_rng(11)
        for _ in range(100):
            x = rng.uniform(-3, 3, 2)
            t = assemble_deg2_terms(dyn, bar, x)
            # coefficient-wise: u, w^2, w, and constant parts
            assert t.a_u[0] == pytest.approx(2 * x[0], rel=1e-9, abs=1e-12)
            assert t.Qw[0, 0] == pytest.approx(2.0, rel=1e-9)
            assert t.cw[0] == pytest.approx(4 * x[1] + 4 * x[0], rel=1e-9, abs=1e-12)
            assert t.psi_const == pytest.approx(example1_psi2_reference(x, 0.0, 0.0),
                                                rel=1e-9, abs=1e-12)

    def test_unicycle_hand_values(self, unicycle):
        t = assemble_deg2_terms(unicycle.dynamics, unicycle.barriers[0],
                                np.array([4.0, 3.5, 0.0]))
        assert t.a_u[0] == pytest.approx(2.0)
        assert t.Qw[0, 0] == pytest.approx(4.0)
        assert t.cw[0] == pytest.approx(12.0)
        assert t.psi_const == pytest.approx(unicycle_psi2_reference([4.0, 3.5, 0.0], 0.0, 0.0))

    def test_unicycle_matches_reference_polynomial(self, unicycle):
        dyn, bar = unicycle.dynamics, unicycle.barriers[0]
        rng = np.random.default_rng(12)
        for _ in range(100):
            x = np.array([rng.uniform(0, 10), rng.uniform(0, 12), rng.uniform(-4, 4)])
            t = assemble_deg2_terms(dyn, bar, x)
            x1, x2, th = x
            assert t.a_u[0] == pytest.approx(
                -(2 * math.sin(th) * (x1 - 4) - 2 * math.cos(th) * (x2 - 2.5)),
                rel=1e-9, abs=1e-12)
            assert t.Qw[0, 0] == pytest.approx(4.0, rel=1e-9)
            assert t.cw[0] == pytest.approx(
                4 * (math.cos(th) + math.sin(th) + 2 * ((x1 - 4) + (x2 - 2.5))),
                rel=1e-9, abs=1e-12)
            assert t.psi_const == pytest.approx(unicycle_psi2_reference(x, 0.0, 0.0),
                                                rel=1e-9, abs=1e-12)

    def test_zero_hessian_kills_quadratic_term(self):
        dyn = DynamicsModel(
            n=2, mu=1, l=1,
            f=lambda x: np.array([x[1], 0.0]),
            g=lambda x: np.array([[0.0], [1.0]]),
            M=np.array([[1.0], [0.0]]),
            jac_f=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
        )
        bar = BarrierSpec(h=lambda x: float(x[0]) - 2.0, grad_h=lambda x: np.array([1.0, 0.0]),
                          hess_h=lambda x: np.zeros((2, 2)), degree=2, k=[1.0, 1.0])
        t = assemble_deg2_terms(dyn, bar, np.array([0.4, -1.2]))
        assert t.Qw[0, 0] == 0.0

    def test_separability_violation_raises(self):
        # h = x1 * x2 couples the control channel to the disturbance channel.
        dyn = DynamicsModel(
            n=2, mu=1, l=1,
            f=lambda x: np.array([x[1], 0.0]),
            g=lambda x: np.array([[0.0], [1.0]]),
            M=np.array([[1.0], [0.0]]),
            jac_f=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
        )
        bar = BarrierSpec(h=lambda x: float(x[0] * x[1]),
                          grad_h=lambda x: np.array([x[1], x[0]]),
                          hess_h=lambda x: np.array([[0.0, 1.0], [1.0, 0.0]]),
                          degree=2, k=[1.0, 1.0])
        with pytest.raises(SeparabilityViolation):
            assemble_deg2_terms(dyn, bar, np.array([1.0, 1.0]))


class TestAssembleDeg2:
    def test_example1_boundary_state(self, example1):
        dyn, bar = example1.dynamics, example1.barriers[0]
        row = assemble_deg2(dyn, bar, np.array([1.0, 0.0]), DisturbanceBox(lo=[-1], hi=[1]))
        assert row.a[0] == pytest.approx(2.0)
        assert row.b == pytest.approx(2.0)

    def test_example1_symmetric_state(self, example1):
        dyn, bar = example1.dynamics, example1.barriers[0]
        row = assemble_deg2(dyn, bar, np.array([1.0, -1.0]), DisturbanceBox(lo=[-1], hi=[1]))
        assert row.a[0] == pytest.approx(2.0)
        assert row.b == pytest.approx(2.0)  # cw = 0 so w_opt = 0, b = -psi_const

    def test_degenerate_box_equals_disturbance_free(self, example1):
        dyn, bar = example1.dynamics, example1.barriers[0]
        rng = np.random.default_rng(4)
        dyn_no_M = DynamicsModel(n=2, mu=1, l=1, f=dyn.f, g=dyn.g,
                                 M=np.zeros((2, 1)), jac_f=dyn.jac_f)
        for _ in range(20):
            x = rng.uniform(-2, 2, 2)
            row0 = assemble_deg2(dyn, bar, x, DisturbanceBox(lo=[0.0], hi=[0.0]))
            row_free = assemble_deg2(dyn_no_M, bar, x, DisturbanceBox(lo=[0.0], hi=[0.0]))
            assert row0.b == pytest.approx(row_free.b, abs=1e-12)
            assert row0.a[0] == pytest.approx(row_free.a[0], abs=1e-12)

    def test_rhs_monotone_in_box(self, unicycle):
        dyn, bar = unicycle.dynamics, unicycle.barriers[0]
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = np.array([rng.uniform(0, 10), rng.uniform(0, 12), rng.uniform(-4, 4)])
            r1, r2 = sorted(rng.uniform(0.01, 0.5, 2))
            b_small = assemble_deg2(dyn, bar, x, DisturbanceBox(lo=[-r1], hi=[r1])).b
            b_large = assemble_deg2(dyn, bar, x, DisturbanceBox(lo=[-r2], hi=[r2])).b
            assert b_small <= b_large + 1e-12


class TestPsiChain:
    def test_example1_boundary_zeros(self, example1):
        psi = psi_chain_eval(example1.dynamics, example1.barriers[0],
                             np.array([1.0, 0.0]), np.zeros(1), np.zeros(1))
        assert psi == pytest.approx((0.0, 0.0, 0.0))

    def test_static_system_scales_h(self):
        dyn = DynamicsModel(n=1, mu=1, l=1,
                            f=lambda x: np.zeros(1), g=lambda x: np.zeros((1, 1)),
                            M=np.zeros((1, 1)), jac_f=lambda x: np.zeros((1, 1)))
        bar = BarrierSpec(h=lambda x: 5.0, grad_h=lambda x: np.zeros(1),
                          degree=1, k=[3.0])
        psi = psi_chain_eval(dyn, bar, np.zeros(1), np.zeros(1), np.zeros(1))
        assert psi[1] == pytest.approx(15.0)

    def test_unicycle_matches_reference(self, unicycle):
        dyn, bar = unicycle.dynamics, unicycle.barriers[0]
        x = np.array([10.0, 10.0, 0.0])
        psi = psi_chain_eval(dyn, bar, x, np.zeros(1), np.zeros(1))
        assert psi[2] == pytest.approx(unicycle_psi2_reference(x, 0.0, 0.0))

    def test_reference_polynomials_with_inputs(self, example1, unicycle):
        rng = np.random.default_rng(21)
        for _ in range(50):
            x = rng.uniform(-2, 2, 2)
            u, w = rng.uniform(-3, 3), rng.uniform(-1, 1)
            psi = psi_chain_eval(example1.dynamics, example1.barriers[0], x, [u], [w])
            assert psi[2] == pytest.approx(example1_psi2_reference(x, u, w), rel=1e-9, abs=1e-10)
        for _ in range(50):
            x = np.array([rng.uniform(0, 10), rng.uniform(0, 12), rng.uniform(-4, 4)])
            u, w = rng.uniform(-3, 3), rng.uniform(-0.1, 0.1)
            psi = psi_chain_eval(unicycle.dynamics, unicycle.barriers[0], x, [u], [w])
            assert psi[2] == pytest.approx(unicycle_psi2_reference(x, u, w), rel=1e-9, abs=1e-10)


class TestValidateFd:
    def test_example1_random_states(self, example1):
        dyn, bar = example1.dynamics, example1.barriers[0]
        rng = np.random.default_rng(6)
        for _ in range(30):
            x = rng.uniform(-2, 2, 2)
            err = validate_fd(dyn, bar, x, rng.uniform(-2, 2, 1), rng.uniform(-1, 1, 1))
            assert err < 1e-4

    def test_unicycle_random_states(self, unicycle):
        dyn = unicycle.dynamics
        rng = np.random.default_rng(7)
        for bar in unicycle.barriers:
            for _ in range(10):
                x = np.array([rng.uniform(0, 10), rng.uniform(0, 12), rng.uniform(-4, 4)])
                err = validate_fd(dyn, bar, x, rng.uniform(-2, 2, 1), rng.uniform(-0.1, 0.1, 1))
                assert err < 1e-4

    def test_linear_system_quadratic_h_tight(self):
        A = np.array([[0.0, 1.0], [-1.0, -0.5]])
        dyn = DynamicsModel(
            n=2, mu=1, l=1,
            f=lambda x: A @ x,
            g=lambda x: np.array([[0.0], [1.0]]),
            M=np.array([[1.0], [0.0]]),
            jac_f=lambda x: A,
        )
        bar = BarrierSpec(h=lambda x: float(x[0] ** 2) - 0.5,
                          grad_h=lambda x: np.array([2.0 * x[0], 0.0]),
                          hess_h=lambda x: np.array([[2.0, 0.0], [0.0, 0.0]]),
                          degree=2, k=[1.0, 2.0])
        rng = np.random.default_rng(8)
        for _ in range(20):
            err = validate_fd(dyn, bar, rng.uniform(-1, 1, 2),
                              rng.uniform(-1, 1, 1), rng.uniform(-0.2, 0.2, 1))
            assert err < 1e-6

    def test_halving_dt_quarters_error(self, unicycle):
        dyn, bar = unicycle.dynamics, unicycle.barriers[0]
        x = np.array([3.0, 4.0, 0.7])
        u, w = np.array([0.5]), np.array([0.05])
        e_coarse = validate_fd(dyn, bar, x, u, w, dt=2e-3)
        e_fine = validate_fd(dyn, bar, x, u, w, dt=1e-3)
        assert e_fine == pytest.approx(e_coarse / 4.0, rel=0.15)


class TestDerivativeCallbacks:
    def test_bundled_jacobians_match_fd(self, example1, unicycle):
        rng = np.random.default_rng(9)
        for sc in (example1, unicycle):
            dyn = sc.dynamics
            for _ in range(20):
                x = rng.uniform(-2, 8, dyn.n)
                assert np.allclose(dyn.jac_f(x), fd_jacobian(dyn.f, x),
                                   rtol=1e-5, atol=1e-7)

    def test_bundled_barrier_derivatives_match_fd(self, unicycle):
        rng = np.random.default_rng(10)
        for bar in unicycle.barriers:
            for _ in range(10):
                x = rng.uniform(0, 10, 3)
                assert np.allclose(bar.grad_h(x), fd_gradient(bar.h, x), rtol=1e-5, atol=1e-7)
                assert np.allclose(bar.hess_h(x), fd_jacobian(bar.grad_h, x),
                                   rtol=1e-5, atol=1e-6)


class TestRk4:
    def test_frozen_system(self):
        dyn = DynamicsModel(n=2, mu=1, l=1,
                            f=lambda x: np.zeros(2), g=lambda x: np.zeros((2, 1)),
                            M=np.zeros((2, 1)), jac_f=lambda x: np.zeros((2, 2)))
        x = np.array([1.0, -2.0])
        assert np.array_equal(rk4_step(dyn, x, np.zeros(1), np.zeros(1), 0.1), x)

    def test_constant_field_exact(self):
        dyn = DynamicsModel(n=1, mu=1, l=1,
                            f=lambda x: np.ones(1), g=lambda x: np.zeros((1, 1)),
                            M=np.zeros((1, 1)), jac_f=lambda x: np.zeros((1, 1)))
        x1 = rk4_step(dyn, np.zeros(1), np.zeros(1), np.zeros(1), 0.1)
        assert x1[0] == pytest.approx(0.1, abs=1e-15)

    def test_linear_scalar_matches_rk4_taylor(self):
        dyn = DynamicsModel(n=1, mu=1, l=1,
                            f=lambda x: x.copy(), g=lambda x: np.zeros((1, 1)),
                            M=np.zeros((1, 1)), jac_f=lambda x: np.ones((1, 1)))
        x1 = rk4_step(dyn, np.ones(1), np.zeros(1), np.zeros(1), 0.1)
        dt = 0.1
        expected = 1 + dt + dt**2 / 2 + dt**3 / 6 + dt**4 / 24
        assert x1[0] == pytest.approx(expected, abs=1e-15)


class TestModelValidation:
    def test_m_matrix_rejects_two_entries_per_row(self):
        with pytest.raises(ValueError):
            DynamicsModel(n=1, mu=1, l=2,
                          f=lambda x: np.zeros(1), g=lambda x: np.zeros((1, 1)),
                          M=np.array([[1.0, 1.0]]), jac_f=lambda x: np.zeros((1, 1)))

    def test_m_matrix_rejects_non_binary(self):
        with pytest.raises(ValueError):
            DynamicsModel(n=1, mu=1, l=1,
                          f=lambda x: np.zeros(1), g=lambda x: np.zeros((1, 1)),
                          M=np.array([[0.5]]), jac_f=lambda x: np.zeros((1, 1)))

    def test_barrier_rejects_nonpositive_gain(self):
        with pytest.raises(ValueError):
            BarrierSpec(h=lambda x: 0.0, grad_h=lambda x: np.zeros(1), degree=1, k=[0.0])

    def test_degree_two_requires_hessian(self):
        with pytest.raises(ValueError):
            BarrierSpec(h=lambda x: 0.0, grad_h=lambda x: np.zeros(1), degree=2, k=[1.0, 1.0])
