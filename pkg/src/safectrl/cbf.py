"""Dynamics/barrier data model and robust barrier-constraint assembly.

The plant is control-affine with an additive box-bounded disturbance,

    xdot = f(x) + g(x) u + M w,      w in [lo, hi] per coordinate,

where M is an n x l zero-one matrix with at most one nonzero per row.
Safety is encoded by scalar functions h with h(x) >= 0 on the safe set.
For a barrier of relative degree m (the control first appears in the m-th
time derivative of h), the chain

    psi_0 = h,    psi_i = d/dt psi_{i-1} + k_i psi_{i-1}

turns h into a constraint on psi_m that is affine in u. The disturbance
enters psi_m through a term P(x, w) (linear in w for m = 1, quadratic for
m = 2 with linear gains); the worst case over the box is folded into the
right-hand side, so a single affine row a'u >= b certifies safety for every
admissible disturbance.

This module assembles those rows exactly for m <= 2 under two conventions:

- dw/dt = 0: the disturbance is treated as locally constant when
  differentiating the chain, so no dw/dt terms appear.
- separability g' hess(h) M = 0: the u coefficient of psi_2 must be
  disturbance-free for the row to stay affine in u alone. Violations raise
  instead of silently mis-assembling.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

import math

from .wopt import DisturbanceBox, _solve_box_qp_core, solve_linear_wopt

SEPARABILITY_ATOL = 1e-9


class NumericalError(RuntimeError):
    """A dynamics/barrier evaluation produced a non-finite value."""


class SeparabilityViolation(ValueError):
    """g' hess(h) M != 0: the degree-2 row would have a u*w cross term."""


@dataclass(frozen=True)
class DynamicsModel:
    """Evaluator bundle for xdot = f(x) + g(x) u + M w.

    f maps state (n,) to drift rate (n,); g maps state to the (n, mu)
    control matrix; jac_f maps state to the (n, n) Jacobian of f. M is a
    constant zero-one (n, l) matrix with at most one nonzero per row.
    u_box, when present, is a (lo, hi) pair of per-coordinate input bounds.
    """

    n: int
    mu: int
    l: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    M: np.ndarray
    jac_f: Callable[[np.ndarray], np.ndarray]
    u_box: Optional[tuple] = None

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float).reshape(self.n, self.l)
        if not np.all(np.isin(M, (0.0, 1.0))):
            raise ValueError("M entries must be 0 or 1")
        if np.any(M.sum(axis=1) > 1):
            raise ValueError("M must have at most one nonzero per row")
        object.__setattr__(self, "M", M)


@dataclass(frozen=True)
class BarrierSpec:
    """Scalar safety function h with derivatives, relative degree, and gains.

    h >= 0 defines the safe set. grad_h maps state to the (n,) gradient;
    hess_h (required when degree = 2) maps state to the symmetric (n, n)
    Hessian. k holds the strictly positive linear class-K gains
    (k1,) or (k1, k2) used as alpha_i(y) = k_i * y in the chain.
    """

    h: Callable[[np.ndarray], float]
    grad_h: Callable[[np.ndarray], np.ndarray]
    degree: int
    k: np.ndarray
    hess_h: Optional[Callable[[np.ndarray], np.ndarray]] = None
    barrier_id: str = "h"

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError(f"relative degree must be 1 or 2, got {self.degree}")
        k = np.atleast_1d(np.asarray(self.k, dtype=float))
        if k.shape != (self.degree,):
            raise ValueError(f"need {self.degree} gains, got {k.shape}")
        if np.any(k <= 0):
            raise ValueError("class-K gains must be strictly positive")
        if self.degree == 2 and self.hess_h is None:
            raise ValueError("degree-2 barriers require hess_h")
        object.__setattr__(self, "k", k)


@dataclass(frozen=True)
class ConstraintRow:
    """One affine-in-u half-space a'u >= b fed to the control QP."""

    a: np.ndarray
    b: float
    barrier_id: str = "h"

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = float(self.b)
        # NaN/inf anywhere poisons the sum, so one isfinite covers all entries.
        if not math.isfinite(float(np.abs(a).sum()) + abs(b)):
            raise NumericalError(f"non-finite constraint row for {self.barrier_id}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def residual(self, u) -> float:
        return float(self.a @ np.atleast_1d(u) - self.b)


@dataclass(frozen=True)
class Deg2Terms:
    """psi_2 decomposition: a_u'u + w'Qw w + cw'w + psi_const."""

    a_u: np.ndarray
    Qw: np.ndarray
    cw: np.ndarray
    psi_const: float

    def P(self, w) -> float:
        """Disturbance-dependent part w'Qw w + cw'w."""
        w = np.atleast_1d(w)
        return float(w @ self.Qw @ w + self.cw @ w)

    def psi2(self, u, w) -> float:
        return float(self.a_u @ np.atleast_1d(u)) + self.P(w) + self.psi_const


def dynamics_rate(dyn: DynamicsModel, x, u, w) -> np.ndarray:
    """xdot = f(x) + g(x) u + M w."""
    return dyn.f(x) + dyn.g(x) @ np.atleast_1d(u) + dyn.M @ np.atleast_1d(w)


def rk4_step(dyn: DynamicsModel, x, u, w, dt: float) -> np.ndarray:
    """One classical 4-stage Runge-Kutta step with u, w held constant."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    Mw = dyn.M @ w

    def rate(s):
        return dyn.f(s) + dyn.g(s) @ u + Mw

    k1 = rate(x)
    k2 = rate(x + 0.5 * dt * k1)
    k3 = rate(x + 0.5 * dt * k2)
    k4 = rate(x + dt * k3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NumericalError("non-finite state after integration step")
    return x_next


def lie_first(dyn: DynamicsModel, bar: BarrierSpec, x) -> tuple[float, np.ndarray, np.ndarray]:
    """First-order Lie derivatives (Lf h, Lg h, LM h) at x.

    Lf h = grad_h'f (scalar), Lg h = g' grad_h (mu,), LM h = M' grad_h (l,).
    """
    grad = bar.grad_h(x)
    Lfh = float(grad @ dyn.f(x))
    Lgh = dyn.g(x).T @ grad
    LMh = dyn.M.T @ grad
    if not (np.isfinite(Lfh) and np.all(np.isfinite(Lgh)) and np.all(np.isfinite(LMh))):
        raise NumericalError(f"non-finite Lie derivatives for {bar.barrier_id}")
    return Lfh, Lgh, LMh


def _assemble_deg1_full(dyn, bar, x, box):
    Lfh, Lgh, LMh = lie_first(dyn, bar, x)
    w_opt = solve_linear_wopt(LMh, box)
    b = -Lfh - bar.k[0] * float(bar.h(x)) - float(LMh @ w_opt)
    return ConstraintRow(a=Lgh, b=b, barrier_id=bar.barrier_id), w_opt


def assemble_deg1(dyn: DynamicsModel, bar: BarrierSpec, x, box: DisturbanceBox) -> ConstraintRow:
    """Robust degree-1 row: Lg h(x)'u >= -Lf h(x) - k1 h(x) - LM h(x)'w_opt.

    w_opt maximizes -LM h(x)'w over the box, so satisfying the row keeps
    hdot + k1 h >= 0 for every admissible disturbance.
    """
    if bar.degree != 1:
        raise ValueError(f"{bar.barrier_id} has degree {bar.degree}, expected 1")
    row, _ = _assemble_deg1_full(dyn, bar, x, box)
    return row


def eval_dynamics(dyn: DynamicsModel, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(f(x), g(x), jac_f(x)), evaluated once for reuse across barriers."""
    return dyn.f(x), dyn.g(x), dyn.jac_f(x)


def assemble_deg2_terms(dyn: DynamicsModel, bar: BarrierSpec, x, evals=None) -> Deg2Terms:
    """Coefficients of psi_2(x, u, w) for a degree-2 barrier at x.

    With H = hess_h(x), grad = grad_h(x), J = jac_f(x), gains k1, k2, and
    dw/dt = 0:

        a_u       = (H f + J' grad)' g                (= Lg Lf h)
        Qw        = M' H M
        cw        = (2 H f + J' grad + (k1+k2) grad)' M
        psi_const = f'H f + grad'J f + (k1+k2) grad'f + k1 k2 h(x)

    so that psi_2 = a_u'u + w'Qw w + cw'w + psi_const. Requires the
    separability condition g'H M = 0 (no u*w cross term); violations raise.

    evals optionally carries precomputed (f(x), g(x), jac_f(x)).
    """
    if bar.degree != 2:
        raise ValueError(f"{bar.barrier_id} has degree {bar.degree}, expected 2")
    f, g, J = evals if evals is not None else eval_dynamics(dyn, x)
    M = dyn.M
    grad = bar.grad_h(x)
    H = bar.hess_h(x)

    HM = H @ M
    sep = g.T @ HM
    if np.max(np.abs(sep)) > SEPARABILITY_ATOL:
        raise SeparabilityViolation(
            f"{bar.barrier_id}: g'H M = {sep} at x = {np.asarray(x)}; "
            "the u coefficient would depend on w"
        )

    Hf = H @ f
    Jtg = J.T @ grad
    ksum = float(bar.k[0] + bar.k[1])
    a_u = (Hf + Jtg) @ g
    Qw = M.T @ HM
    cw = (2.0 * Hf + Jtg + ksum * grad) @ M
    psi_const = float(f @ Hf + Jtg @ f + ksum * (grad @ f) + bar.k[0] * bar.k[1] * bar.h(x))
    if not math.isfinite(psi_const + float(np.abs(a_u).sum() + np.abs(Qw).sum() + np.abs(cw).sum())):
        raise NumericalError(f"non-finite psi_2 terms for {bar.barrier_id}")
    return Deg2Terms(a_u=a_u, Qw=Qw, cw=cw, psi_const=psi_const)


def _assemble_deg2_full(dyn, bar, x, box, evals=None):
    terms = assemble_deg2_terms(dyn, bar, x, evals=evals)
    w_opt, neg_p_opt = _solve_box_qp_core(terms.Qw, terms.cw, box.lo, box.hi)
    b = -terms.psi_const + neg_p_opt
    return ConstraintRow(a=terms.a_u, b=b, barrier_id=bar.barrier_id), w_opt, terms


def assemble_deg2(dyn: DynamicsModel, bar: BarrierSpec, x, box: DisturbanceBox) -> ConstraintRow:
    """Robust degree-2 row: a_u'u >= -psi_const - P(x, w_opt).

    w_opt maximizes -P(x, w) = -(w'Qw w + cw'w) over the box, so the row
    enforces psi_2(x, u, w) >= 0 for every admissible disturbance. With a
    degenerate box [0, 0] this reduces to the disturbance-free constraint.
    """
    row, _, _ = _assemble_deg2_full(dyn, bar, x, box)
    return row


def psi_chain_eval(dyn: DynamicsModel, bar: BarrierSpec, x, u, w, evals=None) -> tuple:
    """(psi_0, psi_1[, psi_2]) at state x under applied input u and disturbance w.

    psi_0 = h(x); psi_1 = grad_h'(f + g u + M w) + k1 h. For degree-2
    barriers psi_2 is reconstructed from the assembled coefficients.
    Used for logging and invariance checks. evals optionally carries
    precomputed (f(x), g(x), jac_f(x)) shared across barriers.
    """
    u = np.atleast_1d(u)
    w = np.atleast_1d(w)
    if evals is None:
        evals = eval_dynamics(dyn, x)
    f, g, _ = evals
    psi0 = float(bar.h(x))
    grad = bar.grad_h(x)
    psi1 = float(grad @ (f + g @ u + dyn.M @ w)) + bar.k[0] * psi0
    if not (math.isfinite(psi0) and math.isfinite(psi1)):
        raise NumericalError(f"non-finite psi chain for {bar.barrier_id}")
    if bar.degree == 1:
        return psi0, psi1
    terms = assemble_deg2_terms(dyn, bar, x, evals=evals)
    return psi0, psi1, terms.psi2(u, w)


def validate_fd(dyn: DynamicsModel, bar: BarrierSpec, x, u, w, dt: float = 1e-5) -> float:
    """Self-check of the chain assembly against finite differences.

    Steps x one RK4 step forward and backward with u, w held constant and
    compares the central-difference time derivative of each psi_{i-1}
    against the assembled psi_i:

        err_i = | (psi_{i-1}(x+) - psi_{i-1}(x-)) / (2 dt)
                 + k_i psi_{i-1}(x) - psi_i(x) |

    Returns the max error over the chain. Small values confirm the closed
    forms; the caller decides what to accept.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    x_plus = rk4_step(dyn, x, u, w, dt)
    x_minus = rk4_step(dyn, x, u, w, -dt)

    def chain(s):
        psi0 = float(bar.h(s))
        psi1 = float(bar.grad_h(s) @ (dyn.f(s) + dyn.g(s) @ u + dyn.M @ w)) + bar.k[0] * psi0
        return psi0, psi1

    at_x = psi_chain_eval(dyn, bar, x, u, w)
    plus = chain(x_plus)
    minus = chain(x_minus)
    errors = []
    for i in range(1, bar.degree + 1):
        dpsi = (plus[i - 1] - minus[i - 1]) / (2.0 * dt)
        errors.append(abs(dpsi + bar.k[i - 1] * at_x[i - 1] - at_x[i]))
    return max(errors)


def fd_gradient(fun: Callable, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        out[i] = (fun(x + e) - fun(x - e)) / (2.0 * eps)
    return out


def fd_jacobian(fun: Callable, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * eps))
    return np.stack(cols, axis=1)
