"""Per-step control QP: minimize ||u - u_ref||^2 subject to affine rows a'u >= b.

The cost is hard-coded to squared deviation from the reference input, which
makes the problem a Euclidean projection onto a polyhedron. mu = 1 is solved
in closed form by interval intersection. mu >= 2 uses a primal active-set
iteration with the identity Hessian: project onto the working set's equality
system, drop the most negative multiplier, add the most violated row, with
lowest-index tie-breaking to prevent cycling. Optional input bounds are
folded in as additional rows.

Infeasibility (empty polyhedron) raises Infeasible; what to do about it is
the caller's policy, not this module's.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

MULT_TOL = 1e-10    # multipliers accepted down to -MULT_TOL
RESID_TOL = 1e-9    # row residuals accepted down to -RESID_TOL
ZERO_ROW_TOL = 1e-14


class Infeasible(Exception):
    """The constraint rows (and bounds) have empty intersection."""


@dataclass(frozen=True)
class ControlQp:
    """minimize ||u - u_ref||^2  s.t.  a_i'u >= b_i for every row, u in u_box."""

    u_ref: np.ndarray
    rows: tuple
    u_box: Optional[tuple] = None

    def __post_init__(self):
        u_ref = np.atleast_1d(np.asarray(self.u_ref, dtype=float))
        if u_ref.ndim != 1 or u_ref.size < 1:
            raise ValueError("u_ref must be a nonempty vector")
        if not np.all(np.isfinite(u_ref)):
            raise ValueError("u_ref must be finite")
        object.__setattr__(self, "u_ref", u_ref)
        object.__setattr__(self, "rows", tuple(self.rows))


def _stack_rows(p: ControlQp):
    """Collect (A, b) from rows plus box bounds; drop vacuous zero rows."""
    mu = p.u_ref.size
    A_list, b_list = [], []
    for row in p.rows:
        a = np.atleast_1d(np.asarray(row.a, dtype=float))
        if a.shape != (mu,):
            raise ValueError(f"row for {row.barrier_id} has shape {a.shape}, expected ({mu},)")
        if np.max(np.abs(a)) <= ZERO_ROW_TOL:
            if row.b > RESID_TOL:
                raise Infeasible(f"row for {row.barrier_id}: 0 >= {row.b}")
            continue
        A_list.append(a)
        b_list.append(float(row.b))
    if p.u_box is not None:
        lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in p.u_box)
        for i in range(mu):
            e = np.zeros(mu)
            if np.isfinite(lo[i]):
                e_i = e.copy()
                e_i[i] = 1.0
                A_list.append(e_i)
                b_list.append(float(lo[i]))
            if np.isfinite(hi[i]):
                e_i = e.copy()
                e_i[i] = -1.0
                A_list.append(e_i)
                b_list.append(-float(hi[i]))
    if not A_list:
        return np.zeros((0, mu)), np.zeros(0)
    return np.asarray(A_list), np.asarray(b_list)


def _solve_interval(u_ref: float, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo, hi = -np.inf, np.inf
    for a, bi in zip(A[:, 0], b):
        if a > 0:
            lo = max(lo, bi / a)
        else:
            hi = min(hi, bi / a)
    if lo > hi + RESID_TOL:
        raise Infeasible(f"empty interval [{lo}, {hi}]")
    u = min(max(u_ref, lo), max(hi, lo))
    return np.array([u])


def _project_onto_working_set(u_ref, A, b, work):
    """Projection of u_ref onto {A_W u = b_W} and its multipliers.

    Returns (u, lambdas, consistent). u - u_ref = A_W' lambda; the Gram
    system is solved with lstsq so rank-deficient working sets do not blow
    up, and `consistent` reports whether the equalities actually hold.
    """
    Aw = A[work]
    gram = Aw @ Aw.T
    rhs = b[work] - Aw @ u_ref
    lam, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    u = u_ref + Aw.T @ lam
    consistent = np.max(np.abs(Aw @ u - b[work])) <= 1e-8 if work else True
    return u, lam, consistent


def _solve_by_enumeration(u_ref, A, b) -> np.ndarray:
    """Exact projection by enumerating candidate active sets of size <= mu.

    The optimum's multipliers can be supported on at most mu linearly
    independent rows, so some subset of that size reproduces it exactly;
    conversely, if no subset yields a feasible candidate the polyhedron is
    empty. Used as the backstop when the active-set iteration stalls.
    """
    mu = u_ref.size
    m = A.shape[0]
    best_u, best_d = None, np.inf
    for size in range(0, min(mu, m) + 1):
        for subset in combinations(range(m), size):
            u, _, consistent = _project_onto_working_set(u_ref, A, b, list(subset))
            if not consistent:
                continue
            if np.min(A @ u - b) < -RESID_TOL:
                continue
            d = float((u - u_ref) @ (u - u_ref))
            if d < best_d - 1e-15:
                best_u, best_d = u, d
    if best_u is None:
        raise Infeasible("no candidate active set yields a feasible point")
    return best_u


def _solve_active_set(u_ref, A, b) -> np.ndarray:
    m = A.shape[0]
    work: list = []
    max_iter = 50 * (m + 1)
    for _ in range(max_iter):
        u, lam, consistent = _project_onto_working_set(u_ref, A, b, work)
        if not consistent:
            return _solve_by_enumeration(u_ref, A, b)
        if work and np.min(lam) < -MULT_TOL:
            # Drop the most negative multiplier; lowest row index on ties.
            j = int(np.lexsort((work, lam))[0])
            work.pop(j)
            continue
        resid = A @ u - b
        if np.min(resid) >= -RESID_TOL:
            return u
        worst = int(np.argmin(resid))  # argmin takes the lowest index on ties
        if worst in work:
            return _solve_by_enumeration(u_ref, A, b)
        work.append(worst)
    return _solve_by_enumeration(u_ref, A, b)


def solve_control_qp(p: ControlQp) -> np.ndarray:
    """Unique minimizer of ||u - u_ref||^2 over the rows' intersection.

    Raises Infeasible when the intersection is empty, signalling that
    safety cannot be certified at this state.
    """
    A, b = _stack_rows(p)
    if A.shape[0] == 0:
        return p.u_ref.copy()
    if p.u_ref.size == 1:
        return _solve_interval(float(p.u_ref[0]), A, b)
    return _solve_active_set(p.u_ref, A, b)
