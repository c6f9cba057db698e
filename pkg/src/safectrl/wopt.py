"""Exact inner solvers for the worst-case disturbance over a box.

Two problems show up when folding a bounded disturbance into a barrier
constraint:

- relative degree 1: maximize -c'w over the box (a tiny LP, solved per
  coordinate by the sign of c),
- relative degree 2: maximize -w'Qw - c'w over the box (a tiny, possibly
  indefinite QP, solved exactly by face enumeration).

Both return the exact global maximizer. Face enumeration costs 3^l which is
negligible for the supported l <= 4, and unlike an iterative QP method it
carries no convergence tolerance into the safety constraint and is exact
even when Q is indefinite.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

MAX_BOX_DIM = 4


@dataclass(frozen=True)
class DisturbanceBox:
    """Per-coordinate disturbance interval [lo_i, hi_i]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be 1-d and equal length, got {lo.shape} vs {hi.shape}")
        if not np.all(lo <= hi):
            raise ValueError(f"box lower bounds exceed upper bounds: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, w, atol: float = 0.0) -> bool:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        return bool(np.all(w >= self.lo - atol) and np.all(w <= self.hi + atol))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi)


@dataclass(frozen=True)
class BoxQpProblem:
    """Maximize -w'Qw - c'w over a box, Q symmetric (l x l), l <= 4."""

    Q: np.ndarray
    c: np.ndarray
    box: DisturbanceBox

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        l = self.box.dim
        if Q.shape != (l, l) or c.shape != (l,):
            raise ValueError(f"shape mismatch: Q {Q.shape}, c {c.shape}, box dim {l}")
        if l > MAX_BOX_DIM:
            raise ValueError(f"face enumeration supports l <= {MAX_BOX_DIM}, got {l}")
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", c)

    def objective(self, w: np.ndarray) -> float:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        return float(-w @ self.Q @ w - self.c @ w)


def solve_linear_wopt(c, box: DisturbanceBox) -> np.ndarray:
    """Exact argmax of -c'w over the box.

    Separable: w_i = lo_i when c_i > 0, hi_i when c_i < 0. Ties (c_i = 0)
    break to lo_i, which leaves the optimal value unchanged but keeps the
    returned point deterministic.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.shape != (box.dim,):
        raise ValueError(f"c has shape {c.shape}, box dim {box.dim}")
    return np.where(c < 0.0, box.hi, box.lo)


def _face_patterns(l: int):
    # 0 -> pinned at lo, 1 -> pinned at hi, 2 -> free. Lexicographic order
    # fixes tie-breaking: vertices come before faces with free coordinates.
    return product((0, 1, 2), repeat=l)


def solve_box_qp_wopt(problem: BoxQpProblem) -> tuple[np.ndarray, float]:
    """Exact global maximizer of -w'Qw - c'w over the box by face enumeration.

    Every assignment of coordinates to {lo, hi, free} is a face of the box.
    On each face, the stationary condition on the free block
        2 Q_ff w_f = -(c_f + 2 Q_fa w_a)
    is solved; candidates outside the open interval, or on faces with a
    singular free block, are skipped. All 2^l vertices are evaluated
    unconditionally (they are the no-free-coordinate patterns), so at least
    one candidate always exists. The best value wins; ties keep the first
    candidate in enumeration order.
    """
    return _solve_box_qp_core(problem.Q, problem.c, problem.box.lo, problem.box.hi)


def _solve_box_qp_core(Q, c, lo, hi) -> tuple[np.ndarray, float]:
    l = lo.size
    if l == 1:
        # Scalar closed form, same candidate order and tie-breaks as the
        # generic enumeration below: lo, hi, then the interior stationary
        # point. This is the per-step hot path.
        q, cc, a, b = Q[0, 0], c[0], lo[0], hi[0]
        best_w, best_val = a, -q * a * a - cc * a
        val_b = -q * b * b - cc * b
        if val_b > best_val:
            best_w, best_val = b, val_b
        if q != 0.0 and a < b:
            ws = -cc / (2.0 * q)
            if a < ws < b:
                val_s = -q * ws * ws - cc * ws
                if val_s > best_val:
                    best_w, best_val = ws, val_s
        return np.array([best_w]), float(best_val)

    best_w = None
    best_val = -np.inf
    for pattern in _face_patterns(l):
        pat = np.asarray(pattern)
        free = pat == 2
        w = np.where(pat == 1, hi, lo)
        if free.any():
            if np.any(lo[free] >= hi[free]):
                continue  # degenerate interval has no interior
            Qff = Q[np.ix_(free, free)]
            rhs = -(c[free] + 2.0 * Q[np.ix_(free, ~free)] @ w[~free])
            try:
                wf = np.linalg.solve(2.0 * Qff, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all((wf > lo[free]) & (wf < hi[free])):
                continue
            w = w.astype(float)
            w[free] = wf
        val = float(-w @ Q @ w - c @ w)
        if val > best_val:
            best_val = val
            best_w = w
    return best_w, best_val
