"""QP expert policy: robust barrier rows at x, then the control QP.

For each barrier the worst-case disturbance problem is re-solved at every
query state (w_opt depends on x, so nothing can be cached across states),
the resulting affine rows are stacked, and the control minimally deviating
from the scenario's reference input is returned.

Infeasibility policy is the caller's choice:

- "error" (default): raise Infeasible, which a rollout records as the
  termination reason. Labels for imitation must come from the pure QP, so
  this is the mode dataset generation uses.
- "best_effort": return the control minimizing the maximum row violation
  and flag the step in the diagnostics. For robustness experiments only.
"""

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cbf import _assemble_deg1_full, _assemble_deg2_full, eval_dynamics
from .qp import ControlQp, Infeasible, solve_control_qp
from .sim import Scenario


@dataclass
class ExpertDiagnostics:
    """Per-step solve record: one entry per barrier plus the QP outcome."""

    u_ref: np.ndarray
    u: Optional[np.ndarray]
    barriers: list = field(default_factory=list)
    fallback_used: bool = False

    def to_record(self) -> dict:
        return {
            "u_ref": [float(v) for v in self.u_ref],
            "u": None if self.u is None else [float(v) for v in self.u],
            "fallback_used": self.fallback_used,
            "barriers": self.barriers,
        }


class ExpertPolicy:
    """Safety-filter controller built from a scenario's barriers and reference."""

    def __init__(self, scenario: Scenario, fallback: str = "error"):
        if fallback not in ("error", "best_effort"):
            raise ValueError(f"unknown fallback {fallback!r}")
        self.scenario = scenario
        self.fallback = fallback
        self.n_solves = 0
        self.n_infeasible = 0
        self._lock = threading.Lock()

    def _rows(self, x, collect_wopt: bool = False):
        sc = self.scenario
        dyn = sc.dynamics
        evals = eval_dynamics(dyn, x)
        rows, wopts = [], []
        for bar in sc.barriers:
            if bar.degree == 1:
                row, w_opt = _assemble_deg1_full(dyn, bar, x, sc.dist_box)
            else:
                row, w_opt, _ = _assemble_deg2_full(dyn, bar, x, sc.dist_box, evals=evals)
            rows.append(row)
            if collect_wopt:
                wopts.append(w_opt)
        return rows, wopts

    def control(self, x) -> np.ndarray:
        """Pure QP output at x; raises Infeasible regardless of fallback mode.

        Dataset labels must come from this path, never from a fallback."""
        rows, _ = self._rows(x)
        u_ref = np.atleast_1d(np.asarray(self.scenario.u_ref_policy(x), dtype=float))
        try:
            u = solve_control_qp(ControlQp(u_ref=u_ref, rows=rows,
                                           u_box=self.scenario.dynamics.u_box))
        except Infeasible:
            with self._lock:
                self.n_solves += 1
                self.n_infeasible += 1
            raise
        with self._lock:
            self.n_solves += 1
        return u

    def policy_fn(self):
        """Rollout policy honoring the fallback mode ("error" raises,
        "best_effort" substitutes the min-max violation control)."""
        if self.fallback == "error":
            return self.control
        return lambda x: expert_control(self, x)[0]


def expert_control(pol: ExpertPolicy, x) -> tuple[np.ndarray, ExpertDiagnostics]:
    """Control at x plus per-barrier diagnostics (w_opt, row, slack).

    With fallback "best_effort", an infeasible QP yields the min-max
    violation control with the step flagged; with "error" the Infeasible
    exception propagates.
    """
    sc = pol.scenario
    rows, wopts = pol._rows(x, collect_wopt=True)
    u_ref = np.atleast_1d(np.asarray(sc.u_ref_policy(x), dtype=float))
    fallback_used = False
    try:
        u = solve_control_qp(ControlQp(u_ref=u_ref, rows=rows, u_box=sc.dynamics.u_box))
        with pol._lock:
            pol.n_solves += 1
    except Infeasible:
        with pol._lock:
            pol.n_solves += 1
            pol.n_infeasible += 1
        if pol.fallback == "error":
            raise
        u = _min_max_violation_control(u_ref, rows, sc.dynamics.u_box)
        fallback_used = True

    diag = ExpertDiagnostics(u_ref=u_ref, u=u, fallback_used=fallback_used)
    for row, w_opt in zip(rows, wopts):
        diag.barriers.append({
            "barrier_id": row.barrier_id,
            "w_opt": [float(v) for v in np.atleast_1d(w_opt)],
            "a": [float(v) for v in row.a],
            "b": float(row.b),
            "slack": row.residual(u),
        })
    return u, diag


def _min_max_violation_control(u_ref, rows, u_box) -> np.ndarray:
    """Control minimizing max_i (b_i - a_i'u) when the rows have empty intersection."""
    mu = u_ref.size
    A = np.array([np.asarray(r.a, dtype=float) for r in rows]).reshape(len(rows), mu)
    b = np.array([r.b for r in rows])

    def worst(u):
        return float(np.max(b - A @ u))

    if mu == 1:
        lo = -np.inf if u_box is None else float(np.atleast_1d(u_box[0])[0])
        hi = np.inf if u_box is None else float(np.atleast_1d(u_box[1])[0])
        candidates = [v for v in (lo, hi, float(u_ref[0])) if np.isfinite(v)]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                da = A[i, 0] - A[j, 0]
                if abs(da) > 1e-12:
                    candidates.append(min(max((b[i] - b[j]) / da, lo), hi))
        best_u, best_v = None, np.inf
        for cand in candidates:
            v = worst(np.array([cand]))
            if v < best_v - 1e-15:
                best_u, best_v = cand, v
        return np.array([best_u])

    # Subgradient descent on the max violation: repeatedly step along the
    # most violated row's normal with a diminishing step.
    u = u_ref.copy()
    best_u, best_v = u.copy(), worst(u)
    for it in range(1, 201):
        viol = b - A @ u
        i = int(np.argmax(viol))
        if viol[i] <= 0:
            break
        g = A[i]
        u = u + (viol[i] / float(g @ g)) * g / np.sqrt(it)
        if u_box is not None:
            u = np.clip(u, u_box[0], u_box[1])
        v = worst(u)
        if v < best_v:
            best_u, best_v = u.copy(), v
    return best_u
