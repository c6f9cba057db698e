"""Fixed-step simulation of the disturbed system and trajectory recording.

Rollouts integrate xdot = f + g u + M w with classical RK4 at a fixed step,
log the barrier chain values at every visited state, and stop on goal
membership, horizon, a safety violation, or a policy failure. Everything is
seeded: a rollout is a pure function of (scenario, policy, disturbance
signal, seed), which is what makes downstream dataset aggregation and the
acceptance harness reproducible. Rollouts own their buffers and share only
immutable scenario objects, so they can run from parallel workers.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cbf import DynamicsModel, eval_dynamics, psi_chain_eval, rk4_step
from .qp import Infeasible
from .wopt import DisturbanceBox

__all__ = [
    "DisturbanceSignal", "Goal", "Scenario", "Trajectory", "TERMINATIONS",
    "rk4_step", "rollout", "write_trajectory_csv",
]

TERMINATIONS = ("goal_reached", "horizon", "unsafe_entered", "expert_infeasible")

# Stream tags keep the seeded RNGs for unrelated purposes decorrelated.
_STREAM_X0 = 101
_STREAM_DIST = 202


@dataclass(frozen=True)
class DisturbanceSignal:
    """Disturbance generator: zero, constant, or piecewise-constant random.

    piecewise_random holds each uniform sample for hold_steps integration
    steps, so the realized signal is Lipschitz-compatible with the dw/dt = 0
    assembly convention between switches. The realized series depends on
    both the signal seed and the rollout seed, so repeated rollouts see
    different draws while staying reproducible.
    """

    kind: str = "zero"
    value: Optional[np.ndarray] = None
    hold_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "piecewise_random"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "constant":
            if self.value is None:
                raise ValueError("constant signal needs a value")
            object.__setattr__(self, "value", np.atleast_1d(np.asarray(self.value, dtype=float)))
        if self.kind == "piecewise_random" and self.hold_steps < 1:
            raise ValueError("hold_steps must be >= 1")

    @classmethod
    def zero(cls) -> "DisturbanceSignal":
        return cls(kind="zero")

    @classmethod
    def constant(cls, value) -> "DisturbanceSignal":
        return cls(kind="constant", value=value)

    @classmethod
    def piecewise_random(cls, hold_steps: int = 10, seed: int = 0) -> "DisturbanceSignal":
        return cls(kind="piecewise_random", hold_steps=hold_steps, seed=seed)

    def series(self, box: DisturbanceBox, n_steps: int, rng_seed: int = 0) -> np.ndarray:
        """Realize the per-step disturbance values, shape (n_steps, l)."""
        l = box.dim
        if self.kind == "zero":
            w = np.zeros((n_steps, l))
            if not box.contains(np.zeros(l)):
                raise ValueError("zero disturbance lies outside the box")
            return w
        if self.kind == "constant":
            if self.value.shape != (l,):
                raise ValueError(f"constant value has shape {self.value.shape}, box dim {l}")
            if not box.contains(self.value):
                raise ValueError(f"constant disturbance {self.value} outside box")
            return np.tile(self.value, (n_steps, 1))
        rng = np.random.default_rng([_STREAM_DIST, self.seed, rng_seed])
        n_holds = max(1, -(-n_steps // self.hold_steps))
        samples = rng.uniform(box.lo, box.hi, size=(n_holds, l))
        return np.repeat(samples, self.hold_steps, axis=0)[:n_steps]


@dataclass(frozen=True)
class Goal:
    """Target region: squared distance of the leading state coordinates
    to `center` strictly below `radius_sq`."""

    center: np.ndarray
    radius_sq: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if self.radius_sq <= 0:
            raise ValueError("radius_sq must be positive")

    def contains(self, x) -> bool:
        d = np.asarray(x)[: self.center.size] - self.center
        return float(d @ d) < self.radius_sq


@dataclass(frozen=True)
class Scenario:
    """Immutable experiment definition: plant, barriers, boxes, goal, reference."""

    name: str
    dynamics: DynamicsModel
    barriers: tuple
    dist_box: DisturbanceBox
    x0_lo: np.ndarray
    x0_hi: np.ndarray
    u_ref_policy: Callable[[np.ndarray], np.ndarray]
    goal: Optional[Goal] = None
    dt: float = 0.01
    t_max: float = 30.0
    feature_map: str = "identity"
    obstacles: tuple = ()  # ((cx, cy), radius_sq) pairs, display metadata
    config: dict = field(default_factory=dict)  # builder parameters, JSON-serializable

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.x0_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.x0_hi, dtype=float))
        if lo.shape != (self.dynamics.n,) or hi.shape != (self.dynamics.n,):
            raise ValueError("x0 box must match the state dimension")
        if not np.all(lo <= hi):
            raise ValueError("x0 box lower bounds exceed upper bounds")
        if self.dt <= 0 or self.t_max < self.dt:
            raise ValueError("need dt > 0 and t_max >= dt")
        object.__setattr__(self, "x0_lo", lo)
        object.__setattr__(self, "x0_hi", hi)
        object.__setattr__(self, "barriers", tuple(self.barriers))

    def sample_x0(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.x0_lo, self.x0_hi)

    @property
    def max_steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass
class Trajectory:
    """One rollout on a uniform time grid.

    states has K+1 rows; controls/disturbances have K rows (the value
    applied over [t_k, t_{k+1})). psi maps barrier_id to a (K+1, degree+1)
    array of chain values; the final row is evaluated at the terminal state
    with the last applied input held, so the arrays stay rectangular.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    disturbances: np.ndarray
    psi: dict
    termination: str
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    def min_h(self) -> dict:
        """Minimum over time of each barrier value h = psi_0."""
        return {bid: float(cols[:, 0].min()) for bid, cols in self.psi.items()}

    def reached_goal(self) -> bool:
        return self.termination == "goal_reached"


def rollout(sc: Scenario, policy: Callable[[np.ndarray], np.ndarray],
            dist: DisturbanceSignal, rng_seed: int = 0,
            x0: Optional[np.ndarray] = None, log_psi: bool = True) -> Trajectory:
    """Simulate the closed loop until goal, horizon, unsafety, or policy failure.

    The initial state is drawn uniformly from the scenario's x0 box unless
    supplied. The policy maps state to control and may raise Infeasible,
    which terminates the rollout with reason "expert_infeasible".
    Deterministic given (scenario, policy, dist, rng_seed, x0).

    log_psi=False skips the per-step chain logging (the psi dict comes back
    empty); safety termination is unaffected since h is checked at every
    visited state either way. Bulk dataset-generation rollouts use this.
    """
    dyn = sc.dynamics
    if x0 is None:
        x0 = sc.sample_x0(np.random.default_rng([_STREAM_X0, rng_seed]))
    x = np.asarray(x0, dtype=float).copy()
    max_steps = sc.max_steps
    w_series = dist.series(sc.dist_box, max_steps, rng_seed)

    states = [x.copy()]
    controls: list = []
    disturbances: list = []
    psi_rows: dict = {bar.barrier_id: [] for bar in sc.barriers} if log_psi else {}
    termination = "horizon"

    for k in range(max_steps + 1):
        if any(bar.h(x) < 0.0 for bar in sc.barriers):
            termination = "unsafe_entered"
            break
        if sc.goal is not None and sc.goal.contains(x):
            termination = "goal_reached"
            break
        if k == max_steps:
            termination = "horizon"
            break
        try:
            u = np.atleast_1d(np.asarray(policy(x), dtype=float))
        except Infeasible:
            termination = "expert_infeasible"
            break
        w = w_series[k]
        if log_psi:
            evals = eval_dynamics(dyn, x)
            for bar in sc.barriers:
                psi_rows[bar.barrier_id].append(psi_chain_eval(dyn, bar, x, u, w, evals=evals))
        controls.append(u)
        disturbances.append(w.copy())
        x = rk4_step(dyn, x, u, w, sc.dt)
        states.append(x.copy())

    # Terminal psi row: hold the last applied input (zeros if nothing ran).
    K = len(controls)
    if log_psi:
        u_last = controls[-1] if K else np.zeros(dyn.mu)
        w_last = disturbances[-1] if K else np.zeros(dyn.l)
        for bar in sc.barriers:
            psi_rows[bar.barrier_id].append(psi_chain_eval(dyn, bar, states[K], u_last, w_last))

    return Trajectory(
        times=np.arange(K + 1) * sc.dt,
        states=np.asarray(states[: K + 1]),
        controls=np.asarray(controls).reshape(K, dyn.mu),
        disturbances=np.asarray(disturbances).reshape(K, dyn.l),
        psi={bid: np.asarray(rows) for bid, rows in psi_rows.items()},
        termination=termination,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(traj: Trajectory, sc: Scenario, path) -> None:
    """Write one rollout as CSV: t, states, controls, disturbances, psi columns.

    The final row repeats the last applied control/disturbance so the file
    stays rectangular; shortest-repr float formatting keeps reruns
    byte-identical.
    """
    dyn = sc.dynamics
    header = (["t"]
              + [f"x{i + 1}" for i in range(dyn.n)]
              + [f"u{i + 1}" for i in range(dyn.mu)]
              + [f"w{i + 1}" for i in range(dyn.l)])
    for b, bar in enumerate(sc.barriers, start=1):
        header += [f"psi{j}_b{b}" for j in range(bar.degree + 1)]

    K = traj.n_steps
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(K + 1):
            kk = min(k, K - 1) if K else 0
            row = [_fmt(traj.times[k])]
            row += [_fmt(v) for v in traj.states[k]]
            if K:
                row += [_fmt(v) for v in traj.controls[kk]]
                row += [_fmt(v) for v in traj.disturbances[kk]]
            else:
                row += [_fmt(0.0)] * (dyn.mu + dyn.l)
            for bar in sc.barriers:
                row += [_fmt(v) for v in traj.psi[bar.barrier_id][k]]
            writer.writerow(row)
