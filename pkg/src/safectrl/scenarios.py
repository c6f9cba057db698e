"""Bundled scenario definitions and their JSON (de)serialization.

Two systems ship with the package:

- "unicycle": a constant-speed planar vehicle (v = 1) steered by u, with an
  additive disturbance acting on both position rates. Five circular unsafe
  regions, a goal disc, and a heading-tracking reference input
  u_ref = K (theta_ref - theta) with theta_ref = arctan2 toward the goal.
  The distance-squared barriers have relative degree 2.
- "example1": a double integrator with a disturbed first state
  (x1dot = x2 + w, x2dot = u) and the degree-2 barrier h = x1^2 - 1.
  Mainly a regression target; it has no goal and a zero reference input.

Analytic derivative callbacks are compiled in; scenario JSON files select a
builtin by name and override its numeric parameters (obstacles, boxes,
gains, goal, timing). There is deliberately no expression parser.
"""

import json
import math

import numpy as np

from .cbf import BarrierSpec, DynamicsModel
from .sim import Goal, Scenario
from .wopt import DisturbanceBox


def wrap_angle(a: float) -> float:
    """Wrap an angle difference into (-pi, pi] (so a head-on pi stays +pi)."""
    return math.pi - (math.pi - a) % math.tau


def _circle_barrier(center, radius_sq, gains, barrier_id, n=3):
    """h = (x1-cx)^2 + (x2-cy)^2 - radius_sq on the leading plane coordinates."""
    cx, cy = float(center[0]), float(center[1])
    hess = np.zeros((n, n))
    hess[0, 0] = hess[1, 1] = 2.0

    def h(x):
        return (x[0] - cx) ** 2 + (x[1] - cy) ** 2 - radius_sq

    def grad_h(x):
        out = np.zeros(n)
        out[0] = 2.0 * (x[0] - cx)
        out[1] = 2.0 * (x[1] - cy)
        return out

    return BarrierSpec(h=h, grad_h=grad_h, hess_h=lambda x: hess,
                       degree=2, k=gains, barrier_id=barrier_id)


UNICYCLE_DEFAULTS = {
    "speed": 1.0,
    "obstacles": [
        {"center": [4.0, 2.5], "radius_sq": 0.7},
        {"center": [5.0, 6.5], "radius_sq": 0.5},
        {"center": [7.0, 4.75], "radius_sq": 0.4},
        {"center": [2.5, 5.0], "radius_sq": 0.3},
        {"center": [7.5, 2.5], "radius_sq": 0.5},
    ],
    "goal": {"center": [1.0, 1.0], "radius_sq": 0.3},
    "gains": [2.0, 2.0],
    "dist_box": [[-0.1, 0.1]],
    "x0_box": [[8.0, 9.0], [5.0, 11.0], [-math.pi, math.pi]],
    "heading_gain": 1.0,
    "dt": 0.01,
    "t_max": 30.0,
}

EXAMPLE1_DEFAULTS = {
    "gains": [1.0, 1.0],
    "dist_box": [[-1.0, 1.0]],
    "x0_box": [[1.1, 2.0], [0.0, 1.0]],
    "dt": 0.01,
    "t_max": 10.0,
}


def build_unicycle(**overrides) -> Scenario:
    cfg = {**UNICYCLE_DEFAULTS, **overrides}
    v = float(cfg["speed"])
    g_mat = np.array([[0.0], [0.0], [1.0]])

    def f(x):
        return np.array([v * math.cos(x[2]), v * math.sin(x[2]), 0.0])

    def jac_f(x):
        return np.array([[0.0, 0.0, -v * math.sin(x[2])],
                         [0.0, 0.0, v * math.cos(x[2])],
                         [0.0, 0.0, 0.0]])

    dyn = DynamicsModel(n=3, mu=1, l=1, f=f, g=lambda x: g_mat,
                        M=np.array([[1.0], [1.0], [0.0]]), jac_f=jac_f)

    gains = cfg["gains"]
    barriers = tuple(
        _circle_barrier(ob["center"], ob["radius_sq"], gains, f"h{i + 1}")
        for i, ob in enumerate(cfg["obstacles"])
    )
    goal = Goal(center=cfg["goal"]["center"], radius_sq=cfg["goal"]["radius_sq"])
    K = float(cfg["heading_gain"])
    gx, gy = goal.center

    def u_ref(x):
        # Heading error wrapped to (-pi, pi]: the raw difference jumps by
        # 2*pi across the bearing's branch cut and would command a spin.
        theta_ref = math.atan2(gy - x[1], gx - x[0])
        return np.array([K * wrap_angle(theta_ref - x[2])])

    x0 = np.asarray(cfg["x0_box"], dtype=float)
    return Scenario(
        name="unicycle",
        dynamics=dyn,
        barriers=barriers,
        dist_box=DisturbanceBox(lo=[b[0] for b in cfg["dist_box"]],
                                hi=[b[1] for b in cfg["dist_box"]]),
        x0_lo=x0[:, 0], x0_hi=x0[:, 1],
        u_ref_policy=u_ref,
        goal=goal,
        dt=float(cfg["dt"]),
        t_max=float(cfg["t_max"]),
        feature_map="unicycle_sincos",
        obstacles=tuple((tuple(ob["center"]), float(ob["radius_sq"]))
                        for ob in cfg["obstacles"]),
        config=cfg,
    )


def build_example1(**overrides) -> Scenario:
    cfg = {**EXAMPLE1_DEFAULTS, **overrides}
    g_mat = np.array([[0.0], [1.0]])
    jac = np.array([[0.0, 1.0], [0.0, 0.0]])
    hess = np.array([[2.0, 0.0], [0.0, 0.0]])

    def f(x):
        return np.array([x[1], 0.0])

    dyn = DynamicsModel(n=2, mu=1, l=1, f=f, g=lambda x: g_mat,
                        M=np.array([[1.0], [0.0]]), jac_f=lambda x: jac)

    bar = BarrierSpec(
        h=lambda x: x[0] ** 2 - 1.0,
        grad_h=lambda x: np.array([2.0 * x[0], 0.0]),
        hess_h=lambda x: hess,
        degree=2, k=cfg["gains"], barrier_id="h1",
    )

    x0 = np.asarray(cfg["x0_box"], dtype=float)
    return Scenario(
        name="example1",
        dynamics=dyn,
        barriers=(bar,),
        dist_box=DisturbanceBox(lo=[b[0] for b in cfg["dist_box"]],
                                hi=[b[1] for b in cfg["dist_box"]]),
        x0_lo=x0[:, 0], x0_hi=x0[:, 1],
        u_ref_policy=lambda x: np.zeros(1),
        goal=None,
        dt=float(cfg["dt"]),
        t_max=float(cfg["t_max"]),
        feature_map="identity",
        config=cfg,
    )


_BUILDERS = {"unicycle": build_unicycle, "example1": build_example1}


def bundled_scenarios() -> dict:
    """Both bundled systems with their default parameterization."""
    return {name: build() for name, build in _BUILDERS.items()}


def load_scenario(source) -> Scenario:
    """Build a scenario from a builtin name or a JSON file path.

    JSON documents look like {"builtin": "unicycle", <parameter overrides>};
    the callbacks always come from the named builtin, the file only
    re-parameterizes them.
    """
    if source in _BUILDERS:
        return _BUILDERS[source]()
    with open(source) as fh:
        doc = json.load(fh)
    name = doc.pop("builtin", None)
    if name not in _BUILDERS:
        raise ValueError(f"scenario file must name a builtin in {sorted(_BUILDERS)}, got {name!r}")
    return _BUILDERS[name](**doc)


def scenario_to_json(sc: Scenario) -> dict:
    """JSON document mirroring the scenario's fields (callbacks by builtin name)."""
    return {"builtin": sc.name, **sc.config}
