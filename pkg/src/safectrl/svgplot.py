"""Dependency-free SVG rendering of planar rollouts.

Draws the unsafe discs, the goal disc, the initial box, and the (x1, x2)
traces of a set of trajectories into a fixed viewport derived from the
scenario geometry. Coordinates are formatted with a fixed precision so the
same data always produces byte-identical files.
"""

import math

from .sim import Scenario


def _bounds(sc: Scenario, trajectories):
    xs, ys = [], []
    xs += [sc.x0_lo[0], sc.x0_hi[0]]
    ys += [sc.x0_lo[1], sc.x0_hi[1]]
    for (cx, cy), r_sq in sc.obstacles:
        r = math.sqrt(r_sq)
        xs += [cx - r, cx + r]
        ys += [cy - r, cy + r]
    if sc.goal is not None:
        r = math.sqrt(sc.goal.radius_sq)
        xs += [sc.goal.center[0] - r, sc.goal.center[0] + r]
        ys += [sc.goal.center[1] - r, sc.goal.center[1] + r]
    for traj in trajectories:
        xs += [float(traj.states[:, 0].min()), float(traj.states[:, 0].max())]
        ys += [float(traj.states[:, 1].min()), float(traj.states[:, 1].max())]
    pad = 0.05 * max(max(xs) - min(xs), max(ys) - min(ys), 1.0)
    return min(xs) - pad, max(xs) + pad, min(ys) - pad, max(ys) + pad


def render_svg(sc: Scenario, trajectories, path, width: int = 640) -> None:
    x_lo, x_hi, y_lo, y_hi = _bounds(sc, trajectories)
    scale = width / (x_hi - x_lo)
    height = int(round((y_hi - y_lo) * scale))

    def px(x):
        return (x - x_lo) * scale

    def py(y):  # SVG y grows downward
        return (y_hi - y) * scale

    def f(v):
        return f"{v:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        # initial box
        f'<rect x="{f(px(sc.x0_lo[0]))}" y="{f(py(sc.x0_hi[1]))}" '
        f'width="{f((sc.x0_hi[0] - sc.x0_lo[0]) * scale)}" '
        f'height="{f((sc.x0_hi[1] - sc.x0_lo[1]) * scale)}" '
        f'fill="none" stroke="#999999" stroke-dasharray="6,4"/>',
    ]
    for (cx, cy), r_sq in sc.obstacles:
        parts.append(f'<circle cx="{f(px(cx))}" cy="{f(py(cy))}" '
                     f'r="{f(math.sqrt(r_sq) * scale)}" '
                     f'fill="#cc4444" fill-opacity="0.45" stroke="#882222"/>')
    if sc.goal is not None:
        parts.append(f'<circle cx="{f(px(sc.goal.center[0]))}" cy="{f(py(sc.goal.center[1]))}" '
                     f'r="{f(math.sqrt(sc.goal.radius_sq) * scale)}" '
                     f'fill="#44aa44" fill-opacity="0.5" stroke="#226622"/>')
    for traj in trajectories:
        pts = " ".join(f"{f(px(p[0]))},{f(py(p[1]))}" for p in traj.states[:, :2])
        color = "#3355bb" if traj.termination == "goal_reached" else "#bb7722"
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.2" stroke-opacity="0.8"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
