"""Command-line experiment harness.

Subcommands:

- check       derivative/assembly self-validation for a scenario
- expert-run  batch QP-expert rollouts to CSV + summary JSON
- dagger      full imitation loop to model JSON + report JSON
- nn-run      batch rollouts of a trained model to CSV + summary + SVG

Every command writes a run manifest (command, scenario, seed, resolved
config, content hash) into the output directory before any computation
output, so results are reproducible from the manifest alone. Exit codes:
0 success, 1 validation/acceptance failure, 2 bad input.
"""

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cbf import SeparabilityViolation, fd_gradient, fd_jacobian, validate_fd
from .dagger import DaggerConfig, evaluate_policy, run_dagger
from .expert import ExpertPolicy, expert_control
from .policy_nn import TrainConfig, load_model, save_model
from .scenarios import load_scenario, scenario_to_json
from .sim import DisturbanceSignal, rollout, write_trajectory_csv
from .svgplot import render_svg

EXIT_OK, EXIT_FAIL, EXIT_BAD_INPUT = 0, 1, 2


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def write_manifest(out_dir: Path, command: str, scenario_doc: dict, seed: int,
                   config: dict) -> dict:
    """Written before any other output; the hash covers every input."""
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "scenario": scenario_doc, "seed": seed,
               "config": config}
    manifest = {
        **payload,
        "tool_version": __version__,
        "config_hash": hashlib.sha256(_canonical(payload).encode()).hexdigest(),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def parse_dist(spec_str: str):
    if spec_str == "zero":
        return DisturbanceSignal.zero()
    if spec_str == "random":
        return DisturbanceSignal.piecewise_random()
    if spec_str.startswith("const:"):
        vals = [float(v) for v in spec_str[len("const:"):].split(",")]
        return DisturbanceSignal.constant(vals)
    raise ValueError(f"bad disturbance spec {spec_str!r}; use zero, const:<v>, or random")


def _check_states(sc, rng, n_samples):
    """Half from the initial box, half from the arena around obstacles/goal."""
    lo = sc.x0_lo.copy()
    hi = sc.x0_hi.copy()
    if sc.dynamics.n >= 2:
        pts = [c for (c, _) in sc.obstacles]
        if sc.goal is not None:
            pts.append(tuple(sc.goal.center[:2]))
        for cx, cy in pts:
            lo[0], hi[0] = min(lo[0], cx - 1.0), max(hi[0], cx + 1.0)
            lo[1], hi[1] = min(lo[1], cy - 1.0), max(hi[1], cy + 1.0)
    states = [rng.uniform(sc.x0_lo, sc.x0_hi) for _ in range(n_samples // 2)]
    states += [rng.uniform(lo, hi) for _ in range(n_samples - n_samples // 2)]
    return states


def cmd_check(sc, seed: int = 0, n_samples: int = 25) -> dict:
    """Finite-difference and separability validation over sampled states."""
    rng = np.random.default_rng([55, seed])
    dyn = sc.dynamics
    report = {"n_samples": n_samples, "checks": {}, "passed": True}
    errs = {"jac_f": 0.0, "grad_h": 0.0, "hess_h": 0.0, "separability": 0.0, "chain_fd": 0.0}
    failures = []

    for x in _check_states(sc, rng, n_samples):
        e = np.max(np.abs(dyn.jac_f(x) - fd_jacobian(dyn.f, x)))
        scale = max(1.0, float(np.max(np.abs(dyn.jac_f(x)))))
        errs["jac_f"] = max(errs["jac_f"], e / scale)
        u = rng.uniform(-2.0, 2.0, dyn.mu)
        w = sc.dist_box.sample(rng)
        for bar in sc.barriers:
            g_err = np.max(np.abs(bar.grad_h(x) - fd_gradient(bar.h, x)))
            g_scale = max(1.0, float(np.max(np.abs(bar.grad_h(x)))))
            errs["grad_h"] = max(errs["grad_h"], g_err / g_scale)
            if bar.degree == 2:
                H = bar.hess_h(x)
                h_err = np.max(np.abs(H - fd_jacobian(bar.grad_h, x)))
                errs["hess_h"] = max(errs["hess_h"], h_err / max(1.0, float(np.max(np.abs(H)))))
                sep = dyn.g(x).T @ H @ dyn.M
                errs["separability"] = max(errs["separability"], float(np.max(np.abs(sep))))
            try:
                errs["chain_fd"] = max(errs["chain_fd"], validate_fd(dyn, bar, x, u, w))
            except SeparabilityViolation as exc:
                failures.append(str(exc))

    tol = {"jac_f": 1e-5, "grad_h": 1e-5, "hess_h": 1e-5,
           "separability": 1e-9, "chain_fd": 1e-4}
    for name, err in errs.items():
        ok = err <= tol[name]
        report["checks"][name] = {"max_error": err, "tolerance": tol[name], "ok": ok}
        if not ok:
            report["passed"] = False
    if failures:
        report["passed"] = False
        report["failures"] = failures
    return report


def _run_batch(sc, policy, out_dir: Path, n_rollouts: int, dist, seed: int,
               diagnostics_pol=None):
    rollouts = []
    trajectories = []
    min_h_overall = math.inf
    for i in range(n_rollouts):
        if diagnostics_pol is not None:
            records = []

            def wrapped(x):
                u, diag = expert_control(diagnostics_pol, x)
                records.append(diag.to_record())
                return u

            traj = rollout(sc, wrapped, dist, rng_seed=seed + i)
            with open(out_dir / f"rollout_{i:03d}.diag.jsonl", "w") as fh:
                for rec in records:
                    fh.write(_canonical(rec) + "\n")
        else:
            traj = rollout(sc, policy, dist, rng_seed=seed + i)
        write_trajectory_csv(traj, sc, out_dir / f"rollout_{i:03d}.csv")
        trajectories.append(traj)
        min_h = traj.min_h()
        overall = min(min_h.values()) if min_h else math.inf
        min_h_overall = min(min_h_overall, overall)
        rollouts.append({
            "index": i, "seed": seed + i, "termination": traj.termination,
            "steps": traj.n_steps, "t_final": float(traj.times[-1]),
            "min_h": min_h,
        })
    n = max(1, n_rollouts)
    summary = {
        "n_rollouts": n_rollouts,
        "reach_rate": sum(r["termination"] == "goal_reached" for r in rollouts) / n,
        "safety_rate": sum(r["termination"] not in ("unsafe_entered",) for r in rollouts) / n,
        "min_h_overall": min_h_overall if rollouts else None,
        "rollouts": rollouts,
    }
    return summary, trajectories


def cmd_expert_run(sc, scenario_doc, out_dir: Path, n_rollouts: int, dist,
                   seed: int, fallback: str = "error", diagnostics: bool = False) -> dict:
    config = {"n_rollouts": n_rollouts, "dist": dataclasses.asdict(dist) | {
        "value": None if dist.value is None else list(map(float, dist.value))},
        "fallback": fallback, "diagnostics": diagnostics}
    write_manifest(out_dir, "expert-run", scenario_doc, seed, config)
    _write_json(out_dir / "scenario.json", scenario_doc)
    pol = ExpertPolicy(sc, fallback=fallback)
    summary, trajectories = _run_batch(sc, pol.policy_fn(), out_dir, n_rollouts, dist, seed,
                                       diagnostics_pol=pol if diagnostics else None)
    summary["expert_stats"] = {"n_solves": pol.n_solves, "n_infeasible": pol.n_infeasible}
    _write_json(out_dir / "summary.json", summary)
    if sc.dynamics.n >= 2:
        render_svg(sc, trajectories, out_dir / "trajectories.svg")
    return summary


def cmd_dagger(sc, scenario_doc, out_dir: Path, cfg: DaggerConfig,
               final_eval_rollouts: int = 50, export_dataset: bool = False) -> dict:
    config = {
        "p": cfg.p, "n_iters": cfg.n_iters, "n_init_samples": cfg.n_init_samples,
        "label_stride": cfg.label_stride, "eval_rollouts": cfg.eval_rollouts,
        "epochs": cfg.train.epochs, "batch": cfg.train.batch, "lr": cfg.train.lr,
        "hidden": list(cfg.hidden), "warm_start": cfg.warm_start,
        "final_eval_rollouts": final_eval_rollouts,
    }
    write_manifest(out_dir, "dagger", scenario_doc, cfg.seed, config)
    _write_json(out_dir / "scenario.json", scenario_doc)
    expert = ExpertPolicy(sc)
    policy, report = run_dagger(sc, expert, cfg)
    if export_dataset and report.dataset is not None:
        report.dataset.to_csv(out_dir / "dataset.csv")
    report.final_eval = evaluate_policy(
        sc, policy.control, final_eval_rollouts,
        DisturbanceSignal.piecewise_random(hold_steps=cfg.eval_hold_steps,
                                           seed=cfg.seed + 7777),
        seed=cfg.seed + 50_000)
    save_model(policy, out_dir / "model.json")
    doc = report.to_json_dict()
    _write_json(out_dir / "report.json", doc)
    return doc


def cmd_nn_run(model_path, sc, scenario_doc, out_dir: Path, n_rollouts: int,
               dist, seed: int) -> dict:
    config = {"model": str(model_path), "n_rollouts": n_rollouts,
              "dist": dataclasses.asdict(dist) | {
                  "value": None if dist.value is None else list(map(float, dist.value))}}
    write_manifest(out_dir, "nn-run", scenario_doc, seed, config)
    _write_json(out_dir / "scenario.json", scenario_doc)
    net = load_model(model_path)
    summary, trajectories = _run_batch(sc, net.control, out_dir, n_rollouts, dist, seed)
    if sc.dynamics.n >= 2:
        render_svg(sc, trajectories, out_dir / "trajectories.svg")
    _write_json(out_dir / "summary.json", summary)
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="safectrl",
                                     description="robust barrier QP expert and imitation harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, rollouts_default=20, with_dist=True):
        p.add_argument("--scenario", default="unicycle",
                       help="builtin name or scenario JSON path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--rollouts", type=int, default=rollouts_default)
        if with_dist:
            p.add_argument("--dist", default="zero",
                           help="zero | const:<v[,v...]> | random")
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--tmax", type=float, default=None)

    p_check = sub.add_parser("check", help="validate scenario derivatives and assembly")
    p_check.add_argument("--scenario", default="unicycle")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--samples", type=int, default=25)

    p_exp = sub.add_parser("expert-run", help="QP expert rollouts to CSV")
    common(p_exp)
    p_exp.add_argument("--fallback", choices=("error", "best_effort"), default="error")
    p_exp.add_argument("--diagnostics", action="store_true",
                       help="dump per-step solver diagnostics as JSON lines")

    dag_defaults = DaggerConfig()
    p_dag = sub.add_parser("dagger", help="train an imitation policy")
    common(p_dag, rollouts_default=50, with_dist=False)
    p_dag.add_argument("--p", type=float, default=dag_defaults.p, dest="mix_p")
    p_dag.add_argument("--iters", type=int, default=dag_defaults.n_iters)
    p_dag.add_argument("--init-samples", type=int, default=dag_defaults.n_init_samples)
    p_dag.add_argument("--epochs", type=int, default=dag_defaults.train.epochs)
    p_dag.add_argument("--label-stride", type=int, default=dag_defaults.label_stride)
    p_dag.add_argument("--warm-start", action="store_true")
    p_dag.add_argument("--export-dataset", action="store_true",
                       help="also write the final aggregated dataset as CSV")

    p_nn = sub.add_parser("nn-run", help="roll out a trained model")
    common(p_nn, rollouts_default=50)
    p_nn.add_argument("--model", required=True)

    args = parser.parse_args(argv)

    try:
        sc = load_scenario(args.scenario)
        overrides = {}
        if getattr(args, "dt", None) is not None:
            overrides["dt"] = args.dt
        if getattr(args, "tmax", None) is not None:
            overrides["t_max"] = args.tmax
        if overrides:
            sc = load_scenario_with(args.scenario, overrides)
        scenario_doc = scenario_to_json(sc)
        dist = parse_dist(args.dist) if hasattr(args, "dist") else None
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    if args.command == "check":
        report = cmd_check(sc, seed=args.seed, n_samples=args.samples)
        for name, chk in report["checks"].items():
            status = "ok" if chk["ok"] else "FAIL"
            print(f"{name}: max_error={chk['max_error']:.3e} tol={chk['tolerance']:.0e} {status}")
        for msg in report.get("failures", []):
            print(f"FAIL: {msg}")
        print("check:", "PASS" if report["passed"] else "FAIL")
        return EXIT_OK if report["passed"] else EXIT_FAIL

    out_dir = Path(args.out)
    if args.command == "expert-run":
        summary = cmd_expert_run(sc, scenario_doc, out_dir, args.rollouts, dist,
                                 args.seed, fallback=args.fallback,
                                 diagnostics=args.diagnostics)
        print(f"expert-run: reach={summary['reach_rate']:.2f} "
              f"safety={summary['safety_rate']:.2f} min_h={summary['min_h_overall']:.4f}")
        return EXIT_OK

    if args.command == "dagger":
        cfg = DaggerConfig(p=args.mix_p, n_iters=args.iters,
                           n_init_samples=args.init_samples, seed=args.seed,
                           label_stride=args.label_stride,
                           train=dataclasses.replace(DaggerConfig().train,
                                                     epochs=args.epochs),
                           warm_start=args.warm_start)
        doc = cmd_dagger(sc, scenario_doc, out_dir, cfg,
                         final_eval_rollouts=args.rollouts,
                         export_dataset=args.export_dataset)
        fe = doc["final_eval"]
        print(f"dagger: selected iter {doc['selected_iteration']}, "
              f"final joint safe+reach {fe['joint_safe_reach_rate']:.2f}")
        return EXIT_OK

    if args.command == "nn-run":
        summary = cmd_nn_run(args.model, sc, scenario_doc, out_dir, args.rollouts,
                             dist, args.seed)
        print(f"nn-run: reach={summary['reach_rate']:.2f} "
              f"safety={summary['safety_rate']:.2f}")
        return EXIT_OK

    return EXIT_BAD_INPUT


def load_scenario_with(source, overrides: dict):
    from .scenarios import _BUILDERS, scenario_to_json as _stj

    sc = load_scenario(source)
    doc = _stj(sc)
    doc.pop("builtin")
    doc.update(overrides)
    return _BUILDERS[sc.name](**doc)


if __name__ == "__main__":
    sys.exit(main())
