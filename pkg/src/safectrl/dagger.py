"""Imitation loop: roll out a mixed expert/learner policy, relabel with the
expert, aggregate, retrain, keep the best model on validation.

Iteration 0 rolls out the pure expert from a fixed set of start states
(sampled once from the scenario's initial box) to seed the dataset; every
later iteration i rolls out u = beta * expert(x) + (1 - beta) * learner(x)
with beta = p^i, labels every recorded state with the pure expert output,
aggregates (never deleting or relabeling old rows), and retrains from
scratch. Training rollouts run disturbance-free; the learned policy is meant
to be evaluated under random disturbance afterwards, which is what the
per-iteration closed-loop rates report.

Model selection is held-out MSE against expert labels, not closed-loop
performance; the closed-loop rates are reported alongside for the record.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .expert import ExpertPolicy
from .policy_nn import (
    Dataset,
    MlpPolicy,
    TrainConfig,
    evaluate_mse,
    feature_dim,
    featurize,
    from_json_dict,
    to_json_dict,
    train,
)
from .sim import DisturbanceSignal, Scenario, rollout

_STREAM_X0S = 31
_SEED_MIX = 1_000_003


class ExpertFailure(RuntimeError):
    """The expert was infeasible while seeding; the scenario is misconfigured."""


@dataclass(frozen=True)
class DaggerConfig:
    """Loop parameters. rollouts_per_iter None means one rollout per start
    state; label_stride thins the recorded (state, label) pairs to every
    k-th step (consecutive states at dt = 0.01 are nearly duplicates).

    label_clip drops pairs whose expert control exceeds the bound in any
    coordinate. The unbounded QP emits arbitrarily large controls where a
    row coefficient degenerates (near infeasibility boundaries) and a few
    such rows dominate every squared-error metric; the rollout still
    executes the true expert output, only the dataset skips the row."""

    p: float = 0.8
    n_iters: int = 15
    n_init_samples: int = 20
    rollouts_per_iter: Optional[int] = None
    train: TrainConfig = TrainConfig(epochs=400)
    hidden: tuple = (32, 32)
    seed: int = 0
    label_stride: int = 10
    label_clip: Optional[float] = 10.0
    mix_dist: str = "piecewise_random"  # disturbance for mixed-policy rollouts
    eval_rollouts: int = 10
    eval_hold_steps: int = 10
    warm_start: bool = False
    saturation: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie strictly inside (0, 1)")
        if self.n_iters < 1 or self.n_init_samples < 1 or self.label_stride < 1:
            raise ValueError("n_iters, n_init_samples, label_stride must be >= 1")
        if self.label_clip is not None and self.label_clip <= 0:
            raise ValueError("label_clip must be positive or None")
        if self.mix_dist not in ("zero", "piecewise_random"):
            raise ValueError(f"unknown mix_dist {self.mix_dist!r}")


@dataclass
class IterationStats:
    index: int
    beta: float
    dataset_size: int
    train_mse: float
    val_mse: float
    safety_rate: float
    reach_rate: float
    common_val_mse: float = float("nan")

    def to_dict(self) -> dict:
        return {"index": self.index, "beta": self.beta,
                "dataset_size": self.dataset_size,
                "train_mse": self.train_mse, "val_mse": self.val_mse,
                "common_val_mse": self.common_val_mse,
                "safety_rate": self.safety_rate, "reach_rate": self.reach_rate}


@dataclass
class DaggerReport:
    iterations: list = field(default_factory=list)
    selected_iteration: int = -1
    config: dict = field(default_factory=dict)
    final_eval: dict = field(default_factory=dict)
    dataset: Optional[Dataset] = None  # final aggregate; not serialized

    def to_json_dict(self) -> dict:
        return {"config": self.config,
                "iterations": [it.to_dict() for it in self.iterations],
                "selected_iteration": self.selected_iteration,
                "final_eval": self.final_eval}


class _Recorder:
    """Wraps the mixed policy; keeps (feature, expert label) pairs and the
    (expert, learner, executed) triples needed for the mixing assertion."""

    def __init__(self, sc, expert, learner, beta, stride, label_clip=None):
        self.sc = sc
        self.expert = expert
        self.learner = learner
        self.beta = beta
        self.stride = stride
        self.label_clip = label_clip
        self.features: list = []
        self.labels: list = []
        self.triples: list = []
        self.n_clipped = 0
        self._calls = 0

    def __call__(self, x):
        u_exp = self.expert.control(x)
        if self.learner is None:
            u = u_exp
            u_nn = u_exp
        else:
            u_nn = self.learner.control(x)
            u = self.beta * u_exp + (1.0 - self.beta) * u_nn
        if self._calls % self.stride == 0:
            if self.label_clip is not None and np.max(np.abs(u_exp)) > self.label_clip:
                self.n_clipped += 1
            else:
                self.features.append(featurize(self.sc.feature_map, x))
                self.labels.append(u_exp)
        self.triples.append((u_exp, u_nn, u))
        self._calls += 1
        return u


def _assert_mixing(triples, beta):
    for u_exp, u_nn, u in triples:
        expected = beta * u_exp + (1.0 - beta) * u_nn
        if not np.array_equal(expected, u):
            raise AssertionError("executed control is not the convex mixture")


def evaluate_policy(sc: Scenario, policy, n_rollouts: int, dist: DisturbanceSignal,
                    seed: int = 0) -> dict:
    """Closed-loop rates over fresh start states: safe, reached, and both."""
    safe = reached = 0
    terminations = []
    for j in range(n_rollouts):
        traj = rollout(sc, policy, dist, rng_seed=seed + j, log_psi=False)
        ok_safe = traj.termination not in ("unsafe_entered", "expert_infeasible")
        safe += ok_safe
        reached += traj.termination == "goal_reached"
        terminations.append(traj.termination)
    joint = sum(1 for t in terminations if t == "goal_reached") / n_rollouts
    return {"n_rollouts": n_rollouts,
            "safety_rate": safe / n_rollouts,
            "reach_rate": reached / n_rollouts,
            "joint_safe_reach_rate": joint,
            "terminations": terminations}


def run_dagger(sc: Scenario, expert: ExpertPolicy, cfg: DaggerConfig = DaggerConfig()):
    """Run the full loop; returns (best_policy, DaggerReport).

    Start states are sampled once and reused every iteration. Model
    selection: every iteration's model is scored on one common holdout
    drawn from the final aggregated dataset, and the lowest MSE wins.
    Per-iteration holdouts are not comparable across iterations (early
    datasets contain only easy expert-tube states and make weak early
    models look best), so the common set is the fair reading of
    "best model on validation"; each iteration's own holdout MSE is still
    reported.
    """
    rng = np.random.default_rng([_STREAM_X0S, cfg.seed])
    starts = [sc.sample_x0(rng) for _ in range(cfg.n_init_samples)]
    n_roll = cfg.rollouts_per_iter or len(starts)
    dims = [feature_dim(sc.feature_map, sc.dynamics.n), *cfg.hidden, sc.dynamics.mu]

    data = Dataset()
    report = DaggerReport(config={
        "p": cfg.p, "n_iters": cfg.n_iters, "n_init_samples": cfg.n_init_samples,
        "rollouts_per_iter": n_roll, "label_stride": cfg.label_stride,
        "seed": cfg.seed, "hidden": list(cfg.hidden),
        "epochs": cfg.train.epochs, "batch": cfg.train.batch, "lr": cfg.train.lr,
        "warm_start": cfg.warm_start,
    })
    model = None
    snapshots = []

    for i in range(cfg.n_iters + 1):
        beta = 1.0 if i == 0 else cfg.p ** i
        learner = None if i == 0 else model
        # Seeding runs the pure expert disturbance-free; mixed iterations
        # sample the disturbed system so visited states cover the tubes the
        # deployed policy will actually see.
        if i == 0 or cfg.mix_dist == "zero":
            dist = DisturbanceSignal.zero()
        else:
            dist = DisturbanceSignal.piecewise_random(hold_steps=cfg.eval_hold_steps,
                                                      seed=cfg.seed + 5000 + i)
        n_new = 0
        for j in range(n_roll):
            rec = _Recorder(sc, expert, learner, beta, cfg.label_stride,
                            label_clip=cfg.label_clip)
            traj = rollout(sc, rec, dist,
                           rng_seed=cfg.seed * _SEED_MIX + i * 1009 + j,
                           x0=starts[j % len(starts)], log_psi=False)
            if i == 0 and traj.termination == "expert_infeasible":
                raise ExpertFailure(f"expert infeasible on seed rollout {j}")
            _assert_mixing(rec.triples, beta)
            if rec.features:
                data.extend(np.asarray(rec.features), np.asarray(rec.labels))
                n_new += len(rec.features)
        if len(data) == 0:
            raise ExpertFailure("no data collected; rollouts terminated immediately")

        if cfg.warm_start and model is not None:
            candidate = model
        else:
            candidate = MlpPolicy.init(dims, seed=cfg.seed + 104_729 * i,
                                       feature_map=sc.feature_map,
                                       saturation=cfg.saturation)
        train_cfg = replace(cfg.train, seed=cfg.train.seed + 7919 * i)
        history = train(candidate, data, train_cfg)
        train_mse, val_mse = history[-1]
        candidate.training_meta = {
            "iteration": i, "dataset_size": len(data), "new_rows": n_new,
            "epochs": train_cfg.epochs, "train_mse": train_mse, "val_mse": val_mse,
        }
        model = candidate
        snapshots.append(from_json_dict(to_json_dict(model)))

        eval_stats = evaluate_policy(
            sc, model.control, cfg.eval_rollouts,
            DisturbanceSignal.piecewise_random(hold_steps=cfg.eval_hold_steps,
                                               seed=cfg.seed + i),
            seed=cfg.seed * 7 + 31 * i)
        report.iterations.append(IterationStats(
            index=i, beta=beta, dataset_size=len(data),
            train_mse=train_mse, val_mse=val_mse,
            safety_rate=eval_stats["safety_rate"],
            reach_rate=eval_stats["reach_rate"]))

    # Common validation holdout from the final aggregate, scored for every
    # iteration's model; lowest MSE is the returned policy.
    _, common_val = data.split(cfg.train.val_fraction,
                               cfg.train.seed + 7919 * cfg.n_iters)
    best_iter = -1
    best_mse = np.inf
    for i, snap in enumerate(snapshots):
        mse = evaluate_mse(snap, data, common_val)
        report.iterations[i].common_val_mse = mse
        if mse < best_mse:
            best_iter, best_mse = i, mse

    report.selected_iteration = best_iter
    report.dataset = data
    return snapshots[best_iter], report
