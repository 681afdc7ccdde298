"""Outer attack loops: untargeted PGD at fixed bound, targeted PGD with bound decay.

Each step regenerates the tentative perturbation, rebuilds the patch basis,
estimates rectification weights through the budgeted oracle, and applies one
projected (sign) step. The targeted loop starts from a target-class video at
bound 1 and walks the bound down while keeping the target class top-1, halving
the step size and the decay when progress stalls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import NESConfig, fd_estimate, nes_estimate
from .goal import AttackGoal, Targeted, Untargeted
from .oracle import BudgetExceeded, OracleResponse, QueryCounter, adversarial_loss, query_top1
from .partition import PartitionSpec, build_basis, rectify
from .tensor import Shape, clip_box, sign_of
from .tentative import TentativeSpec, generate, with_noise_features, with_target_features

NES = "nes"
FD = "fd"

BOUND_TOLERANCE = 1e-6


@dataclass(frozen=True)
class AdaptSettings:
    """Dynamic tuning thresholds for the targeted loop."""

    maintain_fail_threshold: float = 0.5
    maintain_window: int = 20
    eps_fail_limit: int = 100


@dataclass(frozen=True)
class AttackConfig:
    eps_adv: float = 0.05
    eps_decay: float = 0.05
    step_size: float = 0.01
    budget: int = 300_000
    nes: NESConfig = NESConfig(sigma=1e-3, population=48)
    partition: PartitionSpec = PartitionSpec.uniform(8, 8)
    tentative: TentativeSpec = TentativeSpec.static()
    estimator: str = NES
    fd_delta: float = 1e-3
    use_sign_step: bool = True
    adapt: AdaptSettings = AdaptSettings()

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_adv <= 1.0:
            raise ValueError(f"eps_adv must be in (0, 1], got {self.eps_adv}")
        if self.eps_decay <= 0 or self.budget <= 0:
            raise ValueError("eps_decay and budget must be positive")
        if self.step_size < 0:  # zero is a legal no-op attack
            raise ValueError(f"step_size must be nonnegative, got {self.step_size}")
        if self.estimator not in (NES, FD):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @staticmethod
    def untargeted_defaults(**overrides) -> "AttackConfig":
        cfg = AttackConfig(nes=NESConfig(sigma=1e-3, population=48))
        return replace(cfg, **overrides) if overrides else cfg

    @staticmethod
    def targeted_defaults(**overrides) -> "AttackConfig":
        cfg = AttackConfig(nes=NESConfig(sigma=1e-6, population=48))
        return replace(cfg, **overrides) if overrides else cfg


@dataclass
class AttackState:
    """Live state of one attack run; handed to on_step callbacks."""

    epsilon: float
    x_adv: np.ndarray
    alpha: float
    eps_decay: float
    step: int = 0
    top1_label: int = -1
    top1_prob: float = 0.0
    maintain_window: list = field(default_factory=list)
    eps_fail_count: int = 0


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    epsilon: float
    loss: float | None
    valid: bool
    queries_used: int
    top1: int
    prob: float
    alpha: float
    delta_eps: float

    def to_json_obj(self) -> dict:
        return {
            "step": self.step,
            "epsilon": self.epsilon,
            "loss": self.loss,
            "valid": self.valid,
            "queries_used": self.queries_used,
            "top1": self.top1,
            "prob": self.prob,
            "alpha": self.alpha,
            "delta_eps": self.delta_eps,
        }


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    x_adv: np.ndarray
    epsilon: float
    trajectory: list[TrajectoryRecord]

    @property
    def steps(self) -> int:
        return len(self.trajectory)


def write_trajectory(path, trajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in trajectory:
            fh.write(json.dumps(record.to_json_obj()) + "\n")


def adapt_hyperparams(state: AttackState, cfg: AttackConfig) -> tuple[float, float]:
    """Halve the step size / epsilon decay when the targeted loop stalls.

    The maintain-failure ratio is evaluated over non-overlapping windows so a bad
    window halves the step size exactly once; the epsilon-decay counter tracks
    consecutive iterations without a bound reduction.
    """
    adapt = cfg.adapt
    if len(state.maintain_window) >= adapt.maintain_window:
        fails = sum(state.maintain_window)
        if fails / len(state.maintain_window) > adapt.maintain_fail_threshold:
            state.alpha /= 2.0
        state.maintain_window.clear()
    if state.eps_fail_count >= adapt.eps_fail_limit:
        state.eps_decay /= 2.0
        state.eps_fail_count = 0
    return state.alpha, state.eps_decay


def _bind_tentative(cfg: AttackConfig, goal: AttackGoal, shape: Shape,
                    rng: np.random.Generator) -> TentativeSpec:
    spec = cfg.tentative
    if not spec.transferred:
        return spec
    if isinstance(goal, Targeted):
        return with_target_features(spec, goal.start_video)
    return with_noise_features(spec, shape, rng)


def _estimate_direction(x_adv: np.ndarray, goal: AttackGoal, cfg: AttackConfig,
                        spec: TentativeSpec, oracle, counter: QueryCounter,
                        rng: np.random.Generator) -> np.ndarray:
    h = generate(x_adv, spec, rng)
    basis = build_basis(h, cfg.partition, rng)
    if cfg.estimator == NES:
        weights = nes_estimate(x_adv, basis, oracle, goal, cfg.nes, counter, rng)
    else:
        weights = fd_estimate(x_adv, basis, oracle, goal, cfg.fd_delta, counter)
    return rectify(weights, basis)


def _step_tensor(g_hat: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    return sign_of(g_hat) if cfg.use_sign_step else g_hat


def _record(state: AttackState, resp: OracleResponse, goal: AttackGoal,
            counter: QueryCounter) -> TrajectoryRecord:
    loss = adversarial_loss(resp, goal)
    return TrajectoryRecord(
        step=state.step,
        epsilon=state.epsilon,
        loss=loss.value if loss.valid else None,
        valid=loss.valid,
        queries_used=counter.used,
        top1=resp.label,
        prob=resp.prob,
        alpha=state.alpha,
        delta_eps=state.eps_decay,
    )


def attack_untargeted(x: np.ndarray, label: int, oracle, cfg: AttackConfig,
                      rng: np.random.Generator, traj_path=None, on_step=None) -> AttackResult:
    """Escape class `label` from the clean video x at a fixed perturbation bound.

    Runs until the top-1 class changes or the query budget is spent; the iterate
    always stays inside the eps ball around x intersected with [0, 1].
    """
    x = np.asarray(x, dtype=np.float32)
    shape = Shape.of(x)
    goal = Untargeted(label)
    counter = QueryCounter(cfg.budget)
    trajectory: list[TrajectoryRecord] = []
    state = AttackState(epsilon=cfg.eps_adv, x_adv=x.copy(), alpha=cfg.step_size,
                        eps_decay=cfg.eps_decay)
    success = False
    try:
        start = query_top1(oracle, x, counter)
        if start.label != label:
            raise ValueError(f"clean input is classified {start.label}, expected {label}")
        state.top1_label, state.top1_prob = start.label, start.prob
        spec = _bind_tentative(cfg, goal, shape, rng)
        x64 = x.astype(np.float64)
        lo = x64 - cfg.eps_adv
        hi = x64 + cfg.eps_adv
        while True:
            state.step += 1
            g_hat = _estimate_direction(state.x_adv, goal, cfg, spec, oracle, counter, rng)
            moved = state.x_adv.astype(np.float64) - state.alpha * _step_tensor(g_hat, cfg)
            state.x_adv = clip_box(moved, lo, hi).astype(np.float32)
            resp = query_top1(oracle, state.x_adv, counter)
            state.top1_label, state.top1_prob = resp.label, resp.prob
            trajectory.append(_record(state, resp, goal, counter))
            if on_step is not None:
                on_step(state)
            if resp.label != label:
                success = True
                break
    except BudgetExceeded:
        pass
    if traj_path is not None:
        write_trajectory(traj_path, trajectory)
    return AttackResult(success, counter.used, state.x_adv, state.epsilon, trajectory)


def attack_targeted(x: np.ndarray, target_label: int, x_start: np.ndarray, oracle,
                    cfg: AttackConfig, rng: np.random.Generator, traj_path=None,
                    on_step=None) -> AttackResult:
    """Force classification as target_label inside the eps ball around x.

    Starts from x_start (already classified as the target) at bound 1, then per
    iteration: estimate a direction, try the decayed bound first and commit with
    the reduced bound if the target class survives, otherwise retry at the
    current bound. Succeeds once the bound reaches eps_adv; every candidate check
    costs a query.
    """
    x = np.asarray(x, dtype=np.float32)
    x_start = np.asarray(x_start, dtype=np.float32)
    if x.shape != x_start.shape:
        raise ValueError("start video shape does not match the clean video")
    shape = Shape.of(x)
    goal = Targeted(target_label, x_start)
    counter = QueryCounter(cfg.budget)
    trajectory: list[TrajectoryRecord] = []
    state = AttackState(epsilon=1.0, x_adv=x_start.copy(), alpha=cfg.step_size,
                        eps_decay=cfg.eps_decay)
    try:
        start = query_top1(oracle, x_start, counter)
        if start.label != target_label:
            raise ValueError(f"start video is classified {start.label}, expected target {target_label}")
        state.top1_label, state.top1_prob = start.label, start.prob
        spec = _bind_tentative(cfg, goal, shape, rng)
        x64 = x.astype(np.float64)
        while state.epsilon > cfg.eps_adv:
            state.step += 1
            g_hat = _estimate_direction(state.x_adv, goal, cfg, spec, oracle, counter, rng)
            step_tensor = state.alpha * _step_tensor(g_hat, cfg)
            moved = state.x_adv.astype(np.float64) - step_tensor
            eps_hat = max(state.epsilon - state.eps_decay, 0.0)
            candidate = clip_box(moved, x64 - eps_hat, x64 + eps_hat).astype(np.float32)
            resp = query_top1(oracle, candidate, counter)
            reduced = resp.label == target_label
            if reduced:
                state.x_adv = candidate
                state.epsilon = eps_hat
                state.top1_label, state.top1_prob = resp.label, resp.prob
            else:
                # retry at the unchanged bound; only this outcome feeds the
                # step-size window (bound-shrink rejections feed the decay counter)
                candidate = clip_box(moved, x64 - state.epsilon, x64 + state.epsilon).astype(np.float32)
                resp = query_top1(oracle, candidate, counter)
                if resp.label == target_label:
                    state.x_adv = candidate
                    state.top1_label, state.top1_prob = resp.label, resp.prob
                state.maintain_window.append(resp.label != target_label)
            state.eps_fail_count = 0 if reduced else state.eps_fail_count + 1
            adapt_hyperparams(state, cfg)
            trajectory.append(_record(state, resp, goal, counter))
            if on_step is not None:
                on_step(state)
        linf = float(np.max(np.abs(state.x_adv.astype(np.float64) - x64)))
        success = (state.top1_label == target_label
                   and linf <= cfg.eps_adv + BOUND_TOLERANCE)
    except BudgetExceeded:
        success = False
    if traj_path is not None:
        write_trajectory(traj_path, trajectory)
    return AttackResult(success, counter.used, state.x_adv, state.epsilon, trajectory)
