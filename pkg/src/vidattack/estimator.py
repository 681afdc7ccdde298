"""Rectification-weight estimators over a patch basis: antithetic NES and central FD.

Both estimate the gradient of the attack loss with respect to patch weights at
v = 0 by querying the black-box oracle; NES shapes losses with a centered rank
transform, FD probes each patch direction separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .goal import AttackGoal, Targeted
from .oracle import LossValue, QueryCounter, adversarial_loss, query_top1
from .partition import PatchBasis, rectify

IDENTITY_LOSS = "identity"
CENTERED_RANK = "rank"

_FD_INVALID = 1e9  # stands in for +-infinite loss in finite-difference arithmetic


@dataclass(frozen=True)
class NESConfig:
    """Search variance, antithetic population size, and the loss transform."""

    sigma: float
    population: int
    transform: str = CENTERED_RANK

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.population < 2 or self.population % 2 != 0:
            raise ValueError(f"population must be even and >= 2, got {self.population}")
        if self.transform not in (IDENTITY_LOSS, CENTERED_RANK):
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class LossSample:
    delta: np.ndarray
    loss: LossValue


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = (i + j - 1) / 2.0
        i = j
    return ranks


def transform_losses(samples: Sequence[LossValue], goal: AttackGoal,
                     transform: str = CENTERED_RANK) -> np.ndarray:
    """Map a batch of loss samples to fitness scalars.

    Centered rank: invalid targeted samples are punished with +inf loss (they lost
    the target class), invalid untargeted samples get -inf (the class already
    flipped, maximal progress); ranks are ascending by loss with averaged ties and
    centered into [-1/2, 1/2]. Identity returns raw losses and refuses invalid
    samples; it exists for analytic verification only.
    """
    if len(samples) < 2:
        raise ValueError("need at least two loss samples")
    targeted = isinstance(goal, Targeted)
    values = np.empty(len(samples), dtype=np.float64)
    for i, z in enumerate(samples):
        if z.valid:
            values[i] = z.value
        elif transform == IDENTITY_LOSS:
            raise ValueError("identity transform cannot absorb invalid loss samples")
        else:
            values[i] = np.inf if targeted else -np.inf
    if transform == IDENTITY_LOSS:
        return values
    ranks = _average_ranks(values)
    return ranks / (len(samples) - 1) - 0.5


def nes_estimate(x: np.ndarray, basis: PatchBasis, oracle, goal: AttackGoal,
                 cfg: NESConfig, counter: QueryCounter, rng: np.random.Generator) -> np.ndarray:
    """Antithetic NES estimate of the patch-weight gradient at v = 0.

    Consumes exactly cfg.population queries, in +-pair order with k ascending, and
    accumulates in that fixed order so results are reproducible. Probe arithmetic
    runs in float64 so small search variances survive storage precision.
    """
    x64 = np.asarray(x, dtype=np.float64)
    half = cfg.population // 2
    samples: list[LossSample] = []
    for _ in range(half):
        delta = rng.standard_normal(basis.patch_count)
        step = rectify(cfg.sigma * delta, basis)
        plus = query_top1(oracle, x64 + step, counter)
        samples.append(LossSample(delta, adversarial_loss(plus, goal)))
        minus = query_top1(oracle, x64 - step, counter)
        samples.append(LossSample(-delta, adversarial_loss(minus, goal)))
    fitness = transform_losses([s.loss for s in samples], goal, cfg.transform)
    estimate = np.zeros(basis.patch_count, dtype=np.float64)
    for fit, sample in zip(fitness, samples):
        estimate += sample.delta * fit
    return estimate / (cfg.population * cfg.sigma)


def _fd_loss_value(z: LossValue, targeted: bool) -> float:
    if z.valid:
        return z.value
    return _FD_INVALID if targeted else -_FD_INVALID


def fd_estimate(x: np.ndarray, basis: PatchBasis, oracle, goal: AttackGoal,
                delta: float, counter: QueryCounter) -> np.ndarray:
    """Central finite differences along every patch direction; exactly 2M queries.

    Invalid losses are replaced by large sentinel values of the punishing sign;
    a patch whose probes are both invalid contributes zero.
    """
    if delta <= 0:
        raise ValueError(f"probe step must be positive, got {delta}")
    targeted = isinstance(goal, Targeted)
    x64 = np.ascontiguousarray(x, dtype=np.float64)
    probe = x64.ravel().copy()
    original = x64.ravel()
    weights = np.zeros(basis.patch_count, dtype=np.float64)
    for m in range(basis.patch_count):
        idx, vals = basis.patch_support(m)
        probe[idx] = original[idx] + delta * vals
        plus = adversarial_loss(query_top1(oracle, probe.reshape(x64.shape), counter), goal)
        probe[idx] = original[idx] - delta * vals
        minus = adversarial_loss(query_top1(oracle, probe.reshape(x64.shape), counter), goal)
        probe[idx] = original[idx]
        if not plus.valid and not minus.valid:
            continue
        weights[m] = (_fd_loss_value(plus, targeted) - _fd_loss_value(minus, targeted)) / (2.0 * delta)
    return weights
