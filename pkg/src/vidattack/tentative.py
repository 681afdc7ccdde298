"""Tentative perturbations: the sign-valued rough gradient guess refreshed every step.

Three sources: a static all-ones tensor, equiprobable random signs, or a
transferred guess obtained by descending a masked feature-matching loss on one
or more surrogate extractors and taking the sign of the (averaged) gradient.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .models import FeatureExtractor
from .tensor import Shape

STATIC = "static"
RANDOM = "random"
TRANSFER_SINGLE = "single"
TRANSFER_ENSEMBLE = "ensemble"
KINDS = (STATIC, RANDOM, TRANSFER_SINGLE, TRANSFER_ENSEMBLE)


@dataclass(frozen=True)
class TentativeSpec:
    """Which tentative source to use, plus the run-bound feature targets.

    target_features[s][n] is the per-frame target map for surrogate s; untargeted
    runs share one frozen Gaussian-noise map per frame across surrogates, targeted
    runs cache each surrogate's features of the target-class video. Both are fixed
    for a whole attack run; only the random masks are redrawn per call.
    """

    kind: str
    mask_prob: float = 0.5
    surrogates: tuple[FeatureExtractor, ...] = ()
    target_features: tuple[tuple[np.ndarray, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown tentative kind {self.kind!r}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.kind == TRANSFER_SINGLE and len(self.surrogates) != 1:
            raise ValueError("single-surrogate transfer needs exactly one extractor")
        if self.kind == TRANSFER_ENSEMBLE and len(self.surrogates) < 2:
            raise ValueError("ensemble transfer needs at least two extractors")

    @property
    def transferred(self) -> bool:
        return self.kind in (TRANSFER_SINGLE, TRANSFER_ENSEMBLE)

    @staticmethod
    def static() -> "TentativeSpec":
        return TentativeSpec(STATIC)

    @staticmethod
    def random() -> "TentativeSpec":
        return TentativeSpec(RANDOM)

    @staticmethod
    def transfer(surrogates, mask_prob: float = 0.5) -> "TentativeSpec":
        surrogates = tuple(surrogates)
        kind = TRANSFER_SINGLE if len(surrogates) == 1 else TRANSFER_ENSEMBLE
        return TentativeSpec(kind, mask_prob=mask_prob, surrogates=surrogates)


def with_noise_features(spec: TentativeSpec, shape: Shape, rng: np.random.Generator) -> TentativeSpec:
    """Freeze untargeted feature targets: one unit-Gaussian map per frame, shared by all surrogates."""
    if not spec.transferred:
        return spec
    feat_shape = spec.surrogates[0].feature_shape
    shared = tuple(rng.standard_normal(feat_shape) for _ in range(shape.frames))
    return dataclasses.replace(spec, target_features=tuple(shared for _ in spec.surrogates))


def with_target_features(spec: TentativeSpec, start_video: np.ndarray) -> TentativeSpec:
    """Freeze targeted feature targets: each surrogate's features of the target-class frames."""
    if not spec.transferred:
        return spec
    feats = tuple(
        tuple(fe.features(frame) for frame in np.asarray(start_video))
        for fe in spec.surrogates
    )
    return dataclasses.replace(spec, target_features=feats)


def tentative_static(shape: Shape) -> np.ndarray:
    """All-ones perturbation: one fixed direction per input dimension."""
    return np.ones(shape.as_tuple(), dtype=np.float32)


def tentative_random(shape: Shape, rng: np.random.Generator) -> np.ndarray:
    """Independent +-1 signs, equiprobable; never zero."""
    bits = rng.integers(0, 2, size=shape.as_tuple())
    return (bits * 2 - 1).astype(np.float32)


def tentative_transferred(x: np.ndarray, spec: TentativeSpec, rng: np.random.Generator) -> np.ndarray:
    """Sign of the surrogate-averaged gradient of the masked feature-matching loss.

    A fresh random mask is drawn per surrogate and frame on every call (masks
    live in feature space); the frozen target maps come bound on the
    TentativeSpec for the whole run.
    """
    if not spec.transferred:
        raise ValueError(f"tentative kind {spec.kind!r} is not a transfer strategy")
    if spec.target_features is None:
        raise ValueError("transfer spec has no target features bound; freeze them for the run first")
    x = np.asarray(x)
    shape = Shape.of(x)
    if any(len(per_frame) != shape.frames for per_frame in spec.target_features):
        raise ValueError("target features do not cover every frame")
    feat_shape = spec.surrogates[0].feature_shape
    grad = np.zeros(shape.as_tuple(), dtype=np.float64)
    for n in range(shape.frames):
        frame = x[n]
        for s, fe in enumerate(spec.surrogates):
            mask = (rng.random(feat_shape) < spec.mask_prob).astype(np.float64)
            grad[n] += fe.distance_gradient(frame, spec.target_features[s][n], mask)
    grad /= len(spec.surrogates) * shape.frames
    return np.sign(grad).astype(np.float32)


def generate(x: np.ndarray, spec: TentativeSpec, rng: np.random.Generator) -> np.ndarray:
    """Produce this step's tentative perturbation for the current iterate x."""
    shape = Shape.of(np.asarray(x))
    if spec.kind == STATIC:
        return tentative_static(shape)
    if spec.kind == RANDOM:
        return tentative_random(shape, rng)
    return tentative_transferred(x, spec, rng)
