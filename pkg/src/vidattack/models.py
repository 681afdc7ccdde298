"""Small differentiable video classifier and per-frame feature extractor.

Both nets are tiny enough for exact manual backprop. The classifier serves as
the desk-scale black-box target and as the white-box gradient oracle when
judging estimate quality; the feature extractors play the role of public image
models that source transferred perturbations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .goal import AttackGoal, Targeted, Untargeted
from .tensor import Shape, grid_bounds

VBM_MAGIC = b"VBM1"
PARAM_STD = 0.1
THEME_STD = 1.2   # shared pair component of a class weight vector
DETAIL_STD = 0.1  # per-class component on top of the pair theme
KERNEL = 3
POOL_GRID = 4
INPUT_CENTER = 0.5  # inputs in [0, 1] are centered before the conv
SURROGATE_COUNT = 3
SURROGATE_SEED_OFFSET = 101  # surrogate i is seeded with classifier seed + 101 + i
DEFAULT_CONV_FILTERS = 4096
DEFAULT_FEAT_FILTERS = 16


def _conv_same(frames: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """'Same'-padded 3x3 cross-correlation over channels, batched over frames.

    frames: (N, H, W, C) float64; kernels: (F, 3, 3, C). Returns (N, H, W, F).
    """
    n, h, w, _ = frames.shape
    f = kernels.shape[0]
    padded = np.zeros((n, h + 2, w + 2, frames.shape[3]), dtype=np.float64)
    padded[:, 1:-1, 1:-1, :] = frames
    out = np.zeros((n, h, w, f), dtype=np.float64)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            out += padded[:, di:di + h, dj:dj + w, :] @ kernels[:, di, dj, :].T
    return out


def _conv_same_input_grad(dout: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Gradient of _conv_same w.r.t. its input, given upstream gradient dout."""
    n, h, w, _ = dout.shape
    c = kernels.shape[3]
    dpad = np.zeros((n, h + 2, w + 2, c), dtype=np.float64)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            dpad[:, di:di + h, dj:dj + w, :] += dout @ kernels[:, di, dj, :]
    return dpad[:, 1:-1, 1:-1, :]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class ToyClassifier:
    """Per-frame conv, average pool to a 4x4 grid, temporal mean, linear softmax head.

    The stack is linear up to the softmax, so construction collapses it into one
    exact matrix acting on the frame-mean image; forward passes and input
    gradients are then a single matvec. A layered reference path is kept for
    verification.
    """

    def __init__(self, shape: Shape, conv: np.ndarray, linear: np.ndarray, bias: np.ndarray,
                 seed: int | None = None):
        self.shape = shape
        self.conv = np.asarray(conv, dtype=np.float32)
        self.linear = np.asarray(linear, dtype=np.float32)
        self.bias = np.asarray(bias, dtype=np.float32)
        self.conv_filters = int(self.conv.shape[0])
        self.classes = int(self.linear.shape[1])
        self.seed = seed
        feat_dim = POOL_GRID * POOL_GRID * self.conv_filters
        if self.conv.shape != (self.conv_filters, KERNEL, KERNEL, shape.channels):
            raise ValueError(f"conv parameter shape {self.conv.shape} inconsistent with input shape")
        if self.linear.shape != (feat_dim, self.classes) or self.bias.shape != (self.classes,):
            raise ValueError("head parameter shapes inconsistent")
        self._frame_map, self._bias64 = self._collapse()

    @classmethod
    def seeded(cls, shape: Shape, classes: int = 10,
               conv_filters: int = DEFAULT_CONV_FILTERS, seed: int = 0) -> "ToyClassifier":
        """Build a classifier with seeded Gaussian parameters.

        Conv filters and bias use std 0.1. Head weight vectors are drawn in pairs:
        a shared per-pair theme (std 1.2) plus a per-class detail (std 0.1), so
        every class has one confusable partner. That gives random videos both
        confident predictions and a reachable decision boundary inside a small
        perturbation ball, which a plain iid head cannot offer at this scale.
        """
        rng = np.random.default_rng(seed)
        conv = rng.normal(0.0, PARAM_STD, (conv_filters, KERNEL, KERNEL, shape.channels)).astype(np.float32)
        feat_dim = POOL_GRID * POOL_GRID * conv_filters
        themes = rng.normal(0.0, THEME_STD, ((classes + 1) // 2, feat_dim))
        details = rng.normal(0.0, DETAIL_STD, (classes, feat_dim))
        linear = np.empty((feat_dim, classes), dtype=np.float32)
        for c in range(classes):
            linear[:, c] = themes[c // 2] + details[c]
        bias = rng.normal(0.0, PARAM_STD, classes).astype(np.float32)
        return cls(shape, conv, linear, bias, seed=seed)

    def _collapse(self) -> tuple[np.ndarray, np.ndarray]:
        # exact gradient of each logit w.r.t. the frame-mean image, via backprop
        s = self.shape
        rb = grid_bounds(s.height, POOL_GRID)
        cb = grid_bounds(s.width, POOL_GRID)
        conv64 = self.conv.astype(np.float64)
        rows = np.zeros((self.classes, s.frame_size), dtype=np.float64)
        for ci in range(self.classes):
            dz = self.linear[:, ci].astype(np.float64).reshape(POOL_GRID, POOL_GRID, self.conv_filters)
            dconv = np.zeros((1, s.height, s.width, self.conv_filters), dtype=np.float64)
            for a in range(POOL_GRID):
                for b in range(POOL_GRID):
                    size = (rb[a + 1] - rb[a]) * (cb[b + 1] - cb[b])
                    dconv[0, rb[a]:rb[a + 1], cb[b]:cb[b + 1], :] = dz[a, b, :] / size
            rows[ci] = _conv_same_input_grad(dconv, conv64).ravel()
        bias = self.bias.astype(np.float64) - INPUT_CENTER * rows.sum(axis=1)
        return rows, bias

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != self.shape.as_tuple():
            raise ValueError(f"input shape {x.shape} does not match model shape {self.shape.as_tuple()}")
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        mean_frame = x.astype(np.float64, copy=False).mean(axis=0).ravel()
        return self._frame_map @ mean_frame + self._bias64

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities for one video; deterministic, sums to 1."""
        return _softmax(self.logits(x))

    def top1(self, x: np.ndarray) -> tuple[int, float]:
        p = self.forward(x)
        label = int(np.argmax(p))
        return label, float(p[label])

    def adversarial_loss_value(self, x: np.ndarray, goal: AttackGoal) -> float:
        """White-box attack loss: -log p[target] (targeted) or +log p[label] (untargeted)."""
        p = self.forward(x)
        if isinstance(goal, Targeted):
            return float(-np.log(p[goal.target_label]))
        if isinstance(goal, Untargeted):
            return float(np.log(p[goal.label]))
        raise TypeError(f"unsupported goal {goal!r}")

    def input_gradient(self, x: np.ndarray, goal: AttackGoal) -> np.ndarray:
        """Exact gradient of the attack loss w.r.t. the input video."""
        x = self._check_input(x)
        p = self.forward(x)
        if isinstance(goal, Targeted):
            err = p.copy()
            err[goal.target_label] -= 1.0
        elif isinstance(goal, Untargeted):
            err = -p
            err[goal.label] += 1.0
        else:
            raise TypeError(f"unsupported goal {goal!r}")
        per_frame = (self._frame_map.T @ err) / self.shape.frames
        frame = per_frame.reshape(self.shape.height, self.shape.width, self.shape.channels)
        return np.repeat(frame[None, :, :, :], self.shape.frames, axis=0)

    def _forward_layered(self, x: np.ndarray) -> np.ndarray:
        # reference path: explicit center -> conv -> pool -> temporal mean -> linear -> softmax
        x = self._check_input(x).astype(np.float64) - INPUT_CENTER
        conv = _conv_same(x, self.conv.astype(np.float64))
        rb = grid_bounds(self.shape.height, POOL_GRID)
        cb = grid_bounds(self.shape.width, POOL_GRID)
        pooled = np.zeros((self.shape.frames, POOL_GRID, POOL_GRID, self.conv_filters), dtype=np.float64)
        for a in range(POOL_GRID):
            for b in range(POOL_GRID):
                pooled[:, a, b, :] = conv[:, rb[a]:rb[a + 1], cb[b]:cb[b + 1], :].mean(axis=(1, 2))
        z = pooled.mean(axis=0).ravel()
        logits = z @ self.linear.astype(np.float64) + self.bias.astype(np.float64)
        return _softmax(logits)


class FeatureExtractor:
    """One same-padded tanh conv layer over a single frame; the public image model stand-in."""

    def __init__(self, frame_shape: tuple[int, int, int], conv: np.ndarray, seed: int | None = None):
        self.frame_shape = tuple(int(d) for d in frame_shape)
        self.conv = np.asarray(conv, dtype=np.float32)
        self.filters = int(self.conv.shape[0])
        self.seed = seed
        if self.conv.shape != (self.filters, KERNEL, KERNEL, self.frame_shape[2]):
            raise ValueError(f"conv parameter shape {self.conv.shape} inconsistent with frame shape")

    @classmethod
    def seeded(cls, frame_shape: tuple[int, int, int],
               filters: int = DEFAULT_FEAT_FILTERS, seed: int = 0) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        conv = rng.normal(0.0, PARAM_STD, (filters, KERNEL, KERNEL, frame_shape[2])).astype(np.float32)
        return cls(frame_shape, conv, seed=seed)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.frame_shape
        return (h, w, self.filters)

    def _check_frame(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame)
        if frame.shape != self.frame_shape:
            raise ValueError(f"frame shape {frame.shape} does not match {self.frame_shape}")
        return frame

    def features(self, frame: np.ndarray) -> np.ndarray:
        frame = self._check_frame(frame).astype(np.float64)
        return np.tanh(_conv_same(frame[None], self.conv.astype(np.float64))[0])

    def distance_gradient(self, frame: np.ndarray, target_feat: np.ndarray,
                          mask: np.ndarray) -> np.ndarray:
        """Exact gradient w.r.t. the frame of ||mask o features(frame) - mask o target||_2^2."""
        frame = self._check_frame(frame).astype(np.float64)
        target_feat = np.asarray(target_feat, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if target_feat.shape != self.feature_shape or mask.shape != self.feature_shape:
            raise ValueError("target feature map or mask shape does not match extractor output")
        conv64 = self.conv.astype(np.float64)
        feat = np.tanh(_conv_same(frame[None], conv64)[0])
        dfeat = 2.0 * mask * (feat - target_feat)  # binary mask: mask^2 == mask
        dz = dfeat * (1.0 - feat * feat)
        return _conv_same_input_grad(dz[None], conv64)[0]


@dataclass(frozen=True)
class BundleConfig:
    shape: Shape
    classes: int
    conv_filters: int
    feat_filters: int
    seed: int


class ModelBundle:
    """Target classifier plus the three surrogate feature extractors, all from one seed."""

    def __init__(self, config: BundleConfig, classifier: ToyClassifier,
                 surrogates: tuple[FeatureExtractor, ...]):
        self.config = config
        self.classifier = classifier
        self.surrogates = tuple(surrogates)
        if len(self.surrogates) != SURROGATE_COUNT:
            raise ValueError(f"expected {SURROGATE_COUNT} surrogates, got {len(self.surrogates)}")

    @classmethod
    def seeded(cls, shape: Shape, classes: int = 10, conv_filters: int = DEFAULT_CONV_FILTERS,
               feat_filters: int = DEFAULT_FEAT_FILTERS, seed: int = 0) -> "ModelBundle":
        if not (0 <= seed < 2 ** 32):
            raise ValueError("seed must fit an unsigned 32-bit integer")
        config = BundleConfig(shape, classes, conv_filters, feat_filters, seed)
        classifier = ToyClassifier.seeded(shape, classes, conv_filters, seed)
        frame_shape = (shape.height, shape.width, shape.channels)
        surrogates = tuple(
            FeatureExtractor.seeded(frame_shape, feat_filters, seed + SURROGATE_SEED_OFFSET + i)
            for i in range(SURROGATE_COUNT)
        )
        return cls(config, classifier, surrogates)

    def save(self, path) -> None:
        """Write the VBM checkpoint: magic, u32 LE config header, float32 LE parameters."""
        cfg = self.config
        header = VBM_MAGIC + struct.pack(
            "<8I", cfg.classes, cfg.conv_filters, cfg.feat_filters,
            cfg.shape.height, cfg.shape.width, cfg.shape.channels, cfg.shape.frames, cfg.seed,
        )
        parts = [header]
        clf = self.classifier
        for arr in (clf.conv, clf.linear, clf.bias):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for fe in self.surrogates:
            parts.append(np.ascontiguousarray(fe.conv, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "ModelBundle":
        blob = Path(path).read_bytes()
        if blob[:4] != VBM_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {blob[:4]!r})")
        classes, conv_filters, feat_filters, h, w, c, n, seed = struct.unpack_from("<8I", blob, 4)
        shape = Shape(n, h, w, c)
        config = BundleConfig(shape, classes, conv_filters, feat_filters, seed)
        offset = 4 + 32

        def take(count: int, arr_shape: tuple[int, ...]) -> np.ndarray:
            nonlocal offset
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(arr_shape)
            offset += count * 4
            return arr.copy()

        conv = take(conv_filters * KERNEL * KERNEL * c, (conv_filters, KERNEL, KERNEL, c))
        feat_dim = POOL_GRID * POOL_GRID * conv_filters
        linear = take(feat_dim * classes, (feat_dim, classes))
        bias = take(classes, (classes,))
        classifier = ToyClassifier(shape, conv, linear, bias, seed=seed)
        surrogates = []
        for i in range(SURROGATE_COUNT):
            fconv = take(feat_filters * KERNEL * KERNEL * c, (feat_filters, KERNEL, KERNEL, c))
            surrogates.append(FeatureExtractor((h, w, c), fconv, seed=seed + SURROGATE_SEED_OFFSET + i))
        if offset != len(blob):
            raise ValueError(f"{path}: {len(blob) - offset} trailing bytes in checkpoint")
        return cls(config, classifier, tuple(surrogates))
