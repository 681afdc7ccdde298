"""Dense video tensors and the small geometric primitives shared by the attack stack.

Videos are plain numpy arrays of shape (frames, height, width, channels), stored
row-major as 32-bit floats. Model inputs live in [0, 1]; sign perturbations take
values in {-1, 0, 1}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VTF_MAGIC = b"VBT1"


@dataclass(frozen=True)
class Shape:
    """Video geometry: frame count, frame height, frame width, channel count."""

    frames: int
    height: int
    width: int
    channels: int

    def __post_init__(self) -> None:
        for name in ("frames", "height", "width", "channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def size(self) -> int:
        return self.frames * self.height * self.width * self.channels

    @property
    def frame_size(self) -> int:
        return self.height * self.width * self.channels

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    @classmethod
    def of(cls, array: np.ndarray) -> "Shape":
        if array.ndim != 4:
            raise ValueError(f"expected a rank-4 video tensor, got ndim={array.ndim}")
        return cls(*(int(d) for d in array.shape))


def sign_of(t: np.ndarray) -> np.ndarray:
    """Three-valued elementwise sign; sign(0) stays 0."""
    return np.sign(t)


def _bound(t: np.ndarray, bound, name: str) -> np.ndarray:
    arr = np.asarray(bound, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    if arr.shape != t.shape:
        raise ValueError(f"{name} shape {arr.shape} does not match tensor shape {t.shape}")
    return arr


def clip_box(t: np.ndarray, lo, hi) -> np.ndarray:
    """Clamp t elementwise into [lo, hi] intersected with the valid input range [0, 1].

    lo and hi may be scalars or tensors matching t's shape; lo must not exceed hi
    anywhere. The [0, 1] intersection is always applied because model inputs are
    normalized.
    """
    t = np.asarray(t)
    lo_a = _bound(t, lo, "lo")
    hi_a = _bound(t, hi, "hi")
    if np.any(lo_a > hi_a):
        raise ValueError("lo exceeds hi at one or more indices")
    out = np.minimum(np.maximum(t.astype(np.float64, copy=False), lo_a), hi_a)
    out = np.clip(out, 0.0, 1.0)
    return out.astype(t.dtype, copy=False)


def cosine_similarity(a: np.ndarray, b: np.ndarray, with_flag: bool = False):
    """Cosine of the angle between two equally shaped tensors, in [-1, 1].

    Returns 0.0 for a zero-norm argument; pass with_flag=True to also get a
    boolean marking that degenerate case.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    av = a.ravel().astype(np.float64)
    bv = b.ravel().astype(np.float64)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        value, degenerate = 0.0, True
    else:
        value = float(np.dot(av, bv) / (na * nb))
        value = min(1.0, max(-1.0, value))
        degenerate = False
    if with_flag:
        return value, degenerate
    return value


def grid_bounds(total: int, parts: int) -> np.ndarray:
    """Split [0, total) into `parts` contiguous blocks; the last block absorbs any remainder."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if parts > total:
        raise ValueError(f"cannot split {total} positions into {parts} blocks")
    base = total // parts
    bounds = np.arange(parts + 1, dtype=np.int64) * base
    bounds[-1] = total
    return bounds


def write_vtf(path, video: np.ndarray) -> None:
    """Write a video tensor to a VTF file (magic, u32 LE dims, float32 LE data)."""
    video = np.ascontiguousarray(video, dtype="<f4")
    if video.ndim != 4:
        raise ValueError(f"expected a rank-4 video tensor, got ndim={video.ndim}")
    header = VTF_MAGIC + struct.pack("<4I", *video.shape)
    Path(path).write_bytes(header + video.tobytes())


def read_vtf(path) -> np.ndarray:
    """Read a VTF file back into a float32 video tensor; bit-exact round trip."""
    blob = Path(path).read_bytes()
    if blob[:4] != VTF_MAGIC:
        raise ValueError(f"{path}: not a VTF file (bad magic {blob[:4]!r})")
    n, h, w, c = struct.unpack_from("<4I", blob, 4)
    expected = 20 + n * h * w * c * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape ({n},{h},{w},{c}), got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=20)
    return data.reshape(n, h, w, c).copy()
