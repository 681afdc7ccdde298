"""Patch bases over tentative perturbations, and rectification on top of them.

A tentative perturbation is split into patches; each patch contributes one
sparse unit-norm direction vector carrying the tentative values on its support.
Because supports are disjoint the basis is orthonormal, rectification is a
weighted sum of directions, and projecting a gradient onto the basis is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Shape, grid_bounds

UNIFORM = "uniform"
RANDOM = "random"
PER_PIXEL = "pixel"


@dataclass(frozen=True)
class PartitionSpec:
    """How to split the input index space into patches."""

    method: str
    grid: tuple[int, int] = (8, 8)
    patches: int = 0

    def __post_init__(self) -> None:
        if self.method not in (UNIFORM, RANDOM, PER_PIXEL):
            raise ValueError(f"unknown partition method {self.method!r}")
        if self.method == UNIFORM and (self.grid[0] < 1 or self.grid[1] < 1):
            raise ValueError(f"bad uniform grid {self.grid}")
        if self.method == RANDOM and self.patches < 1:
            raise ValueError("random partitioning needs a positive patch count")

    @staticmethod
    def uniform(rows: int, cols: int) -> "PartitionSpec":
        return PartitionSpec(UNIFORM, grid=(rows, cols))

    @staticmethod
    def random(patches: int) -> "PartitionSpec":
        return PartitionSpec(RANDOM, patches=patches)

    @staticmethod
    def per_pixel() -> "PartitionSpec":
        return PartitionSpec(PER_PIXEL)


class PatchBasis:
    """Sparse orthonormal patch directions (CSR-style storage), immutable after build.

    Patches whose tentative restriction is all zero stay in the basis as
    degenerate zero vectors so the patch count is stable across steps.
    """

    def __init__(self, shape: Shape, ptr: np.ndarray, indices: np.ndarray,
                 values: np.ndarray, degenerate: np.ndarray):
        self.shape = shape
        self.ptr = ptr
        self.indices = indices
        self.values = values
        self.degenerate = degenerate
        self.patch_count = len(ptr) - 1
        self.patch_of_index = np.repeat(np.arange(self.patch_count, dtype=np.int64),
                                        np.diff(ptr))

    @property
    def M(self) -> int:
        return self.patch_count

    def patch_support(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and unit-vector values of patch m (flat index space)."""
        sl = slice(self.ptr[m], self.ptr[m + 1])
        return self.indices[sl], self.values[sl]

    def dense_direction(self, m: int) -> np.ndarray:
        out = np.zeros(self.shape.size, dtype=np.float64)
        idx, vals = self.patch_support(m)
        out[idx] = vals
        return out.reshape(self.shape.as_tuple())


def _patch_ids_uniform(shape: Shape, grid: tuple[int, int]) -> np.ndarray:
    rows, cols = grid
    rb = grid_bounds(shape.height, rows)
    cb = grid_bounds(shape.width, cols)
    row_block = np.searchsorted(rb, np.arange(shape.height), side="right") - 1
    col_block = np.searchsorted(cb, np.arange(shape.width), side="right") - 1
    frame_ids = np.arange(shape.frames)[:, None, None]
    cell = row_block[None, :, None] * cols + col_block[None, None, :]
    ids = frame_ids * (rows * cols) + cell  # (N, H, W), frame-major then grid-row-major
    return np.repeat(ids[:, :, :, None], shape.channels, axis=3).ravel()


def build_basis(h: np.ndarray, spec: PartitionSpec, rng: np.random.Generator | None = None) -> PatchBasis:
    """Partition the tentative perturbation h into unit-norm patch directions.

    Random partitioning redraws the index assignment from rng on every call;
    uniform and per-pixel partitionings are deterministic.
    """
    shape = Shape.of(np.asarray(h))
    flat = np.asarray(h, dtype=np.float64).ravel()
    size = shape.size
    if spec.method == UNIFORM:
        patch_ids = _patch_ids_uniform(shape, spec.grid)
        count = shape.frames * spec.grid[0] * spec.grid[1]
    elif spec.method == RANDOM:
        if rng is None:
            raise ValueError("random partitioning requires an rng")
        count = spec.patches
        perm = rng.permutation(size)
        splits = (np.arange(count + 1, dtype=np.int64) * size) // count
        patch_ids = np.empty(size, dtype=np.int64)
        for m in range(count):
            patch_ids[perm[splits[m]:splits[m + 1]]] = m
    else:  # per pixel
        patch_ids = np.arange(size, dtype=np.int64)
        count = size

    support = np.flatnonzero(flat)
    ids = patch_ids[support]
    order = np.argsort(ids, kind="stable")
    indices = support[order]
    ids_sorted = ids[order]
    raw = flat[indices]
    sq_norms = np.bincount(ids_sorted, weights=raw * raw, minlength=count)
    norms = np.sqrt(sq_norms)
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    values = raw / safe[ids_sorted]
    counts = np.bincount(ids_sorted, minlength=count)
    ptr = np.zeros(count + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return PatchBasis(shape, ptr, indices.astype(np.int64), values, degenerate)


def rectify(v: np.ndarray, basis: PatchBasis) -> np.ndarray:
    """Weighted sum of patch directions: linear in v, supported on the patch supports."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (basis.patch_count,):
        raise ValueError(f"weight vector length {v.shape} does not match patch count {basis.patch_count}")
    out = np.zeros(basis.shape.size, dtype=np.float64)
    out[basis.indices] = basis.values * v[basis.patch_of_index]
    return out.reshape(basis.shape.as_tuple())


def project_onto_basis(g: np.ndarray, basis: PatchBasis) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal projection of g onto the patch subspace.

    Returns the per-patch coefficients <u_m, g> (directional derivative weights)
    and the projected tensor; exact because the patch directions are orthonormal.
    """
    g = np.asarray(g)
    if g.shape != basis.shape.as_tuple():
        raise ValueError(f"tensor shape {g.shape} does not match basis shape {basis.shape.as_tuple()}")
    flat = g.astype(np.float64, copy=False).ravel()
    weights = np.bincount(basis.patch_of_index, weights=basis.values * flat[basis.indices],
                          minlength=basis.patch_count)
    return weights, rectify(weights, basis)
