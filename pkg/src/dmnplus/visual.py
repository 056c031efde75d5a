"""Image input path over precomputed CNN feature grids.

Grid file layout (little-endian): the magic bytes ``FGRD``, three uint32
values H, W, C, then H*W*C float32 values in (row, col, channel) order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeError
from .fusion import FactSequence, FusionLayer, fuse
from .nn import ParamBundle, init_weights, param

MAGIC = b"FGRD"
_HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureGrid:
    values: np.ndarray  # H x W x C

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"feature grid must be H x W x C with all sizes >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise FormatError("feature grid contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def patches(self) -> np.ndarray:
        """Patch vectors in snake order, shape ``[H*W, C]``."""
        order = snake_order(self.height, self.width)
        rows, cols = zip(*order)
        return self.values[list(rows), list(cols)]


def save_feature_grid(path: str | Path, grid: FeatureGrid | np.ndarray) -> None:
    values = grid.values if isinstance(grid, FeatureGrid) else np.asarray(grid)
    H, W, C = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, H, W, C))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_feature_grid(path: str | Path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(raw)} bytes)")
    magic, H, W, C = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(H, W, C) < 1:
        raise FormatError(f"{path}: header declares empty grid {H}x{W}x{C}")
    expected = H * W * C * 4
    payload = len(raw) - _HEADER.size
    if payload != expected:
        raise FormatError(f"{path}: size mismatch, header {H}x{W}x{C} needs {expected} "
                          f"payload bytes, found {payload}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(H, W, C)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite feature values")
    return FeatureGrid(values.astype(np.float64))


def snake_order(H: int, W: int) -> list[tuple[int, int]]:
    """Boustrophedon traversal from the top-left corner, first row left to right."""
    if H < 1 or W < 1:
        raise ValueError("snake_order needs H, W >= 1")
    order = []
    for r in range(H):
        cols = range(W) if r % 2 == 0 else range(W - 1, -1, -1)
        order.extend((r, c) for c in cols)
    return order


def snake_position(index: int, H: int, W: int) -> tuple[int, int]:
    """Inverse of :func:`snake_order`: grid cell of the ``index``-th fact."""
    if not 0 <= index < H * W:
        raise IndexError(f"fact index {index} outside a {H}x{W} grid")
    r, k = divmod(index, W)
    return (r, k) if r % 2 == 0 else (r, W - 1 - k)


@dataclass
class VisualProjection(ParamBundle):
    W_p: Tensor  # D x C
    b_p: Tensor

    @classmethod
    def create(cls, channels: int, dim: int, rng: np.random.Generator) -> VisualProjection:
        return cls(param(init_weights("xavier_uniform", (dim, channels), rng), "W_p"),
                   param(np.zeros(dim), "b_p"))


def project_patches(patches: FeatureGrid | Tensor, proj: VisualProjection) -> Tensor:
    """tanh(W_p v + b_p) for every patch, in snake order -> ``[..., N, D]``."""
    if isinstance(patches, FeatureGrid):
        patches = ad.const(patches.patches())
    if patches.shape[-1] != proj.W_p.shape[1]:
        raise ShapeError(f"patches have {patches.shape[-1]} channels, projection expects {proj.W_p.shape[1]}")
    return ad.tanh(ad.add_bias(ad.matvec(proj.W_p, patches), proj.b_p))


def visual_facts(grid: FeatureGrid, proj: VisualProjection, layer: FusionLayer) -> FactSequence:
    return fuse(layer, project_patches(grid, proj))
