"""Core raster types, normalization and exact block partitioning.

A depth grid is a plain 2-D float64 ndarray of seafloor depths in meters
(negative below sea level). All functions here are pure and safe to call
concurrently.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidDataError, PartitionError, ShapeError

#: Alias documenting intent; depth grids are bare 2-D float arrays.
DepthGrid = np.ndarray

# Published train-split statistics of the source bathymetry distribution,
# used as a reference normalization when no manifest is available.
REFERENCE_MEAN = -3911.3894
REFERENCE_STD = 1172.8374

MIN_STD = 1e-6


def as_grid(values, name: str = "grid") -> np.ndarray:
    """Validate and coerce to a finite 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidDataError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class NormalizationParams:
    """Two-step normalization: z-score then min-max of the z-scores.

    mean/std are in meters; z_min/z_max bound the z-scored training data.
    """

    mean: float
    std: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not all(np.isfinite([self.mean, self.std, self.z_min, self.z_max])):
            raise InvalidDataError("normalization parameters must be finite")
        if self.std <= 0:
            raise DomainError(f"std must be positive, got {self.std}")
        if self.z_max <= self.z_min:
            raise DomainError(f"z_max ({self.z_max}) must exceed z_min ({self.z_min})")

    @classmethod
    def from_train_values(cls, values: np.ndarray) -> "NormalizationParams":
        """Fit from the pooled training pixels (std floored at MIN_STD)."""
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size == 0:
            raise InvalidDataError("cannot fit normalization to empty data")
        if not np.all(np.isfinite(flat)):
            raise InvalidDataError("training values contain non-finite entries")
        mean = float(flat.mean())
        std = max(float(flat.std()), MIN_STD)
        z = (flat - mean) / std
        z_min = float(z.min())
        z_max = float(z.max())
        if z_max <= z_min:  # constant data: pick a unit z-range around 0
            z_min, z_max = -0.5, 0.5
        return cls(mean=mean, std=std, z_min=z_min, z_max=z_max)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "z_min": self.z_min, "z_max": self.z_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(mean=d["mean"], std=d["std"], z_min=d["z_min"], z_max=d["z_max"])


def normalize(grid: DepthGrid, params: NormalizationParams) -> np.ndarray:
    """Map depths to [0, 1]; values outside the fitted z-range clamp."""
    arr = as_grid(grid)
    z = (arr - params.mean) / params.std
    out = (z - params.z_min) / (params.z_max - params.z_min)
    return np.clip(out, 0.0, 1.0)


def denormalize(grid: np.ndarray, params: NormalizationParams) -> DepthGrid:
    """Inverse of :func:`normalize` for in-range values."""
    arr = as_grid(grid)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError("denormalize expects values in [0, 1]")
    z = arr * (params.z_max - params.z_min) + params.z_min
    return z * params.std + params.mean


@dataclass(frozen=True)
class BlockPartition:
    """Exact tiling of an H x W grid into disjoint k x k blocks."""

    grid_height: int
    grid_width: int
    block_size: int

    def __post_init__(self):
        h, w, k = self.grid_height, self.grid_width, self.block_size
        if h < 1 or w < 1 or k < 1:
            raise PartitionError(f"dimensions and block size must be positive, got ({h}, {w}, {k})")
        if h % k != 0 or w % k != 0:
            raise PartitionError(f"block size {k} does not divide grid {h}x{w} (no padding supported)")

    @property
    def blocks_y(self) -> int:
        return self.grid_height // self.block_size

    @property
    def blocks_x(self) -> int:
        return self.grid_width // self.block_size

    @property
    def n_blocks(self) -> int:
        return self.blocks_y * self.blocks_x

    @property
    def block_area(self) -> int:
        return self.block_size * self.block_size

    def block_index(self, row: int, col: int) -> int:
        """Row-major block index of the block containing pixel (row, col)."""
        return (row // self.block_size) * self.blocks_x + (col // self.block_size)

    def extents(self):
        """Yield (y0, y1, x0, x1) for each block in row-major order."""
        k = self.block_size
        for by in range(self.blocks_y):
            for bx in range(self.blocks_x):
                yield by * k, (by + 1) * k, bx * k, (bx + 1) * k


def partition(height: int, width: int, block_size: int) -> BlockPartition:
    return BlockPartition(grid_height=height, grid_width=width, block_size=block_size)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def block_view(grid: np.ndarray, part: BlockPartition) -> np.ndarray:
    """Reshape to (blocks_y, blocks_x, k, k) without copying."""
    if grid.shape != (part.grid_height, part.grid_width):
        raise ShapeError(f"grid shape {grid.shape} does not match partition "
                         f"({part.grid_height}, {part.grid_width})")
    k = part.block_size
    return grid.reshape(part.blocks_y, k, part.blocks_x, k).swapaxes(1, 2)


def block_mean_abs(truth: np.ndarray, pred: np.ndarray, part: BlockPartition) -> np.ndarray:
    """Per-block mean absolute error, shape (blocks_y, blocks_x)."""
    _check_same_shape(truth, pred)
    diff = np.abs(np.asarray(truth, dtype=np.float64) - np.asarray(pred, dtype=np.float64))
    return block_view(diff, part).mean(axis=(2, 3))


def block_mean_sq(truth: np.ndarray, pred: np.ndarray, part: BlockPartition) -> np.ndarray:
    """Per-block mean squared error, shape (blocks_y, blocks_x)."""
    _check_same_shape(truth, pred)
    diff = np.asarray(truth, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    return block_view(diff * diff, part).mean(axis=(2, 3))


def block_mse_decomposition(truth: DepthGrid, pred: DepthGrid, part: BlockPartition):
    """Global MSE and its exact per-block decomposition.

    The area-weighted mean of per-block MSEs reproduces the global MSE up
    to float64 rounding: sum_i (|b_i| / HW) * mse_i == mse_global.
    Returns (global_mse, per_block) with per_block shaped
    (blocks_y, blocks_x) in row-major block order.
    """
    t = as_grid(truth, "truth")
    p = as_grid(pred, "pred")
    _check_same_shape(t, p)
    per_block = block_mean_sq(t, p, part)
    diff = t - p
    global_mse = float(np.mean(diff * diff))
    return global_mse, per_block


@dataclass(frozen=True)
class TilePair:
    """Aligned low-resolution input and high-resolution target tile."""

    lr: np.ndarray
    hr: np.ndarray
    region: str
    scale: int

    def __post_init__(self):
        lr = as_grid(self.lr, "lr")
        hr = as_grid(self.hr, "hr")
        if self.scale < 1:
            raise DomainError(f"scale must be >= 1, got {self.scale}")
        if hr.shape != (lr.shape[0] * self.scale, lr.shape[1] * self.scale):
            raise ShapeError(f"hr shape {hr.shape} is not lr {lr.shape} scaled by {self.scale}")
        object.__setattr__(self, "lr", lr)
        object.__setattr__(self, "hr", hr)
