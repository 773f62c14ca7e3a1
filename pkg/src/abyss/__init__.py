"""Uncertainty-aware bathymetric super-resolution toolkit."""

__version__ = "0.1.0"

from .grid import (BlockPartition, DepthGrid, NormalizationParams, TilePair,
                   block_mse_decomposition, denormalize, normalize, partition)
from .interp import InterpMethod, upsample
from .metrics import (MetricsRow, calibration_error, coverage, mae, mse, psnr,
                      ssim, uncertainty_width)
from .synth import (DatasetManifest, SyntheticSpec, build_manifest, degrade,
                    generate_bathymetry, load_ascii_grid)
from .tracker import (TrackerConfig, TrackerState, block_size_mse,
                      block_size_total_error, estimate_lambda,
                      optimal_block_size)

__all__ = [
    "__version__",
    "BlockPartition", "DepthGrid", "NormalizationParams", "TilePair",
    "block_mse_decomposition", "denormalize", "normalize", "partition",
    "InterpMethod", "upsample",
    "MetricsRow", "calibration_error", "coverage", "mae", "mse", "psnr",
    "ssim", "uncertainty_width",
    "DatasetManifest", "SyntheticSpec", "build_manifest", "degrade",
    "generate_bathymetry", "load_ascii_grid",
    "TrackerConfig", "TrackerState", "block_size_mse",
    "block_size_total_error", "estimate_lambda", "optimal_block_size",
]
