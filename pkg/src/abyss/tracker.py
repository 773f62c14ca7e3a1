"""Block-based uncertainty tracking, scoring and interval calibration.

The tracker partitions each HR tile into fixed k x k spatial blocks and, for
every block position, maintains an exponential moving average of the block's
reconstruction error together with a bounded ring buffer of recent block
errors. A block error is the mean absolute difference between truth and
prediction over the block, in normalized depth units.

Uncertainty scores normalize the current block error by a quantile of that
block's error history; calibration turns a held-out pass into per-block
interval half-widths via nearest-rank quantiles of the observed block
errors, so "covered" is a block-level event: a block is inside its interval
when its observed error does not exceed the calibrated half-width.

Block state is stored as parallel arrays indexed (block_row, block_col);
updates are single-writer, queries are read-only.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, DomainError, ShapeError, StateError
from .grid import BlockPartition, as_grid, block_mean_abs, partition


@dataclass(frozen=True)
class TrackerConfig:
    block_size: int = 4
    decay: float = 0.99
    epsilon: float = 1e-8
    score_quantile: float = 0.9
    nominal_confidence: float = 0.9
    buffer_capacity: int = 1024
    min_history: int = 32
    weight_clamp: tuple = (0.1, 10.0)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise DomainError(f"decay must be in (0, 1), got {self.decay}")
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if not 0.0 < self.score_quantile < 1.0:
            raise DomainError("score_quantile must be in (0, 1)")
        if not 0.0 < self.nominal_confidence < 1.0:
            raise DomainError("nominal_confidence must be in (0, 1)")
        if self.buffer_capacity < 1 or self.min_history < 1:
            raise DomainError("buffer_capacity and min_history must be >= 1")
        lo, hi = self.weight_clamp
        if not lo <= 1.0 <= hi:
            raise DomainError(f"weight clamp {self.weight_clamp} must bracket 1")

    def to_dict(self) -> dict:
        return {
            "block_size": self.block_size,
            "decay": self.decay,
            "epsilon": self.epsilon,
            "score_quantile": self.score_quantile,
            "nominal_confidence": self.nominal_confidence,
            "buffer_capacity": self.buffer_capacity,
            "min_history": self.min_history,
            "weight_clamp": list(self.weight_clamp),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        d = dict(d)
        if "weight_clamp" in d:
            d["weight_clamp"] = tuple(d["weight_clamp"])
        return cls(**d)


def nearest_rank_quantile(values: np.ndarray, q: float, axis: int = -1) -> np.ndarray:
    """ceil(q * n)-th order statistic (1-indexed) along an axis."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis]
    if n == 0:
        raise DomainError("quantile of empty sample")
    rank = max(1, math.ceil(q * n))
    return np.sort(values, axis=axis).take(rank - 1, axis=axis)


class TrackerState:
    """Per-block EMA error tracking with quantile calibration."""

    def __init__(self, tile_shape: tuple, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        h, w = int(tile_shape[0]), int(tile_shape[1])
        self.part: BlockPartition = partition(h, w, self.config.block_size)
        nby, nbx = self.part.blocks_y, self.part.blocks_x
        self.ema = np.zeros((nby, nbx), dtype=np.float64)
        self.count = np.zeros((nby, nbx), dtype=np.int64)
        self._hist = np.zeros((nby, nbx, self.config.buffer_capacity), dtype=np.float64)
        self._hist_len = 0
        self._hist_pos = 0
        self.half_width: np.ndarray | None = None
        self.block_mean: np.ndarray | None = None
        self.block_std: np.ndarray | None = None

    # -- error tracking -----------------------------------------------------

    @property
    def updated(self) -> bool:
        return self._hist_len > 0

    def block_errors(self, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
        t = as_grid(truth, "truth")
        p = as_grid(pred, "pred")
        if t.shape != (self.part.grid_height, self.part.grid_width):
            raise ShapeError(f"tile shape {t.shape} does not match tracker "
                             f"({self.part.grid_height}, {self.part.grid_width})")
        return block_mean_abs(t, p, self.part)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
        """Fold one (truth, pred) pair into the EMA and the error history.

        The first update seeds the EMA with the observed error instead of
        decaying from zero. Returns the per-block error grid.
        """
        err = self.block_errors(truth, pred)
        a = self.config.decay
        if self._hist_len == 0:
            self.ema[:] = err
        else:
            self.ema *= a
            self.ema += (1.0 - a) * err
        self._hist[:, :, self._hist_pos] = err
        self._hist_pos = (self._hist_pos + 1) % self.config.buffer_capacity
        self._hist_len = min(self._hist_len + 1, self.config.buffer_capacity)
        self.count += 1
        return err

    def history_quantile(self, q: float) -> np.ndarray:
        """Nearest-rank quantile of each block's buffered errors."""
        if self._hist_len == 0:
            raise StateError("tracker has no recorded errors yet")
        return nearest_rank_quantile(self._hist[:, :, : self._hist_len], q, axis=-1)

    def uncertainty_scores(self, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
        """Current block errors normalized by historical error quantiles.

        U_i = err_i / (Q_i + eps) where Q_i is the score-quantile of block
        i's history; blocks with fewer than min_history entries fall back
        to the EMA as the normalizer. Unclamped.
        """
        if self._hist_len == 0:
            raise StateError("uncertainty_scores requires at least one update")
        err = self.block_errors(truth, pred)
        if self._hist_len >= self.config.min_history:
            ref = self.history_quantile(self.config.score_quantile)
        else:
            ref = self.ema
        return err / (ref + self.config.epsilon)

    def clamp_weights(self, scores: np.ndarray) -> np.ndarray:
        lo, hi = self.config.weight_clamp
        return np.clip(scores, lo, hi)

    def loss_weights(self, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
        return self.clamp_weights(self.uncertainty_scores(truth, pred))

    # -- calibration and bounds ---------------------------------------------

    def calibrate(self, calibration_pairs) -> "TrackerState":
        """Set per-block interval half-widths from a held-out pass.

        Each pair contributes one conformity score per block (the block's
        mean absolute error); the half-width is the nearest-rank
        nominal-confidence quantile of those scores. Recalibrating replaces
        the previous widths.
        """
        errors = [self.block_errors(t, p) for t, p in calibration_pairs]
        n = len(errors)
        if n < self.config.min_history:
            deficient = [(by, bx) for by in range(self.part.blocks_y)
                         for bx in range(self.part.blocks_x)]
            raise CalibrationError(
                f"calibration needs at least {self.config.min_history} pairs, got {n}; "
                f"all {len(deficient)} blocks deficient", deficient_blocks=deficient)
        stack = np.stack(errors, axis=0)
        self.half_width = nearest_rank_quantile(stack, self.config.nominal_confidence, axis=0)
        self.block_mean = stack.mean(axis=0)
        self.block_std = stack.std(axis=0)
        return self

    @property
    def calibrated(self) -> bool:
        return self.half_width is not None

    def expand_to_pixels(self, per_block: np.ndarray) -> np.ndarray:
        k = self.config.block_size
        return np.kron(per_block, np.ones((k, k), dtype=np.float64))

    def bounds(self, pred: np.ndarray):
        """Per-pixel (lower, upper) bounds, piecewise constant per block."""
        if not self.calibrated:
            raise StateError("tracker is not calibrated; run calibrate() first")
        p = as_grid(pred, "pred")
        if p.shape != (self.part.grid_height, self.part.grid_width):
            raise ShapeError(f"pred shape {p.shape} does not match tracker tile")
        width = self.expand_to_pixels(self.half_width)
        return p - width, p + width

    def block_coverage(self, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
        """Boolean per-block coverage: block error within the half-width."""
        if not self.calibrated:
            raise StateError("tracker is not calibrated; run calibrate() first")
        return self.block_errors(truth, pred) <= self.half_width

    # -- serialization (history intentionally omitted) -----------------------

    def to_dict(self) -> dict:
        def opt(a):
            return None if a is None else a.tolist()

        return {
            "config": self.config.to_dict(),
            "tile_shape": [self.part.grid_height, self.part.grid_width],
            "ema": self.ema.tolist(),
            "count": self.count.tolist(),
            "half_width": opt(self.half_width),
            "block_mean": opt(self.block_mean),
            "block_std": opt(self.block_std),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerState":
        state = cls(tuple(d["tile_shape"]), TrackerConfig.from_dict(d["config"]))
        state.ema = np.asarray(d["ema"], dtype=np.float64)
        state.count = np.asarray(d["count"], dtype=np.int64)
        for name in ("half_width", "block_mean", "block_std"):
            val = d.get(name)
            setattr(state, name, None if val is None else np.asarray(val, dtype=np.float64))
        # history is not serialized; scores fall back to the EMA until refilled
        state._hist_len = 0
        state._hist_pos = 0
        return state

    @classmethod
    def from_json(cls, text: str) -> "TrackerState":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# block-size trade-off analysis
# ---------------------------------------------------------------------------


def _check_positive(**kwargs):
    for name, v in kwargs.items():
        if not v > 0:
            raise DomainError(f"{name} must be positive, got {v}")


def block_size_mse(sigma2: float, lam: float, k: float) -> float:
    """Noise-vs-structure trade-off with quadratic structural term:
    sigma2 / k**2 + (lam * k)**2."""
    _check_positive(sigma2=sigma2, lam=lam, k=k)
    return sigma2 / (k * k) + (lam * k) ** 2


def block_size_total_error(sigma2: float, lam: float, k: float) -> float:
    """Linear-variant trade-off: sigma2 / k**2 + lam * k."""
    _check_positive(sigma2=sigma2, lam=lam, k=k)
    return sigma2 / (k * k) + lam * k


def optimal_block_size(sigma2: float, lam: float) -> float:
    """Closed-form optimum (sigma2 / (2 * lam**2)) ** 0.25.

    Note: the stationary point of block_size_mse is (sigma2 / lam**2) ** 0.25,
    i.e. this closed form times 2 ** -0.25; reports record both values.
    """
    _check_positive(sigma2=sigma2, lam=lam)
    return (sigma2 / (2.0 * lam * lam)) ** 0.25


def block_size_mse_argmin(sigma2: float, lam: float) -> float:
    """Stationary point of block_size_mse: (sigma2 / lam**2) ** 0.25."""
    _check_positive(sigma2=sigma2, lam=lam)
    return (sigma2 / (lam * lam)) ** 0.25


def estimate_lambda(grid: np.ndarray, cellsize: float = 1.0) -> float:
    """Mean absolute gradient magnitude per unit distance.

    Central differences in the interior, one-sided at the edges, magnitude
    sqrt(gx**2 + gy**2), averaged over the grid and divided by cellsize.
    """
    arr = as_grid(grid)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ShapeError(f"gradient needs at least 2x2, got {arr.shape}")
    _check_positive(cellsize=cellsize)
    gy, gx = np.gradient(arr)
    mag = np.sqrt(gx * gx + gy * gy)
    return float(mag.mean() / cellsize)
