"""Training loop with tracker-in-the-loop weighting, calibration pass,
evaluation harness, block-size sweep and report/heatmap emission.

Depth tiles are normalized to [0, 1] with the manifest's parameters before
they touch a model or a metric; interpolation baselines run on the
normalized LR tile and clip any overshoot back into [0, 1].

CalErr for tracker-backed methods is block-level: one observation per
(validation tile, block position), counted as covered when the block's
mean absolute error is within the calibrated half-width. UWidth is the
pixel mean of (upper - lower). Both definitions are recorded in report
metadata.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E
from . import interp, metrics
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .grid import NormalizationParams, normalize
from .models import total_loss
from .tracker import TrackerConfig, TrackerState

log = logging.getLogger("abyss")

INTERP_METHODS = ("nearest", "bilinear", "bicubic")
MODEL_METHODS = ("ua_vqvae", "ua_srcnn")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    step_size: float = 1e-3
    seed: int = 7
    calib_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if not 0.0 < self.calib_fraction < 1.0:
            raise ConfigError("calib_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "step_size": self.step_size, "seed": self.seed,
                "calib_fraction": self.calib_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def normalized_stack(pairs, params: NormalizationParams, dtype=np.float32):
    """Normalize tile pairs into (lr, hr) arrays shaped (N, 1, h, w)."""
    lr = np.stack([normalize(p.lr, params) for p in pairs])[:, None].astype(dtype)
    hr = np.stack([normalize(p.hr, params) for p in pairs])[:, None].astype(dtype)
    return lr, hr


def split_train_calib(pairs, fraction: float):
    """Hold out the trailing fraction of each region's training tiles.

    Training tiles arrive grouped by region, so the holdout is stratified:
    a global tail would skew calibration toward the last regions.
    """
    by_region: dict = {}
    for pair in pairs:
        by_region.setdefault(pair.region, []).append(pair)
    train_out, calib_out = [], []
    for region_pairs in by_region.values():
        n_calib = max(1, int(round(len(region_pairs) * fraction)))
        if n_calib >= len(region_pairs):
            raise ConfigError(f"calibration fraction {fraction} leaves no training tiles")
        train_out.extend(region_pairs[:-n_calib])
        calib_out.extend(region_pairs[-n_calib:])
    return train_out, calib_out


@dataclass
class TrainResult:
    model: object
    tracker: TrackerState
    loss_trace: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)


def train(model, train_lr: np.ndarray, train_hr: np.ndarray, tracker: TrackerState,
          cfg: TrainConfig, on_epoch_end=None) -> TrainResult:
    """Uncertainty-weighted training.

    Per step: forward, per-sample block errors fold into the tracker (in
    batch order), clamped uncertainty scores weight the reconstruction
    loss, then backward and one Adam step. The tracker persists across
    epochs. Fully deterministic for a fixed config and seed.
    """
    n = train_lr.shape[0]
    if train_hr.shape[0] != n:
        raise ShapeError("lr/hr tile counts differ")
    rng = np.random.default_rng(cfg.seed)
    is_vqvae = model.config.kind == "ua_vqvae"
    # codebook entries must track the drifting encoder outputs much faster
    # than the conv weights move, or quantization error runs away
    lr_scale = {"codebook": 25.0} if is_vqvae else None
    opt = E.Adam(model.params, lr=cfg.step_size, lr_scale=lr_scale)
    result = TrainResult(model=model, tracker=tracker)
    block = tracker.config.block_size
    step = 0
    for epoch in range(cfg.epochs):
        # cosine decay to a 5% floor settles the late-training oscillation
        frac = epoch / max(cfg.epochs - 1, 1)
        opt.lr = cfg.step_size * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = rng.permutation(n)
        epoch_losses = []
        epoch_usage = None
        last_latents = None
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = np.ascontiguousarray(train_lr[idx])
            yb = np.ascontiguousarray(train_hr[idx])
            if is_vqvae:
                pred, z, _, _, l_vq, l_div, usage = model.forward(xb)
                epoch_usage = usage if epoch_usage is None else epoch_usage + usage
                last_latents = z.data
            else:
                pred = model.forward(xb)
                l_vq = l_div = None
            pred_np = pred.data.astype(np.float64)
            if not np.all(np.isfinite(pred_np)):
                raise TrainingDivergedError(
                    f"non-finite prediction at step {step} (epoch {epoch})",
                    step=step, ema_snapshot=tracker.ema.copy())
            weights = np.empty((len(idx), tracker.part.blocks_y, tracker.part.blocks_x))
            for i in range(len(idx)):
                tracker.update(yb[i, 0].astype(np.float64), pred_np[i, 0])
            for i in range(len(idx)):
                weights[i] = tracker.loss_weights(yb[i, 0].astype(np.float64), pred_np[i, 0])
            loss, parts = total_loss(pred, yb, weights, l_vq, l_div, model.config, block)
            if not np.isfinite(parts["total"]):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch})",
                    step=step, ema_snapshot=tracker.ema.copy())
            opt.zero_grad()
            loss.backward()
            opt.step()
            parts.update(step=step, epoch=epoch)
            result.loss_trace.append(parts)
            epoch_losses.append(parts["total"])
            step += 1
        if is_vqvae and epoch_usage is not None:
            _reinit_dead_codes(model, opt, epoch_usage, last_latents, rng)
        result.epoch_means.append(float(np.mean(epoch_losses)))
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, cfg.epochs, result.epoch_means[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, tracker, result)
    return result


def _reinit_dead_codes(model, opt, usage: np.ndarray, latents: np.ndarray, rng) -> None:
    """Reassign never-used codebook entries to recent encoder outputs."""
    dead = np.flatnonzero(usage == 0)
    if dead.size == 0:
        return
    flat = latents.transpose(0, 2, 3, 1).reshape(-1, latents.shape[1])
    picks = rng.integers(0, flat.shape[0], size=dead.size)
    book = model.params["codebook"]
    book.data[dead] = flat[picks].astype(book.data.dtype)
    opt.reset_moments("codebook", rows=dead)
    log.debug("reinitialized %d dead codebook entries", dead.size)


def predict_batches(model, lr: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = []
    for start in range(0, lr.shape[0], batch_size):
        out.append(model.predict(lr[start:start + batch_size]))
    return np.concatenate(out, axis=0)


def run_calibration(model, tracker: TrackerState, calib_lr: np.ndarray,
                    calib_hr: np.ndarray, batch_size: int = 16) -> TrackerState:
    """Calibrate interval half-widths on held-out (truth, prediction) pairs."""
    preds = predict_batches(model, calib_lr, batch_size)
    pairs = [(calib_hr[i, 0].astype(np.float64), preds[i, 0].astype(np.float64))
             for i in range(calib_lr.shape[0])]
    return tracker.calibrate(pairs)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    CSV_COLUMNS = ("region", "method", "block_size", "ssim", "psnr_db", "mse", "mae",
                   "uwidth", "cal_err")

    def to_csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.12g}"
            return str(v)

        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(fmt(v) for v in (
                r.region, r.label, r.block_size, r.ssim, r.psnr_db, r.mse, r.mae,
                r.uwidth, r.cal_err)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != ",".join(cls.CSV_COLUMNS):
            raise ConfigError("unrecognized report CSV header")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            region, method, block_size = parts[0], parts[1], parts[2]
            nums = [None if p == "" else float(p) for p in parts[3:9]]
            rows.append(metrics.MetricsRow(
                label=method, region=region,
                block_size=None if block_size == "" else int(block_size),
                ssim=nums[0], psnr_db=nums[1], mse=nums[2], mae=nums[3],
                uwidth=nums[4], cal_err=nums[5]))
        return cls(rows=rows)

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            rows.append({"region": r.region, "method": r.label, "block_size": r.block_size,
                         "ssim": r.ssim, "psnr_db": r.psnr_db, "mse": r.mse, "mae": r.mae,
                         "uwidth": r.uwidth, "cal_err": r.cal_err,
                         "tile_count": r.tile_count})
        return json.dumps({"rows": rows, "metadata": self.metadata}, indent=2, sort_keys=True,
                          default=str)


def _predict_tile(predictor, lr_norm: np.ndarray, scale: int) -> np.ndarray:
    if isinstance(predictor, (str, interp.InterpMethod)):
        up = interp.upsample(lr_norm, scale, predictor)
        return np.clip(up, 0.0, 1.0)
    return predictor.predict(lr_norm[None, None].astype(np.float32))[0, 0].astype(np.float64)


def _method_label(predictor) -> str:
    if isinstance(predictor, interp.InterpMethod):
        return predictor.value
    if isinstance(predictor, str):
        return predictor
    return predictor.config.kind


def _weighted_mean(values, weights):
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return float((values * weights).sum() / weights.sum())


def evaluate(predictor, val_pairs, normalization: NormalizationParams,
             tracker: TrackerState | None = None, label: str | None = None,
             block_size: int | None = None) -> MetricsReport:
    """Per-region and overall metrics for one method.

    predictor is an interpolation method name or a trained model.
    Uncertainty columns (UWidth, CalErr) are filled only when a calibrated
    tracker is supplied; interpolation rows leave them empty. The overall
    row is the tile-count-weighted mean of the per-region rows.
    """
    label = label or _method_label(predictor)
    if block_size is None and tracker is not None:
        block_size = tracker.config.block_size
    by_region: dict = {}
    for pair in val_pairs:
        by_region.setdefault(pair.region, []).append(pair)

    region_rows = []
    for region, pairs in by_region.items():
        if not pairs:
            log.warning("region %s has no validation tiles; skipped", region)
            continue
        vals = {"ssim": [], "psnr": [], "mse": [], "mae": [], "uwidth": []}
        covered = 0
        blocks_seen = 0
        for pair in pairs:
            truth = normalize(pair.hr, normalization)
            pred = _predict_tile(predictor, normalize(pair.lr, normalization), pair.scale)
            vals["ssim"].append(metrics.ssim(truth, pred))
            vals["psnr"].append(metrics.psnr(truth, pred))
            vals["mse"].append(metrics.mse(truth, pred))
            vals["mae"].append(metrics.mae(truth, pred))
            if tracker is not None:
                lower, upper = tracker.bounds(pred)
                vals["uwidth"].append(metrics.uncertainty_width(lower, upper))
                cov = tracker.block_coverage(truth, pred)
                covered += int(cov.sum())
                blocks_seen += cov.size
        row = metrics.MetricsRow(
            label=label, region=region, block_size=block_size,
            ssim=float(np.mean(vals["ssim"])), psnr_db=float(np.mean(vals["psnr"])),
            mse=float(np.mean(vals["mse"])), mae=float(np.mean(vals["mae"])),
            tile_count=len(pairs))
        if tracker is not None:
            row.uwidth = float(np.mean(vals["uwidth"]))
            row.cal_err = metrics.calibration_error(
                covered / blocks_seen, tracker.config.nominal_confidence)
        region_rows.append(row.validate())

    counts = [r.tile_count for r in region_rows]
    overall = metrics.MetricsRow(
        label=label, region="overall", block_size=block_size,
        ssim=_weighted_mean([r.ssim for r in region_rows], counts),
        psnr_db=_weighted_mean([r.psnr_db for r in region_rows], counts),
        mse=_weighted_mean([r.mse for r in region_rows], counts),
        mae=_weighted_mean([r.mae for r in region_rows], counts),
        tile_count=sum(counts))
    if tracker is not None:
        overall.uwidth = _weighted_mean([r.uwidth for r in region_rows], counts)
        overall.cal_err = _weighted_mean([r.cal_err for r in region_rows], counts)
    report = MetricsReport(rows=region_rows + [overall.validate()])
    report.metadata = {
        "method": label,
        "uwidth_definition": "mean(upper - lower) over pixels, intervals piecewise constant per block",
        "cal_err_definition": "|block-level coverage - nominal|; a block is covered when its "
                              "mean absolute error is within the calibrated half-width",
        "nominal_confidence": None if tracker is None else tracker.config.nominal_confidence,
    }
    return report


def merge_reports(reports, metadata=None) -> MetricsReport:
    merged = MetricsReport(metadata=metadata or {})
    for rep in reports:
        merged.rows.extend(rep.rows)
    return merged


def block_size_sweep(k_list, model, calib_lr, calib_hr, val_pairs,
                     normalization: NormalizationParams,
                     tracker_config: TrackerConfig, tile_size: int) -> MetricsReport:
    """Calibrate and evaluate one tracker per block size on a trained model.

    The model is shared across the sweep; each k gets a fresh tracker,
    a calibration pass and an evaluation, so UWidth/CalErr trends isolate
    the block-size effect.
    """
    reports = []
    for k in k_list:
        if tile_size % k:
            raise ConfigError(f"block size {k} does not divide tile size {tile_size}")
        if k == tile_size:
            log.warning("block size %d equals the tile side: single-block tracker", k)
        tracker_k = TrackerState((tile_size, tile_size), replace(tracker_config, block_size=k))
        run_calibration(model, tracker_k, calib_lr, calib_hr)
        reports.append(evaluate(model, val_pairs, normalization, tracker=tracker_k,
                                block_size=k))
    merged = merge_reports(reports, metadata=dict(reports[0].metadata))
    merged.metadata["sweep_block_sizes"] = list(k_list)
    return merged


# ---------------------------------------------------------------------------
# report and heatmap emission
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def emit_report(report: MetricsReport, out_dir, name: str = "report") -> dict:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    json_path = os.path.join(out_dir, f"{name}.json")
    with open(csv_path, "w") as f:
        f.write(report.to_csv())
    with open(json_path, "w") as f:
        f.write(report.to_json())
    return {"csv": csv_path, "json": json_path}


def write_pgm(path, values: np.ndarray) -> dict:
    """8-bit binary PGM, min-max scaled; returns the scaling metadata."""
    arr = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax > vmin:
        scaled = np.round((arr - vmin) / (vmax - vmin) * 255.0)
    else:
        scaled = np.zeros_like(arr)
    data = scaled.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(data.tobytes())
    meta = {"min": vmin, "max": vmax, "shape": list(arr.shape)}
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


def emit_heatmaps(truth: np.ndarray, pred: np.ndarray, lower: np.ndarray,
                  upper: np.ndarray, out_dir, stem: str) -> dict:
    """Absolute-error map and interval-width map for one tile."""
    os.makedirs(out_dir, exist_ok=True)
    out = {}
    err_path = os.path.join(out_dir, f"error_{stem}.pgm")
    out["error"] = {"path": err_path, **write_pgm(err_path, np.abs(truth - pred))}
    width_path = os.path.join(out_dir, f"uwidth_{stem}.pgm")
    out["uwidth"] = {"path": width_path, **write_pgm(width_path, upper - lower)}
    return out
