"""Command-line entry point.

One JSON config file drives every subcommand; ``--set key=value`` applies
dotted-path overrides before validation, and all randomness flows from the
single top-level seed. Every run writes a ``run.json`` provenance record
(resolved config, tool version, seed) into the output directory.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
``ABYSS_THREADS`` caps kernel parallelism.
"""

import argparse
import copy
import json
import logging
import os
import sys


import numpy as np

from . import __version__, kernels, synth
from . import train as T
from .errors import AbyssError, ConfigError
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tracker import TrackerConfig, TrackerState

log = logging.getLogger("abyss")

SUBCOMMANDS = ("synth", "train", "calibrate", "eval", "sweep", "report")

DEFAULT_CONFIG = {
    "seed": 7,
    "data_dir": "data",
    "synth": {
        "tile_size": 64,
        "scale": 2,
        "noise_sigma": 2.0,
        "split_ratio": 0.8,
        "regions": None,  # null -> the six desk regions
    },
    "tracker": {
        "block_size": 4,
        "decay": 0.99,
        "epsilon": 1e-8,
        "score_quantile": 0.9,
        "nominal_confidence": 0.9,
        "buffer_capacity": 1024,
        "min_history": 32,
        "weight_clamp": [0.1, 10.0],
    },
    "model": {
        "kind": "ua_vqvae",
        "hidden_dims": [16, 32],
        "n_residual_blocks": 8,
        "codebook_size": 64,
        "embed_dim": 32,
        "scale": 2,
        "lambda_s": 10.0,
        "lambda_c": 0.1,
        "lambda_d": 0.1,
        "commitment_beta": 0.25,
        "srcnn_hidden": 64,
    },
    "train": {
        "epochs": 30,
        "batch_size": 16,
        "step_size": 1e-3,
        "calib_fraction": 0.1,
    },
    "eval": {
        "methods": ["nearest", "bilinear", "bicubic", "ua_vqvae"],
        "heatmap_tiles": 1,
    },
    "sweep": {
        "block_sizes": [1, 2, 4, 8, 16],
    },
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(config: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like key=value")
    key, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value


def resolve_config(config_path, sets, seed=None, model=None, block_size=None):
    """Defaults <- config file <- --set overrides <- dedicated flags.

    Overrides are applied to a scratch copy so an invalid one never leaves
    partially-mutated state behind.
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        if not os.path.exists(config_path):
            raise FileNotFoundError(config_path)
        with open(config_path) as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{config_path}: invalid JSON ({err})") from None
        config = _deep_merge(config, loaded)
    staged = copy.deepcopy(config)
    for dotted in sets or []:
        _apply_override(staged, dotted)
    if seed is not None:
        staged["seed"] = int(seed)
    if model is not None:
        staged["model"]["kind"] = model
    if block_size is not None:
        staged["tracker"]["block_size"] = int(block_size)
    _validate_config(staged)
    return staged


def _validate_config(config: dict) -> None:
    if config["model"]["scale"] != config["synth"]["scale"]:
        raise ConfigError("model.scale must equal synth.scale")
    _tracker_config(config)
    _model_config(config)
    _train_config(config)
    for k in config["sweep"]["block_sizes"]:
        if config["synth"]["tile_size"] % int(k):
            raise ConfigError(f"sweep block size {k} does not divide tile size")
    unknown = set(config["eval"]["methods"]) - set(T.INTERP_METHODS) - set(T.MODEL_METHODS)
    if unknown:
        raise ConfigError(f"unknown eval methods: {sorted(unknown)}")


def _tracker_config(config: dict) -> TrackerConfig:
    c = config["tracker"]
    return TrackerConfig(block_size=int(c["block_size"]), decay=c["decay"],
                         epsilon=c["epsilon"], score_quantile=c["score_quantile"],
                         nominal_confidence=c["nominal_confidence"],
                         buffer_capacity=int(c["buffer_capacity"]),
                         min_history=int(c["min_history"]),
                         weight_clamp=tuple(c["weight_clamp"]))


def _model_config(config: dict, kind=None) -> ModelConfig:
    c = dict(config["model"])
    c["hidden_dims"] = tuple(c["hidden_dims"])
    if kind is not None:
        c["kind"] = kind
    return ModelConfig(seed=config["seed"], **c)


def _train_config(config: dict) -> T.TrainConfig:
    c = config["train"]
    return T.TrainConfig(epochs=int(c["epochs"]), batch_size=int(c["batch_size"]),
                         step_size=c["step_size"], seed=config["seed"],
                         calib_fraction=c["calib_fraction"])


def _write_run_record(out_dir, subcommand, config, argv) -> None:
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "subcommand": subcommand,
        "argv": list(argv),
        "config": config,
        "config_hash": T.config_hash(config),
        "version": __version__,
        "seed": config["seed"],
        "backend": kernels.ACTIVE_BACKEND,
    }
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)


def _checkpoint_path(out_dir, kind: str) -> str:
    return os.path.join(out_dir, f"model_{kind}.ckpt")


def _tracker_path(out_dir) -> str:
    return os.path.join(out_dir, "tracker.json")


def _build_regions(config: dict):
    s = config["synth"]
    if s["regions"] is None:
        return synth.default_region_configs(s["tile_size"], s["noise_sigma"])
    regions = []
    for entry in s["regions"]:
        entry = dict(entry)
        name = entry.pop("name")
        count = int(entry.pop("count"))
        spec = synth.SyntheticSpec(size=s["tile_size"], noise_sigma=s["noise_sigma"], **entry)
        regions.append((name, count, spec))
    return regions


def _load_dataset(config: dict):
    return synth.load_dataset(config["data_dir"])


def _prepare_training_arrays(config, manifest, dataset):
    train_pairs, calib_pairs = T.split_train_calib(
        dataset["train"], config["train"]["calib_fraction"])
    norm = manifest.normalization
    train_lr, train_hr = T.normalized_stack(train_pairs, norm)
    calib_lr, calib_hr = T.normalized_stack(calib_pairs, norm)
    return train_lr, train_hr, calib_lr, calib_hr


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args, config) -> int:
    out = args.out or config["data_dir"]
    s = config["synth"]
    manifest, dataset = synth.build_manifest(
        regions=_build_regions(config), tile_size=int(s["tile_size"]),
        scale=int(s["scale"]), seed=config["seed"], split_ratio=s["split_ratio"],
        out_dir=out)
    log.info("wrote %d train / %d val tiles to %s",
             len(dataset["train"]), len(dataset["val"]), out)
    _write_run_record(out, "synth", config, args.argv)
    return 0


def _train_pipeline(config, out_dir):
    manifest, dataset = _load_dataset(config)
    train_lr, train_hr, calib_lr, calib_hr = _prepare_training_arrays(config, manifest, dataset)
    model = build_model(_model_config(config))
    tile_size = int(config["synth"]["tile_size"])
    tracker = TrackerState((tile_size, tile_size), _tracker_config(config))

    trace_dir = os.path.join(out_dir, "trace")
    os.makedirs(trace_dir, exist_ok=True)

    def on_epoch_end(epoch, mdl, trk, result):
        with open(os.path.join(trace_dir, f"tracker_epoch_{epoch:03d}.json"), "w") as f:
            f.write(trk.to_json())
        with open(os.path.join(trace_dir, "losses.json"), "w") as f:
            json.dump({"steps": result.loss_trace, "epoch_means": result.epoch_means}, f)

    result = T.train(model, train_lr, train_hr, tracker, _train_config(config),
                     on_epoch_end=on_epoch_end)
    return manifest, dataset, result, (calib_lr, calib_hr)


def _cmd_train(args, config) -> int:
    out = args.out or "runs"
    os.makedirs(out, exist_ok=True)
    manifest, dataset, result, _ = _train_pipeline(config, out)
    ckpt = _checkpoint_path(out, config["model"]["kind"])
    save_checkpoint(ckpt, result.model)
    with open(_tracker_path(out), "w") as f:
        f.write(result.tracker.to_json())
    log.info("checkpoint %s (final epoch loss %.6f)", ckpt, result.epoch_means[-1])
    _write_run_record(out, "train", config, args.argv)
    return 0


def _cmd_calibrate(args, config) -> int:
    out = args.out or "runs"
    manifest, dataset = _load_dataset(config)
    ckpt = _checkpoint_path(out, config["model"]["kind"])
    if not os.path.exists(ckpt):
        raise FileNotFoundError(ckpt)
    model = load_checkpoint(ckpt)
    _, _, calib_lr, calib_hr = _prepare_training_arrays(config, manifest, dataset)
    tile_size = int(config["synth"]["tile_size"])
    tracker = TrackerState((tile_size, tile_size), _tracker_config(config))
    T.run_calibration(model, tracker, calib_lr, calib_hr,
                      batch_size=int(config["train"]["batch_size"]))
    with open(_tracker_path(out), "w") as f:
        f.write(tracker.to_json())
    log.info("calibrated tracker written to %s", _tracker_path(out))
    _write_run_record(out, "calibrate", config, args.argv)
    return 0


def _emit_method_heatmaps(config, model, tracker, dataset, manifest, out_dir):
    count = int(config["eval"]["heatmap_tiles"])
    if count < 1:
        return
    heat_dir = os.path.join(out_dir, "heatmaps")
    seen: dict = {}
    for pair in dataset["val"]:
        idx = seen.setdefault(pair.region, 0)
        if idx >= count:
            continue
        seen[pair.region] = idx + 1
        truth = T.normalize(pair.hr, manifest.normalization)
        pred = model.predict(
            T.normalize(pair.lr, manifest.normalization)[None, None].astype(np.float32))[0, 0]
        lower, upper = tracker.bounds(pred.astype(np.float64))
        stem = f"{synth.region_slug(pair.region)}_{idx:02d}"
        T.emit_heatmaps(truth, pred.astype(np.float64), lower, upper, heat_dir, stem)


def _cmd_eval(args, config) -> int:
    out = args.out or "runs"
    methods = args.methods.split(",") if args.methods else list(config["eval"]["methods"])
    unknown = set(methods) - set(T.INTERP_METHODS) - set(T.MODEL_METHODS)
    if unknown:
        raise ConfigError(f"unknown eval methods: {sorted(unknown)}")
    manifest, dataset = _load_dataset(config)
    reports = []
    for method in methods:
        if method in T.INTERP_METHODS:
            reports.append(T.evaluate(method, dataset["val"], manifest.normalization))
            continue
        ckpt = _checkpoint_path(out, method)
        if not os.path.exists(ckpt):
            raise FileNotFoundError(ckpt)
        model = load_checkpoint(ckpt)
        tracker = None
        tracker_file = _tracker_path(out)
        if os.path.exists(tracker_file):
            with open(tracker_file) as f:
                tracker = TrackerState.from_json(f.read())
            if not tracker.calibrated:
                log.warning("tracker at %s is not calibrated; uncertainty columns omitted",
                            tracker_file)
                tracker = None
        reports.append(T.evaluate(model, dataset["val"], manifest.normalization,
                                  tracker=tracker))
        if tracker is not None:
            _emit_method_heatmaps(config, model, tracker, dataset, manifest, out)
    merged = T.merge_reports(reports, metadata={
        "config_hash": T.config_hash(config),
        "seed": config["seed"],
        "methods": methods,
        "uwidth_definition": reports[-1].metadata.get("uwidth_definition"),
        "cal_err_definition": reports[-1].metadata.get("cal_err_definition"),
        "nominal_confidence": config["tracker"]["nominal_confidence"],
        "calibration_split": "trailing fraction of the training split",
    })
    paths = T.emit_report(merged, out)
    log.info("report written to %s", paths["csv"])
    _write_run_record(out, "eval", config, args.argv)
    return 0


def _cmd_sweep(args, config) -> int:
    out = args.out or "runs"
    os.makedirs(out, exist_ok=True)
    k_list = [int(k) for k in (args.block_size.split(",") if args.block_size
                               else config["sweep"]["block_sizes"])]
    manifest, dataset, result, (calib_lr, calib_hr) = _train_pipeline(config, out)
    save_checkpoint(_checkpoint_path(out, config["model"]["kind"]), result.model)
    report = T.block_size_sweep(k_list, result.model, calib_lr, calib_hr, dataset["val"],
                                manifest.normalization, _tracker_config(config),
                                int(config["synth"]["tile_size"]))
    report.metadata.update(config_hash=T.config_hash(config), seed=config["seed"])
    paths = T.emit_report(report, out, name="sweep_report")
    log.info("sweep report written to %s", paths["csv"])
    _write_run_record(out, "sweep", config, args.argv)
    return 0


def _cmd_report(args, config) -> int:
    out = args.out or "runs"
    rendered = False
    for name in ("report", "sweep_report"):
        json_path = os.path.join(out, f"{name}.json")
        if not os.path.exists(json_path):
            continue
        with open(json_path) as f:
            payload = json.load(f)
        report = T.MetricsReport(metadata=payload.get("metadata", {}))
        from .metrics import MetricsRow
        for r in payload["rows"]:
            report.rows.append(MetricsRow(
                label=r["method"], region=r["region"], block_size=r.get("block_size"),
                ssim=r["ssim"], psnr_db=r["psnr_db"], mse=r["mse"], mae=r["mae"],
                uwidth=r.get("uwidth"), cal_err=r.get("cal_err"),
                tile_count=r.get("tile_count", 0)))
        T.emit_report(report, out, name=name)
        rendered = True
    if not rendered:
        raise FileNotFoundError(os.path.join(out, "report.json"))
    ckpt = _checkpoint_path(out, config["model"]["kind"])
    tracker_file = _tracker_path(out)
    if os.path.exists(ckpt) and os.path.exists(tracker_file):
        with open(tracker_file) as f:
            tracker = TrackerState.from_json(f.read())
        if tracker.calibrated and os.path.exists(
                os.path.join(config["data_dir"], "manifest.json")):
            manifest, dataset = _load_dataset(config)
            _emit_method_heatmaps(config, load_checkpoint(ckpt), tracker, dataset,
                                  manifest, out)
    log.info("re-rendered artifacts in %s", out)
    _write_run_record(out, "report", config, args.argv)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="abyss", description="Uncertainty-aware bathymetric "
                                               "super-resolution harness")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, add_help=True)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--model", choices=list(T.MODEL_METHODS), default=None)
        p.add_argument("--methods", default=None, help="comma-separated method list")
        p.add_argument("--block-size", dest="block_size", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override (repeatable)")
        verb = p.add_mutually_exclusive_group()
        verb.add_argument("--quiet", action="store_true")
        verb.add_argument("--verbose", action="store_true")
    return parser


_DISPATCH = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def run(argv) -> int:
    argv = list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    if args.subcommand is None:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    level = logging.WARNING if args.quiet else (
        logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", force=True)

    threads = os.environ.get("ABYSS_THREADS")
    if threads:
        try:
            kernels.set_num_threads(int(threads))
        except ValueError:
            print(f"abyss: invalid ABYSS_THREADS value {threads!r}", file=sys.stderr)
            return 1

    args.argv = argv
    try:
        block_size = None if args.block_size is None or "," in str(args.block_size) \
            else int(args.block_size)
        config = resolve_config(args.config, args.sets, seed=args.seed,
                                model=args.model, block_size=block_size)
        return _DISPATCH[args.subcommand](args, config)
    except ConfigError as err:
        print(f"abyss: config error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        missing = err.filename if getattr(err, "filename", None) else str(err)
        print(f"abyss: missing file: {missing}", file=sys.stderr)
        return 2
    except AbyssError as err:
        print(f"abyss: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
