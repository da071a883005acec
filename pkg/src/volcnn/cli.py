"""Command-line entry point.

One executable with subcommands: train, eval, ablate, saliency, gradcheck,
synth. Configuration is a flat key = value text file plus --key value
overrides; every run echoes its full effective configuration and writes it
next to the outputs, so re-running with that file reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.

Heavy imports happen inside the command handlers so that --threads can pin
the BLAS worker env vars before numpy first loads.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

COMMANDS = ("train", "eval", "ablate", "saliency", "gradcheck", "synth")

# key -> (kind, default). Kinds: int, float, bool, str, batch (int or
# "auto"), weights ("none" or three comma-separated floats).
SCHEMA = {
    # model
    "widening_factor": ("int", 1),
    "norm": ("str", "instance"),
    "first_layer": ("str", "K1S1"),
    "extra_blocks": ("int", 0),
    "age_mode": ("str", "none"),
    "crop_extent": ("int", 96),
    "d_model": ("int", 128),
    # training
    "max_epochs": ("int", 100),
    "learning_rate": ("float", 0.01),
    "momentum": ("float", 0.9),
    "batch_size": ("batch", None),
    "seed": ("int", 0),
    "class_weights": ("weights", None),
    "normalize": ("bool", True),
    "blur_hi": ("float", 1.5),
    "timing": ("bool", False),
    "subsample_rate": ("float", 1.0),
    # paths and data
    "manifest": ("str", ""),
    "run_dir": ("str", ""),
    "checkpoint": ("str", ""),
    "split": ("str", "val"),
    "allow_leakage": ("bool", False),
    # evaluation
    "n_resamples": ("int", 1000),
    "alpha": ("float", 0.05),
    # synthetic data
    "n_per_class": ("int", 8),
    "extent": ("int", 32),
    "noise": ("float", 0.1),
    # saliency
    "views": ("str", "axial:50,axial:26,coronal:56,sagittal:26"),
    "smooth_sigma": ("float", 0.8),
    # ablation
    "axis": ("str", ""),
    "values": ("str", ""),
    # gradient checks
    "scope": ("str", "all"),
    # environment
    "threads": ("int", 0),
}


class ConfigError(ValueError):
    pass


class DataError(Exception):
    pass


def _parse_value(key: str, raw: str):
    kind, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "batch":
            if raw.lower() in ("auto", ""):
                return None
            return int(raw)
        if kind == "weights":
            if raw.lower() in ("none", ""):
                return None
            return tuple(float(v) for v in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _format_value(key: str, value) -> str:
    kind, _ = SCHEMA[key]
    if kind == "bool":
        return "true" if value else "false"
    if kind == "batch":
        return "auto" if value is None else str(value)
    if kind == "weights":
        return "none" if value is None else ",".join(str(v) for v in value)
    return str(value)


def load_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, val)
    return out


def parse_overrides(tokens) -> dict:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            val = tokens[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise ConfigError(f"unknown option --{key}")
        out[key] = _parse_value(key, val)
    return out


def format_config(cfg: dict) -> str:
    lines = ["# effective configuration"]
    lines += [f"{k} = {_format_value(k, cfg[k])}" for k in sorted(SCHEMA)]
    return "\n".join(lines) + "\n"


def set_thread_env(n: int) -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _ensure_run_dir(cfg: dict) -> Path:
    if not cfg["run_dir"]:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        cfg["run_dir"] = f"runs/{stamp}-seed{cfg['seed']}"
    run_dir = Path(cfg["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _echo_config(cfg: dict, run_dir: Path) -> None:
    text = format_config(cfg)
    sys.stdout.write(text)
    (run_dir / "config.txt").write_text(text)


def _model_config(cfg):
    from .model import ModelConfig
    return ModelConfig(widening_factor=cfg["widening_factor"],
                       norm=cfg["norm"], first_layer=cfg["first_layer"],
                       extra_blocks=cfg["extra_blocks"],
                       age_mode=cfg["age_mode"],
                       crop_extent=cfg["crop_extent"],
                       d_model=cfg["d_model"])


def _train_config(cfg, run_dir: Path):
    from .optim import TrainConfig
    ckpt = cfg["checkpoint"] or str(run_dir / "best.ckpt")
    return TrainConfig(max_epochs=cfg["max_epochs"],
                       learning_rate=cfg["learning_rate"],
                       momentum=cfg["momentum"],
                       batch_size=cfg["batch_size"], seed=cfg["seed"],
                       checkpoint_path=ckpt,
                       class_weights=cfg["class_weights"],
                       normalize=cfg["normalize"], blur_hi=cfg["blur_hi"],
                       timing=cfg["timing"])


def _load_manifest(cfg):
    from .data import load_manifest
    if not cfg["manifest"]:
        raise ConfigError("manifest path is required")
    return load_manifest(cfg["manifest"], allow_leakage=cfg["allow_leakage"])


def _split_samples(manifest, split: str):
    from .data import load_sample
    rows = [r for r in manifest.rows if r.split == split]
    if not rows:
        raise DataError(f"split {split!r} has no rows in the manifest")
    return [load_sample(manifest, r) for r in rows]


def _load_checkpoint(cfg):
    from .model import load_checkpoint
    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint path is required")
    try:
        return load_checkpoint(cfg["checkpoint"])
    except (OSError, ValueError) as exc:
        raise DataError(
            f"cannot load checkpoint {cfg['checkpoint']}: {exc}") from None


def cmd_train(cfg: dict, run_dir: Path) -> int:
    from . import data as data_mod
    from .data import LABEL_NAMES
    from .model import build
    from .optim import resolve_batch_size, train
    from .tensor import Rng

    manifest = _load_manifest(cfg)
    if cfg["subsample_rate"] != 1.0:
        manifest = data_mod.subsample(manifest, cfg["subsample_rate"],
                                      Rng(cfg["seed"]))
    subjects = manifest.subjects("train")
    counts = " ".join(
        f"{name}:{sum(1 for lab in subjects.values() if lab == idx)}"
        for idx, name in enumerate(LABEL_NAMES))
    print(f"train_subjects = {counts}")

    train_samples = _split_samples(manifest, "train")
    val_samples = _split_samples(manifest, "val")
    model_cfg = _model_config(cfg)
    train_cfg = _train_config(cfg, run_dir)
    print(f"resolved batch_size = {resolve_batch_size(train_cfg, model_cfg)}")

    net = build(model_cfg, Rng(cfg["seed"]))
    _, log = train(net, train_samples, val_samples, train_cfg)
    log.write(run_dir / "train_log.csv")
    print(f"checkpoint = {train_cfg.checkpoint_path}")
    return EXIT_OK


HEADLINE_METRICS = ("accuracy", "balanced_accuracy", "micro_auc",
                    "macro_auc")


def _evaluate(cfg: dict, run_dir: Path):
    """Shared by eval and ablate: returns the report after writing the
    artifacts (report.txt, logits.csv, per-class ROC CSVs)."""
    from .metrics import (build_report, export_roc, write_logits_csv,
                          write_report)
    from .optim import evaluate_samples, resolve_batch_size, TrainConfig
    from .tensor import Rng

    net, _, _ = _load_checkpoint(cfg)
    manifest = _load_manifest(cfg)
    samples = _split_samples(manifest, cfg["split"])
    bs = resolve_batch_size(TrainConfig(batch_size=cfg["batch_size"]),
                            net.config)
    loss, records = evaluate_samples(net, samples, bs, cfg["normalize"])
    report = build_report(records, Rng(cfg["seed"]), cfg["n_resamples"],
                          cfg["alpha"])
    write_report(report, run_dir / "report.txt")
    write_logits_csv(records, run_dir / "logits.csv")
    export_roc(report, run_dir)
    return report, loss


def cmd_eval(cfg: dict, run_dir: Path) -> int:
    report, loss = _evaluate(cfg, run_dir)
    print(f"split = {cfg['split']}, n = {len(report.records)}, "
          f"loss = {loss:.6f}")
    print("metric,value,ci_lo,ci_hi")
    values = (report.accuracy, report.balanced_accuracy, report.micro_auc,
              report.macro_auc)
    for key, val in zip(HEADLINE_METRICS, values):
        lo, hi = report.intervals.get(key, (float("nan"), float("nan")))
        print(f"{key},{val:.6f},{lo:.6f},{hi:.6f}")
    return EXIT_OK


ABLATE_AXES = {
    "width": ("widening_factor", int),
    "depth": ("extra_blocks", int),
    "norm": ("norm", str),
    "first_layer": ("first_layer", str),
    "subsample": ("subsample_rate", float),
}


def cmd_ablate(cfg: dict, run_dir: Path) -> int:
    axis = cfg["axis"]
    if axis not in ABLATE_AXES:
        raise ConfigError(
            f"axis must be one of {sorted(ABLATE_AXES)}, got {axis!r}")
    if not cfg["values"]:
        raise ConfigError("values is required for ablate")
    key, typ = ABLATE_AXES[axis]
    try:
        values = [typ(v.strip()) for v in cfg["values"].split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad value for axis {axis}: {exc}") from None

    header = ("value,status,accuracy,balanced_accuracy,micro_auc,macro_auc,"
              "acc_lo,acc_hi,bal_lo,bal_hi,micro_lo,micro_hi,"
              "macro_lo,macro_hi")
    rows = [header]
    first_failure = EXIT_OK
    for value in values:
        sub = dict(cfg)
        sub[key] = value
        sub["run_dir"] = str(run_dir / f"{axis}_{value}")
        sub["checkpoint"] = ""
        sub_dir = _ensure_run_dir(sub)
        _echo_config(sub, sub_dir)
        try:
            code = cmd_train(sub, sub_dir)
            sub["checkpoint"] = str(sub_dir / "best.ckpt")
            report, _ = _evaluate(sub, sub_dir)
        except Exception as exc:  # sub-run failures recorded, sweep goes on
            code = _code_for(exc)
            if code is None:
                raise
            print(f"ablate {axis}={value} failed: {exc}", file=sys.stderr)
            rows.append(f"{value},failed" + ",-" * 12)
            if first_failure == EXIT_OK:
                first_failure = code
            continue
        cells = [str(value), "ok",
                 f"{report.accuracy:.6f}", f"{report.balanced_accuracy:.6f}",
                 f"{report.micro_auc:.6f}", f"{report.macro_auc:.6f}"]
        for metric in HEADLINE_METRICS:
            lo, hi = report.intervals.get(metric,
                                          (float("nan"), float("nan")))
            cells += [f"{lo:.6f}", f"{hi:.6f}"]
        rows.append(",".join(cells))
    summary = "\n".join(rows) + "\n"
    (run_dir / "summary.csv").write_text(summary)
    sys.stdout.write(summary)
    return first_failure


def parse_views(spec: str):
    views = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"view {part!r} must look like axial:50")
        axis, _, index = part.partition(":")
        try:
            views.append((axis.strip(), int(index)))
        except ValueError:
            raise ConfigError(f"bad view index in {part!r}") from None
    if not views:
        raise ConfigError("no views requested")
    return views


def cmd_saliency(cfg: dict, run_dir: Path) -> int:
    from .data import center_crop, intensity_normalize
    from .saliency import aggregate, export_slices, saliency, smooth

    views = parse_views(cfg["views"])
    net, _, _ = _load_checkpoint(cfg)
    manifest = _load_manifest(cfg)
    samples = _split_samples(manifest, cfg["split"])
    crop = net.config.crop_extent
    out_dir = run_dir / "saliency"

    maps = []
    for s in samples:
        vol = s.volume.data[0]
        if cfg["normalize"]:
            vol = intensity_normalize(vol)
        vol = center_crop(vol, crop)
        smap = saliency(net, vol, s.label, age=s.age)
        export_slices(smap, views, out_dir / s.subject_id,
                      with_volume=False)
        maps.append(smap)
    combined = smooth(aggregate(maps), cfg["smooth_sigma"])
    export_slices(combined, views, out_dir / "aggregate", with_volume=True)
    total = len(samples) * len(views) + len(views) + 1
    print(f"saliency_files = {total}")
    print(f"saliency_dir = {out_dir}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, run_dir: Path) -> int:
    from .gradcheck import format_report, run_all

    scope = cfg["scope"]
    if scope not in ("ops", "model", "all"):
        raise ConfigError(f"scope must be ops, model, or all, got {scope!r}")
    results = run_all(cfg["seed"], include_model=scope in ("model", "all"))
    if scope == "model":
        results = [r for r in results if r.name.startswith("model")]
    table = format_report(results)
    sys.stdout.write(table)
    (run_dir / "gradcheck.txt").write_text(table)
    failing = [r.name for r in results if not r.passed]
    if failing:
        print(f"FAILED: {', '.join(failing)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(cfg: dict, run_dir: Path) -> int:
    from .data import generate_synthetic, write_synthetic_dataset
    from .tensor import Rng

    samples = generate_synthetic(cfg["n_per_class"], cfg["extent"],
                                 Rng(cfg["seed"]), noise=cfg["noise"])
    manifest = write_synthetic_dataset(samples, run_dir / "dataset")
    print(f"manifest = {manifest}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "saliency": cmd_saliency,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def _code_for(exc) -> int | None:
    """Exit code for an exception, None when it is not one of ours."""
    from .data import ManifestError, VolumeFormatError
    from .optim import NumericError
    from .tensor import ShapeError

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (ManifestError, VolumeFormatError, DataError,
                        OSError)):
        return EXIT_DATA
    if isinstance(exc, (ShapeError, ValueError)):
        return EXIT_CONFIG
    return None


def build_parser() -> argparse.ArgumentParser:
    keys = ", ".join(sorted(SCHEMA))
    parser = argparse.ArgumentParser(
        prog="volcnn",
        description="Volumetric CNN training and evaluation toolkit.",
        epilog=f"Any configuration key can be overridden with --key value. "
               f"Keys: {keys}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--threads", type=int,
                        help="cap BLAS worker threads (set before numpy "
                             "loads; use 1 for bit-reproducible runs)")
    return parser


def effective_config(args, override_tokens) -> dict:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if args.config:
        cfg.update(load_config_file(args.config))
    cfg.update(parse_overrides(override_tokens))
    if args.threads is not None:
        cfg["threads"] = args.threads
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = effective_config(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg["threads"] > 0:
        set_thread_env(cfg["threads"])
    try:
        run_dir = _ensure_run_dir(cfg)
        _echo_config(cfg, run_dir)
        return HANDLERS[args.command](cfg, run_dir)
    except Exception as exc:
        code = _code_for(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
