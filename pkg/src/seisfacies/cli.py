"""Command line entry point.

Single binary with subcommands: synth, sample, train, eval, ablate,
export-features. A JSON config file supplies defaults; any config key can be
overridden on the command line with dotted flags (``--train.tau 0.5``). The
effective config is snapshotted into the run directory so a run can be
reproduced from the snapshot and seed alone.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate
from .augment import SdaConfig
from .confidence import dump_region_masks, regions_labeled, regions_unlabeled
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    InputError,
    MetricError,
    NumericError,
)
from .losses import softmax
from .model import ModelSpec, build_model, load_checkpoint
from .trainer import TrainConfig, build_train_data, train
from .volume import (
    SliceSamplingPlan,
    SynthSpec,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
    synth_volume,
)

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "runs/run",
    "model": {
        "classes": 6,
        "rep_dim": 128,
        "encoder_channels": [16, 32, 64, 128],
        "normalize_input": False,
    },
    "train": {
        "mode": "ConSemiSup",
        "epochs": 20,
        "batch_size": 2,
        "base_lr": 1e-3,
        "lr_decay_factor": 0.2,
        "lr_decay_every": 4,
        "q_queries": 128,
        "n_negatives": 128,
        "t_w": 0.7,
        "t_s": 0.9,
        "epsilon": 0.1,
        "tau": 0.5,
        "keep_fraction": 1.0,
        "steps_per_epoch": None,
        "grad_clip_norm": 5.0,
        "grad_through_keys": False,
        "normalized_smoothing": False,
        "flip_labeled": False,
    },
    "sda": {
        "kind": "cutmix",
        "area_fraction": 0.25,
        "enabled_labeled": False,
        "enabled_unlabeled": True,
    },
    "plan": {"stride": 100, "offset": 0, "axis": "inline"},
    "synth": {
        "shape": [64, 64, 128],
        "layers": 6,
        "wavelength": 48.0,
        "relief": 5.0,
        "class_amplitudes": None,
        "noise_level": 0.15,
        "fault_count": 2,
        "fault_max_throw": 8.0,
        "wavelet_width": 3.0,
    },
    "paths": {"volume": None, "labels": None},
}


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        _merge(cfg, user, [])
    return cfg


def _merge(base: dict, update: dict, trail: list[str]):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(trail + [key])!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, trail + [key])
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, leftovers: list[str]):
    """Consume ``--a.b.c value`` pairs; flags always beat the file."""
    i = 0
    while i < len(leftovers):
        key = leftovers[i]
        if not key.startswith("--"):
            raise ConfigError(f"unexpected argument {key!r}")
        if i + 1 >= len(leftovers):
            raise ConfigError(f"override {key} is missing a value")
        value = _parse_value(leftovers[i + 1])
        node = cfg
        parts = key[2:].split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key[2:]!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key[2:]!r}")
        node[parts[-1]] = value
        i += 2


def make_model_spec(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(
        classes=m["classes"],
        rep_dim=m["rep_dim"],
        encoder_channels=tuple(m["encoder_channels"]),
        normalize_input=m["normalize_input"],
    )


def make_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(sda=SdaConfig(**cfg["sda"]), seed=cfg["seed"], **cfg["train"])


def make_plan(cfg: dict) -> SliceSamplingPlan:
    return SliceSamplingPlan(**cfg["plan"])


def make_synth_spec(cfg: dict) -> SynthSpec:
    s = dict(cfg["synth"])
    s["shape"] = tuple(s["shape"])
    if s["class_amplitudes"] is not None:
        s["class_amplitudes"] = tuple(s["class_amplitudes"])
    return SynthSpec(**s)


def _snapshot(cfg: dict, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")


def _load_survey(cfg: dict):
    paths = cfg["paths"]
    if not paths["volume"] or not paths["labels"]:
        raise ConfigError("paths.volume and paths.labels must be set")
    volume = load_volume(paths["volume"])
    labels = load_labels(paths["labels"])
    if labels.classes != cfg["model"]["classes"]:
        raise ConfigError(
            f"model.classes={cfg['model']['classes']} but label volume has "
            f"{labels.classes} classes"
        )
    return volume, labels


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> int:
    spec = make_synth_spec(cfg)
    vol, lab = synth_volume(spec, seed=cfg["seed"])
    out = Path(cfg["out"])
    name = args.name
    vol_path = save_volume(vol, out / f"{name}.dat")
    lab_path = save_labels(lab, out / f"{name}_labels.dat")
    _snapshot(cfg, out)
    print(f"wrote {vol_path} and {lab_path} (shape {vol.shape}, {lab.classes} classes)")
    return 0


def cmd_sample(cfg: dict, args) -> int:
    volume, labels = _load_survey(cfg)
    plan = make_plan(cfg)
    tc = make_train_config(cfg)
    data = build_train_data(volume, labels, plan, tc)
    n = volume.shape[0] if plan.axis == "inline" else volume.shape[1]
    split = {
        "labeled": [int(i) for i in data.labeled.indices],
        "validation": [] if data.val is None else [int(i) for i in data.val.indices],
        "test": [int(i) for i in data.test.indices],
        "labeled_slice_fraction": len(data.labeled) / n,
    }
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    print(
        f"labeled {len(data.labeled)}/{n} slices "
        f"({100 * split['labeled_slice_fraction']:.2f}%), "
        f"val {len(split['validation'])}, test {len(split['test'])}"
    )
    return 0


def _dump_debug_regions(model, data, tc, run_dir: Path):
    debug_dir = run_dir / "debug"
    if data.unlabeled is not None and len(data.unlabeled) > 0:
        from .model import forward

        out = forward(model, data.unlabeled.data[: tc.batch_size], grad=False)
        regions = regions_unlabeled(out.seg_probs_hwc(), tc.thresholds())
        dump_region_masks(regions, debug_dir, prefix="unlabeled")
    from .model import forward

    out = forward(model, data.labeled.data[: tc.batch_size], grad=False)
    regions = regions_labeled(
        out.seg_probs_hwc(), data.labeled.labels[: tc.batch_size], tc.thresholds()
    )
    dump_region_masks(regions, debug_dir, prefix="labeled")


def cmd_train(cfg: dict, args) -> int:
    volume, labels = _load_survey(cfg)
    plan = make_plan(cfg)
    tc = make_train_config(cfg)
    run_dir = Path(cfg["out"])
    _snapshot(cfg, run_dir)

    data = build_train_data(volume, labels, plan, tc)
    model = build_model(make_model_spec(cfg), seed=cfg["seed"])
    resume = run_dir / "last.pt" if args.resume else None
    if resume is not None and not resume.exists():
        raise ConfigError(f"--resume requested but {resume} does not exist")
    train(model, data, tc, run_dir=run_dir, resume_from=resume)

    best_model, _, _ = load_checkpoint(run_dir / "best.pt")
    _, report = evaluate.evaluate_slices(best_model, data.test, labels.classes)
    evaluate.report_to_csv(report, run_dir / "report.csv", method=tc.mode)
    (run_dir / "report.txt").write_text(
        evaluate.render_report(report, labels.class_names) + "\n"
    )
    if args.debug_regions:
        _dump_debug_regions(best_model, data, tc, run_dir)
    print(evaluate.render_report(report, labels.class_names))
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    volume, labels = _load_survey(cfg)
    plan = make_plan(cfg)
    tc = make_train_config(cfg)
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.spec.classes != labels.classes:
        raise ConfigError(
            f"checkpoint has {model.spec.classes} classes, label volume "
            f"{labels.classes}"
        )
    data = build_train_data(volume, labels, plan, tc)
    _, report = evaluate.evaluate_slices(model, data.test, labels.classes)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    evaluate.report_to_csv(report, out / "report.csv", method=Path(args.checkpoint).stem)
    (out / "report.txt").write_text(
        evaluate.render_report(report, labels.class_names) + "\n"
    )
    print(evaluate.render_report(report, labels.class_names))
    return 0


def _set_grid_value(cfg: dict, param: str, raw: str):
    if param == "train.thresholds":
        t_w, t_s = (float(v) for v in raw.split(":"))
        cfg["train"]["t_w"] = t_w
        cfg["train"]["t_s"] = t_s
        return
    node = cfg
    parts = param.split(".")
    for part in parts[:-1]:
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown grid parameter {param!r}")
    node[parts[-1]] = _parse_value(raw)


def cmd_ablate(cfg: dict, args) -> int:
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("--values is empty")
    volume, labels = _load_survey(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    row_name = Path(args.config).stem if args.config else "config"
    cells: list[str] = []
    for raw in values:
        point = copy.deepcopy(cfg)
        _set_grid_value(point, args.param, raw)
        point["out"] = str(out / f"{args.param.replace('.', '_')}_{raw.replace(':', '_')}")
        plan = make_plan(point)
        tc = make_train_config(point)
        run_dir = Path(point["out"])
        _snapshot(point, run_dir)
        data = build_train_data(volume, labels, plan, tc)
        model = build_model(make_model_spec(point), seed=point["seed"])
        try:
            train(model, data, tc, run_dir=run_dir)
            best_model, _, _ = load_checkpoint(run_dir / "best.pt")
            _, report = evaluate.evaluate_slices(best_model, data.test, labels.classes)
            cells.append(f"{report.mean_iou:.2f}")
        except NumericError:
            log.warning("grid point %s=%s diverged", args.param, raw)
            cells.append("-")
    header = [args.param] + values
    table = [row_name] + cells
    csv_path = out / "ablation.csv"
    csv_path.write_text(",".join(header) + "\n" + ",".join(table) + "\n")
    width = max(len(c) for c in header + table) + 2
    print("".join(c.rjust(width) for c in header))
    print("".join(c.rjust(width) for c in table))
    print(f"wrote {csv_path}")
    return 0


def cmd_export_features(cfg: dict, args) -> int:
    volume, labels = _load_survey(cfg)
    plan = make_plan(cfg)
    tc = make_train_config(cfg)
    model, _, _ = load_checkpoint(args.checkpoint)
    data = build_train_data(volume, labels, plan, tc)
    out = Path(cfg["out"])
    path = evaluate.export_features(model, data.test, args.stride, out / "features.csv")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seisfacies",
        description="Contrastive semi-supervised seismic facies segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output/run directory")
        p.add_argument("--mode", default=None, help="shortcut for --train.mode")

    p = sub.add_parser("synth", help="generate a synthetic layered survey")
    common(p)
    p.add_argument("--name", default="synthetic")

    p = sub.add_parser("sample", help="report the labeled/val/test slice split")
    common(p)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from last.pt")
    p.add_argument("--debug-regions", action="store_true",
                   help="dump per-class region masks as PNGs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out slices")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train/eval over a hyperparameter grid")
    common(p)
    p.add_argument("--param", required=True,
                   help="dotted config key, e.g. train.tau or train.thresholds")
    p.add_argument("--values", required=True,
                   help="comma list; thresholds pairs as t_w:t_s")

    p = sub.add_parser("export-features", help="dump per-pixel representations")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stride", type=int, default=8)

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-features": cmd_export_features,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args, leftovers = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, leftovers)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        if args.mode is not None:
            cfg["train"]["mode"] = args.mode
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, FormatError, DataError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
