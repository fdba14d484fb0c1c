"""Command-line front end.

Verbs: ``train``, ``adapt``, ``crossval``, ``extract-features``, ``synth``,
``evaluate``.  Experiments are described by an INI file::

    [data]
    root = data/ucm
    crop_ratio = 0.875

    [model]
    architecture = mini_caffenet
    width_scale = 0.5

    [train]
    modality = from_scratch
    iterations = 2000

Unknown sections or keys are fatal.  Every run writes ``resolved_config.ini``
(all effective values, including per-layer learning-rate multipliers) next to
its outputs.  The output directory defaults to ``[output] dir``, else
``$SCENECNN_OUTPUT_ROOT/<config name>``, else ``runs/<config name>``.

Exit codes: 0 success, 1 configuration or usage error, 2 data or checkpoint
error, 3 training aborted (non-finite loss).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import modelio
from .architectures import penultimate_features, replace_head
from .data import DataError, SyntheticSpec, center_crop, generate_synthetic, load_dataset, preprocess, save_dataset
from .evaluation import (ModelSpec, cross_validate, evaluate, render_errors, render_per_class, render_summary_csv,
                         render_table)
from .training import MODALITIES, TrainingConfig, TrainingDiverged, configure_modality, train

log = logging.getLogger("scenecnn")

OUTPUT_ROOT_ENV = "SCENECNN_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORTED = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


@dataclass
class ExperimentConfig:
    # [data]
    root: str = ""
    crop_ratio: float = 0.875
    augment: bool = True
    mirror: bool = True
    vflip: bool = False
    # [model]
    architecture: str = "mini_caffenet"
    width_scale: float = 1.0
    use_aux: bool = True
    lrn: bool = True
    dropout: float = 0.5
    # [train]
    modality: str = "from_scratch"
    iterations: int = 1000
    base_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    lr_decay_at: float = 0.75
    lr_decay: float = 0.1
    microbatch: int = 8
    aux_loss_weight: float = 0.3
    pretrained: str = ""
    # [crossval]
    k: int = 5
    fold_seed: int = 0
    modalities: list[str] = field(default_factory=list)
    # [output]
    dir: str = ""
    # [multipliers] layer = multiplier
    multipliers: dict[str, float] = field(default_factory=dict)


SECTIONS = {
    "data": {"root": str, "crop_ratio": float, "augment": _bool, "mirror": _bool, "vflip": _bool},
    "model": {"architecture": str, "width_scale": float, "use_aux": _bool, "lrn": _bool, "dropout": float},
    "train": {"modality": str, "iterations": int, "base_lr": float, "momentum": float, "batch_size": int,
              "seed": int, "lr_decay_at": float, "lr_decay": float, "microbatch": int,
              "aux_loss_weight": float, "pretrained": str},
    "crossval": {"k": int, "fold_seed": int, "modalities": _list},
    "output": {"dir": str},
}


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    values: dict = {}
    multipliers = {}
    for section in parser.sections():
        if section == "multipliers":
            for key, raw in parser.items(section):
                try:
                    multipliers[key] = float(raw)
                except ValueError:
                    raise ConfigError(f"[multipliers] {key}: not a number: {raw!r}") from None
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            try:
                values[key] = SECTIONS[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    cfg = ExperimentConfig(**values, multipliers=multipliers)
    cfg.config_path = str(path)
    for m in [cfg.modality] + cfg.modalities:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    return cfg


def resolved_ini(cfg: ExperimentConfig, **overrides) -> str:
    values = dataclasses.asdict(cfg)
    values.update(overrides)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = values[key]
            if isinstance(value, list):
                value = ", ".join(value)
            parser[section][key] = str(value).lower() if isinstance(value, bool) else str(value)
    if values["multipliers"]:
        parser["multipliers"] = {k: repr(float(v)) for k, v in values["multipliers"].items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def output_dir(cfg: ExperimentConfig) -> Path:
    if cfg.dir:
        out = Path(cfg.dir)
    else:
        name = Path(getattr(cfg, "config_path", "run")).stem
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    if cfg.architecture == "mini_caffenet":
        kwargs = {"width_scale": cfg.width_scale, "lrn": cfg.lrn, "dropout": cfg.dropout}
    elif cfg.architecture == "mini_googlenet":
        kwargs = {"use_aux": cfg.use_aux, "aux_weight": cfg.aux_loss_weight, "dropout": cfg.dropout}
    else:
        raise ConfigError(f"unknown architecture {cfg.architecture!r}")
    return ModelSpec(cfg.architecture, cfg.crop_ratio, tuple(sorted(kwargs.items())))


def training_config(cfg: ExperimentConfig, net, modality: str, jobs: int = 1) -> TrainingConfig:
    base = configure_modality(net, modality, cfg.base_lr)
    multipliers = dict(base.lr_multipliers)
    unknown = sorted(set(cfg.multipliers) - set(multipliers))
    if unknown:
        raise ConfigError(f"[multipliers] names unknown layers: {unknown}")
    multipliers.update(cfg.multipliers)
    frozen = frozenset(n for n in base.frozen if multipliers.get(n, 0.0) == 0.0)
    try:
        return TrainingConfig(modality=modality, iterations=cfg.iterations, base_lr=cfg.base_lr,
                              lr_multipliers=multipliers, frozen=frozen, momentum=cfg.momentum,
                              batch_size=cfg.batch_size, augment=cfg.augment, mirror=cfg.mirror, vflip=cfg.vflip,
                              seed=cfg.seed, aux_loss_weight=cfg.aux_loss_weight if net.aux_heads else None,
                              lr_decay_at=cfg.lr_decay_at, lr_decay=cfg.lr_decay, microbatch=cfg.microbatch,
                              jobs=jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_data(cfg: ExperimentConfig):
    if not cfg.root:
        raise ConfigError("[data] root is required")
    return load_dataset(cfg.root)


def _check_fits(net, ds):
    c, h, w = net.input_shape
    if ds.image_shape[0] != c or ds.image_shape[1] < h or ds.image_shape[2] < w:
        raise DataError(f"images of shape {ds.image_shape} do not fit network input {net.input_shape}")


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _adapt_run(cfg, pretrained, ds, modality, jobs, out: Path, stem: str) -> int:
    net = replace_head(pretrained, ds.num_classes, cfg.seed)
    _check_fits(net, ds)
    tcfg = training_config(cfg, net, modality, jobs)
    trained, record = train(net, ds, tcfg)
    modelio.save_model(trained, out / f"{stem}.scnn")
    record.to_csv(out / f"{stem}_record.csv")
    _write(out / "resolved_config.ini",
           resolved_ini(cfg, modality=modality, multipliers=tcfg.lr_multipliers, dir=str(out)))
    log.info("wrote %s", out / f"{stem}.scnn")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = output_dir(cfg)
    ds = _load_data(cfg)
    if cfg.modality != "from_scratch":
        if not cfg.pretrained:
            raise ConfigError(f"modality {cfg.modality} needs [train] pretrained")
        return _adapt_run(cfg, modelio.load_model(cfg.pretrained), ds, cfg.modality, args.jobs, out, "model")
    net = model_spec(cfg).build(ds.image_shape, ds.num_classes, cfg.seed)
    tcfg = training_config(cfg, net, "from_scratch", args.jobs)
    trained, record = train(net, ds, tcfg)
    modelio.save_model(trained, out / "model.scnn")
    record.to_csv(out / "train_record.csv")
    _write(out / "resolved_config.ini", resolved_ini(cfg, multipliers=tcfg.lr_multipliers, dir=str(out)))
    log.info("wrote %s", out / "model.scnn")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    if args.modality not in ("fine_tuning", "feature_vector"):
        raise ConfigError("adapt modality must be fine_tuning or feature_vector")
    pretrained = modelio.load_model(args.pretrained)
    out = output_dir(cfg)
    ds = _load_data(cfg)
    cfg.pretrained = str(args.pretrained)
    return _adapt_run(cfg, pretrained, ds, args.modality, args.jobs, out, "adapted")


def cmd_crossval(args) -> int:
    cfg = load_config(args.config)
    out = output_dir(cfg)
    ds = _load_data(cfg)
    spec = model_spec(cfg)
    modalities = cfg.modalities or [cfg.modality]
    pretrained = modelio.load_model(cfg.pretrained) if cfg.pretrained else None
    rows = []
    for modality in modalities:
        if modality != "from_scratch" and pretrained is None:
            raise ConfigError(f"modality {modality} needs [train] pretrained")
        probe = spec.build(ds.image_shape, ds.num_classes, cfg.seed) if pretrained is None or modality == "from_scratch" \
            else replace_head(pretrained, ds.num_classes, cfg.seed)
        _check_fits(probe, ds)
        tcfg = training_config(cfg, probe, modality)
        result = cross_validate(spec, ds, cfg.k, tcfg, modality, pretrained, cfg.fold_seed, args.jobs)
        mdir = out / modality
        mdir.mkdir(exist_ok=True)
        with open(mdir / "fold_accuracies.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fold", "accuracy"])
            for i, acc in enumerate(result.fold_accuracies, start=1):
                writer.writerow([i, repr(acc)])
        for i, report in enumerate(result.reports, start=1):
            _write(mdir / f"fold{i}_per_class.csv", render_per_class(report))
            _write(mdir / f"fold{i}_errors.csv", render_errors(report))
        pooled = result.pooled()
        _write(mdir / "per_class.csv", render_per_class(pooled))
        _write(mdir / "errors.csv", render_errors(pooled))
        rows.append((cfg.architecture, modality, cfg.iterations, result.mean_accuracy))
        log.info("%s: mean accuracy %.2f%% (sd %.2f)", modality, 100 * result.mean_accuracy,
                 100 * result.std_accuracy)
    with open(out / "folds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "fold"])
        writer.writerows(result.assignment.items())
    _write(out / "summary.txt", render_table(rows))
    _write(out / "summary.csv", render_summary_csv(rows))
    _write(out / "resolved_config.ini", resolved_ini(cfg, modalities=modalities, dir=str(out)))
    sys.stdout.write(render_table(rows))
    return EXIT_OK


def _eval_inputs(net, ds):
    _check_fits(net, ds)
    means = net.meta.get("channel_means", ds.channel_means)
    _, h, w = net.input_shape
    return preprocess(means, center_crop(ds.images, h, w))


def cmd_extract_features(args) -> int:
    net = modelio.load_model(args.checkpoint)
    ds = load_dataset(args.root)
    x = _eval_inputs(net, ds)
    feats = np.concatenate([penultimate_features(net, x[s:s + 128]) for s in range(0, len(x), 128)])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label"] + [f"f{i}" for i in range(feats.shape[1])])
        for sid, label, row in zip(ds.ids, ds.labels, feats):
            writer.writerow([sid, int(label)] + [f"{v:.9g}" for v in row])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    net = modelio.load_model(args.checkpoint)
    ds = load_dataset(args.root)
    _check_fits(net, ds)
    report = evaluate(net, ds)
    sys.stdout.write(f"accuracy {100 * report.overall_accuracy:.2f}% "
                     f"({report.total - len(report.errors)}/{report.total})\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "per_class.csv", render_per_class(report))
        _write(out / "errors.csv", render_errors(report))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(num_classes=args.classes, image_size=args.size, channels=args.channels,
                         samples_per_class=args.per_class, noise=args.noise, seed=args.seed)
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out, args.format)
    log.info("wrote %d images under %s", len(ds), args.out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenecnn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one network from an experiment config")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="workers for minibatch chunks (results do not depend on it)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="re-head a pretrained checkpoint and adapt it to the config's dataset")
    p.add_argument("config")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--modality", required=True, choices=["fine_tuning", "feature_vector"])
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("crossval", help="k-fold cross-validation over one or more modalities")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("extract-features", help="penultimate-layer features as CSV")
    p.add_argument("checkpoint")
    p.add_argument("root")
    p.add_argument("out")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("root")
    p.add_argument("--out", help="directory for per-class and error CSVs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic scene dataset")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["raw", "pnm"], default="raw")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (DataError, modelio.ModelFormatError, OSError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except TrainingDiverged as exc:
        sys.stderr.write(f"training aborted: {exc}\n")
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
