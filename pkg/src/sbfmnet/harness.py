"""Experiment orchestration behind the ``sbfm`` command line tool.

Run configs are INI files with a single ``[run]`` section; see
``configs/`` and the README for the keys.  Commands write CSV and SVG files
into the run's output directory.  Wall-clock timings go to separate
``*_timing.csv`` files so every other CSV is bitwise reproducible.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attack import DEFAULT_EPSILONS, adversarial_accuracy, attack_sweep
from .data import (LabeledDataset, SplitSpec, cached_stats, cap_per_class, load_cifar10,
                   stratified_split, synthetic_edges)
from .estimator import SBFMClassifier
from .exceptions import CheckpointError, ConfigError, IngestError
from .model import FusedModel, load_checkpoint, save_checkpoint
from .plot import accuracy_curve_svg

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURES, EXIT_INPUT, EXIT_CHECKPOINT = 0, 1, 2, 3
SWEEP_EPSILON = 8 / 255


def parse_number(text: str) -> float:
    """Parse ``0.5``, ``8/255`` or ``1e-3``."""
    num, sep, den = text.strip().partition("/")
    if sep:
        return float(num) / float(den)
    return float(num)


def parse_list(text: str, cast=parse_number) -> list:
    return [cast(p) for p in str(text).split(",") if p.strip()]


def parse_blocks(text: str) -> tuple[tuple[int, int], ...]:
    """``32x2,64x2`` -> ((32, 2), (64, 2))."""
    out = []
    for part in parse_list(text, str):
        ch, _, n = part.strip().partition("x")
        out.append((int(ch), int(n or 1)))
    return tuple(out)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    synthetic_train: int = 500
    synthetic_test: int = 200
    synthetic_size: int = 16
    synthetic_noise: float = 0.05
    data_seed: int = 0
    subset_per_class: int | None = None
    test_subset_per_class: int | None = None
    model: str = "both"
    l: int = 3
    t: float = 0.8
    channels_per_direction: int = 8
    pool_windows: tuple[int, ...] | None = None
    freeze_sbfm: bool = False
    conv_blocks: tuple[tuple[int, int], ...] = ((32, 2), (64, 2), (128, 2))
    fc_widths: tuple[int, ...] = (256,)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    grid_l: tuple[int, ...] = (1, 2, 3)
    grid_t: tuple[float, ...] = (0.4, 0.6, 0.8)
    workers: int = 1
    out: str = "runs/default"

    def validate(self) -> None:
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset must be 'synthetic' or 'cifar10', got {self.dataset!r}")
        if self.model not in ("baseline", "fused", "both"):
            raise ConfigError(f"model must be baseline, fused or both, got {self.model!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be nonnegative")
        if not self.grid_l or not self.grid_t:
            raise ConfigError("sweep grid must be nonempty")
        if any(not 0 <= t <= 1 for t in self.grid_t) or any(l < 1 for l in self.grid_l):
            raise ConfigError("grid t values must lie in [0, 1] and l values be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs, batch_size and workers must be >= 1")


_PARSERS = {
    "synthetic_train": int, "synthetic_test": int, "synthetic_size": int, "synthetic_noise": float,
    "data_seed": int, "subset_per_class": int, "test_subset_per_class": int, "l": int,
    "t": parse_number, "channels_per_direction": int,
    "pool_windows": lambda s: tuple(parse_list(s, int)), "freeze_sbfm": _bool,
    "conv_blocks": parse_blocks, "fc_widths": lambda s: tuple(parse_list(s, int)),
    "epochs": int, "batch_size": int, "learning_rate": parse_number, "momentum": parse_number,
    "weight_decay": parse_number, "val_fraction": parse_number,
    "seeds": lambda s: tuple(parse_list(s, int)), "epsilons": lambda s: tuple(parse_list(s)),
    "grid_l": lambda s: tuple(parse_list(s, int)), "grid_t": lambda s: tuple(parse_list(s)),
    "workers": int,
}


def load_run_config(path=None, **overrides) -> RunConfig:
    """Read a ``[run]`` INI file (optional) and apply non-None overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not parser.has_section("run"):
            raise ConfigError(f"{path}: missing [run] section")
        known = {f.name for f in fields(RunConfig)}
        for key, raw in parser.items("run"):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r}")
            if raw.strip() == "":
                values[key] = None if key in ("subset_per_class", "test_subset_per_class",
                                              "pool_windows") else ""
                continue
            try:
                values[key] = _PARSERS.get(key, str)(raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- data


@dataclass
class Splits:
    train: LabeledDataset
    test: LabeledDataset


def load_splits(cfg: RunConfig) -> Splits:
    """Training pool (before the validation hold-out) and test set."""
    if cfg.dataset == "synthetic":
        train = synthetic_edges(cfg.synthetic_train, cfg.synthetic_size, seed=cfg.data_seed,
                                noise=cfg.synthetic_noise)
        test = synthetic_edges(cfg.synthetic_test, cfg.synthetic_size, seed=cfg.data_seed + 1,
                               noise=cfg.synthetic_noise)
    else:
        if not cfg.data_dir:
            raise IngestError("dataset = cifar10 needs data_dir")
        train, test = load_cifar10(cfg.data_dir)
    if cfg.subset_per_class:
        train = cap_per_class(train, cfg.subset_per_class)
    if cfg.test_subset_per_class:
        test = cap_per_class(test, cfg.test_subset_per_class)
    return Splits(train, test)


def normalization_stats(cfg: RunConfig, splits: Splits, out: Path):
    """Training-split channel statistics, cached in ``normalization.json``."""
    train_part, _ = stratified_split(splits.train, SplitSpec(cfg.val_fraction, seed=cfg.data_seed))
    mean, std = cached_stats(out / "normalization.json", train_part.images)
    return mean, np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------- output


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    """RFC-4180 CSV, written atomically."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    write_text(path, buf.getvalue())


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


# ---------------------------------------------------------------- train


def model_variants(cfg: RunConfig) -> list[tuple[str, bool]]:
    fused_tag = f"sbfm_l{cfg.l}_t{cfg.t:g}"
    return {"baseline": [("baseline", False)], "fused": [(fused_tag, True)],
            "both": [("baseline", False), (fused_tag, True)]}[cfg.model]


def make_classifier(cfg: RunConfig, use_sbfm: bool, seed: int, normalization=None,
                    l: int | None = None, t: float | None = None) -> SBFMClassifier:
    pools = cfg.pool_windows
    l = cfg.l if l is None else l
    if pools is not None and len(pools) != l:
        pools = None
    return SBFMClassifier(
        use_sbfm=use_sbfm, n_sobel_layers=l, threshold=cfg.t if t is None else t,
        channels_per_direction=cfg.channels_per_direction, pool_windows=pools,
        freeze_sbfm=cfg.freeze_sbfm, conv_blocks=cfg.conv_blocks, fc_widths=cfg.fc_widths,
        epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay, val_fraction=cfg.val_fraction,
        normalization=normalization, split_seed=cfg.data_seed, random_state=seed)


@dataclass
class SeedResult:
    tag: str
    seed: int
    train_accuracy: float
    test_accuracy: float
    seconds_per_epoch: float
    epochs: list = field(default_factory=list)
    checkpoint: str = ""


def fit_one(cfg: RunConfig, splits: Splits, use_sbfm: bool, seed: int, normalization,
            l: int | None = None, t: float | None = None) -> SBFMClassifier:
    clf = make_classifier(cfg, use_sbfm, seed, normalization, l=l, t=t)
    clf.fit(splits.train.images, splits.train.labels, splits.test.images, splits.test.labels)
    return clf


def cmd_train(cfg: RunConfig) -> list[SeedResult]:
    """Train every model variant for every seed; write reports and checkpoints."""
    splits = load_splits(cfg)
    out = Path(cfg.out)
    norm = normalization_stats(cfg, splits, out)
    results: list[SeedResult] = []
    for tag, use_sbfm in model_variants(cfg):
        for seed in cfg.seeds:
            clf = fit_one(cfg, splits, use_sbfm, seed, norm)
            ckpt = out / "checkpoints" / f"{tag}_seed{seed}.sbfm"
            clf.model_.metadata.update({"tag": tag, "seed": seed})
            save_checkpoint(clf.model_, ckpt, metadata={"classes": clf.classes_.tolist()})
            h = clf.history_
            results.append(SeedResult(tag, seed, h.train_accuracy, h.test_accuracy,
                                      h.seconds_per_epoch, h.epochs, str(ckpt)))
            log.info("%s seed %d: train %.4f test %.4f", tag, seed, h.train_accuracy, h.test_accuracy)
    write_train_reports(out, results)
    return results


def write_train_reports(out: Path, results: list[SeedResult]) -> None:
    epoch_rows = [[r.tag, r.seed, e.epoch, e.loss, e.train_accuracy, e.val_accuracy]
                  for r in results for e in r.epochs]
    write_csv(out / "train_epochs.csv", ["model", "seed", "epoch", "loss", "train_acc", "val_acc"],
              epoch_rows)
    summary, timing = [], []
    for tag in dict.fromkeys(r.tag for r in results):
        rs = [r for r in results if r.tag == tag]
        for r in rs:
            summary.append([tag, r.seed, r.train_accuracy, None, r.test_accuracy, None])
            timing.append([tag, r.seed, r.seconds_per_epoch, None])
        tr, te, tpe = (_mean_std([getattr(r, a) for r in rs])
                       for a in ("train_accuracy", "test_accuracy", "seconds_per_epoch"))
        summary.append([tag, "mean", tr[0], tr[1], te[0], te[1]])
        timing.append([tag, "mean", tpe[0], tpe[1]])
    write_csv(out / "train_summary.csv",
              ["model", "seed", "tr_acc", "tr_acc_std", "te_acc", "te_acc_std"], summary)
    write_csv(out / "train_timing.csv", ["model", "seed", "time_pe_s", "time_pe_s_std"], timing)


# ---------------------------------------------------------------- attack


def check_compatible(model: FusedModel, ds: LabeledDataset, path) -> None:
    bb = model.backbone_config
    if tuple(bb.input_shape) != ds.image_shape or bb.n_classes != ds.n_classes:
        raise CheckpointError(
            f"{path}: model expects {bb.input_shape} images and {bb.n_classes} classes; "
            f"dataset has {ds.image_shape} and {ds.n_classes}")


def cmd_attack(cfg: RunConfig, checkpoints: list | None = None) -> list[dict]:
    """FGSM sweep of every checkpoint over the test set; CSV plus SVG curve."""
    out = Path(cfg.out)
    if not checkpoints:
        checkpoints = sorted((out / "checkpoints").glob("*.sbfm"))
        if not checkpoints:
            raise CheckpointError(f"no checkpoints given and none found under {out / 'checkpoints'}")
    models = []
    for path in checkpoints:
        models.append((path, load_checkpoint(path)))
    splits = load_splits(cfg)
    for path, model in models:
        check_compatible(model, splits.test, path)

    by_seed = []
    for path, model in models:
        name = model.metadata.get("tag") or model.model_id
        seed = model.metadata.get("seed", model.seed)
        report = attack_sweep(model, splits.test, cfg.epsilons, model_id=name)
        by_seed += [{"model": name, "seed": seed, "epsilon": r.epsilon, "accuracy": r.accuracy,
                     "n": r.n} for r in report.records]
    write_csv(out / "attack_by_seed.csv", ["model", "seed", "epsilon", "accuracy", "n"],
              [[r["model"], r["seed"], r["epsilon"], r["accuracy"], r["n"]] for r in by_seed])

    summary = []
    series: dict[str, list[tuple[float, float]]] = {}
    for name in dict.fromkeys(r["model"] for r in by_seed):
        for eps in cfg.epsilons:
            accs = [r["accuracy"] for r in by_seed if r["model"] == name and r["epsilon"] == eps]
            n = next(r["n"] for r in by_seed if r["model"] == name)
            acc = float(np.mean(accs))
            summary.append({"model": name, "epsilon": eps, "accuracy": acc, "n": n})
            series.setdefault(name, []).append((eps, acc))
    write_csv(out / "attack.csv", ["model", "epsilon", "accuracy", "n"],
              [[r["model"], r["epsilon"], r["accuracy"], r["n"]] for r in summary])
    write_text(out / "attack_curve.svg",
               accuracy_curve_svg(series, title=f"FGSM accuracy vs epsilon ({cfg.dataset})"))
    return summary


# ---------------------------------------------------------------- sweep


def _sweep_cell(cfg: RunConfig, splits: Splits, norm, l: int, t: float) -> dict:
    tr, te, adv, tpe = [], [], [], []
    for seed in cfg.seeds:
        clf = fit_one(cfg, splits, True, seed, norm, l=l, t=t)
        h = clf.history_
        tr.append(h.train_accuracy)
        te.append(h.test_accuracy)
        tpe.append(h.seconds_per_epoch)
        adv.append(adversarial_accuracy(clf.model_, splits.test, SWEEP_EPSILON))
    return {"l": l, "t": t, "status": "OK", "adv": _mean_std(adv), "tr": _mean_std(tr),
            "te": _mean_std(te), "tpe": _mean_std(tpe)}


def _run_cell(args) -> dict:
    cfg, splits, norm, l, t = args
    try:
        return _sweep_cell(cfg, splits, norm, l, t)
    except Exception as exc:  # a failed cell must not abort the sweep
        log.error("sweep cell l=%s t=%s failed: %s", l, t, exc)
        log.debug("%s", traceback.format_exc())
        return {"l": l, "t": t, "status": "FAILED", "error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(cfg: RunConfig) -> tuple[list[dict], int]:
    """Train one fused model per (l, t) cell and seed; write the grid CSV.

    Returns the cell results and the exit code (1 when any cell failed).
    """
    splits = load_splits(cfg)
    out = Path(cfg.out)
    norm = normalization_stats(cfg, splits, out)
    jobs = [(cfg, splits, norm, l, t) for l in cfg.grid_l for t in cfg.grid_t]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]

    grid, timing = [], []
    for c in cells:
        if c["status"] == "OK":
            grid.append([c["l"], c["t"], "OK", c["adv"][0], c["adv"][1], c["tr"][0], c["tr"][1],
                         c["te"][0], c["te"][1], len(cfg.seeds)])
            timing.append([c["l"], c["t"], c["tpe"][0], c["tpe"][1]])
        else:
            grid.append([c["l"], c["t"], "FAILED"] + [None] * 6 + [len(cfg.seeds)])
            timing.append([c["l"], c["t"], None, None])
    write_csv(out / "sweep_grid.csv",
              ["l", "t", "status", "adv_acc", "adv_acc_std", "tr_acc", "tr_acc_std", "te_acc",
               "te_acc_std", "n_seeds"], grid)
    write_csv(out / "sweep_timing.csv", ["l", "t", "time_pe_s", "time_pe_s_std"], timing)
    code = EXIT_FAILURES if any(c["status"] != "OK" for c in cells) else EXIT_OK
    return cells, code


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    new = replace(cfg, **{k: v for k, v in kw.items() if v is not None})
    new.validate()
    return new
