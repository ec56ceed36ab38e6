"""MiniVGG backbone, binary-feature fusion head, training loop and checkpoints."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .exceptions import CheckpointError, ConfigError, DimensionError
from .sbfm import SBFM, SBFMConfig, build_sbfm
from .tensor import (OptimizerConfig, SGDState, Tensor, backward, concat, conv2d, flatten, linear,
                     maxpool2d, no_grad, relu, sgd_step, softmax, softmax_cross_entropy)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SBFM"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    """Conv blocks as (channels, convs per block); a 2x2 max pool closes each block."""

    blocks: tuple[tuple[int, int], ...] = ((32, 2), (64, 2), (128, 2))
    fc_widths: tuple[int, ...] = (256,)
    input_shape: tuple[int, int, int] = (3, 32, 32)
    n_classes: int = 10

    def __post_init__(self):
        self.blocks = tuple((int(c), int(n)) for c, n in self.blocks)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not self.blocks or any(c < 1 or n < 1 for c, n in self.blocks):
            raise ConfigError(f"invalid conv blocks {self.blocks}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        _, h, w = self.input_shape
        if min(h, w) >> len(self.blocks) < 1:
            raise ConfigError(f"{h}x{w} input is too small for {len(self.blocks)} pooling stages")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        k = len(self.blocks)
        return self.blocks[-1][0], h >> k, w >> k

    @property
    def feature_width(self) -> int:
        return int(np.prod(self.feature_shape))

    def to_dict(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks], "fc_widths": list(self.fc_widths),
                "input_shape": list(self.input_shape), "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> BackboneConfig:
        return cls(blocks=tuple(tuple(b) for b in d["blocks"]), fc_widths=tuple(d["fc_widths"]),
                   input_shape=tuple(d["input_shape"]), n_classes=d["n_classes"])


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class FusedModel:
    """Backbone features and (optionally) binary SBFM features feeding one FC head.

    Inputs are raw images in [0, 1]; the per-channel standardisation is part
    of the graph so input gradients are taken in raw pixel space.
    """

    def __init__(self, backbone: BackboneConfig, sbfm: SBFMConfig | None = None, seed: int = 0,
                 mean=None, std=None):
        self.backbone_config = backbone
        self.sbfm_config = sbfm
        self.seed = int(seed)
        c, h, w = backbone.input_shape
        self.mean = np.zeros(c) if mean is None else np.asarray(mean, dtype=np.float64).reshape(c)
        self.std = np.ones(c) if std is None else np.asarray(std, dtype=np.float64).reshape(c)
        if np.any(self.std <= 0):
            raise ConfigError("normalisation std must be positive")
        self.metadata: dict = {}

        ss_backbone, ss_sbfm, ss_head = np.random.SeedSequence(self.seed).spawn(3)
        rng = np.random.default_rng(ss_backbone)
        self.convs: list[list[tuple[Tensor, Tensor]]] = []
        c_in = c
        for channels, n_convs in backbone.blocks:
            block = []
            for _ in range(n_convs):
                block.append((_he_normal(rng, (channels, c_in, 3, 3), c_in * 9),
                              Tensor(np.zeros(channels), requires_grad=True)))
                c_in = channels
            self.convs.append(block)

        self.sbfm: SBFM | None = None
        sbfm_width = 0
        if sbfm is not None:
            self.sbfm = build_sbfm(sbfm, in_channels=c, seed=ss_sbfm)
            sbfm_width = self.sbfm.feature_width(h, w)
        self.sbfm_width = sbfm_width

        rng = np.random.default_rng(ss_head)
        self.head: list[tuple[Tensor, Tensor]] = []
        d_in = backbone.feature_width + sbfm_width
        for width in backbone.fc_widths + (backbone.n_classes,):
            self.head.append((_he_normal(rng, (d_in, width), d_in),
                              Tensor(np.zeros(width), requires_grad=True)))
            d_in = width

    # ------------------------------------------------------------ structure

    @property
    def has_sbfm(self) -> bool:
        return self.sbfm is not None

    @property
    def head_input_width(self) -> int:
        return self.head[0][0].shape[0]

    @property
    def model_id(self) -> str:
        if self.sbfm_config is None:
            return "MiniVGG"
        return f"MiniVGG-SBFM(l={self.sbfm_config.l},t={self.sbfm_config.t:g})"

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for b, block in enumerate(self.convs):
            for i, (w, bias) in enumerate(block):
                params += [(f"backbone.block{b}.conv{i}.weight", w),
                           (f"backbone.block{b}.conv{i}.bias", bias)]
        if self.sbfm is not None:
            params += self.sbfm.named_parameters()
        for i, (w, bias) in enumerate(self.head):
            params += [(f"head.fc{i}.weight", w), (f"head.fc{i}.bias", bias)]
        return params

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def directional_kernels(self):
        return [] if self.sbfm is None else self.sbfm.kernels()

    def project_(self) -> None:
        if self.sbfm is not None:
            self.sbfm.project_()

    def config(self) -> dict:
        return {
            "backbone": self.backbone_config.to_dict(),
            "sbfm": None if self.sbfm_config is None else self.sbfm_config.to_dict(),
            "seed": self.seed,
            "normalization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
        }

    # ------------------------------------------------------------ forward

    def standardize(self, x: Tensor) -> Tensor:
        shape = (1, -1, 1, 1)
        return (x - self.mean.reshape(shape)) * (1.0 / self.std).reshape(shape)

    def backbone_features(self, xn: Tensor) -> Tensor:
        out = xn
        for block in self.convs:
            for w, b in block:
                out = relu(conv2d(out, w, b, stride=1, padding=1))
            out = maxpool2d(out, 2, 2)
        return flatten(out)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.backbone_config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"model expects [B, {', '.join(map(str, expected))}] input, got {x.shape}")
        xn = self.standardize(x)
        feats = self.backbone_features(xn)
        if self.sbfm is not None:
            feats = concat(feats, self.sbfm.forward(xn))
        for i, (w, b) in enumerate(self.head):
            feats = linear(feats, w, b)
            if i < len(self.head) - 1:
                feats = relu(feats)
        return feats

    __call__ = forward

    def frozen(self):
        return _Frozen(self)


class _Frozen:
    """Temporarily stop parameters from requiring grad (input gradients only)."""

    def __init__(self, model: FusedModel):
        self.model = model

    def __enter__(self):
        self._flags = [(p, p.requires_grad) for p in self.model.parameters()]
        for p, _ in self._flags:
            p.requires_grad = False
        return self.model

    def __exit__(self, *exc):
        for p, flag in self._flags:
            p.requires_grad = flag


def build_model(backbone: BackboneConfig, sbfm: SBFMConfig | None = None, seed: int = 0,
                mean=None, std=None) -> FusedModel:
    """Deterministically initialised baseline (``sbfm=None``) or fused model."""
    if sbfm is not None and backbone.input_shape[0] < 1:
        raise ConfigError("SBFM needs at least one input channel")
    return FusedModel(backbone, sbfm, seed=seed, mean=mean, std=std)


# ---------------------------------------------------------------- inference


def predict_logits(model: FusedModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.forward(Tensor(images[start:start + batch_size])).data)
    if not out:
        return np.zeros((0, model.backbone_config.n_classes))
    return np.concatenate(out)


def predict_proba(model: FusedModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return softmax(predict_logits(model, images, batch_size))


def evaluate(model: FusedModel, ds: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    pred = predict_logits(model, ds.images, batch_size).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    test_accuracy: float | None = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def train_accuracy(self) -> float:
        return self.epochs[self.best_epoch].train_accuracy

    @property
    def val_accuracy(self) -> float:
        return self.epochs[self.best_epoch].val_accuracy

    @property
    def seconds_per_epoch(self) -> float:
        return float(np.mean([e.seconds for e in self.epochs]))

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "test_accuracy": self.test_accuracy}


def train(model: FusedModel, train_ds: LabeledDataset, val_ds: LabeledDataset | None = None,
          optimizer: OptimizerConfig | None = None, epochs: int = 30, batch_size: int = 64,
          seed: int = 0, test_ds: LabeledDataset | None = None,
          keep_best: bool = True) -> TrainReport:
    """Mini-batch SGD with directional-kernel projection after every step.

    The parameters with the best validation accuracy are restored at the end
    (the last epoch wins when no validation set is given).
    """
    optimizer = optimizer or OptimizerConfig()
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    if val_ds is not None and len(val_ds) == 0:
        val_ds = None
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")

    rng = np.random.default_rng(seed)
    params = model.trainable_parameters()
    state = SGDState()
    report = TrainReport()
    best_acc, best_params = -1.0, None
    model.project_()

    for epoch in range(epochs):
        order = rng.permutation(len(train_ds))
        t0 = time.perf_counter()
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = model.forward(Tensor(train_ds.images[idx]))
            loss = softmax_cross_entropy(logits, train_ds.labels[idx])
            for p in params:
                p.grad = None
            backward(loss)
            sgd_step(params, optimizer, state)
            model.project_()
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == train_ds.labels[idx]))
        seconds = time.perf_counter() - t0
        loss_mean = loss_sum / len(order)
        if not math.isfinite(loss_mean):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        val_acc = evaluate(model, val_ds, batch_size=max(batch_size, 256)) if val_ds is not None else float("nan")
        report.epochs.append(EpochRecord(epoch, loss_mean, correct / len(order), val_acc, seconds))
        log.info("epoch %d loss %.4f train %.4f val %.4f (%.1fs)",
                 epoch, loss_mean, correct / len(order), val_acc, seconds)

        score = val_acc if val_ds is not None else float(epoch)
        if keep_best and score > best_acc:
            best_acc, report.best_epoch = score, epoch
            best_params = [p.data.copy() for p in model.parameters()]
    if keep_best and best_params is not None:
        for p, saved in zip(model.parameters(), best_params):
            p.data[...] = saved
    else:
        report.best_epoch = epochs - 1
    if test_ds is not None:
        report.test_accuracy = evaluate(model, test_ds)
    model.metadata.update({"epochs": epochs, "best_epoch": report.best_epoch, "train_seed": seed})
    return report


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   b"SBFM" | u32 version | u32 header length | header JSON (UTF-8)
#   then per parameter: u32 name length | name (UTF-8) | u8 rank | rank x u64 dims | f64 data
# The header lists the record names in order; optimizer momentum buffers
# follow the parameters as records named "optim.<parameter name>".


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(model: FusedModel, path, metadata: dict | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    """Serialise ``model`` atomically (write to a temp file, then rename)."""
    named = model.named_parameters()
    optim = sorted((optimizer_state or {}).items())
    header = model.config()
    header["metadata"] = {**model.metadata, **(metadata or {})}
    header["records"] = [n for n, _ in named] + [f"optim.{n}" for n, _ in optim]
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hdr)))
    buf.write(hdr)
    for name, p in named:
        _write_record(buf, name, p.data)
    for name, arr in optim:
        _write_record(buf, f"optim.{name}", np.asarray(arr, dtype=np.float64))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what} at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, records) without building a model."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    r = _Reader(raw, path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SBFM checkpoint (bad magic)")
    version, hlen = r.unpack("<II", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    records: dict[str, np.ndarray] = {}
    for expected_name in header.get("records", []):
        (nlen,) = r.unpack("<I", "record name length")
        name = r.take(nlen, "record name").decode("utf-8", errors="replace")
        if name != expected_name:
            raise CheckpointError(f"{path}: record {name!r} where {expected_name!r} was expected")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}") if rank else ()
        count = int(np.prod(dims, dtype=np.int64))
        data = r.take(8 * count, f"data of {name}")
        records[name] = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} unexpected trailing bytes at offset {r.pos}")
    return header, records


def load_checkpoint(path) -> FusedModel:
    header, records = read_checkpoint(path)
    try:
        backbone = BackboneConfig.from_dict(header["backbone"])
        sbfm = None if header["sbfm"] is None else SBFMConfig.from_dict(header["sbfm"])
        norm = header["normalization"]
        model = build_model(backbone, sbfm, seed=header["seed"], mean=norm["mean"], std=norm["std"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid architecture config: {exc}") from exc
    for name, p in model.named_parameters():
        if name not in records:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = records[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, model expects {p.shape}")
        p.data[...] = arr
    model.metadata = dict(header.get("metadata", {}))
    model.optimizer_state = {k[len("optim."):]: v for k, v in records.items() if k.startswith("optim.")}
    return model


def clone_model(model: FusedModel) -> FusedModel:
    return copy.deepcopy(model)
