"""Fast gradient sign method and the epsilon-sweep evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .exceptions import ConfigError
from .model import FusedModel, predict_logits
from .tensor import Tensor, backward, softmax_cross_entropy

DEFAULT_EPSILONS = (0.1 / 255, 0.5 / 255, 1 / 255, 2 / 255, 3 / 255, 5 / 255, 8 / 255)


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not self.clip_min < self.clip_max:
            raise ConfigError("clip_min must be below clip_max")


def input_gradient(model: FusedModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/dx in raw pixel space; model parameters untouched."""
    xt = Tensor(x, requires_grad=True)
    with model.frozen():
        loss = softmax_cross_entropy(model.forward(xt), y)
        backward(loss)
    return xt.grad


def fgsm(model: FusedModel, x, y, cfg: AttackConfig | float, batch_size: int = 256) -> np.ndarray:
    """``clip(x + epsilon * sign(grad_x loss))`` with sign(0) = 0.

    The loss is the batch-mean cross-entropy; dividing by the batch size does
    not change the sign, so batching has no effect on the result.
    """
    if not isinstance(cfg, AttackConfig):
        cfg = AttackConfig(epsilon=float(cfg))
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y)
    if x.size and (x.min() < cfg.clip_min or x.max() > cfg.clip_max):
        raise ConfigError(f"inputs must lie in [{cfg.clip_min}, {cfg.clip_max}]")
    if cfg.epsilon == 0:
        return x.copy()
    out = np.empty_like(x)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        grad = input_gradient(model, x[sl], y[sl])
        out[sl] = np.clip(x[sl] + cfg.epsilon * np.sign(grad), cfg.clip_min, cfg.clip_max)
    return out


@dataclass
class AttackRecord:
    model: str
    epsilon: float
    accuracy: float
    n: int


@dataclass
class AttackReport:
    records: list[AttackRecord] = field(default_factory=list)

    def accuracies(self, model: str | None = None) -> list[float]:
        return [r.accuracy for r in self.records if model is None or r.model == model]

    def epsilons(self, model: str | None = None) -> list[float]:
        return [r.epsilon for r in self.records if model is None or r.model == model]


def adversarial_accuracy(model: FusedModel, ds: LabeledDataset, epsilon: float,
                         batch_size: int = 256) -> float:
    x_adv = fgsm(model, ds.images, ds.labels, AttackConfig(epsilon), batch_size=batch_size)
    pred = predict_logits(model, x_adv, batch_size).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


def attack_sweep(model: FusedModel, ds: LabeledDataset, epsilons=DEFAULT_EPSILONS,
                 model_id: str | None = None, batch_size: int = 256) -> AttackReport:
    """Adversarial accuracy over the whole of ``ds`` for each epsilon."""
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ConfigError("epsilon list is empty")
    if any(e < 0 for e in epsilons):
        raise ConfigError("epsilons must be nonnegative")
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ConfigError("epsilons must be in ascending order")
    if len(ds) == 0:
        raise ConfigError("cannot attack an empty dataset")
    name = model_id or model.model_id
    report = AttackReport()
    for eps in epsilons:
        acc = adversarial_accuracy(model, ds, eps, batch_size)
        report.records.append(AttackRecord(name, eps, acc, len(ds)))
    return report
