"""scikit-learn compatible wrappers around the model, feature module and scaler."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .attack import AttackConfig, fgsm
from .data import LabeledDataset, SplitSpec, channel_stats, denormalize, normalize, stratified_split
from .exceptions import ConfigError
from .model import (BackboneConfig, FusedModel, build_model, load_checkpoint, predict_logits,
                    save_checkpoint, train)
from .sbfm import SBFMConfig, build_sbfm
from .tensor import OptimizerConfig, Tensor, no_grad, softmax


def check_images(X, *, unit_range: bool = True) -> np.ndarray:
    """Validate a [N, C, H, W] image batch and return it as float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    if unit_range and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel ``(x - mean) / std`` for image batches."""

    def fit(self, X, y=None):
        X = check_images(X, unit_range=False)
        self.mean_, self.std_ = channel_stats(X)
        if np.any(self.std_ <= 0):
            raise ConfigError("a channel has zero variance; cannot standardise")
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return normalize(check_images(X, unit_range=False), self.mean_, self.std_)

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return denormalize(check_images(X, unit_range=False), self.mean_, self.std_)


class SobelBinaryFeatures(TransformerMixin, BaseEstimator):
    """Binary edge features from stacked direction-constrained Sobel layers.

    ``fit`` only initialises the kernels for the input channel count; the
    classic-Sobel initialisation is usable without training.
    """

    def __init__(self, n_sobel_layers=1, threshold=0.5, channels_per_direction=8,
                 pool_windows=None, init_noise=0.05, random_state=0):
        self.n_sobel_layers = n_sobel_layers
        self.threshold = threshold
        self.channels_per_direction = channels_per_direction
        self.pool_windows = pool_windows
        self.init_noise = init_noise
        self.random_state = random_state

    def _config(self) -> SBFMConfig:
        return SBFMConfig(l=self.n_sobel_layers, t=self.threshold,
                          channels_per_direction=self.channels_per_direction,
                          pool_windows=self.pool_windows, init_noise=self.init_noise)

    def fit(self, X, y=None):
        X = check_images(X, unit_range=False)
        self.sbfm_ = build_sbfm(self._config(), in_channels=X.shape[1], seed=self.random_state)
        self.output_shape_ = self.sbfm_.output_shape(*X.shape[2:])
        return self

    def edge_response(self, X) -> np.ndarray:
        check_is_fitted(self, "sbfm_")
        with no_grad():
            return self.sbfm_.edge_response(Tensor(check_images(X, unit_range=False))).data

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "sbfm_")
        with no_grad():
            return self.sbfm_.forward(Tensor(check_images(X, unit_range=False))).data


class SBFMClassifier(ClassifierMixin, BaseEstimator):
    """MiniVGG image classifier, optionally fused with binary Sobel features.

    ``fit`` holds out ``val_fraction`` of each class for model selection,
    computes the standardisation from the remaining training images and
    trains with SGD; parameters from the best validation epoch are kept.
    Set ``use_sbfm=False`` for the plain backbone.  ``normalization`` may
    pin the standardisation as a ``(mean, std)`` pair of per-channel values.
    """

    def __init__(self, use_sbfm=True, n_sobel_layers=3, threshold=0.8, channels_per_direction=8,
                 pool_windows=None, freeze_sbfm=False, conv_blocks=((32, 2), (64, 2), (128, 2)),
                 fc_widths=(256,), epochs=30, batch_size=64, learning_rate=0.01, momentum=0.9,
                 weight_decay=5e-4, val_fraction=0.1, normalization=None, split_seed=None,
                 random_state=0):
        self.use_sbfm = use_sbfm
        self.n_sobel_layers = n_sobel_layers
        self.threshold = threshold
        self.channels_per_direction = channels_per_direction
        self.pool_windows = pool_windows
        self.freeze_sbfm = freeze_sbfm
        self.conv_blocks = conv_blocks
        self.fc_widths = fc_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.normalization = normalization
        self.split_seed = split_seed
        self.random_state = random_state

    def sbfm_config(self) -> SBFMConfig | None:
        if not self.use_sbfm:
            return None
        return SBFMConfig(l=self.n_sobel_layers, t=self.threshold,
                          channels_per_direction=self.channels_per_direction,
                          pool_windows=self.pool_windows, freeze=self.freeze_sbfm)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.momentum, self.weight_decay)

    def fit(self, X, y, X_test=None, y_test=None):
        X = check_images(X)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        labels = self._encoder.transform(y)
        ds = LabeledDataset(X, labels, [str(c) for c in self.classes_])
        seed = int(self.random_state)
        split_seed = seed if self.split_seed is None else int(self.split_seed)
        if self.val_fraction:
            train_ds, val_ds = stratified_split(ds, SplitSpec(self.val_fraction, seed=split_seed))
        else:
            train_ds, val_ds = ds, None
        if self.normalization is None:
            mean, std = channel_stats(train_ds.images)
            std = np.where(std > 0, std, 1.0)
        else:
            mean, std = self.normalization
        backbone = BackboneConfig(blocks=self.conv_blocks, fc_widths=self.fc_widths,
                                  input_shape=X.shape[1:], n_classes=len(self.classes_))
        self.model_ = build_model(backbone, self.sbfm_config(), seed=seed, mean=mean, std=std)
        test_ds = None
        if X_test is not None:
            test_ds = LabeledDataset(check_images(X_test), self._encoder.transform(y_test), ds.class_names)
        self.history_ = train(self.model_, train_ds, val_ds, self.optimizer_config(),
                              epochs=self.epochs, batch_size=self.batch_size, seed=seed,
                              test_ds=test_ds)
        return self

    def _encode(self, y) -> np.ndarray:
        return np.searchsorted(self.classes_, np.asarray(y))

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_images(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def perturb(self, X, y, epsilon: float) -> np.ndarray:
        """FGSM adversarial counterparts of ``X`` at L-inf radius ``epsilon``."""
        check_is_fitted(self, "model_")
        return fgsm(self.model_, check_images(X), self._encode(y), AttackConfig(epsilon))

    def adversarial_score(self, X, y, epsilon: float) -> float:
        return self.score(self.perturb(X, y, epsilon), y)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path, metadata={
            "classes": [c.item() if hasattr(c, "item") else c for c in self.classes_],
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
        })

    @classmethod
    def from_model(cls, model: FusedModel, classes=None) -> SBFMClassifier:
        """Wrap an already trained model (e.g. from a checkpoint)."""
        cfg = model.sbfm_config
        clf = cls(use_sbfm=cfg is not None,
                  conv_blocks=model.backbone_config.blocks, fc_widths=model.backbone_config.fc_widths)
        if cfg is not None:
            clf.set_params(n_sobel_layers=cfg.l, threshold=cfg.t,
                           channels_per_direction=cfg.channels_per_direction,
                           pool_windows=cfg.pool_windows, freeze_sbfm=cfg.freeze)
        if classes is None:
            classes = model.metadata.get("classes", list(range(model.backbone_config.n_classes)))
        clf.classes_ = np.asarray(classes)
        clf._encoder = LabelEncoder().fit(clf.classes_)
        clf.model_ = model
        return clf

    @classmethod
    def load(cls, path) -> SBFMClassifier:
        return cls.from_model(load_checkpoint(path))
