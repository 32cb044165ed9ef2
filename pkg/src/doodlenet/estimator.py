"""scikit-learn style wrapper around the network and training loop.

``X`` stacks colour and thermal as 4 channels: ``N x 4 x H x W`` floats in
[0, 1] (channels 0-2 colour, channel 3 thermal). ``y`` is ``N x H x W``
integer labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .data import SegSample
from .evaluate import ConfusionMatrix, metrics_from_confusion
from .model import DooDLeNet, ModelConfig
from .train import TrainConfig, epoch_rng, lr_at_epoch, make_optimizer, train_epoch


def check_paired_images(X, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Validate an N x 4 x H x W array of finite values."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_2d=False)
    if X.ndim != 4 or X.shape[1] != 4:
        raise ValueError(f"expected N x 4 x H x W (colour + thermal), got shape {X.shape}")
    if (height, width) != (None, None) and X.shape[2:] != (height, width):
        raise ValueError(f"expected {height}x{width} images, got {X.shape[2]}x{X.shape[3]}")
    if X.shape[2] % 16 or X.shape[3] % 16:
        raise ValueError("image height and width must be divisible by 16")
    return X


def check_label_maps(y, X: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Validate integer label maps aligned with ``X``."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"labels of shape {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return y.astype(np.int64, copy=False)


def _samples(X: np.ndarray, y: np.ndarray) -> list[SegSample]:
    return [SegSample(f"{i:05d}", X[i, :3], X[i, 3:], y[i], "day", (0, 0)) for i in range(len(X))]


class DooDLeNetSegmenter(BaseEstimator):
    """Paired colour/thermal semantic segmenter.

    ``fit`` runs momentum SGD with the exponential schedule for ``epochs``
    passes over ``(X, y)``; there is no validation split or checkpointing here
    (use :func:`doodlenet.train.fit` for that).
    """

    def __init__(self, variant="full", num_classes=None, epochs=50, batch_size=8, lr=0.01,
                 momentum=0.9, weight_decay=0.0005, gamma=0.95, aux_weight=0.5,
                 widths=(16, 32, 64, 128), crop=None, seed=0):
        self.variant = variant
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.gamma = gamma
        self.aux_weight = aux_weight
        self.widths = widths
        self.crop = crop
        self.seed = seed

    def fit(self, X, y):
        X = check_paired_images(X)
        y = check_label_maps(y, X, self.num_classes)
        k = self.num_classes if self.num_classes is not None else max(int(y.max()) + 1, 2)
        config = ModelConfig(num_classes=k, height=X.shape[2], width=X.shape[3],
                             widths=tuple(self.widths), aux_weight=self.aux_weight,
                             variant=self.variant, seed=self.seed)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           gamma=self.gamma, crop=self.crop, seed=self.seed)
        model = DooDLeNet(config)
        optimizer = make_optimizer(model, tcfg)
        samples = _samples(X.astype(np.float32, copy=False), y)
        self.loss_curve_ = []
        for epoch in range(tcfg.epochs):
            stats = train_epoch(model, samples, optimizer, epoch_rng(tcfg.seed, epoch),
                                lr_at_epoch(epoch, tcfg.lr, tcfg.gamma), tcfg.batch_size,
                                tcfg.crop, epoch)
            self.loss_curve_.append(stats["loss"])
        self.model_ = model
        self.classes_ = np.arange(k)
        self.n_features_in_ = 4
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw class logits, N x k x H x W."""
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        X = check_paired_images(X, cfg.height, cfg.width).astype(cfg.np_dtype, copy=False)
        outs = []
        with T.no_grad():
            for start in range(0, len(X), 16):
                chunk = X[start:start + 16]
                outs.append(self.model_(chunk[:, :3], chunk[:, 3:]).y_final.data)
        return np.concatenate(outs)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y) -> float:
        """Mean IoU over the classes present in ``y`` or the prediction."""
        pred = self.predict(X)
        y = check_label_maps(y, check_paired_images(X), len(self.classes_))
        cm = ConfusionMatrix(len(self.classes_))
        cm.update(pred, y)
        return metrics_from_confusion(cm).miou
