"""scikit-learn style wrapper around the multi-task network.

``fit(X, y, masks=...)`` trains on grayscale images; ``predict`` returns
class labels, ``predict_mask`` lesion masks, and ``transform`` the pooled
deepest encoder features.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from .core.tensor import no_grad
from .data import Sample
from .losses import LossConfig
from .network import STRIDE, ModelConfig, MultiTaskNet
from .trainer import TrainConfig, predict, train


def _images(X, size=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[-1] != 1:
        raise ValueError(f"expected images of shape (N, H, W) or (N, H, W, 1), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found array with 0 samples")
    if X.shape[1] != X.shape[2] or X.shape[1] % STRIDE:
        raise ValueError(f"images must be square with side divisible by {STRIDE}, got {X.shape[1:3]}")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"images have side {X.shape[1]}, the model was fitted on {size}")
    if not np.isfinite(X).all():
        raise ValueError("input contains NaN or infinity")
    return X


class MultiTaskClassifier(ClassifierMixin, BaseEstimator):
    """Joint lesion segmentation and 3-class classification."""

    def __init__(self, encoder_channels=(16, 32, 64, 128, 256), decoder_channels=(128, 64, 32, 16),
                 clf_width=256, head_width=256, use_hmsf=True, use_tim=True, use_upa=True, dropout=0.3,
                 epochs=100, batch_size=8, lr0=3e-4, lr_min=1.5e-6, patience=10, augment=True,
                 val_fraction=0.15, random_state=0):
        self.encoder_channels = encoder_channels
        self.decoder_channels = decoder_channels
        self.clf_width = clf_width
        self.head_width = head_width
        self.use_hmsf = use_hmsf
        self.use_tim = use_tim
        self.use_upa = use_upa
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_min = lr_min
        self.patience = patience
        self.augment = augment
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _train_config(self, size: int) -> TrainConfig:
        model = ModelConfig(input_size=size, encoder_channels=tuple(self.encoder_channels),
                            decoder_channels=tuple(self.decoder_channels), clf_width=self.clf_width,
                            head_width=self.head_width, use_hmsf=self.use_hmsf, use_tim=self.use_tim,
                            use_upa=self.use_upa, dropout=self.dropout, seed=self.random_state)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0, lr_min=self.lr_min,
                           patience=self.patience, seed=self.random_state, augment=self.augment,
                           loss=LossConfig(), model=model).validate()

    def fit(self, X, y, masks=None):
        if masks is None:
            raise ValueError("fit requires lesion masks: fit(X, y, masks=...)")
        X = _images(X)
        y = np.asarray(y)
        M = np.asarray(masks, dtype=np.float64).reshape(X.shape)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        if not np.isin(M, (0.0, 1.0)).all():
            raise ValueError("masks must be binary")
        self.classes_ = np.array([0, 1, 2])
        if not np.isin(y, self.classes_).all():
            raise ValueError(f"labels must be in {self.classes_.tolist()}")
        cfg = self._train_config(X.shape[1])
        samples = [Sample(X[i], M[i], int(y[i])) for i in range(len(X))]
        idx = np.arange(len(samples))
        if self.val_fraction > 0:
            counts = np.bincount(y.astype(int), minlength=3)
            strat = y if counts[counts > 0].min() >= 2 else None
            tr, va = train_test_split(idx, test_size=self.val_fraction, random_state=self.random_state,
                                      stratify=strat)
        else:
            tr, va = idx, idx
        self.model_ = MultiTaskNet(cfg.model)
        res = train(self.model_, [samples[i] for i in tr], [samples[i] for i in va], cfg)
        self.history_ = res.history
        self.best_epoch_ = res.best_epoch
        self.n_features_in_ = X.shape[1] * X.shape[2]
        self.image_size_ = X.shape[1]
        return self

    def _predict_all(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, _images(X, self.image_size_))

    def predict_proba(self, X) -> np.ndarray:
        return self._predict_all(X)[1]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def predict_mask(self, X, threshold: float = 0.5) -> np.ndarray:
        """Binary lesion masks of shape ``(N, H, W)``."""
        return (self._predict_all(X)[0][..., 0] >= threshold).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Globally pooled deepest encoder features, shape ``(N, encoder_channels[-1])``."""
        check_is_fitted(self, "model_")
        X = _images(X, self.image_size_)
        self.model_.eval()
        with no_grad():
            return np.concatenate([self.model_.encoder_forward(X[i:i + 16])[-1].data.mean(axis=(1, 2))
                                   for i in range(0, len(X), 16)])
