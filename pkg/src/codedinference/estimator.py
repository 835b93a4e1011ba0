"""Scikit-learn style estimator facade over code training.

``fit`` learns the encoder/decoder pair against the frozen base model,
``transform`` encodes groups of inputs into parities, and ``predict`` returns
the class each input's reconstruction would carry if that input's own output
went missing — the hardest single-erasure scenario for every position. The
estimator follows sklearn conventions (constructor stores hyperparameters
verbatim, fitted state gets a trailing underscore, ``get_params`` /
``set_params`` work for grid search and cloning).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .coding import decode
from .data import Dataset
from .evaluation import coded_group_outputs
from .exceptions import ConfigurationError
from .geometry import CodeConfig, ErasurePattern
from .training import TrainConfig, train
from .validation import as_image_batch, check_labels

__all__ = ["ErasureCodeEstimator"]


class ErasureCodeEstimator(BaseEstimator):
    """Learn an erasure code for a frozen differentiable base model.

    Parameters mirror :class:`~codedinference.training.TrainConfig`;
    ``base_model`` must be a :class:`~codedinference.models.BaseModel` (its
    geometry fixes n, channels, and m). ``X`` passed to the methods is an
    array of images shaped (N, channels, n, n) or (N, n, n).
    """

    def __init__(self, base_model=None, k=2, r=1, encoder="conv",
                 loss="mse-base", learning_rate=1e-3, l2=1e-5, epochs=10,
                 batch_samples=None, patience=20, validation_fraction=0.1,
                 scenario_sizes="exact", share_channel_weights=True, seed=0,
                 device="cpu", deterministic=False):
        self.base_model = base_model
        self.k = k
        self.r = r
        self.encoder = encoder
        self.loss = loss
        self.learning_rate = learning_rate
        self.l2 = l2
        self.epochs = epochs
        self.batch_samples = batch_samples
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.scenario_sizes = scenario_sizes
        self.share_channel_weights = share_channel_weights
        self.seed = seed
        self.device = device
        self.deterministic = deterministic

    # ------------------------------------------------------------------
    def _code_config(self) -> CodeConfig:
        if self.base_model is None:
            raise ConfigurationError("base_model is required")
        channels, n, _ = self.base_model.input_shape
        return CodeConfig(k=self.k, r=self.r, n=n, channels=channels,
                          m=self.base_model.output_dim)

    def fit(self, X, y=None):
        """Train the code on images ``X`` (labels ``y`` only for XENT-Label)."""

        config = self._code_config()
        images = as_image_batch(X, channels=config.channels, n=config.n)
        labels = None
        if y is not None:
            labels = check_labels(y, len(images), config.m)
        dataset = Dataset(images=images, labels=labels, name="fit")
        train_config = TrainConfig(
            loss=self.loss, learning_rate=self.learning_rate, l2=self.l2,
            batch_samples=self.batch_samples, epochs=self.epochs,
            patience=self.patience, validation_fraction=self.validation_fraction,
            scenario_sizes=self.scenario_sizes, seed=self.seed,
            device=self.device, deterministic=self.deterministic)
        trained = train(dataset, self.base_model, config, train_config,
                        architecture=self.encoder,
                        share_channel_weights=self.share_channel_weights)
        self.trained_code_ = trained
        self.encoder_ = trained.encoder
        self.decoder_ = trained.decoder
        self.config_ = config
        self.history_ = trained.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "trained_code_"):
            raise NotFittedError(
                "This ErasureCodeEstimator instance is not fitted yet; call "
                "'fit' first.")

    def _groups(self, X) -> np.ndarray:
        config = self.config_
        images = as_image_batch(X, channels=config.channels, n=config.n)
        if len(images) % config.k:
            raise ConfigurationError(
                f"number of images ({len(images)}) must be a multiple of "
                f"k={config.k}")
        return images

    # ------------------------------------------------------------------
    def transform(self, X) -> np.ndarray:
        """Encode: parity images for each group of k inputs, (G, r, C, n, n)."""

        self._check_fitted()
        images = self._groups(X)
        config = self.config_
        grouped = images.reshape(-1, config.k, *config.input_shape)
        with torch.no_grad():
            parities = self.encoder_(torch.from_numpy(grouped).to(self.device))
        return parities.cpu().numpy()

    def predict_scores(self, X) -> np.ndarray:
        """Reconstructed raw score vectors (N, m) under own-output erasure."""

        self._check_fitted()
        images = self._groups(X)
        config = self.config_
        outputs = coded_group_outputs(self.encoder_, self.base_model, images,
                                      config, device=self.device)
        recons = np.empty((len(outputs), config.k, config.m), dtype=np.float32)
        with torch.no_grad():
            outs = torch.from_numpy(outputs).to(self.device)
            for position in range(config.k):
                slot = decode(self.decoder_, outs, ErasurePattern((position,)))
                recons[:, position, :] = slot[:, position, :].cpu().numpy()
        return recons.reshape(-1, config.m)

    def predict(self, X) -> np.ndarray:
        """Predicted class labels for each input's reconstruction."""

        return self.predict_scores(X).argmax(axis=1)

    def score(self, X, y=None) -> float:
        """Overall accuracy when ``y`` is given, recovery accuracy otherwise."""

        self._check_fitted()
        pred = self.predict(X)
        if y is not None:
            labels = check_labels(y, len(pred), self.config_.m)
            return float((pred == labels).mean())
        base_scores = self.base_model.predict_scores(self._groups(X),
                                                     device=self.device)
        return float((pred == base_scores[: len(pred)].argmax(axis=1)).mean())
