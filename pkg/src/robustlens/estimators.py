"""scikit-learn style classifiers wrapping the toy models.

``fit`` trains from scratch with a seed; the trained weights live in a
read-only :class:`~robustlens.models.ModelCheckpoint` at ``checkpoint_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import rank_classes, softmax
from .data import LabeledDataset
from .models import CNNConfig, ModelCheckpoint, OptimizerSpec, ViTConfig, train
from .validation import as_batch, check_labels, check_images


class _ToyClassifier(ClassifierMixin, BaseEstimator):
    def _config(self, num_classes: int, image_size: int, channels: int):
        raise NotImplementedError

    def _optimizer(self) -> OptimizerSpec:
        return OptimizerSpec(
            kind=self.optimizer,
            lr=self.learning_rate,
            batch_size=self.batch_size,
            schedule=self.schedule,
            warmup_steps=self.warmup_steps,
            grad_clip=self.grad_clip,
        )

    def fit(self, X, y):
        X = check_images(X)
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        y = check_labels(y, X.shape[0])
        num_classes = self.num_classes or int(y.max()) + 1
        config = self._config(num_classes, X.shape[2], X.shape[1])
        self.checkpoint_ = train(config, LabeledDataset(X, y), self._optimizer(), self.epochs, self.random_state)
        self.classes_ = np.arange(num_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint, **params):
        """Wrap an existing checkpoint as a fitted estimator."""
        est = cls(**params)
        est.checkpoint_ = checkpoint
        est.classes_ = np.arange(checkpoint.config.num_classes)
        cfg = checkpoint.config
        est.n_features_in_ = cfg.channels * cfg.image_size * cfg.image_size
        return est

    def decision_function(self, X):
        check_is_fitted(self, "checkpoint_")
        X, promoted = as_batch(X)
        logits = self.checkpoint_.predict_logits(X)
        return logits[0] if promoted else logits

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return rank_classes(self.decision_function(X))[..., 0]


class ViTClassifier(_ToyClassifier):
    """Toy Vision Transformer trained with Adam."""

    def __init__(
        self,
        patch_size: int = 4,
        hidden_dim: int = 64,
        heads: int = 4,
        depth: int = 4,
        mlp_dim: int = 128,
        head_type: str = "linear",
        dropout_rate: float = 0.0,
        num_classes: int | None = None,
        epochs: int = 10,
        optimizer: str = "adam",
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        schedule: str = "cosine",
        warmup_steps: int = 50,
        grad_clip: float | None = 1.0,
        random_state: int = 0,
    ):
        self.patch_size = patch_size
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.depth = depth
        self.mlp_dim = mlp_dim
        self.head_type = head_type
        self.dropout_rate = dropout_rate
        self.num_classes = num_classes
        self.epochs = epochs
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.schedule = schedule
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _config(self, num_classes, image_size, channels):
        return ViTConfig(
            image_size=image_size,
            patch_size=self.patch_size,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            depth=self.depth,
            mlp_dim=self.mlp_dim,
            num_classes=num_classes,
            channels=channels,
            dropout_rate=self.dropout_rate,
            head_type=self.head_type,
        )


class ResNetClassifier(_ToyClassifier):
    """Toy residual CNN."""

    def __init__(
        self,
        widths: tuple[int, ...] = (16, 32, 64),
        blocks_per_stage: int = 2,
        groups: int = 4,
        kernel_size: int = 3,
        num_classes: int | None = None,
        epochs: int = 10,
        optimizer: str = "adam",
        learning_rate: float = 2e-3,
        batch_size: int = 32,
        schedule: str = "cosine",
        warmup_steps: int = 0,
        grad_clip: float | None = None,
        random_state: int = 0,
    ):
        self.widths = widths
        self.blocks_per_stage = blocks_per_stage
        self.groups = groups
        self.kernel_size = kernel_size
        self.num_classes = num_classes
        self.epochs = epochs
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.schedule = schedule
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _config(self, num_classes, image_size, channels):
        return CNNConfig(
            widths=tuple(self.widths),
            blocks_per_stage=self.blocks_per_stage,
            num_classes=num_classes,
            groups=self.groups,
            image_size=image_size,
            channels=channels,
            kernel_size=self.kernel_size,
        )
