"""scikit-learn compatible wrappers around the network and the data pipeline.

``SkeletonPreprocessor`` and ``ModalityTransformer`` are stateless
transformers, so they compose with :class:`SitMlpClassifier` in a
``sklearn.pipeline.Pipeline``::

    pipe = make_pipeline(SkeletonPreprocessor(frames=32), ModalityTransformer("bone"),
                         SitMlpClassifier(epochs=10))
    pipe.fit(sequences, labels)
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ModalityKind, SkeletonGraph, SkeletonSequence, default_graph, derive_modality, preprocess
from .engine.tensor import Tensor
from .exceptions import ConfigError, DataError
from .network import ModelConfig, SitMlpModel
from .train import TrainConfig, fit, predict_scores
from .validation import check_layout, check_sequences, check_targets


def _resolve_graph(graph, joints: int) -> SkeletonGraph:
    if graph is None:
        return default_graph(joints)
    if not isinstance(graph, SkeletonGraph):
        graph = SkeletonGraph(tuple(graph))
    if graph.num_joints != joints:
        raise ConfigError(f"graph has {graph.num_joints} joints, data has {joints}")
    return graph


class SkeletonPreprocessor(TransformerMixin, BaseEstimator):
    """Center and temporally resample raw sequences.

    Accepts either a list of :class:`SkeletonSequence` (which carry their own
    valid-frame counts) or a ``[N, M, T_raw, V, D]`` array, and returns a
    float32 ``[N, persons, frames, V, D]`` array.
    """

    def __init__(self, frames: int = 64, persons: Optional[int] = None, graph=None):
        self.frames = frames
        self.persons = persons
        self.graph = graph

    @staticmethod
    def _as_sequences(X) -> list:
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], SkeletonSequence):
            return list(X)
        arr = check_sequences(X)
        return [SkeletonSequence(s, 0) for s in arr]

    def fit(self, X, y=None):
        seqs = self._as_sequences(X)
        if self.frames < 1:
            raise ConfigError("frames must be positive")
        self.graph_ = _resolve_graph(self.graph, seqs[0].data.shape[2])
        self.n_persons_ = self.persons or max(s.data.shape[0] for s in seqs)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        seqs = self._as_sequences(X)
        return np.stack([preprocess(s, self.frames, self.graph_.root, self.n_persons_) for s in seqs])


class ModalityTransformer(TransformerMixin, BaseEstimator):
    """Map joint coordinates to one of the four input modalities."""

    def __init__(self, modality: str = "joint", graph=None):
        self.modality = modality
        self.graph = graph

    def fit(self, X, y=None):
        X = check_sequences(X)
        try:
            self.kind_ = ModalityKind(self.modality)
        except ValueError:
            raise ConfigError(f"unknown modality {self.modality!r}") from None
        self.graph_ = _resolve_graph(self.graph, X.shape[3])
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "kind_")
        X = check_sequences(X)
        return derive_modality(X, self.kind_, self.graph_).astype(np.float32)


class SitMlpClassifier(ClassifierMixin, BaseEstimator):
    """Skeleton action classifier trained with SGD, warmup and cosine annealing.

    ``fit`` takes preprocessed sequences ``[N, M, T, V, D]`` and arbitrary
    hashable labels; the input layout (persons, frames, joints, coordinates)
    is read off the training data. After fitting, ``model_`` holds the
    trained network, ``classes_`` the label set and ``history_`` the
    per-epoch log.
    """

    def __init__(self, base_channels: int = 48, heads: int = 8, channels=None,
                 strides=(1, 2, 1, 2, 1), epochs: int = 90, warmup_epochs: int = 5,
                 base_lr: float = 0.1, end_lr: float = 1e-4, momentum: float = 0.9,
                 weight_decay: float = 4e-4, batch_size: int = 64, precision: str = "float32",
                 disable_specific: bool = False, disable_generic: bool = False,
                 pool_temporal_attention: bool = False, pool_channel_attention: bool = False,
                 prior_init: bool = False, graph=None, random_state: int = 0):
        self.base_channels = base_channels
        self.heads = heads
        self.channels = channels
        self.strides = strides
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.base_lr = base_lr
        self.end_lr = end_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.precision = precision
        self.disable_specific = disable_specific
        self.disable_generic = disable_generic
        self.pool_temporal_attention = pool_temporal_attention
        self.pool_channel_attention = pool_channel_attention
        self.prior_init = prior_init
        self.graph = graph
        self.random_state = random_state

    def _model_config(self, X: np.ndarray, num_classes: int) -> ModelConfig:
        _, m, t, v, d = X.shape
        return ModelConfig(
            joints=v, frames=t, persons=m, coord_dim=d, num_classes=num_classes,
            base_channels=self.base_channels, heads=self.heads,
            channels=None if self.channels is None else list(self.channels),
            strides=list(self.strides), precision=self.precision,
            disable_specific=self.disable_specific, disable_generic=self.disable_generic,
            pool_temporal_attention=self.pool_temporal_attention,
            pool_channel_attention=self.pool_channel_attention,
            prior_init=self.prior_init, seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, warmup_epochs=self.warmup_epochs, base_lr=self.base_lr,
            end_lr=self.end_lr, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, seed=self.random_state,
        )

    def fit(self, X, y, out_dir=None):
        X = check_sequences(X)
        y = check_targets(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes to fit a classifier")
        cfg = self._model_config(X, len(self.classes_))
        graph = _resolve_graph(self.graph, cfg.joints) if self.prior_init else None
        self.model_ = SitMlpModel(cfg, graph)
        result = fit(self.model_, (X, encoded.astype(np.int64)), self._train_config(), out_dir)
        self.history_ = result.history
        self.model_.eval()
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_sequences(X)
        c = self.model_.config
        check_layout(X, c.joints, c.frames, c.persons, c.coord_dim)
        return X

    def decision_function(self, X) -> np.ndarray:
        """Raw logits ``[N, K]``."""
        X = self._checked(X)
        self.model_.eval()
        out = [self.model_(Tensor(X[i:i + self.batch_size].astype(self.model_.config.dtype))).data
               for i in range(0, len(X), self.batch_size)]
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        X = self._checked(X)
        return predict_scores(self.model_, X, self.batch_size)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
