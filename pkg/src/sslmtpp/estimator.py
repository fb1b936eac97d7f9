"""scikit-learn style front end.

``X`` is a list of event sequences. A sequence whose markers are ``None`` is
unlabeled, the usual semi-supervised convention; ``fit`` uses it for the
reconstruction objective only.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import MarkedSequence, make_batch
from .metrics import EvalReport, evaluate
from .training import TrainConfig, TrainResult, train


def check_sequences(X: Sequence[Any], require_markers: bool = False) -> list[MarkedSequence]:
    """Coerce ``X`` into :class:`MarkedSequence` objects.

    Accepted items: ``MarkedSequence``; mappings with ``times`` and optional
    ``markers``/``id``; ``(times, markers)`` pairs; bare arrays of times.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2 and X.dtype != object:
        X = list(X)
    if not isinstance(X, (list, tuple)):
        X = list(X)
    if len(X) == 0:
        raise ValueError("expected at least one sequence")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, MarkedSequence):
            seq = item
        elif isinstance(item, dict):
            seq = MarkedSequence(str(item.get("id", f"seq{i}")), item["times"], item.get("markers"))
        elif isinstance(item, tuple) and len(item) == 2:
            seq = MarkedSequence(f"seq{i}", item[0], item[1])
        else:
            seq = MarkedSequence(f"seq{i}", item, None)
        if require_markers and seq.markers is None:
            raise ValueError(f"sequence {i} has no markers")
        out.append(seq)
    return out


def _attach_labels(seqs: list[MarkedSequence], y) -> list[MarkedSequence]:
    if y is None:
        return seqs
    if len(y) != len(seqs):
        raise ValueError(f"y has {len(y)} entries for {len(seqs)} sequences")
    return [MarkedSequence(s.seq_id, s.times, None if m is None else m) for s, m in zip(seqs, y)]


class SSLMTPPClassifier(ClassifierMixin, BaseEstimator):
    """Next-marker classifier trained from labeled and unlabeled event sequences.

    Hyperparameters mirror :class:`~sslmtpp.training.TrainConfig`. With
    ``baseline=True`` the encoder-decoder is ignored and the model is the
    purely supervised comparator.
    """

    def __init__(self, epochs=100, lr=0.01, batch_size=1024, lam=0.1, seed=0, unlabeled_ratio=1,
                 clip_norm=5.0, baseline=False, num_classes=3, hidden_dim=64, num_layers=5,
                 marker_embed_dim=16, encoder_dim=32, encoder_layers=2, head_dim=32, dropout=0.1,
                 use_autoencoder=True, decoder_mode="teacher"):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.lam = lam
        self.seed = seed
        self.unlabeled_ratio = unlabeled_ratio
        self.clip_norm = clip_norm
        self.baseline = baseline
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.marker_embed_dim = marker_embed_dim
        self.encoder_dim = encoder_dim
        self.encoder_layers = encoder_layers
        self.head_dim = head_dim
        self.dropout = dropout
        self.use_autoencoder = use_autoencoder
        self.decoder_mode = decoder_mode

    def _train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def fit(self, X, y=None):
        """``y``, when given, is one marker array (or ``None`` for unlabeled) per sequence."""
        seqs = _attach_labels(check_sequences(X), y)
        labeled = [s for s in seqs if s.markers is not None]
        unlabeled = [s for s in seqs if s.markers is None]
        if not labeled:
            raise ValueError("fit needs at least one labeled sequence")
        result: TrainResult = train(labeled, unlabeled, self._train_config())
        self.model_ = result.model
        self.scaler_ = result.scaler
        self.history_ = result.history
        self.classes_ = np.arange(self.num_classes)
        self.n_labeled_ = len(labeled)
        self.n_unlabeled_ = len(unlabeled)
        return self

    def _predict_arrays(self, X):
        check_is_fitted(self, "model_")
        seqs = check_sequences(X)
        probas, gaps = [], []
        for lo in range(0, len(seqs), 256):
            chunk = seqs[lo: lo + 256]
            if any(s.markers is None for s in chunk):
                raise ValueError("prediction needs the observed markers of each history")
            batch = make_batch(chunk, self.scaler_)
            proba, gap = self.model_.predict_proba_batch(batch)
            for b, s in enumerate(chunk):
                probas.append(proba[b, : len(s)])
                gaps.append(self.scaler_.inverse(gap[b, : len(s)]))
        return probas, gaps

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per sequence, row ``j`` is the marker distribution of event ``j + 1``."""
        return self._predict_arrays(X)[0]

    def predict(self, X) -> list[np.ndarray]:
        return [p.argmax(axis=1) for p in self.predict_proba(X)]

    def predict_next_gap(self, X) -> list[np.ndarray]:
        """Per sequence, row ``j`` is the predicted gap between events ``j`` and ``j + 1``."""
        return self._predict_arrays(X)[1]

    def evaluate(self, X) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_sequences(X, require_markers=True), self.scaler_)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Argmax-macro average precision (percentage) of next-marker predictions."""
        return self.evaluate(_attach_labels(check_sequences(X), y)).avg_precision
