"""scikit-learn compatible classifier around the tree network trainer."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import architectures, trainer
from .dataio import LabeledDataset
from .config import default_schedule
from .graph import CIGN, RoutingPolicy, TreeSpec
from .report import LeafHistogram, leaf_histogram


def _images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        if X.shape[1] != 784:
            raise ValueError(f"flat input must have 784 features, got {X.shape[1]}")
        X = X.reshape(-1, 28, 28, 1)
    elif X.ndim == 3:
        X = X[..., None]
    if X.shape[1:] != (28, 28, 1):
        raise ValueError(f"expected 28x28 single-channel images, got shape {X.shape}")
    return X


class CIGNClassifier(ClassifierMixin, BaseEstimator):
    """Conditional information gain network as a scikit-learn classifier.

    ``X`` holds 28x28 grayscale images scaled to [0, 1], either flat
    (n_samples, 784) or as image arrays. Labels may be any 10 (or fewer)
    distinct values; they are encoded internally.

    Parameters left as ``None`` take the published defaults for the chosen
    ``architecture``.

    Examples
    --------
    >>> clf = CIGNClassifier(variant="cign_fed", epochs=2, random_state=0)  # doctest: +SKIP
    >>> clf.fit(X_train, y_train).score(X_test, y_test)                       # doctest: +SKIP
    """

    def __init__(
        self,
        architecture: str = "mnist",
        variant: str = "cign_fed",
        epochs: int | None = None,
        batch_size: int | None = None,
        base_lr: float | None = None,
        momentum: float | None = None,
        lambda_ig: float | None = None,
        lambda_balance: float | None = None,
        lambda_f: float | None = None,
        lambda_h: float | None = None,
        tau0: float | None = None,
        tau_decay: float | None = None,
        tau_min: float | None = None,
        rho_phases=None,
        dropout_f: float | None = None,
        dropout_h: float | None = None,
        precision: str = "float32",
        random_state: int = 0,
    ):
        self.architecture = architecture
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.momentum = momentum
        self.lambda_ig = lambda_ig
        self.lambda_balance = lambda_balance
        self.lambda_f = lambda_f
        self.lambda_h = lambda_h
        self.tau0 = tau0
        self.tau_decay = tau_decay
        self.tau_min = tau_min
        self.rho_phases = rho_phases
        self.dropout_f = dropout_f
        self.dropout_h = dropout_h
        self.precision = precision
        self.random_state = random_state

    _SCHEDULE_KEYS = (
        "epochs", "batch_size", "base_lr", "momentum", "lambda_ig", "lambda_balance",
        "lambda_f", "lambda_h", "tau0", "tau_decay", "tau_min", "rho_phases",
        "dropout_f", "dropout_h",
    )

    def _schedule(self):
        overrides = {k: getattr(self, k) for k in self._SCHEDULE_KEYS if getattr(self, k) is not None}
        return default_schedule(self.architecture).replace(**overrides)

    def _tree(self) -> TreeSpec:
        return architectures.build(
            self.architecture, self.variant, dropout_f=self.dropout_f, dropout_h=self.dropout_h
        )

    @property
    def _dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) > 10:
            raise ValueError(f"at most 10 classes are supported, got {len(self.classes_)}")
        data = LabeledDataset(_images(X), y_enc.astype(np.int64), "train")
        result = trainer.train(
            self._tree(), data, self._schedule(), seed=self.random_state, dtype=self._dtype
        )
        self.model_: CIGN = result.model
        self.record_ = result.record
        return self

    def _forward_logits(self, X) -> tuple[torch.Tensor, torch.Tensor]:
        check_is_fitted(self, "model_")
        X = _images(X)
        outs, leaves = [], []
        with torch.no_grad():
            for start in range(0, len(X), 500):
                logits, leaf = self.model_.predict_logits(X[start:start + 500])
                outs.append(logits)
                leaves.append(leaf)
        return torch.cat(outs), torch.cat(leaves)

    def predict_proba(self, X) -> np.ndarray:
        logits, _ = self._forward_logits(X)
        proba = torch.softmax(logits.double(), dim=1).numpy()
        return proba[:, : len(self.classes_)] / proba[:, : len(self.classes_)].sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def apply(self, X) -> np.ndarray:
        """Index of the leaf each sample is routed to under eval routing."""
        return self._forward_logits(X)[1].numpy()

    def routing_histogram(self, X, y) -> LeafHistogram:
        check_is_fitted(self, "model_")
        y_enc = np.searchsorted(self.classes_, np.asarray(y))
        data = LabeledDataset(_images(X), y_enc.astype(np.int64), "test")
        return leaf_histogram(self.model_, data)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.allow_nan = False
        return tags
