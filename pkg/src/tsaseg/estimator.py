"""Scikit-learn style facade over the trainer.

TsaSegmenter treats whole images as samples: X has shape (n, H, W) with values
in [0, 1], y has shape (n, H, W) with integer class labels. A y map that is
entirely -1 marks that image as unlabeled; extra unlabeled images can also be
passed separately via fit(..., X_unlabeled=...). Unlabeled images are assigned
to the shifted domain, labeled ones to the reference domain, matching the
intended use: annotate one domain, adapt to the other.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .metrics import dice
from .synth_data import Sample
from .trainer import TrainConfig, init_state, predict_labels, run_training
from .tsa_loss import softmax_cross_entropy  # noqa: F401  (re-export convenience)


def _as_image_stack(X, name: str = "X") -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {arr.shape}")
    if arr.shape[1] < 8 or arr.shape[2] < 8:
        raise ValueError(f"{name} images must be at least 8x8, got {arr.shape[1:]}")
    return arr


def _as_label_stack(y, n: int, hw) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"y must be an integer array of shape (n, H, W), got {arr.shape} {arr.dtype}")
    if arr.shape != (n,) + tuple(hw):
        raise ValueError(f"y shape {arr.shape} does not match X shape {(n,) + tuple(hw)}")
    return arr


class TsaSegmenter(BaseEstimator):
    """Semi-supervised pixel classifier with feature-statistic augmentation.

    Parameters mirror the trainer configuration; see TrainConfig for the
    semantics of each. The fitted attributes are state_ (full training state)
    and n_classes_ / feature_dim_ for introspection.
    """

    def __init__(
        self,
        feature_dim: int = 16,
        n_classes: int = 3,
        beta: float = 0.4,
        lambda_teacher: float = 0.99,
        stats_momentum: float = 0.99,
        tau: float = 0.95,
        alpha_max: float = 0.5,
        ramp_steps: int | None = None,
        direction: str = "target_minus_source",
        lr: float = 0.05,
        sgd_momentum: float = 0.0,
        iterations: int = 400,
        batch_labeled: int = 1,
        batch_unlabeled: int = 1,
        seed: int = 0,
    ):
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.beta = beta
        self.lambda_teacher = lambda_teacher
        self.stats_momentum = stats_momentum
        self.tau = tau
        self.alpha_max = alpha_max
        self.ramp_steps = ramp_steps
        self.direction = direction
        self.lr = lr
        self.sgd_momentum = sgd_momentum
        self.iterations = iterations
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            feature_dim=self.feature_dim,
            n_classes=self.n_classes,
            beta=self.beta,
            lambda_teacher=self.lambda_teacher,
            stats_momentum=self.stats_momentum,
            tau=self.tau,
            alpha_max=self.alpha_max,
            ramp_steps=self.ramp_steps,
            direction=self.direction,
            lr=self.lr,
            sgd_momentum=self.sgd_momentum,
            iterations=self.iterations,
            batch_labeled=self.batch_labeled,
            batch_unlabeled=self.batch_unlabeled,
            seed=self.seed,
        )

    def fit(self, X, y, X_unlabeled=None):
        X = _as_image_stack(X)
        y = _as_label_stack(y, X.shape[0], X.shape[1:])

        labeled: list[Sample] = []
        unlabeled: list[np.ndarray] = []
        for img, lab in zip(X, y):
            if np.all(lab == -1):
                unlabeled.append(img)
                continue
            if lab.min() < 0 or lab.max() >= self.n_classes:
                raise ValueError(
                    f"labels must lie in [0, {self.n_classes}) or be all -1, "
                    f"got range [{lab.min()}, {lab.max()}]"
                )
            labeled.append(Sample(image=img, labels=lab.astype(np.int64)))
        if X_unlabeled is not None:
            unlabeled.extend(_as_image_stack(X_unlabeled, "X_unlabeled"))
        if not labeled:
            raise ValueError("fit needs at least one labeled image")

        state = init_state(self._config())
        run_training(state, labeled, unlabeled)
        self.state_ = state
        self.n_classes_ = self.n_classes
        self.feature_dim_ = self.feature_dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise RuntimeError("this TsaSegmenter instance is not fitted yet")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = _as_image_stack(X)
        return np.stack([predict_labels(self.state_.student, img) for img in X])

    def predict_proba(self, X) -> np.ndarray:
        from .network import forward

        self._check_fitted()
        X = _as_image_stack(X)
        out = []
        for img in X:
            _, logits, _ = forward(self.state_.student, img)
            z = logits - logits.max(axis=0, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=0, keepdims=True))
        return np.stack(out)

    def score(self, X, y) -> float:
        """Mean foreground Dice over all images and classes 1..C-1."""
        self._check_fitted()
        X = _as_image_stack(X)
        y = _as_label_stack(y, X.shape[0], X.shape[1:])
        pred = self.predict(X)
        scores = []
        for p, t in zip(pred, y):
            for c in range(1, self.n_classes_):
                scores.append(dice(p == c, t == c))
        return float(np.mean(scores))
