"""Class-conditional feature statistics, tracked per domain with an EMA.

One bank holds, for every class c, a running mean and biased covariance of
pixel features seen on each side of the domain shift (source pixels come
with ground-truth labels, target pixels from confident teacher
pseudo-labels). The difference of class means and the chosen domain's
covariance parameterize the semantic augmentation distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SymMat

__all__ = [
    "TARGET_MINUS_SOURCE",
    "SOURCE_MINUS_TARGET",
    "DIRECTIONS",
    "ClassStats",
    "BatchStats",
    "StatsBank",
    "batch_class_stats",
    "confident_pixels",
]

TARGET_MINUS_SOURCE = "target_minus_source"
SOURCE_MINUS_TARGET = "source_minus_target"
DIRECTIONS = (TARGET_MINUS_SOURCE, SOURCE_MINUS_TARGET)


@dataclass
class ClassStats:
    """Running stats of one class in one domain.

    ``weight`` is the EMA mass seen so far; zero means uninitialized, in
    which case mean and cov are identically zero.
    """

    mean: np.ndarray
    cov: SymMat
    weight: float = 0.0

    @classmethod
    def empty(cls, dim: int) -> "ClassStats":
        return cls(np.zeros(dim, dtype=np.float64), SymMat.zeros(dim), 0.0)


@dataclass
class BatchStats:
    """Moments of one batch of pixels for one class."""

    mean: np.ndarray
    cov: SymMat
    count: int


def batch_class_stats(features: np.ndarray, labels: np.ndarray, c: int) -> BatchStats:
    """Mean and biased covariance (divide by n) of the class-c pixels.

    Empty selection yields zero stats with count 0; a single pixel yields
    that sample with zero covariance.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise ValueError(f"features must be (n, d), got shape {features.shape}")
    if labels.shape != (features.shape[0],):
        raise ValueError(
            f"labels shape {labels.shape} does not match {features.shape[0]} pixels"
        )
    d = features.shape[1]
    sel = features[labels == c]
    n = sel.shape[0]
    if n == 0:
        return BatchStats(np.zeros(d, dtype=np.float64), SymMat.zeros(d), 0)
    mean = sel.mean(axis=0)
    centered = sel - mean
    cov = SymMat.from_dense(centered.T @ centered / n)
    return BatchStats(mean, cov, n)


def confident_pixels(probs: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-labels and the confidence mask from class probabilities.

    ``probs`` is (C, H, W) (or (C, n)); a pixel is confident iff its max
    probability is >= tau. Ties take the lowest class index (argmax order).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 2:
        raise ValueError(f"probs must have a leading class axis, got shape {probs.shape}")
    labels = np.argmax(probs, axis=0)
    mask = np.max(probs, axis=0) >= tau
    return labels, mask


@dataclass
class StatsBank:
    """Per-class, per-domain EMA stats with momentum ``m``."""

    dim: int
    n_classes: int
    momentum: float
    source: list[ClassStats] = field(default_factory=list)
    target: list[ClassStats] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if not self.source:
            self.source = [ClassStats.empty(self.dim) for _ in range(self.n_classes)]
        if not self.target:
            self.target = [ClassStats.empty(self.dim) for _ in range(self.n_classes)]

    def _domain(self, domain: str) -> list[ClassStats]:
        if domain == "source":
            return self.source
        if domain == "target":
            return self.target
        raise ValueError(f"unknown domain {domain!r}")

    def ema_update(self, domain: str, c: int, batch: BatchStats) -> None:
        """Fold one batch into the EMA for (domain, class c).

        Empty batches are no-ops. The first nonempty batch installs its stats
        directly instead of averaging against the zero placeholder; with
        momentum 1 the update rule never transfers mass, so the slot stays
        uninitialized.
        """
        if batch.count == 0:
            return
        m = self.momentum
        slot = self._domain(domain)[c]
        if slot.weight == 0.0:
            if m == 1.0:
                return
            slot.mean = batch.mean.copy()
            slot.cov = batch.cov.copy()
            slot.weight = 1.0 - m
            return
        slot.mean = m * slot.mean + (1.0 - m) * batch.mean
        slot.cov = SymMat(self.dim, m * slot.cov.packed + (1.0 - m) * batch.cov.packed)
        slot.weight = m * slot.weight + (1.0 - m)

    def delta_mu(self, c: int, direction: str = TARGET_MINUS_SOURCE) -> np.ndarray:
        """Class-c mean shift between domains; zero until both sides have mass."""
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        src, tgt = self.source[c], self.target[c]
        if src.weight == 0.0 or tgt.weight == 0.0:
            return np.zeros(self.dim, dtype=np.float64)
        if direction == TARGET_MINUS_SOURCE:
            return tgt.mean - src.mean
        return src.mean - tgt.mean

    def augmentation_stats(self, c: int, direction: str = TARGET_MINUS_SOURCE) -> tuple[np.ndarray, SymMat]:
        """(delta_mu, covariance) driving the class-c augmentation.

        The direction flag swaps both pieces symmetrically: shifting toward
        the target uses the target covariance, and vice versa. Uninitialized
        slots contribute zeros, which downstream reduces to plain CE.
        """
        dmu = self.delta_mu(c, direction)
        dom = self.target[c] if direction == TARGET_MINUS_SOURCE else self.source[c]
        cov = dom.cov.copy() if dom.weight > 0.0 else SymMat.zeros(self.dim)
        return dmu, cov
