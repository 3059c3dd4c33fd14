"""Bidirectional copy-paste mixing between labeled and unlabeled images.

A fixed-size rectangle (two thirds of each side, floored) is cut at a
uniformly random offset. mix_in pastes an unlabeled region onto a labeled
image; mix_out pastes a labeled region onto an unlabeled image. Targets
compose the ground-truth and pseudo label maps the same way, and each pixel
carries a supervision weight by label provenance: w_l where the target came
from ground truth, w_u where it came from a pseudo-label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng

__all__ = ["MixMask", "MixedSample", "sample_mask", "mix_in", "mix_out"]


@dataclass(frozen=True)
class MixMask:
    """Rectangle mask: True inside the pasted region."""

    mask: np.ndarray  # (H, W) bool
    top: int
    left: int
    height: int
    width: int


@dataclass
class MixedSample:
    image: np.ndarray  # (H, W) float64
    target: np.ndarray  # (H, W) integer labels
    weight: np.ndarray  # (H, W) float64 supervision weights


def sample_mask(rng: Rng, h: int, w: int) -> MixMask:
    """floor(2H/3) x floor(2W/3) rectangle at a uniform random offset."""
    rh, rw = (2 * h) // 3, (2 * w) // 3
    if rh < 1 or rw < 1:
        raise ValueError(f"image {h}x{w} too small for a mix rectangle")
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    m = np.zeros((h, w), dtype=bool)
    m[top : top + rh, left : left + rw] = True
    return MixMask(m, top, left, rh, rw)


def _check_mix_inputs(labeled_img, labeled_lbl, unlabeled_img, pseudo, mask):
    shapes = {labeled_img.shape, labeled_lbl.shape, unlabeled_img.shape, pseudo.shape, mask.mask.shape}
    if len(shapes) != 1:
        raise ValueError(f"mix inputs disagree on shape: {sorted(shapes)}")


def mix_in(
    labeled_img: np.ndarray,
    labeled_lbl: np.ndarray,
    unlabeled_img: np.ndarray,
    pseudo_lbl: np.ndarray,
    mask: MixMask,
    w_l: float = 1.0,
    w_u: float = 0.5,
) -> MixedSample:
    """Unlabeled region pasted into a labeled image.

    Inside the rectangle pixels and targets come from the unlabeled side
    (pseudo-labels, weight w_u); outside from the labeled side (ground
    truth, weight w_l).
    """
    labeled_img = np.asarray(labeled_img, dtype=np.float64)
    unlabeled_img = np.asarray(unlabeled_img, dtype=np.float64)
    labeled_lbl = np.asarray(labeled_lbl)
    pseudo_lbl = np.asarray(pseudo_lbl)
    _check_mix_inputs(labeled_img, labeled_lbl, unlabeled_img, pseudo_lbl, mask)
    m = mask.mask
    image = np.where(m, unlabeled_img, labeled_img)
    target = np.where(m, pseudo_lbl, labeled_lbl)
    weight = np.where(m, float(w_u), float(w_l))
    return MixedSample(image, target, weight)


def mix_out(
    labeled_img: np.ndarray,
    labeled_lbl: np.ndarray,
    unlabeled_img: np.ndarray,
    pseudo_lbl: np.ndarray,
    mask: MixMask,
    w_l: float = 1.0,
    w_u: float = 0.5,
) -> MixedSample:
    """Labeled region pasted into an unlabeled image (the mirror of mix_in)."""
    labeled_img = np.asarray(labeled_img, dtype=np.float64)
    unlabeled_img = np.asarray(unlabeled_img, dtype=np.float64)
    labeled_lbl = np.asarray(labeled_lbl)
    pseudo_lbl = np.asarray(pseudo_lbl)
    _check_mix_inputs(labeled_img, labeled_lbl, unlabeled_img, pseudo_lbl, mask)
    m = mask.mask
    image = np.where(m, labeled_img, unlabeled_img)
    target = np.where(m, labeled_lbl, pseudo_lbl)
    weight = np.where(m, float(w_l), float(w_u))
    return MixedSample(image, target, weight)
