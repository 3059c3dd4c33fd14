"""Tiny fully convolutional segmentation network with explicit backprop.

Three zero-padded 3x3 conv layers (1 -> 16 -> 16 -> d) with ReLU, then a
1x1 linear head d -> C. Forward and backward are written out by hand in
float64; the gradients are what the finite-difference checks exercise, so
no autodiff framework sits underneath.

Convolutions run as im2col matrix products. Internally everything is laid
out channels-last, (B, H, W, C): the im2col gather then copies contiguous
runs and the matmul outputs need no transpose, which roughly halves the
per-step cost on CPU. The column matrices are kept in the forward cache
because the weight gradient reuses them. The single-image forward() keeps
the channels-first (d, H, W) / (C, H, W) convention at its boundary;
forward_batch() is the channels-last bulk entry point the trainer uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tsa_loss import ClassifierHead

__all__ = [
    "HIDDEN",
    "SegNetParams",
    "ForwardCache",
    "init_params",
    "forward",
    "forward_batch",
    "backward",
    "sgd_step",
    "ema_teacher_update",
]

HIDDEN = 16  # width of the two inner conv layers


@dataclass
class SegNetParams:
    """All trainable arrays. Also used as the container for their gradients."""

    conv1_w: np.ndarray  # (HIDDEN, 1, 3, 3)
    conv1_b: np.ndarray  # (HIDDEN,)
    conv2_w: np.ndarray  # (HIDDEN, HIDDEN, 3, 3)
    conv2_b: np.ndarray  # (HIDDEN,)
    conv3_w: np.ndarray  # (d, HIDDEN, 3, 3)
    conv3_b: np.ndarray  # (d,)
    head: ClassifierHead  # (C, d) and (C,)

    @property
    def feature_dim(self) -> int:
        return self.conv3_w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Fixed field order; serialization and the optimizer rely on it."""
        yield "conv1_w", self.conv1_w
        yield "conv1_b", self.conv1_b
        yield "conv2_w", self.conv2_w
        yield "conv2_b", self.conv2_b
        yield "conv3_w", self.conv3_w
        yield "conv3_b", self.conv3_b
        yield "head_w", self.head.weights
        yield "head_b", self.head.biases

    def copy(self) -> "SegNetParams":
        return SegNetParams(
            self.conv1_w.copy(),
            self.conv1_b.copy(),
            self.conv2_w.copy(),
            self.conv2_b.copy(),
            self.conv3_w.copy(),
            self.conv3_b.copy(),
            self.head.copy(),
        )

    @classmethod
    def zeros(cls, d: int, c: int) -> "SegNetParams":
        return cls(
            np.zeros((HIDDEN, 1, 3, 3)),
            np.zeros(HIDDEN),
            np.zeros((HIDDEN, HIDDEN, 3, 3)),
            np.zeros(HIDDEN),
            np.zeros((d, HIDDEN, 3, 3)),
            np.zeros(d),
            ClassifierHead(np.zeros((c, d)), np.zeros(c)),
        )


def _uniform_init(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.random(int(np.prod(shape))) * 2.0 * a - a).reshape(shape)


def init_params(d: int, n_classes: int, rng) -> SegNetParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases.

    Draw order is fixed (conv1, conv2, conv3, head) so a given seed always
    produces the same parameters.
    """
    if d < 1 or n_classes < 2:
        raise ValueError(f"need d >= 1 and n_classes >= 2, got d={d}, C={n_classes}")
    p = SegNetParams.zeros(d, n_classes)
    p.conv1_w = _uniform_init(rng, (HIDDEN, 1, 3, 3), 1 * 9, HIDDEN * 9)
    p.conv2_w = _uniform_init(rng, (HIDDEN, HIDDEN, 3, 3), HIDDEN * 9, HIDDEN * 9)
    p.conv3_w = _uniform_init(rng, (d, HIDDEN, 3, 3), HIDDEN * 9, d * 9)
    p.head.weights = _uniform_init(rng, (n_classes, d), d, n_classes)
    return p


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) rows ordered (ky, kx, c), zero padding."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    sb, sh, sw, sc = xp.strides
    win = as_strided(xp, shape=(b, h, w, 3, 3, c), strides=(sb, sh, sw, sh, sw, sc))
    return win.reshape(b * h * w, 9 * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(cout, cin, 3, 3) -> (9*cin, cout) matching the im2col row order."""
    cout, cin = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * cin, cout)


def _conv3x3(x, w, b):
    bs, h, wd, cin = x.shape
    cout = w.shape[0]
    col = _im2col(x)
    y = col @ _kernel_matrix(w) + b
    return y.reshape(bs, h, wd, cout), col


def _conv3x3_backward(dy, col, w, need_dx):
    bs, h, wd, cout = dy.shape
    cin = w.shape[1]
    dyf = dy.reshape(bs * h * wd, cout)
    dw = (col.T @ dyf).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = dyf.sum(axis=0)
    dx = None
    if need_dx:
        # The im2col adjoint as a transposed convolution: correlate dy with
        # the spatially flipped kernel, channel roles swapped. A gather plus
        # one matmul beats the equivalent nine-way scatter-add.
        wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = (_im2col(dy) @ _kernel_matrix(wt)).reshape(bs, h, wd, cin)
    return np.ascontiguousarray(dw), db, dx


@dataclass
class ForwardCache:
    """Everything backward needs from one forward pass (channels-last)."""

    params: SegNetParams
    z1: np.ndarray
    col1: np.ndarray
    z2: np.ndarray
    col2: np.ndarray
    z3: np.ndarray
    col3: np.ndarray
    features: np.ndarray  # (B, H, W, d)
    single: bool


def forward_batch(params: SegNetParams, images: np.ndarray):
    """Channels-last bulk forward: (B, H, W) -> features (B, H, W, d),
    logits (B, H, W, C) and the backward cache."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"expected (B, H, W), got shape {images.shape}")
    b, h, w = images.shape
    if h < 8 or w < 8:
        raise ValueError(f"image must be at least 8x8, got {h}x{w}")
    x = images[:, :, :, None]
    z1, col1 = _conv3x3(x, params.conv1_w, params.conv1_b)
    a1 = np.maximum(z1, 0.0)
    z2, col2 = _conv3x3(a1, params.conv2_w, params.conv2_b)
    a2 = np.maximum(z2, 0.0)
    z3, col3 = _conv3x3(a2, params.conv3_w, params.conv3_b)
    feats = np.maximum(z3, 0.0)
    d = params.feature_dim
    logits = feats.reshape(-1, d) @ params.head.weights.T + params.head.biases
    logits = logits.reshape(b, h, w, params.head.n_classes)
    cache = ForwardCache(params, z1, col1, z2, col2, z3, col3, feats, single=False)
    return feats, logits, cache


def forward(params: SegNetParams, image: np.ndarray):
    """Features (d, H, W), logits (C, H, W) and the backward cache.

    One image only; H and W must be at least 8 so every output pixel sees a
    full-depth receptive field somewhere in bounds.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a single (H, W) image, got shape {image.shape}")
    feats, logits, cache = forward_batch(params, image[None, :, :])
    cache.single = True
    return feats[0].transpose(2, 0, 1), logits[0].transpose(2, 0, 1), cache


def backward(cache: ForwardCache, grad_logits: np.ndarray, grad_features: np.ndarray | None = None) -> SegNetParams:
    """Parameter gradients for upstream dL/dlogits plus optional dL/dfeatures.

    The extra feature gradient is how the augmented loss reaches the
    backbone without going through the head logits. ReLU uses the z > 0
    subgradient (zero at the kink). Gradient layouts follow the cache: a
    single-image cache takes (C, H, W) / (d, H, W), a batch cache takes the
    channels-last (B, H, W, C) / (B, H, W, d).
    """
    p = cache.params
    feats = cache.features
    if cache.single:
        grad_logits = np.asarray(grad_logits).transpose(1, 2, 0)[None, ...]
        if grad_features is not None:
            grad_features = np.asarray(grad_features).transpose(1, 2, 0)[None, ...]
    b, h, w, d = feats.shape
    c = p.head.n_classes
    if grad_logits.shape != (b, h, w, c):
        raise ValueError(f"grad_logits shape {grad_logits.shape} does not match logits {(b, h, w, c)}")
    if grad_features is not None and grad_features.shape != (b, h, w, d):
        raise ValueError(
            f"grad_features shape {grad_features.shape} does not match features {(b, h, w, d)}"
        )

    gl = np.ascontiguousarray(grad_logits).reshape(-1, c)
    ff = feats.reshape(-1, d)
    ghead_w = gl.T @ ff
    ghead_b = gl.sum(axis=0)
    dfeats = (gl @ p.head.weights).reshape(b, h, w, d)
    if grad_features is not None:
        dfeats = dfeats + grad_features

    dz3 = dfeats * (cache.z3 > 0.0)
    dw3, db3, da2 = _conv3x3_backward(dz3, cache.col3, p.conv3_w, need_dx=True)
    dz2 = da2 * (cache.z2 > 0.0)
    dw2, db2, da1 = _conv3x3_backward(dz2, cache.col2, p.conv2_w, need_dx=True)
    dz1 = da1 * (cache.z1 > 0.0)
    dw1, db1, _ = _conv3x3_backward(dz1, cache.col1, p.conv1_w, need_dx=False)

    return SegNetParams(dw1, db1, dw2, db2, dw3, db3, ClassifierHead(ghead_w, ghead_b))


def sgd_step(params: SegNetParams, grads: SegNetParams, lr: float, momentum: float, velocity: SegNetParams) -> None:
    """In-place heavy-ball step: v <- m*v + g; p <- p - lr*v."""
    if lr <= 0.0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for (_, p), (_, g), (_, v) in zip(params.arrays(), grads.arrays(), velocity.arrays()):
        v *= momentum
        v += g
        p -= lr * v


def ema_teacher_update(teacher: SegNetParams, student: SegNetParams, lam: float) -> None:
    """In-place teacher <- lam*teacher + (1-lam)*student.

    lam = 1 is a strict no-op and lam = 0 a strict copy, so the boundary
    contracts hold bit-for-bit.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if lam == 1.0:
        return
    for (_, t), (_, s) in zip(teacher.arrays(), student.arrays()):
        if lam == 0.0:
            t[...] = s
        else:
            t *= lam
            t += (1.0 - lam) * s
