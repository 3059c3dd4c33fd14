"""Mean-teacher training loop with semantic augmentation of the head loss.

One step, in order: the teacher pseudo-labels the unlabeled batch; confident
pixels update the target statistics bank; the student runs on the labeled
batch, updating the source bank and paying supervised + augmented losses;
copy-paste mixed images pay a consistency loss; everything backprops into
one SGD step; the teacher then tracks the student by EMA.

The total loss is exactly loss_sup + loss_cons + beta * loss_tsa, and no
random draw depends on beta, so beta = 0 reproduces the plain mean-teacher
baseline bit for bit while still reporting the (unused) augmented loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import MetricsRow, class_metrics
from .mixer import mix_in, mix_out, sample_mask
from .network import (
    SegNetParams,
    backward,
    ema_teacher_update,
    forward,
    forward_batch,
    init_params,
    sgd_step,
)
from .numerics import Rng, SymMat
from .stats_bank import (
    TARGET_MINUS_SOURCE,
    DIRECTIONS,
    StatsBank,
    batch_class_stats,
    confident_pixels,
)
from .synth_data import (
    DimensionError,
    MagicError,
    ManifestRecord,
    Sample,
    TruncationError,
    VersionError,
    read_image,
    read_sample,
)
from .tsa_loss import TsaConfig, alpha_at, softmax_cross_entropy, tsa_loss

__all__ = [
    "TrainConfig",
    "TrainState",
    "StepReport",
    "SupervisedLoss",
    "EvalClassAggregate",
    "EvalResult",
    "supervised_loss",
    "init_state",
    "train_step",
    "run_training",
    "load_training_pools",
    "evaluate_samples",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    """Hyperparameters of one training run. Validated on construction."""

    feature_dim: int = 16
    n_classes: int = 3
    beta: float = 0.4
    lambda_teacher: float = 0.99
    stats_momentum: float = 0.99
    tau: float = 0.95
    alpha_max: float = 0.5
    ramp_steps: int | None = None  # None resolves to iterations // 2
    direction: str = TARGET_MINUS_SOURCE
    lr: float = 0.05
    sgd_momentum: float = 0.0
    iterations: int = 4000
    batch_labeled: int = 1
    batch_unlabeled: int = 1
    seed: int = 0
    w_l: float = 1.0
    w_u: float = 0.5
    eval_interval: int = 1000

    def __post_init__(self):
        checks = [
            (self.feature_dim >= 1, "feature_dim must be >= 1"),
            (2 <= self.n_classes <= 255, "n_classes must be in 2..255"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (0.0 <= self.lambda_teacher <= 1.0, "lambda_teacher must be in [0, 1]"),
            (0.0 <= self.stats_momentum <= 1.0, "stats_momentum must be in [0, 1]"),
            (0.0 < self.tau <= 1.0, "tau must be in (0, 1]"),
            (self.alpha_max >= 0.0, "alpha_max must be >= 0"),
            (self.ramp_steps is None or self.ramp_steps >= 0, "ramp_steps must be >= 0"),
            (self.direction in DIRECTIONS, f"direction must be one of {DIRECTIONS}"),
            (self.lr > 0.0, "lr must be > 0"),
            (0.0 <= self.sgd_momentum < 1.0, "sgd_momentum must be in [0, 1)"),
            (self.iterations >= 1, "iterations must be >= 1"),
            (self.batch_labeled >= 1, "batch_labeled must be >= 1"),
            (self.batch_unlabeled >= 0, "batch_unlabeled must be >= 0"),
            (self.w_l > 0.0, "w_l must be > 0"),
            (self.w_u >= 0.0, "w_u must be >= 0"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def resolved_ramp_steps(self) -> int:
        return self.iterations // 2 if self.ramp_steps is None else self.ramp_steps

    def tsa_config(self) -> TsaConfig:
        return TsaConfig(self.alpha_max, self.resolved_ramp_steps, self.direction)


@dataclass
class SupervisedLoss:
    """0.5 * weighted mean pixel CE + 0.5 * (1 - mean soft Dice)."""

    value: float
    ce: float
    dice_term: float
    grad_logits: np.ndarray


def supervised_loss(logits: np.ndarray, target: np.ndarray, weight: np.ndarray) -> SupervisedLoss:
    """Combined CE + soft-Dice loss of one image, with its logit gradient.

    Logits are channels-last (H, W, C), as is the returned gradient. CE is
    the weighted mean over pixels (weights normalized by their sum). Soft
    Dice averages (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps) over foreground
    classes only, with probabilities from the softmax; eps keeps classes
    absent from both prediction and target at a perfect score.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    weight = np.asarray(weight, dtype=np.float64)
    if logits.ndim != 3:
        raise ValueError(f"logits must be (H, W, C), got shape {logits.shape}")
    h, w, c = logits.shape
    if target.shape != (h, w) or weight.shape != (h, w):
        raise ValueError("target/weight shape does not match logits")
    if target.min() < 0 or target.max() >= c:
        raise ValueError("target label out of range")
    if np.any(weight < 0.0):
        raise ValueError("weights must be >= 0")
    wsum = weight.sum()
    if wsum <= 0.0:
        raise ValueError("weights sum to zero")

    flat = logits.reshape(-1, c)  # (n, C)
    tflat = target.reshape(-1)
    wflat = weight.reshape(-1)
    losses, probs = softmax_cross_entropy(flat, tflat)
    ce = float((wflat * losses).sum() / wsum)

    onehot = np.zeros_like(probs)
    onehot[np.arange(tflat.size), tflat] = 1.0
    fg = range(1, c)
    n_fg = c - 1
    num = np.empty(n_fg)
    den = np.empty(n_fg)
    for i, cls in enumerate(fg):
        num[i] = 2.0 * (probs[:, cls] * onehot[:, cls]).sum() + DICE_EPS
        den[i] = probs[:, cls].sum() + onehot[:, cls].sum() + DICE_EPS
    dice_term = float(1.0 - (num / den).mean())
    value = 0.5 * ce + 0.5 * dice_term

    # dCE/dz, then d(1-dice)/dp chained through the softmax Jacobian.
    grad = (wflat / wsum)[:, None] * (probs - onehot)
    gp = np.zeros_like(probs)
    for i, cls in enumerate(fg):
        gp[:, cls] = -(2.0 * onehot[:, cls] / den[i] - num[i] / den[i] ** 2) / n_fg
    inner = (gp * probs).sum(axis=1, keepdims=True)
    grad_dice = probs * (gp - inner)
    grad = 0.5 * grad + 0.5 * grad_dice
    return SupervisedLoss(value, ce, dice_term, grad.reshape(h, w, c))


@dataclass
class StepReport:
    """Everything one training step reports to the log."""

    iteration: int
    loss_total: float
    loss_sup: float
    loss_cons: float
    loss_tsa: float
    alpha: float
    confident_counts: np.ndarray  # per class

    @property
    def confident_total(self) -> int:
        return int(self.confident_counts.sum())


@dataclass
class TrainState:
    config: TrainConfig
    student: SegNetParams
    teacher: SegNetParams
    velocity: SegNetParams
    bank: StatsBank
    rng: Rng
    iteration: int = 0


def init_state(config: TrainConfig) -> TrainState:
    """Fresh state: seeded init, teacher = student copy, zero velocity."""
    rng = Rng(config.seed)
    student = init_params(config.feature_dim, config.n_classes, rng)
    return TrainState(
        config=config,
        student=student,
        teacher=student.copy(),
        velocity=SegNetParams.zeros(config.feature_dim, config.n_classes),
        bank=StatsBank(config.feature_dim, config.n_classes, config.stats_momentum),
        rng=rng,
        iteration=0,
    )


def _update_bank_from_pixels(bank, domain, feats_flat, labels_flat, n_classes):
    counts = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        stats = batch_class_stats(feats_flat, labels_flat, c)
        counts[c] = stats.count
        bank.ema_update(domain, c, stats)
    return counts


def train_step(state: TrainState, labeled: list[Sample], unlabeled_images: list[np.ndarray]) -> StepReport:
    """One optimization step; see the module docstring for the order.

    ``unlabeled_images`` may be empty, in which case the pseudo-labeling,
    bank update and consistency parts drop out and the step degrades to
    plain supervised training (plus the reported augmented loss).
    """
    cfg = state.config
    c_all = cfg.n_classes
    d = cfg.feature_dim
    if not labeled:
        raise ValueError("labeled batch must be nonempty")
    alpha = alpha_at(state.iteration, cfg.tsa_config())

    # (1) + (2): teacher pseudo-labels; confident pixels feed the target bank.
    confident_counts = np.zeros(c_all, dtype=np.int64)
    pseudo = []
    if unlabeled_images:
        u = np.stack([np.asarray(im, dtype=np.float64) for im in unlabeled_images])
        t_feats, t_logits, _ = forward_batch(state.teacher, u)
        zmax = t_logits.max(axis=-1, keepdims=True)
        ez = np.exp(t_logits - zmax)
        t_probs = ez / ez.sum(axis=-1, keepdims=True)
        for bi in range(u.shape[0]):
            lbl, mask = confident_pixels(np.moveaxis(t_probs[bi], -1, 0), cfg.tau)
            pseudo.append(lbl)
            if mask.any():
                confident_counts += _update_bank_from_pixels(
                    state.bank, "target", t_feats[bi][mask], lbl[mask], c_all
                )

    bl = len(labeled)
    limg = np.stack([np.asarray(s.image, dtype=np.float64) for s in labeled])
    llbl = [np.asarray(s.labels) for s in labeled]
    h, w = limg.shape[1:]

    # (4a) build the copy-paste pair up front so the student runs one batch:
    # entries 0..bl-1 are the labeled images, bl and bl+1 the mixed pair.
    mixed_in = mixed_out = None
    if unlabeled_images:
        mask_in = sample_mask(state.rng, h, w)
        mask_out = sample_mask(state.rng, h, w)
        li, lo = min(1, bl - 1), 0
        ui, uo = 0, min(1, len(unlabeled_images) - 1)
        mixed_in = mix_in(limg[li], llbl[li], unlabeled_images[ui], pseudo[ui], mask_in, cfg.w_l, cfg.w_u)
        mixed_out = mix_out(limg[lo], llbl[lo], unlabeled_images[uo], pseudo[uo], mask_out, cfg.w_l, cfg.w_u)
        batch = np.concatenate([limg, np.stack([mixed_in.image, mixed_out.image])])
    else:
        batch = limg

    # (3) student pass: source bank from labeled features, supervised +
    # augmented loss on the labeled entries, consistency on the mixed pair.
    s_feats, s_logits, cache = forward_batch(state.student, batch)
    feats_flat = s_feats[:bl].reshape(-1, d)
    labels_flat = np.concatenate([lb.reshape(-1) for lb in llbl])
    _update_bank_from_pixels(state.bank, "source", feats_flat, labels_flat, c_all)

    grad_logits = np.zeros_like(s_logits)
    sup_values = []
    wmap = np.full((h, w), cfg.w_l, dtype=np.float64)
    for bi in range(bl):
        sup = supervised_loss(s_logits[bi], llbl[bi], wmap)
        sup_values.append(sup.value)
        grad_logits[bi] = sup.grad_logits / bl
    loss_sup = float(np.mean(sup_values))

    rep = tsa_loss(feats_flat, labels_flat, state.student.head, state.bank, alpha, cfg.direction)
    loss_tsa = rep.value

    # (4b) bidirectional copy-paste consistency on the mixed entries.
    loss_cons = 0.0
    if mixed_in is not None:
        sup_in = supervised_loss(s_logits[bl], mixed_in.target, mixed_in.weight)
        sup_out = supervised_loss(s_logits[bl + 1], mixed_out.target, mixed_out.weight)
        loss_cons = 0.5 * (sup_in.value + sup_out.value)
        grad_logits[bl] = 0.5 * sup_in.grad_logits
        grad_logits[bl + 1] = 0.5 * sup_out.grad_logits

    # (5) one SGD step over every term.
    grad_feats = None
    if cfg.beta > 0.0:
        grad_feats = np.zeros_like(s_feats)
        grad_feats[:bl] = (cfg.beta * rep.grad_features).reshape(bl, h, w, d)
    grads = backward(cache, grad_logits, grad_feats)
    if cfg.beta > 0.0:
        grads.head.weights += cfg.beta * rep.grad_weights
        grads.head.biases += cfg.beta * rep.grad_biases
    sgd_step(state.student, grads, cfg.lr, cfg.sgd_momentum, state.velocity)

    # (6) teacher EMA.
    ema_teacher_update(state.teacher, state.student, cfg.lambda_teacher)

    state.iteration += 1
    loss_total = loss_sup + loss_cons + cfg.beta * loss_tsa
    return StepReport(
        iteration=state.iteration,
        loss_total=loss_total,
        loss_sup=loss_sup,
        loss_cons=loss_cons,
        loss_tsa=loss_tsa,
        alpha=alpha,
        confident_counts=confident_counts,
    )


def load_training_pools(records: list[ManifestRecord]) -> tuple[list[Sample], list[np.ndarray]]:
    """(labeled samples, unlabeled target-domain images) from a manifest.

    Only target-domain records feed the unlabeled pool so the target bank
    sees target statistics exclusively; unlabeled source records are not
    used for training. Label files of unlabeled records are never read.
    """
    labeled = [read_sample(r.image_path, r.label_path) for r in records if r.labeled]
    unlabeled = [
        read_image(r.image_path) for r in records if r.domain == "target" and not r.labeled
    ]
    return labeled, unlabeled


def run_training(
    state: TrainState,
    labeled: list[Sample],
    unlabeled_images: list[np.ndarray],
    on_step=None,
    on_eval=None,
) -> list[StepReport]:
    """Drive train_step from state.iteration up to config.iterations.

    Batch indices are drawn from the state RNG each step (labeled first,
    then unlabeled, then the step's own mask draws), so a restored state
    continues the exact same stream. ``on_eval`` fires every eval_interval
    steps and after the final one.
    """
    cfg = state.config
    if not labeled:
        raise ValueError("need at least one labeled sample")
    reports = []
    while state.iteration < cfg.iterations:
        li = state.rng.integers(0, len(labeled), size=cfg.batch_labeled)
        batch_l = [labeled[int(i)] for i in li]
        batch_u = []
        if unlabeled_images and cfg.batch_unlabeled > 0:
            ui = state.rng.integers(0, len(unlabeled_images), size=cfg.batch_unlabeled)
            batch_u = [unlabeled_images[int(i)] for i in ui]
        report = train_step(state, batch_l, batch_u)
        reports.append(report)
        if on_step is not None:
            on_step(report)
        if on_eval is not None and (
            state.iteration % cfg.eval_interval == 0 or state.iteration == cfg.iterations
        ):
            on_eval(state)
    return reports


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalClassAggregate:
    """Mean metrics over samples for one class (or the foreground mean)."""

    class_id: int  # -1 for the mean-over-foreground row
    dice: float
    jaccard: float
    hd95: float
    asd: float
    sentinel_count: int


@dataclass
class EvalResult:
    per_class: list[EvalClassAggregate]
    mean: EvalClassAggregate
    per_sample: list[tuple[int, int, MetricsRow]]  # (sample index, class, row)


def predict_labels(params: SegNetParams, image: np.ndarray) -> np.ndarray:
    _, logits, _ = forward(params, np.asarray(image, dtype=np.float64))
    return np.argmax(logits, axis=0)


def evaluate_samples(params: SegNetParams, samples: list[Sample]) -> EvalResult:
    """Per-class metrics averaged over foreground classes, then samples."""
    if not samples:
        raise ValueError("no samples to evaluate")
    c_all = params.n_classes
    fg = list(range(1, c_all))
    per_sample = []
    table = {c: [] for c in fg}
    for idx, s in enumerate(samples):
        pred = predict_labels(params, s.image)
        for c in fg:
            row = class_metrics(pred, s.labels, c)
            per_sample.append((idx, c, row))
            table[c].append(row)
    per_class = []
    for c in fg:
        rows = table[c]
        per_class.append(
            EvalClassAggregate(
                class_id=c,
                dice=float(np.mean([r.dice for r in rows])),
                jaccard=float(np.mean([r.jaccard for r in rows])),
                hd95=float(np.mean([r.hd95 for r in rows])),
                asd=float(np.mean([r.asd for r in rows])),
                sentinel_count=sum(r.sentinel for r in rows),
            )
        )
    mean = EvalClassAggregate(
        class_id=-1,
        dice=float(np.mean([a.dice for a in per_class])),
        jaccard=float(np.mean([a.jaccard for a in per_class])),
        hd95=float(np.mean([a.hd95 for a in per_class])),
        asd=float(np.mean([a.asd for a in per_class])),
        sentinel_count=sum(a.sentinel_count for a in per_class),
    )
    return EvalResult(per_class, mean, per_sample)


def evaluate(params: SegNetParams, records: list[ManifestRecord], split: str) -> EvalResult:
    """Evaluate every record of one domain ('source', 'target' or 'all')."""
    if split not in ("source", "target", "all"):
        raise ValueError(f"unknown split {split!r}")
    chosen = [r for r in records if split == "all" or r.domain == split]
    chosen = [r for r in chosen if r.label_path]
    if not chosen:
        raise ValueError(f"no records with labels in split {split!r}")
    samples = [read_sample(r.image_path, r.label_path) for r in chosen]
    return evaluate_samples(params, samples)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TMS1"
CKPT_VERSION = 1


def _params_to_bytes(p: SegNetParams) -> bytes:
    return b"".join(np.ascontiguousarray(a).astype("<f8").tobytes() for _, a in p.arrays())


def _params_from_bytes(buf: bytes, d: int, c: int) -> SegNetParams:
    p = SegNetParams.zeros(d, c)
    off = 0
    for _, a in p.arrays():
        n = a.size * 8
        if off + n > len(buf):
            raise TruncationError("checkpoint params section too short")
        a[...] = np.frombuffer(buf[off : off + n], dtype="<f8").reshape(a.shape)
        off += n
    if off != len(buf):
        raise TruncationError("checkpoint params section has trailing bytes")
    return p


def _bank_to_bytes(bank: StatsBank) -> bytes:
    parts = [struct.pack("<d", bank.momentum)]
    for slots in (bank.source, bank.target):
        for s in slots:
            parts.append(struct.pack("<d", s.weight))
            parts.append(s.mean.astype("<f8").tobytes())
            parts.append(s.cov.packed.astype("<f8").tobytes())
    return b"".join(parts)


def _bank_from_bytes(buf: bytes, d: int, c: int) -> StatsBank:
    npacked = d * (d + 1) // 2
    expect = 8 + 2 * c * (8 + 8 * d + 8 * npacked)
    if len(buf) != expect:
        raise TruncationError("checkpoint bank section has wrong length")
    off = 0
    (momentum,) = struct.unpack_from("<d", buf, off)
    off += 8
    bank = StatsBank(d, c, momentum)
    for slots in (bank.source, bank.target):
        for s in slots:
            (s.weight,) = struct.unpack_from("<d", buf, off)
            off += 8
            s.mean = np.frombuffer(buf, dtype="<f8", count=d, offset=off).copy()
            off += 8 * d
            s.cov = SymMat(d, np.frombuffer(buf, dtype="<f8", count=npacked, offset=off).copy())
            off += 8 * npacked
    return bank


def save_checkpoint(path, state: TrainState) -> None:
    """TMS1 container: header then six length-prefixed sections
    (student, teacher, bank, optimizer, rng, counter), all little-endian."""
    cfg = state.config
    sections = [
        _params_to_bytes(state.student),
        _params_to_bytes(state.teacher),
        _bank_to_bytes(state.bank),
        _params_to_bytes(state.velocity),
        json.dumps(state.rng.get_state()).encode(),
        struct.pack("<Q", state.iteration),
    ]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<III", CKPT_VERSION, cfg.feature_dim, cfg.n_classes))
        for payload in sections:
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path, config: TrainConfig) -> TrainState:
    """Restore a TrainState bound to ``config``; training resumes bit-exactly.

    The stored feature_dim / n_classes must match the config's.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) != 4:
            raise TruncationError(f"{path}: truncated magic")
        if magic != CKPT_MAGIC:
            raise MagicError(f"{path}: expected magic {CKPT_MAGIC!r}, found {magic!r}")
        head = fh.read(12)
        if len(head) != 12:
            raise TruncationError(f"{path}: truncated header")
        version, d, c = struct.unpack("<III", head)
        if version != CKPT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        if d != config.feature_dim or c != config.n_classes:
            raise DimensionError(
                f"{path}: checkpoint is d={d}, C={c}; config expects "
                f"d={config.feature_dim}, C={config.n_classes}"
            )
        sections = []
        for _ in range(6):
            lenbuf = fh.read(8)
            if len(lenbuf) != 8:
                raise TruncationError(f"{path}: truncated section length")
            (n,) = struct.unpack("<Q", lenbuf)
            payload = fh.read(n)
            if len(payload) != n:
                raise TruncationError(f"{path}: truncated section payload")
            sections.append(payload)
        if fh.read(1):
            raise TruncationError(f"{path}: trailing bytes after sections")
    student = _params_from_bytes(sections[0], d, c)
    teacher = _params_from_bytes(sections[1], d, c)
    bank = _bank_from_bytes(sections[2], d, c)
    velocity = _params_from_bytes(sections[3], d, c)
    rng = Rng(0)
    rng.set_state(json.loads(sections[4].decode()))
    (iteration,) = struct.unpack("<Q", sections[5])
    return TrainState(
        config=config,
        student=student,
        teacher=teacher,
        velocity=velocity,
        bank=bank,
        rng=rng,
        iteration=int(iteration),
    )
