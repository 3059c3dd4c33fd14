"""Synthetic two-domain segmentation data and its on-disk formats.

A sample is a grayscale image with a dense label map. Geometry is shared
across domains (shapes with fixed base intensities on a darker background);
a domain is a pixel-intensity transform

    x -> clamp(gain * x**gamma + offset + bias_field + noise, 0, 1)

so the "scanner shift" between source and target is systematic and
feature-level, never geometric.

Formats (all little-endian):
  image  "IMG1" | u32 H | u32 W | H*W float32, row-major
  labels "LBL1" | u32 H | u32 W | H*W uint8,  row-major
  manifest: text lines  image_path<TAB>label_path<TAB>domain<TAB>labeled

Images are computed in float64 but quantized through float32 at generation
time so the file round-trip is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng

__all__ = [
    "FileFormatError",
    "MagicError",
    "TruncationError",
    "DimensionError",
    "VersionError",
    "PlacementError",
    "DomainSpec",
    "Sample",
    "ManifestRecord",
    "SOURCE_DEFAULT",
    "TARGET_DEFAULT",
    "gen_sample",
    "gen_dataset",
    "write_image",
    "read_image",
    "write_labels",
    "read_labels",
    "write_sample",
    "read_sample",
    "write_manifest",
    "read_manifest",
]

IMG_MAGIC = b"IMG1"
LBL_MAGIC = b"LBL1"
MAX_PIXELS = 1 << 28  # refuse absurd allocations from corrupt headers

BACKGROUND = 0.2
CLASS_INTENSITY = (0.5, 0.7, 0.9)  # classes 1, 2, 3


class FileFormatError(Exception):
    """Base for binary/manifest format violations."""


class MagicError(FileFormatError):
    """Leading magic bytes do not match the expected format."""


class TruncationError(FileFormatError):
    """File ended early or carries trailing bytes."""


class DimensionError(FileFormatError):
    """Header dimensions are invalid or disagree with the caller."""


class VersionError(FileFormatError):
    """Format version not understood."""


class PlacementError(RuntimeError):
    """Could not place disjoint shapes within the retry budget."""


@dataclass(frozen=True)
class DomainSpec:
    """Intensity transform parameters of one domain."""

    gain: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    bias_field_amp: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.bias_field_amp < 0.0:
            raise ValueError(f"bias_field_amp must be >= 0, got {self.bias_field_amp}")


SOURCE_DEFAULT = DomainSpec(gain=1.0, offset=0.0, gamma=1.0, noise_sigma=0.02, bias_field_amp=0.0)
TARGET_DEFAULT = DomainSpec(gain=0.7, offset=0.15, gamma=1.4, noise_sigma=0.05, bias_field_amp=0.1)


@dataclass
class Sample:
    """One image with its dense label map."""

    image: np.ndarray  # (H, W) float64, values in [0, 1], f32-representable
    labels: np.ndarray  # (H, W) uint8


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    label_path: str
    domain: str  # "source" | "target"
    labeled: bool


def _ellipse(h, w, cy, cx, ry, rx):
    rr, cc = np.ogrid[:h, :w]
    return ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0


def _rectangle(h, w, cy, cx, hy, hx):
    rr, cc = np.ogrid[:h, :w]
    return (np.abs(rr - cy) <= hy) & (np.abs(cc - cx) <= hx)


def _annulus(h, w, cy, cx, router, rinner):
    rr, cc = np.ogrid[:h, :w]
    r2 = (rr - cy) ** 2 + (cc - cx) ** 2
    return (r2 <= router**2) & (r2 > rinner**2)


def _draw_shape(rng: Rng, h: int, w: int, kind: int) -> np.ndarray:
    s = min(h, w)
    if kind == 1:  # ellipse
        ry = (0.08 + 0.08 * rng.random()) * s
        rx = (0.08 + 0.08 * rng.random()) * s
        cy = ry + 1 + rng.random() * (h - 2 * ry - 2)
        cx = rx + 1 + rng.random() * (w - 2 * rx - 2)
        return _ellipse(h, w, cy, cx, ry, rx)
    if kind == 2:  # rectangle
        hy = (0.07 + 0.07 * rng.random()) * s
        hx = (0.07 + 0.07 * rng.random()) * s
        cy = hy + 1 + rng.random() * (h - 2 * hy - 2)
        cx = hx + 1 + rng.random() * (w - 2 * hx - 2)
        return _rectangle(h, w, cy, cx, hy, hx)
    if kind == 3:  # annulus
        router = (0.09 + 0.07 * rng.random()) * s
        rinner = router * (0.4 + 0.2 * rng.random())
        cy = router + 1 + rng.random() * (h - 2 * router - 2)
        cx = router + 1 + rng.random() * (w - 2 * router - 2)
        return _annulus(h, w, cy, cx, router, rinner)
    raise ValueError(f"unknown shape kind {kind}")


def gen_sample(rng: Rng, spec: DomainSpec, h: int = 64, w: int = 64, n_classes: int = 3) -> Sample:
    """One synthetic sample under a domain's intensity transform.

    Foreground classes 1..n_classes-1 are an ellipse, a rectangle and an
    annulus, placed disjointly (up to 100 retries each; PlacementError
    afterwards). Class base intensities are fixed so domains differ only by
    the pixel transform.
    """
    if h < 32 or w < 32:
        raise ValueError(f"image must be at least 32x32, got {h}x{w}")
    if not 2 <= n_classes <= 4:
        raise ValueError(f"n_classes must be in 2..4, got {n_classes}")
    labels = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    for c in range(1, n_classes):
        for _ in range(100):
            m = _draw_shape(rng, h, w, c)
            if not (m & occupied).any():
                labels[m] = c
                occupied |= m
                break
        else:
            raise PlacementError(f"no disjoint placement for class {c} after 100 retries")

    clean = np.full((h, w), BACKGROUND, dtype=np.float64)
    for c in range(1, n_classes):
        clean[labels == c] = CLASS_INTENSITY[c - 1]

    rr = np.arange(h, dtype=np.float64)[:, None] / (h - 1)
    cc = np.arange(w, dtype=np.float64)[None, :] / (w - 1)
    bias = spec.bias_field_amp * ((rr + cc) / 2.0 - 0.5)
    noise = spec.noise_sigma * rng.standard_normal(h * w).reshape(h, w)
    img = spec.gain * clean**spec.gamma + spec.offset + bias + noise
    img = np.clip(img, 0.0, 1.0)
    img = img.astype(np.float32).astype(np.float64)  # pin to file precision
    return Sample(img, labels)


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncationError(f"file truncated reading {what}")
    return buf


def _read_header(fh, magic: bytes, path) -> tuple[int, int]:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise MagicError(f"{path}: expected magic {magic!r}, found {got!r}")
    h, w = struct.unpack("<II", _read_exact(fh, 8, "dimensions"))
    if h == 0 or w == 0 or h * w > MAX_PIXELS:
        raise DimensionError(f"{path}: unreasonable dimensions {h}x{w}")
    return h, w


def _expect_eof(fh, path):
    if fh.read(1):
        raise TruncationError(f"{path}: trailing bytes after payload")


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(image.astype("<f4").tobytes(order="C"))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, IMG_MAGIC, path)
        buf = _read_exact(fh, 4 * h * w, "pixels")
        _expect_eof(fh, path)
    return np.frombuffer(buf, dtype="<f4").reshape(h, w).astype(np.float64)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be 2-D, got shape {labels.shape}")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(LBL_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(labels.astype(np.uint8).tobytes(order="C"))


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, LBL_MAGIC, path)
        buf = _read_exact(fh, h * w, "labels")
        _expect_eof(fh, path)
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w).copy()


def write_sample(image_path, label_path, sample: Sample) -> None:
    write_image(image_path, sample.image)
    write_labels(label_path, sample.labels)


def read_sample(image_path, label_path) -> Sample:
    return Sample(read_image(image_path), read_labels(label_path))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", newline="") as fh:
        for r in records:
            fh.write(f"{r.image_path}\t{r.label_path}\t{r.domain}\t{int(r.labeled)}\n")


def read_manifest(path) -> list[ManifestRecord]:
    """Parse and validate; paths are resolved relative to the manifest."""
    base = Path(path).parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FileFormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            img, lbl, domain, labeled = parts
            if domain not in ("source", "target"):
                raise FileFormatError(f"{path}:{lineno}: unknown domain {domain!r}")
            if labeled not in ("0", "1"):
                raise FileFormatError(f"{path}:{lineno}: labeled flag must be 0 or 1")
            img_p = str(base / img)
            lbl_p = str(base / lbl) if lbl else ""
            if not Path(img_p).is_file():
                raise FileNotFoundError(f"{path}:{lineno}: missing image file {img_p}")
            if labeled == "1" and not lbl_p:
                raise FileFormatError(f"{path}:{lineno}: labeled record without label file")
            if lbl_p and not Path(lbl_p).is_file():
                raise FileNotFoundError(f"{path}:{lineno}: missing label file {lbl_p}")
            records.append(ManifestRecord(img_p, lbl_p, domain, labeled == "1"))
    return records


def gen_dataset(
    seed: int,
    source_spec: DomainSpec,
    target_spec: DomainSpec,
    n_source: int,
    n_target: int,
    labeled_fraction: float,
    out_dir,
    h: int = 64,
    w: int = 64,
    n_classes: int = 3,
) -> list[ManifestRecord]:
    """Write a two-domain dataset and its manifest; returns the records.

    The first ceil(labeled_fraction * n_source) source samples are marked
    labeled; target samples are always unlabeled (their label files exist
    for evaluation only). Each sample draws from a stream keyed by
    (seed, domain, index), so the dataset is byte-identical for a given
    seed regardless of generation order.
    """
    if n_source < 1:
        raise ValueError(f"n_source must be >= 1, got {n_source}")
    if n_target < 0:
        raise ValueError(f"n_target must be >= 0, got {n_target}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_labeled = int(np.ceil(labeled_fraction * n_source))
    records = []
    for domain, spec, count, dom_id in (
        ("source", source_spec, n_source, 0),
        ("target", target_spec, n_target, 1),
    ):
        for i in range(count):
            rng = Rng.from_key(seed, dom_id, i)
            sample = gen_sample(rng, spec, h, w, n_classes)
            img_name = f"{domain}_{i:04d}.img"
            lbl_name = f"{domain}_{i:04d}.lbl"
            write_sample(out / img_name, out / lbl_name, sample)
            labeled = domain == "source" and i < n_labeled
            records.append(ManifestRecord(img_name, lbl_name, domain, labeled))
    write_manifest(out / "manifest.txt", records)
    return read_manifest(out / "manifest.txt")
