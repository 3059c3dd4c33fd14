"""Small dense linear algebra and random sampling kernels.

Everything downstream (statistics banks, the augmented-loss bound, the
network) funnels its matrix work through here. All arithmetic is float64.
Symmetric matrices are stored packed (upper triangle only) so asymmetry is
unrepresentable; callers get dense views on demand.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SymMat",
    "FactorizationError",
    "Rng",
    "quad_form",
    "cholesky",
    "sample_gaussian",
]


class FactorizationError(ValueError):
    """Matrix could not be factorized even after jitter retries."""


class SymMat:
    """Symmetric ``dim x dim`` matrix stored as the packed upper triangle.

    ``packed`` holds the row-major upper triangle (length dim*(dim+1)//2).
    Linear combinations of SymMats can be taken directly on ``packed``.
    """

    __slots__ = ("dim", "packed")

    def __init__(self, dim: int, packed: np.ndarray | None = None):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        n = dim * (dim + 1) // 2
        if packed is None:
            packed = np.zeros(n, dtype=np.float64)
        else:
            packed = np.asarray(packed, dtype=np.float64)
            if packed.shape != (n,):
                raise ValueError(f"packed length {packed.shape} does not match dim {dim}")
        self.dim = dim
        self.packed = packed

    @classmethod
    def zeros(cls, dim: int) -> "SymMat":
        return cls(dim)

    @classmethod
    def identity(cls, dim: int) -> "SymMat":
        return cls.from_dense(np.eye(dim))

    @classmethod
    def from_dense(cls, m: np.ndarray) -> "SymMat":
        """Pack a dense matrix, symmetrizing first.

        Symmetrization (M + M.T)/2 makes packing invariant under transposition,
        so numerically near-symmetric inputs land on the same representation.
        """
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        d = m.shape[0]
        sym = 0.5 * (m + m.T)
        iu = np.triu_indices(d)
        return cls(d, sym[iu].copy())

    def full(self) -> np.ndarray:
        """Dense symmetric view (freshly allocated)."""
        d = self.dim
        out = np.zeros((d, d), dtype=np.float64)
        iu = np.triu_indices(d)
        out[iu] = self.packed
        out.T[iu] = self.packed
        return out

    def trace(self) -> float:
        d = self.dim
        idx = np.cumsum(np.concatenate(([0], np.arange(d, 1, -1))))
        return float(self.packed[idx].sum())

    def is_zero(self) -> bool:
        return not np.any(self.packed)

    def copy(self) -> "SymMat":
        return SymMat(self.dim, self.packed.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SymMat)
            and self.dim == other.dim
            and np.array_equal(self.packed, other.packed)
        )

    def __repr__(self) -> str:
        return f"SymMat(dim={self.dim})"


def quad_form(a: SymMat, v: np.ndarray) -> float:
    """v.T @ A @ v for symmetric packed A.

    Nonnegative for PSD A up to roundoff.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (a.dim,):
        raise ValueError(f"vector shape {v.shape} does not match matrix dim {a.dim}")
    return float(v @ a.full() @ v)


def cholesky(a: SymMat, jitter: float | None = None, context: str = "") -> np.ndarray:
    """Lower-triangular L with L @ L.T == A + jitter*I.

    Starts at ``jitter`` (default 1e-9 * trace/dim, scale aware) and retries
    with jitter*10 up to 3 times when the factorization fails. The all-zero
    matrix is PSD with factor 0 and is returned directly; numpy's Cholesky
    would reject it.
    """
    d = a.dim
    if a.is_zero():
        return np.zeros((d, d), dtype=np.float64)
    m = a.full()
    if jitter is None:
        jitter = 1e-9 * a.trace() / d
    scale = abs(a.trace()) / d
    floor = 1e-12 * scale if scale > 0 else 1e-12
    for _ in range(4):
        try:
            return np.linalg.cholesky(m + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter = jitter * 10.0 if jitter > 0 else floor
    where = f" ({context})" if context else ""
    raise FactorizationError(
        f"matrix not PSD after jitter retries up to {jitter:.3e}{where}"
    )


def sample_gaussian(mean: np.ndarray, chol: np.ndarray, rng: "Rng", n: int | None = None) -> np.ndarray:
    """Draw from N(mean, L @ L.T) given the Cholesky factor L.

    With ``n`` given, returns (n, d) of independent draws; otherwise a single
    (d,) draw. A zero factor returns the mean exactly.
    """
    mean = np.asarray(mean, dtype=np.float64)
    d = mean.shape[0]
    if chol.shape != (d, d):
        raise ValueError(f"factor shape {chol.shape} does not match mean dim {d}")
    if n is None:
        z = rng.standard_normal(d)
        return mean + chol @ z
    z = rng.standard_normal(n * d).reshape(n, d)
    return mean[None, :] + z @ chol.T


class Rng:
    """Deterministic PRNG: a PCG64 uniform stream plus Box-Muller normals.

    The uniform source is numpy's PCG64 (documented, seedable, with a
    serializable state dict). Gaussians are produced by the Box-Muller
    transform on that stream rather than a rejection sampler, so the number
    of uniforms consumed per normal is fixed and the stream position stays
    reproducible across numpy versions.
    """

    def __init__(self, seed: int = 0):
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @classmethod
    def from_key(cls, *key: int) -> "Rng":
        """Independent stream derived from an integer key tuple."""
        rng = cls.__new__(cls)
        rng._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
        return rng

    def random(self, size: int | tuple | None = None):
        """Uniforms in [0, 1)."""
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Uniform integers in [low, high) (numpy convention)."""
        return self._gen.integers(low, high, size=size)

    def standard_normal(self, n: int) -> np.ndarray:
        """n i.i.d. N(0,1) draws via Box-Muller.

        Consumes exactly 2*ceil(n/2) uniforms. u1 is mapped to (0, 1] so the
        log never sees zero.
        """
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        if n == 0:
            return np.zeros(0, dtype=np.float64)
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def get_state(self) -> dict:
        """JSON-serializable bit-generator state."""
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state
