"""Small dense linear algebra, seeded randomness and gradient checking.

Vectors and matrices are plain float64 numpy arrays. Helpers here validate
shape and finiteness at the boundary; downstream modules trust them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from vca.errors import DegenerateInputError, NumericError


def as_vec(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite entries")
    return v


def as_mat(x, shape: tuple[int, int] | None = None, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def frozen(a: np.ndarray) -> np.ndarray:
    """Return a read-only float64 copy of ``a``."""
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


class SeededRng:
    """Deterministic random stream built on numpy's PCG64.

    Child streams are derived through ``SeedSequence`` spawn keys, so
    ``rng.child("noise")`` and ``rng.child("noise")`` from the same parent
    seed always give the same stream, independent of how many draws the
    parent has already made.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._key = tuple(_key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, *parts: int | str) -> "SeededRng":
        key = self._key + tuple(_stable_key(p) for p in parts)
        return SeededRng(self.seed, key)

    def split(self, n: int) -> list["SeededRng"]:
        return [self.child(i) for i in range(n)]

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in the closed range [low, high]."""
        return self.generator.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self._key})"


def _stable_key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be nonnegative")
        return int(part)
    # python's hash() is salted per process
    return zlib.crc32(str(part).encode("utf-8")) | (1 << 32)


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    # dot / sqrt(|u|^2 |v|^2) makes cos(u, u) exactly 1
    uu = float(u @ u)
    vv = float(v @ v)
    if uu == 0.0 or vv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    c = float(u @ v) / np.sqrt(uu * vv)
    return min(1.0, max(-1.0, c))


def cosine_similarity(u, v) -> float:
    u = as_vec(u, name="u")
    v = as_vec(v, u.shape[0], name="v")
    return _cos(u, v)


def cosine_similarity_grad(u, v) -> np.ndarray:
    """Gradient of ``cosine_similarity(u, v)`` with respect to ``u``."""
    u = as_vec(u, name="u")
    v = as_vec(v, u.shape[0], name="v")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    c = u @ v / (nu * nv)
    return v / (nu * nv) - c * u / nu**2


def sample_gaussian(rng: SeededRng, dim: int, sigma: float) -> np.ndarray:
    if sigma < 0 or not np.isfinite(sigma):
        raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
    if dim < 0:
        raise ValueError("dim must be nonnegative")
    eps = rng.normal(dim)
    if sigma == 0.0:
        return np.zeros(dim)
    return sigma * eps


def spectral_norm(m, max_iter: int = 64, tol: float = 1e-12) -> float:
    """Largest singular value of ``m`` by an accelerated power method.

    Each iteration squares the normalized Gram matrix ``G = m.T @ m``, so after
    ``k`` iterations its columns have been hit by ``(m.T m)^(2^k)``; the gap
    ratio is raised to a doubly exponential power and near-degenerate top
    singular values still converge. The estimate is the norm of ``m`` applied
    to the dominant column. Stops after ``max_iter`` squarings, or once the
    estimate changes by less than ``tol`` (relative) after the Gram power has
    become numerically rank one.
    """
    m = as_mat(m)
    if not np.any(m):
        return 0.0
    g = m.T @ m
    g /= np.abs(g).max()
    est = 0.0
    for _ in range(max_iter):
        col = g[:, int(np.argmax(np.linalg.norm(g, axis=0)))]
        x = col / np.linalg.norm(col)
        new = float(np.linalg.norm(m @ x))
        g2 = g @ g
        g2 /= np.abs(g2).max()
        settled = np.abs(g2 - g).max() <= 1e-14
        g = g2
        if settled and abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return est


def spectral_rescale(m, target_norm: float, max_iter: int = 64, tol: float = 1e-12) -> np.ndarray:
    m = as_mat(m)
    if target_norm <= 0:
        raise ValueError("target_norm must be positive")
    s = spectral_norm(m, max_iter, tol)
    if s == 0.0:
        raise DegenerateInputError("cannot rescale a zero matrix")
    return m * (target_norm / s)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field. ``x`` may be any shape."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen random linear projection from latent space to feature space."""

    projection: np.ndarray = field(repr=False)

    @classmethod
    def from_seed(cls, seed: int, d: int, k: int = 16) -> "FeatureExtractor":
        rng = SeededRng(seed).child("feature_extractor")
        return cls(frozen(rng.normal((k, d)) / np.sqrt(d)))

    def __post_init__(self):
        as_mat(self.projection, name="projection")
        if self.projection.flags.writeable:
            object.__setattr__(self, "projection", frozen(self.projection))

    @property
    def k(self) -> int:
        return self.projection.shape[0]

    @property
    def d(self) -> int:
        return self.projection.shape[1]

    def __call__(self, z) -> np.ndarray:
        return self.projection @ as_vec(z, self.d, name="latent")
