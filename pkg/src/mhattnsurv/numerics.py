"""Deterministic dense kernels, seeded RNG streams, k-means, and a
finite-difference gradient oracle.

Everything here is a pure function of its inputs. Random state is always
threaded explicitly through :class:`RngStream` so that results are
reproducible across platforms and runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NumericError


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product A @ B with explicit shape checking."""
    a = _as_matrix(a, "A")
    b = _as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(a) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(_as_matrix(a, "A"), 0.0)


def row_mean(a) -> np.ndarray:
    """Mean over the row axis: one value per column."""
    a = _as_matrix(a, "A")
    if a.shape[0] == 0:
        raise DomainError("mean over zero rows")
    return a.mean(axis=0)


def transpose(a) -> np.ndarray:
    a = _as_matrix(a, "A")
    return np.ascontiguousarray(a.T)


def softmax_stable(logits) -> np.ndarray:
    """Softmax with max-shift so large logits cannot overflow."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite entries")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class RngStream:
    """A named, seeded random stream.

    Streams with the same (seed, label) produce identical draw sequences
    everywhere; distinct labels give statistically independent streams.
    Backed by the counter-based Philox generator, so results do not depend
    on platform word size or global RNG state.
    """

    seed: int
    label: str

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        label_key = int.from_bytes(digest[:8], "little")
        bits = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, label_key])
        return np.random.Generator(np.random.Philox(bits))

    def child(self, sub: str | int) -> "RngStream":
        """Derive an independent stream for a sub-purpose (e.g. one patient)."""
        return RngStream(self.seed, f"{self.label}/{sub}")


def kmeans(
    points,
    k: int,
    seed: RngStream,
    max_iters: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means with farthest-point seeding.

    Returns (assignments, centroids). The first centroid is drawn from the
    stream; each subsequent one is the point farthest from the centroids
    chosen so far, which makes the whole fit deterministic given the seed.
    """
    x = _as_matrix(points, "points")
    n = x.shape[0]
    if k < 1:
        raise DomainError("k must be >= 1")
    if k > n:
        raise DomainError(f"k={k} exceeds number of points {n}")
    if max_iters < 1:
        raise DomainError("max_iters must be >= 1")

    rng = seed.generator()
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(0, n)]
    if k > 1:
        d2 = ((x - centroids[0]) ** 2).sum(axis=1)
        for j in range(1, k):
            centroids[j] = x[int(np.argmax(d2))]
            d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    def nearest(cents: np.ndarray) -> np.ndarray:
        dists = ((x[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(dists, axis=1)

    assignments = nearest(centroids)
    for _ in range(max_iters):
        for j in range(k):
            members = x[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            # empty cluster keeps its previous centroid
        new_assign = nearest(centroids)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
    return assignments, centroids


def kmeans_objective(points, assignments, centroids) -> float:
    """Sum of squared distances of each point to its assigned centroid."""
    x = np.asarray(points, dtype=np.float64)
    return float(((x - np.asarray(centroids)[np.asarray(assignments)]) ** 2).sum())


def central_difference_grad(
    f: Callable[[np.ndarray], float],
    x,
    step: float = 1e-5,
) -> np.ndarray:
    """Two-sided finite-difference gradient of a scalar function.

    Used as the independent oracle for analytic gradients; only meaningful
    in 64-bit precision.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def sample_patches(bag_size: int, n: int, stream: RngStream) -> np.ndarray:
    """Indices of n patches drawn from a bag of ``bag_size``.

    Big-enough bags are sampled without replacement (so requesting exactly
    bag_size patches covers every index once); smaller bags fall back to
    i.i.d. draws with replacement. Deterministic given the stream.
    """
    if bag_size < 1:
        raise DomainError(f"bag size must be >= 1, got {bag_size}")
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    rng = stream.generator()
    if bag_size >= n:
        return rng.choice(bag_size, size=n, replace=False)
    return rng.choice(bag_size, size=n, replace=True)
