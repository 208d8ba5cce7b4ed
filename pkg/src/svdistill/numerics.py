"""Dense numeric primitives shared by every other module.

Matrices are plain float64 ``numpy.ndarray`` objects. Random numbers come from
:class:`Rng`, a thin wrapper around numpy's PCG64 bit generator seeded through
``SeedSequence``; both are specified algorithms, so a seed reproduces the same
stream on every platform.
"""

from __future__ import annotations

import numpy as np

SYMMETRY_TOL = 1e-10


class Rng:
    """Seeded random stream (PCG64, normals via numpy's ziggurat sampler).

    ``spawn(key)`` derives an independent child stream from the seed and an
    integer key, so per-item streams do not depend on generation order.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, *key: int) -> "Rng":
        seq = np.random.SeedSequence(self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(int(k) for k in key))
        return Rng(self.seed, _seq=seq)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)


def as_matrix(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def logsumexp(z, axis=-1, keepdims=False) -> np.ndarray:
    z = as_matrix(z)
    zmax = np.max(z, axis=axis, keepdims=True)
    out = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(z, axis=-1) -> np.ndarray:
    """Row-wise log-softmax with max subtraction; safe for logits around 1e3."""
    z = as_matrix(z)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z, axis=-1) -> np.ndarray:
    return np.exp(log_softmax(z, axis=axis))


def cosine_similarity(a, b) -> float:
    a, b = as_matrix(a).ravel(), as_matrix(b).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def gaussian_draw(rng: Rng, mean: float, std: float, shape) -> np.ndarray:
    if std < 0:
        raise ValueError(f"negative standard deviation: {std}")
    draws = rng.gen.standard_normal(shape)
    return mean + std * draws


def eigh_symmetric(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns.
    """
    s = as_matrix(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    asym = np.max(np.abs(s - s.T)) if s.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix is not symmetric (max |S - S^T| = {asym:.3g})")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    return vals[::-1].copy(), vecs[:, ::-1].copy()
