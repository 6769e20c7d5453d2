"""Dense linear algebra, elementwise neural primitives, and seeded RNG.

Everything downstream (encoder, losses, trainer, evaluation) runs on plain
2-D float64 numpy arrays in row-major order.  All functions here are pure
and safe to call from multiple threads; a `Rng` is single-owner and must
not be shared across threads.

The random number generator is numpy's PCG64, constructed through
``make_rng``.  The algorithm is fixed so that identical seeds give
identical draw sequences on every platform; bundle manifests record the
algorithm name (`RNG_ALGORITHM`) as provenance.
"""

from __future__ import annotations

import numpy as np
from scipy import special

# 2-D float64 array, row-major.
Matrix = np.ndarray

Rng = np.random.Generator

RNG_ALGORITHM = "numpy-pcg64"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericsError(ValueError):
    """Shape, domain, or finiteness violation in a numeric primitive."""


def make_rng(seed: int) -> Rng:
    """Seeded PCG64 generator; equal seeds give equal streams."""
    return np.random.default_rng(seed)


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 C-contiguous array."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got ndim={out.ndim}")
    return out


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} contains non-finite entries")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check.

    Raises `NumericsError` naming both shapes when inner dimensions
    disagree.  Summation order is the fixed order of the underlying BLAS
    kernel, so repeated calls on identical inputs are bit-reproducible.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def softmax_rows(a: Matrix, temperature: float = 1.0) -> Matrix:
    """Row-wise softmax of a / temperature, stabilised by per-row max subtraction."""
    if not temperature > 0:
        raise NumericsError(f"temperature must be positive, got {temperature}")
    a = as_matrix(a, "a")
    z = a / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF GELU, x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + special.erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of the exact GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def layer_norm(a: Matrix, eps: float = 1e-5) -> Matrix:
    """Per-row normalisation to mean 0 and (biased) variance 1, up to eps."""
    if not eps > 0:
        raise NumericsError(f"layer_norm eps must be positive, got {eps}")
    a = as_matrix(a, "a")
    mu = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def row_norms(a: Matrix) -> np.ndarray:
    return np.sqrt((a * a).sum(axis=1))


def cosine_similarity_matrix(a: Matrix, b: Matrix) -> Matrix:
    """Pairwise cosine similarities between rows of a and rows of b.

    Entries are clipped to [-1, 1] to absorb rounding.  A zero-norm row is
    a domain error and is reported with its index and side.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise NumericsError(
            f"cosine dimension mismatch: {a.shape} vs {b.shape}"
        )
    na = row_norms(a)
    nb = row_norms(b)
    for side, norms in (("a", na), ("b", nb)):
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise NumericsError(f"zero-norm row {int(bad[0])} in {side}")
    sim = (a / na[:, None]) @ (b / nb[:, None]).T
    return np.clip(sim, -1.0, 1.0)


def svd_values(a: Matrix) -> np.ndarray:
    """Singular values sorted descending; length min(rows, cols)."""
    a = as_matrix(a, "a")
    check_finite(a, "svd input")
    return np.linalg.svd(a, compute_uv=False)
