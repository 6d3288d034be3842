"""Gaussian kernels, random Fourier feature maps, centering and spectral error.

Data matrices are column-major in the sample sense: an ``X`` of shape
``(p, n)`` holds ``n`` samples of dimension ``p``, one per column.  The
random feature map sends ``X`` to a ``(2N, n)`` matrix whose Gram matrix
approximates the Gaussian kernel of ``X``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConvergenceError, InvalidInputError, ShapeMismatchError

__all__ = [
    "KernelConfig",
    "RffProjection",
    "FeatureMatrix",
    "gaussian_kernel",
    "make_projection",
    "rff_map",
    "spectral_error",
    "intrinsic_dim",
    "center",
    "median_bandwidth",
]

_POWER_ITER_CAP = 10_000
_POWER_ITER_TOL = 1e-10


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian bandwidth, feature count and the shared random seed."""

    sigma: float
    n_features: int
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0):
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if self.n_features < 1:
            raise InvalidInputError(f"n_features must be >= 1, got {self.n_features}")


@dataclass(frozen=True)
class RffProjection:
    """Frozen random projection; reproducible bit-for-bit from its config."""

    omega: np.ndarray  # (N, p), i.i.d. N(0, 1/sigma^2)
    seed: int
    sigma: float

    @property
    def n_features(self) -> int:
        return self.omega.shape[0]

    @property
    def input_dim(self) -> int:
        return self.omega.shape[1]


@dataclass
class FeatureMatrix:
    """A (p, n) block of sample columns tagged with its domain of origin."""

    data: np.ndarray
    domain_tag: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"feature matrix must be 2-d, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError(f"feature matrix for domain {self.domain_tag!r} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


def _as_array(X) -> np.ndarray:
    data = X.data if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-d matrix, got shape {data.shape}")
    return data


def gaussian_kernel(X, sigma: float) -> np.ndarray:
    """Gaussian kernel matrix ``exp(-||x_i - x_j||^2 / (2 sigma^2))``."""
    data = _as_array(X)
    if not (sigma > 0):
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("input contains non-finite entries")
    sq = np.einsum("ij,ij->j", data, data)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (data.T @ data)
    np.clip(d2, 0.0, None, out=d2)
    K = np.exp(-d2 / (2.0 * sigma * sigma))
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K


def make_projection(cfg: KernelConfig, p: int) -> RffProjection:
    """Draw the (N, p) Gaussian projection for ``cfg``; deterministic in (seed, N, p, sigma)."""
    if p < 1:
        raise InvalidInputError(f"input dimension must be >= 1, got {p}")
    omega = rng.gaussian(
        cfg.seed, f"rff-omega:{cfg.n_features}x{p}", (cfg.n_features, p), scale=1.0 / cfg.sigma
    )
    return RffProjection(omega=omega, seed=cfg.seed, sigma=cfg.sigma)


def rff_map(X, proj: RffProjection) -> np.ndarray:
    """Random Fourier features ``(1/sqrt(N)) [cos(Omega X); sin(Omega X)]``.

    Every output column has unit Euclidean norm up to round-off, because
    cos^2 + sin^2 sums to N across the stacked halves.
    """
    data = _as_array(X)
    if data.shape[0] != proj.input_dim:
        raise ShapeMismatchError(
            f"projection expects dimension {proj.input_dim}, data has {data.shape[0]}"
        )
    Z = proj.omega @ data
    return np.vstack([np.cos(Z), np.sin(Z)]) / np.sqrt(proj.n_features)


def _check_symmetry(M: np.ndarray, tol: float, what: str) -> None:
    if M.shape[0] != M.shape[1]:
        raise ShapeMismatchError(f"{what} must be square, got shape {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > tol:
        raise InvalidInputError(f"{what} is not symmetric within {tol}")


def _power_norm(M: np.ndarray) -> float:
    """Largest |eigenvalue| of symmetric ``M`` by power iteration on M^2.

    Squaring makes +/- eigenvalue pairs of equal magnitude converge instead
    of oscillating.  Deterministic all-ones start; if the start happens to
    lie in the null space, restarts once from a fixed fallback vector.
    """
    n = M.shape[0]
    if not np.any(M):
        return 0.0
    q = np.ones(n) / np.sqrt(n)
    restarted = False
    rho_prev = np.inf
    for _ in range(_POWER_ITER_CAP):
        y = M @ (M @ q)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            if restarted:
                return 0.0
            q = rng.gaussian(0, f"power-restart:{n}", (n,))
            q /= np.linalg.norm(q)
            restarted = True
            rho_prev = np.inf
            continue
        rho = float(q @ y)
        q = y / ny
        if abs(rho - rho_prev) <= _POWER_ITER_TOL * max(1.0, abs(rho)):
            return float(np.sqrt(max(rho, 0.0)))
        rho_prev = rho
    raise ConvergenceError(
        f"power iteration did not converge in {_POWER_ITER_CAP} iterations",
        last_estimate=float(np.sqrt(max(rho_prev, 0.0))),
    )


def spectral_error(A, B) -> float:
    """Spectral norm ``||A - B||_2`` of a symmetric pair, by power iteration."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeMismatchError(f"shapes differ: {A.shape} vs {B.shape}")
    _check_symmetry(A, 1e-10, "A")
    _check_symmetry(B, 1e-10, "B")
    return _power_norm(A - B)


def intrinsic_dim(K) -> float:
    """Intrinsic dimension ``tr(K) / ||K||_2`` of a p.s.d. matrix."""
    K = np.asarray(K, dtype=np.float64)
    _check_symmetry(K, 1e-8, "K")
    tr = float(np.trace(K))
    if np.min(np.diag(K)) < -1e-10 * max(1.0, abs(tr)):
        raise InvalidInputError("K has a negative diagonal entry; not p.s.d.")
    norm = _power_norm(K)
    if norm == 0.0 or tr <= 0.0:
        raise InvalidInputError("intrinsic dimension is undefined for the zero matrix")
    return tr / norm


def center(M, mode: str = "rows") -> np.ndarray:
    """Apply the centering projection H = I - 11^T/n.

    ``rows``: returns ``H M`` (every column of the result sums to zero).
    ``both``: returns ``H M H`` (both row and column sums vanish).
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-d matrix, got shape {M.shape}")
    if mode == "rows":
        return M - M.mean(axis=0, keepdims=True)
    if mode == "both":
        if M.shape[0] != M.shape[1]:
            raise ShapeMismatchError("mode='both' requires a square matrix")
        out = M - M.mean(axis=0, keepdims=True)
        return out - out.mean(axis=1, keepdims=True)
    raise InvalidInputError(f"unknown centering mode {mode!r}")


def median_bandwidth(X, max_samples: int = 256, seed: int = 0) -> float:
    """Median pairwise distance of a (seeded) subsample of at most ``max_samples`` columns."""
    data = _as_array(X)
    n = data.shape[1]
    if n < 2:
        raise InvalidInputError("median bandwidth needs at least two samples")
    if n > max_samples:
        idx = rng.stream(seed, "sigma-subsample").choice(n, size=max_samples, replace=False)
        data = data[:, np.sort(idx)]
        n = max_samples
    sq = np.einsum("ij,ij->j", data, data)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (data.T @ data)
    np.clip(d2, 0.0, None, out=d2)
    med = float(np.median(np.sqrt(d2[np.triu_indices(n, 1)])))
    if med <= 0.0:
        raise InvalidInputError("all subsampled points coincide; bandwidth undefined")
    return med
