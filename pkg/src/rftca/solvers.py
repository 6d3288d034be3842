"""Domain-alignment solvers: the kernel formulation, its regularized variant,
and the random-features reduction.

All three solvers share the same structure: build a symmetric alignment
matrix whose top eigenvectors give the transferred features, reduced to
rank-one-corrected products via the Sherman-Morrison identity so that no
dense matrix inverse is ever formed.

* kernel variant:      A   = H (K^2 - K^2 l l' K^2 / (g + l'K^2 l)) H
* regularized variant: A_R = (1/g) H (K - K l l' K / (g + l'K l)) H
* random features:     top eigenvectors of
                       S H S' - S l l' S' S H S' / (g + l'S'S l)
                       for S the (2N, n) random Fourier feature matrix,
                       solved through the equivalent symmetric pencil
                       (S H S') w = mu (g I + S l l' S') w.

Eigenvalues reported in a solution are those of the matrix actually
solved (for the kernel variant they carry an extra factor of g relative
to the non-symmetric fixed-point formulation; the subspaces agree).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    ConvergenceError,
    DegenerateSubspaceWarning,
    InvalidInputError,
    ShapeMismatchError,
    SingularMatrixError,
)
from .kernels import FeatureMatrix, KernelConfig, _as_array, make_projection, rff_map
from . import rng

__all__ = [
    "TcaConfig",
    "TcaSolution",
    "LabelVector",
    "label_vector",
    "vanilla_tca",
    "sherman_morrison_inv_apply",
    "r_tca",
    "rf_tca",
    "eigen_gap",
    "regularization_bounds",
    "lanczos_top_m",
    "default_gamma",
]

DENSE_CUTOFF = 512
_GAP_WARN_TOL = 1e-12
_RIDGE_REL = 1e-10


@dataclass(frozen=True)
class TcaConfig:
    """Regularization strength, projected dimension and solver variant."""

    gamma: float
    m: int
    variant: str = "vanilla"  # vanilla | regularized | random-features
    ridge_lift: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidInputError(f"gamma must be nonnegative, got {self.gamma}")
        if self.m < 1:
            raise InvalidInputError(f"m must be >= 1, got {self.m}")
        if self.variant not in ("vanilla", "regularized", "random-features"):
            raise InvalidInputError(f"unknown variant {self.variant!r}")


@dataclass
class TcaSolution:
    """Projector columns, their eigenvalues, and the aligned sample features."""

    projector: np.ndarray        # (n, m) or (2N, m), unit columns
    eigenvalues: np.ndarray      # (m,), nonincreasing
    aligned_features: np.ndarray  # (m, n) = projector.T @ (K or Sigma)
    degenerate_cut: bool = False


@dataclass(frozen=True)
class LabelVector:
    """Signed membership vector: +1/n_S on source entries, -1/n_T on target."""

    values: np.ndarray
    n_source: int
    n_target: int

    def __len__(self) -> int:
        return self.values.shape[0]


def label_vector(n_S: int, n_T: int) -> LabelVector:
    """Build the source/target membership vector with ||l||^2 = n/(n_S n_T)."""
    if n_S < 1 or n_T < 1:
        raise InvalidInputError("both splits need at least one sample")
    values = np.concatenate([np.full(n_S, 1.0 / n_S), np.full(n_T, -1.0 / n_T)])
    return LabelVector(values=values, n_source=n_S, n_target=n_T)


def default_gamma(n_S: int, n_T: int) -> float:
    """Default regularization: 1/n for balanced splits, 1 for degenerate ones.

    A split counts as balanced when the smaller side holds at least 10% of
    the data; below that the rank-one alignment term needs order-one
    regularization to stay comparable to the kernel term.
    """
    n = n_S + n_T
    return 1.0 / n if min(n_S, n_T) >= 0.1 * n else 1.0


def _as_label_values(ell) -> np.ndarray:
    if isinstance(ell, LabelVector):
        return ell.values
    return np.asarray(ell, dtype=np.float64).reshape(-1)


def _fix_signs(V: np.ndarray) -> np.ndarray:
    """Make the first non-negligible entry of each column positive."""
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        peak = np.abs(col).max()
        if peak == 0.0:
            continue
        i = int(np.argmax(np.abs(col) > 1e-12 * peak))
        if col[i] < 0:
            V[:, j] = -col
    return V


def _top_pairs_dense(A: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = A.shape[0]
    k = min(k, n)
    w, V = scipy.linalg.eigh(A, subset_by_index=[n - k, n - 1])
    return w[::-1], V[:, ::-1]


def _finish(values: np.ndarray, vectors: np.ndarray, m: int, basis: np.ndarray) -> TcaSolution:
    """Shared tail: degenerate-cut check, sign convention, aligned features."""
    degenerate = False
    if values.shape[0] > m and abs(values[m - 1] - values[m]) < _GAP_WARN_TOL * max(1.0, abs(values[0])):
        degenerate = True
        warnings.warn(
            f"eigen-gap at the cut m={m} is below {_GAP_WARN_TOL}; retained subspace is not unique",
            DegenerateSubspaceWarning,
            stacklevel=3,
        )
    V = _fix_signs(vectors[:, :m])
    return TcaSolution(
        projector=V,
        eigenvalues=values[:m].copy(),
        aligned_features=V.T @ basis,
        degenerate_cut=degenerate,
    )


def _center_both(M: np.ndarray) -> np.ndarray:
    out = M - M.mean(axis=0, keepdims=True)
    return out - out.mean(axis=1, keepdims=True)


def vanilla_tca(K, ell, cfg: TcaConfig) -> TcaSolution:
    """Kernel-variant solve via the rank-one-corrected symmetric form.

    Returns the top-m eigenpairs of H(K^2 - K^2 l l'K^2/(g + l'K^2 l))H;
    the eigenvector columns span the transferred features of the original
    constrained trace problem.
    """
    K = np.asarray(K, dtype=np.float64)
    lv = _as_label_values(ell)
    n = K.shape[0]
    if K.shape[0] != K.shape[1] or lv.shape[0] != n:
        raise ShapeMismatchError(f"K is {K.shape}, label vector has length {lv.shape[0]}")
    if cfg.m > n - 1:
        raise InvalidInputError(f"m={cfg.m} exceeds n-1={n - 1}")
    s = K @ (K @ lv)  # K^2 l
    denom = cfg.gamma + float(lv @ s)
    if denom <= 1e-30 * max(1.0, float(np.abs(K).max()) ** 2):
        raise SingularMatrixError("gamma + l'K^2 l vanishes; alignment matrix is singular")

    if n <= DENSE_CUTOFF:
        K2 = K @ K
        A = _center_both(K2 - np.outer(s, s) / denom)
        A = 0.5 * (A + A.T)
        values, vectors = _top_pairs_dense(A, cfg.m + 1)
    else:
        def apply(v: np.ndarray) -> np.ndarray:
            w = v - v.mean()
            t = K @ (K @ w) - s * (float(s @ w) / denom)
            return t - t.mean()

        values, vectors = lanczos_top_m(apply, n, cfg.m + 1)
    return _finish(values, vectors, cfg.m, K)


def sherman_morrison_inv_apply(K, ell, gamma: float, v) -> np.ndarray:
    """Apply ``(gamma I + K l l' K)^{-1}`` to ``v`` without forming an inverse."""
    K = np.asarray(K, dtype=np.float64)
    lv = _as_label_values(ell)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if K.shape[0] != K.shape[1] or lv.shape[0] != K.shape[0] or v.shape[0] != K.shape[0]:
        raise ShapeMismatchError(
            f"incompatible shapes: K {K.shape}, l {lv.shape}, v {v.shape}"
        )
    if gamma <= 0:
        raise SingularMatrixError("gamma must be positive for the rank-one inverse")
    u = K @ lv
    denom = gamma + float(u @ u)
    return (v - u * (float(u @ v) / denom)) / gamma


def _min_eigenvalue(K: np.ndarray) -> float:
    n = K.shape[0]
    if n <= DENSE_CUTOFF:
        return float(scipy.linalg.eigh(K, eigvals_only=True, subset_by_index=[0, 0])[0])
    # shift-and-negate so the smallest eigenvalue becomes the largest
    shift = float(np.abs(K).sum(axis=1).max())  # Gershgorin upper bound
    vals, _ = lanczos_top_m(lambda v: shift * v - K @ v, n, 1)
    return shift - float(vals[0])


def r_tca(K, ell, cfg: TcaConfig) -> TcaSolution:
    """Regularized-variant solve: top eigenpairs of (1/g) H (K - K l l'K / (g + l'K l)) H.

    Requires an invertible kernel matrix; when the smallest eigenvalue
    falls below 1e-10 ||K||_2 a ridge lift is applied (or, with
    ``cfg.ridge_lift`` off, the solve is refused).
    """
    K = np.asarray(K, dtype=np.float64)
    lv = _as_label_values(ell)
    n = K.shape[0]
    if K.shape[0] != K.shape[1] or lv.shape[0] != n:
        raise ShapeMismatchError(f"K is {K.shape}, label vector has length {lv.shape[0]}")
    if cfg.m > n - 1:
        raise InvalidInputError(f"m={cfg.m} exceeds n-1={n - 1}")
    if cfg.gamma <= 0:
        raise InvalidInputError("the regularized variant needs gamma > 0")

    norm_K = float(np.linalg.norm(K, 2)) if n <= DENSE_CUTOFF else float(np.abs(K).sum(axis=1).max())
    lam_min = _min_eigenvalue(K)
    if lam_min <= _RIDGE_REL * norm_K:
        if not cfg.ridge_lift:
            raise SingularMatrixError(
                f"K is numerically singular (lambda_min={lam_min:.3e}) and ridge_lift is off"
            )
        K = K + (_RIDGE_REL * norm_K) * np.eye(n)

    u = K @ lv
    denom = cfg.gamma + float(lv @ u)
    if denom <= 1e-30 * max(1.0, norm_K):
        raise SingularMatrixError("gamma + l'K l vanishes; alignment matrix is singular")

    if n <= DENSE_CUTOFF:
        A = _center_both(K - np.outer(u, u) / denom) / cfg.gamma
        A = 0.5 * (A + A.T)
        values, vectors = _top_pairs_dense(A, cfg.m + 1)
    else:
        def apply(v: np.ndarray) -> np.ndarray:
            w = v - v.mean()
            t = (K @ w - u * (float(u @ w) / denom)) / cfg.gamma
            return t - t.mean()

        values, vectors = lanczos_top_m(apply, n, cfg.m + 1)
    return _finish(values, vectors, cfg.m, K)


def rf_tca(X_S, X_T, kcfg: KernelConfig, cfg: TcaConfig) -> TcaSolution:
    """Random-features solve; never touches an (n, n) matrix.

    Maps the concatenated source/target samples through the shared random
    projection, then finds the top-m eigenvectors of the rank-one-corrected
    (2N, 2N) Gram matrix via the symmetric pencil
    ``(S H S') w = mu (g I + (S l)(S l)') w``.
    """
    XS = _as_array(X_S)
    XT = _as_array(X_T)
    if XS.shape[0] != XT.shape[0]:
        raise ShapeMismatchError(
            f"source and target dimensions differ: {XS.shape[0]} vs {XT.shape[0]}"
        )
    n_S, n_T = XS.shape[1], XT.shape[1]
    n = n_S + n_T
    two_n = 2 * kcfg.n_features
    if cfg.m > min(two_n, n):
        raise InvalidInputError(f"m={cfg.m} exceeds min(2N, n)={min(two_n, n)}")
    if kcfg.n_features < cfg.m:
        raise InvalidInputError(f"need N >= m, got N={kcfg.n_features}, m={cfg.m}")

    ell = label_vector(n_S, n_T)
    proj = make_projection(kcfg, XS.shape[0])
    sigma_mat = rff_map(np.hstack([XS, XT]), proj)            # (2N, n)
    Sc = sigma_mat - sigma_mat.mean(axis=1, keepdims=True)    # Sigma H
    Q = Sc @ Sc.T                                             # Sigma H Sigma'
    u = sigma_mat @ ell.values                                # Sigma l
    uu = float(u @ u)
    denom = cfg.gamma + uu
    if denom <= 1e-30:
        raise SingularMatrixError("gamma + l'S'S l vanishes; alignment matrix is singular")

    if cfg.gamma > 0:
        # congruence by P^{-1/2}, P = g I + u u': two rank-one updates
        beta = 1.0 - np.sqrt(cfg.gamma / denom)
        uhat = u / np.sqrt(uu) if uu > 0 else u
        Q1 = Q - beta * np.outer(uhat, uhat @ Q)
        A = (Q1 - beta * np.outer(Q1 @ uhat, uhat)) / cfg.gamma
        A = 0.5 * (A + A.T)
        values, vectors = _top_pairs_dense(A, cfg.m + 1)
        vectors = vectors - beta * np.outer(uhat, uhat @ vectors)  # back-map by P^{-1/2}
        vectors /= np.linalg.norm(vectors, axis=0, keepdims=True)
        values = cfg.gamma * values  # eigenvalues of the rank-one-corrected matrix itself
    else:
        # g = 0: deflate the u direction and solve the projected symmetric matrix
        uhat = u / np.sqrt(uu)
        qu = Q @ uhat
        A = Q - np.outer(qu, uhat) - np.outer(uhat, qu) + float(uhat @ qu) * np.outer(uhat, uhat)
        A = 0.5 * (A + A.T)
        values, vectors = _top_pairs_dense(A, cfg.m + 1)
    return _finish(values, vectors, cfg.m, sigma_mat)


def eigen_gap(eigenvalues, m: int, norm_K: float) -> float:
    """Relative eigen-gap: min spacing among the first m+1 values over ``norm_K``."""
    vals = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if vals.shape[0] < m + 1:
        raise InvalidInputError(f"need at least m+1={m + 1} eigenvalues, got {vals.shape[0]}")
    if not (norm_K > 0):
        raise InvalidInputError("norm_K must be positive")
    return float(np.min(np.abs(np.diff(vals[: m + 1])))) / norm_K


def regularization_bounds(K, ell, gamma: float) -> tuple[float, float, float]:
    """Sandwich for the lone nonzero eigenvalue of the alignment rank-one term.

    Returns ``(lower, upper, value)`` with
    ``value = l'K^4 l / (gamma + l'K^2 l)`` and the bounds obtained by
    substituting the extreme eigenvalues of K.
    """
    K = np.asarray(K, dtype=np.float64)
    lv = _as_label_values(ell)
    if K.shape[0] != K.shape[1] or lv.shape[0] != K.shape[0]:
        raise ShapeMismatchError(f"K is {K.shape}, label vector has length {lv.shape[0]}")
    if gamma < 0:
        raise InvalidInputError("gamma must be nonnegative")
    u1 = K @ lv
    u2 = K @ u1
    value = float(u2 @ u2) / (gamma + float(u1 @ u1))
    evals = scipy.linalg.eigvalsh(K)
    lam_min = max(float(evals[0]), 0.0)
    lam_max = max(float(evals[-1]), 0.0)
    nl2 = float(lv @ lv)

    def bound(lam: float) -> float:
        den = gamma + lam * lam * nl2
        return 0.0 if den == 0.0 else lam ** 4 * nl2 / den

    return bound(lam_min), bound(lam_max), value


def lanczos_top_m(apply, n: int, m: int, *, tol: float = 1e-8, max_iter: int | None = None):
    """Largest-m eigenpairs of a symmetric operator given only as a matvec.

    Runs a single Krylov sweep with full reorthogonalization, checking the
    Ritz residual bound ``beta |s_k|`` every few steps and stopping once the
    top m pairs satisfy ``||A v - lambda v|| <= tol * ||A||_2`` (spectral
    norm estimated from the Ritz values).  Breakdown injects a fresh
    deterministic direction, so invariant subspaces are handled.
    """
    if m < 1 or m >= n + 1:
        raise InvalidInputError(f"need 1 <= m <= n, got m={m}, n={n}")
    cap = min(n, max_iter) if max_iter is not None else n

    q = rng.gaussian(0, f"lanczos-start:{n}", (n,))
    q /= np.linalg.norm(q)
    Q = np.empty((n, cap))
    Q[:, 0] = q
    alphas: list[float] = []
    betas: list[float] = []
    fresh = 1  # index of the next deterministic restart vector

    def ritz(k: int):
        T = np.diag(np.array(alphas[:k]))
        if k > 1:
            off = np.array(betas[: k - 1])
            T += np.diag(off, 1) + np.diag(off, -1)
        theta, S = np.linalg.eigh(T)
        order = np.argsort(theta)[::-1]
        return theta[order], S[:, order]

    k = 0
    last_beta = 0.0
    while k < cap:
        w = apply(Q[:, k])
        alpha = float(Q[:, k] @ w)
        alphas.append(alpha)
        w = w - alpha * Q[:, k]
        if k > 0:
            w = w - betas[k - 1] * Q[:, k - 1]
        # full reorthogonalization, twice for safety
        for _ in range(2):
            w = w - Q[:, : k + 1] @ (Q[:, : k + 1].T @ w)
        last_beta = float(np.linalg.norm(w))
        k += 1
        if k >= m and (k % 5 == 0 or k == cap or last_beta < 1e-14):
            theta, S = ritz(k)
            scale = max(float(np.abs(theta).max()), 1e-300)
            resid = abs(last_beta) * np.abs(S[k - 1, :m])
            if np.all(resid <= tol * scale):
                V = Q[:, :k] @ S[:, :m]
                V /= np.linalg.norm(V, axis=0, keepdims=True)
                return theta[:m], V
        if k == cap:
            break
        if last_beta < 1e-14:
            # invariant subspace: continue with a fresh orthogonalized direction
            w = rng.gaussian(0, f"lanczos-start:{n}:{fresh}", (n,))
            fresh += 1
            for _ in range(2):
                w = w - Q[:, :k] @ (Q[:, :k].T @ w)
            nw = np.linalg.norm(w)
            if nw < 1e-14:
                break
            betas.append(0.0)
            Q[:, k] = w / nw
        else:
            betas.append(last_beta)
            Q[:, k] = w / last_beta

    theta, S = ritz(k)
    if k >= m:
        resid = abs(last_beta) * np.abs(S[k - 1, :m])
        scale = max(float(np.abs(theta).max()), 1e-300)
        if k == n or np.all(resid <= tol * scale):
            V = Q[:, :k] @ S[:, :m]
            V /= np.linalg.norm(V, axis=0, keepdims=True)
            return theta[:m], V
        raise ConvergenceError(
            f"Lanczos did not reach tolerance {tol} within {cap} iterations",
            last_estimate=theta[:m],
            residual=float(resid.max()),
        )
    raise ConvergenceError(
        f"Lanczos terminated with only {k} directions, fewer than m={m}",
        last_estimate=theta,
    )
