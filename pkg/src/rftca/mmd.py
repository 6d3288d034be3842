"""Distribution-distance loss on summed random-feature messages and its gradients.

The discrepancy between a source batch and a target batch is measured as
``|| W' (s + t) ||^2`` where ``s`` is the mean of the source batch's random
feature columns, ``t`` is the negated mean of the target batch's, and ``W``
is the trainable linear aligner.  Only the two length-2N summed vectors
ever leave a client, so the message size is independent of batch and
dataset size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeMismatchError
from .kernels import RffProjection, _as_array

__all__ = [
    "MmdBatch",
    "LossWeights",
    "summed_feature",
    "mmd_loss",
    "mmd_grad_W",
    "mmd_grad_features",
    "rff_backprop",
    "source_loss",
]


@dataclass
class MmdBatch:
    """The pair of signed summed-feature vectors entering the loss."""

    summed_source: np.ndarray  # +mean of source RFF columns, length 2N
    summed_target: np.ndarray  # -mean of target RFF columns, length 2N

    def __post_init__(self):
        self.summed_source = np.asarray(self.summed_source, dtype=np.float64).reshape(-1)
        self.summed_target = np.asarray(self.summed_target, dtype=np.float64).reshape(-1)
        if self.summed_source.shape != self.summed_target.shape:
            raise ShapeMismatchError(
                f"summed vectors differ in length: {self.summed_source.shape[0]} "
                f"vs {self.summed_target.shape[0]}"
            )
        if not (np.all(np.isfinite(self.summed_source)) and np.all(np.isfinite(self.summed_target))):
            raise InvalidInputError("summed feature vectors must be finite")

    @property
    def discrepancy(self) -> np.ndarray:
        return self.summed_source + self.summed_target


@dataclass(frozen=True)
class LossWeights:
    """Trade-off between classification and alignment in the hybrid loss."""

    lambda_: float = 1.0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise InvalidInputError(f"lambda must be nonnegative, got {self.lambda_}")


def summed_feature(sigma_cols: np.ndarray, side: str) -> np.ndarray:
    """Signed column mean of a random-feature block: + for source, - for target."""
    sigma_cols = np.asarray(sigma_cols, dtype=np.float64)
    if sigma_cols.ndim != 2:
        raise ShapeMismatchError(f"expected a (2N, b) block, got shape {sigma_cols.shape}")
    if side == "source":
        return sigma_cols.mean(axis=1)
    if side == "target":
        return -sigma_cols.mean(axis=1)
    raise InvalidInputError(f"side must be 'source' or 'target', got {side!r}")


def _check_W(batch: MmdBatch, W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != batch.summed_source.shape[0]:
        raise ShapeMismatchError(
            f"aligner rows ({W.shape}) must match summed vector length "
            f"{batch.summed_source.shape[0]}"
        )
    return W


def mmd_loss(batch: MmdBatch, W) -> float:
    """``|| W' d ||^2`` for ``d`` the summed discrepancy; zero iff the means align under W."""
    W = _check_W(batch, W)
    v = W.T @ batch.discrepancy
    return float(v @ v)


def mmd_grad_W(batch: MmdBatch, W) -> np.ndarray:
    """Gradient ``2 d d' W`` of the loss with respect to the aligner."""
    W = _check_W(batch, W)
    d = batch.discrepancy
    return 2.0 * np.outer(d, d @ W)


def rff_backprop(proj: RffProjection, X_batch, grad_sigma: np.ndarray) -> np.ndarray:
    """Chain a gradient on the RFF block back to the raw batch.

    Given dL/dSigma of shape (2N, b) for Sigma = (1/sqrt N)[cos(Om X); sin(Om X)],
    returns dL/dX of shape (p, b).
    """
    X = _as_array(X_batch)
    grad_sigma = np.asarray(grad_sigma, dtype=np.float64)
    N = proj.n_features
    if grad_sigma.shape != (2 * N, X.shape[1]):
        raise ShapeMismatchError(
            f"grad block is {grad_sigma.shape}, expected {(2 * N, X.shape[1])}"
        )
    Z = proj.omega @ X
    inner = (-np.sin(Z) * grad_sigma[:N] + np.cos(Z) * grad_sigma[N:]) / np.sqrt(N)
    return proj.omega.T @ inner


def mmd_grad_features(batch: MmdBatch, W, proj: RffProjection, X_batch, side: str) -> np.ndarray:
    """Gradient of the loss with respect to one side's raw batch features."""
    W = _check_W(batch, W)
    X = _as_array(X_batch)
    if side == "source":
        sign = 1.0
    elif side == "target":
        sign = -1.0
    else:
        raise InvalidInputError(f"side must be 'source' or 'target', got {side!r}")
    b = X.shape[1]
    d = batch.discrepancy
    g = 2.0 * (W @ (W.T @ d))  # dL/dd
    grad_sigma = np.repeat((sign / b) * g[:, None], b, axis=1)
    return rff_backprop(proj, X, grad_sigma)


def source_loss(classif_loss: float, mmd: float, w: LossWeights) -> float:
    """Hybrid objective: classification plus ``lambda`` times the alignment loss."""
    if not (np.isfinite(classif_loss) and np.isfinite(mmd)):
        raise InvalidInputError("loss components must be finite")
    return float(classif_loss + w.lambda_ * mmd)
