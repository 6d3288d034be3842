"""Trainable feature extractors, softmax classifiers, and the joint backward pass.

Extractors are small fully-connected rectifier networks (input -> h -> h -> p)
standing in for the heavyweight pretrained backbones used at production
scale.  Everything here is plain numpy with hand-written gradients; the
whole pipeline is validated against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import InvalidInputError, ShapeMismatchError
from .kernels import FeatureMatrix, RffProjection, _as_array, rff_map
from .mmd import LossWeights, MmdBatch, rff_backprop, summed_feature

__all__ = [
    "MlpExtractor",
    "SoftmaxClassifier",
    "SgdConfig",
    "TrainBatch",
    "PipelineGrads",
    "forward_extract",
    "cross_entropy",
    "sgd_step",
    "backward_through",
    "hybrid_loss",
]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    step_budget: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise InvalidInputError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch size must be >= 1, got {self.batch_size}")


def _fan_in_uniform(seed: int, tag: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (2.0 * rng.uniform(seed, tag, shape) - 1.0) * bound


class MlpExtractor:
    """Two-hidden-layer rectifier network mapping raw samples to features.

    Shapes are column-major: input ``(d, b)``, output ``(p, b)``.  With
    ``freeze_first`` the first layer keeps its random initialization,
    modeling a backbone with fixed early weights.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 100, seed: int = 0,
                 freeze_first: bool = False, tag: str = "extractor"):
        if min(in_dim, out_dim, hidden) < 1:
            raise InvalidInputError("all extractor dimensions must be >= 1")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        self.freeze_first = freeze_first
        dims = [(hidden, in_dim), (hidden, hidden), (out_dim, hidden)]
        self.weights = [
            _fan_in_uniform(seed, f"{tag}:W{i}", shp, shp[1]) for i, shp in enumerate(dims)
        ]
        self.biases = [
            _fan_in_uniform(seed, f"{tag}:b{i}", (shp[0],), shp[1]) for i, shp in enumerate(dims)
        ]

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def set_parameters(self, params: list[np.ndarray]) -> None:
        k = len(self.weights)
        self.weights = [np.asarray(p, dtype=np.float64).copy() for p in params[:k]]
        self.biases = [np.asarray(p, dtype=np.float64).copy() for p in params[k:]]

    def forward(self, X) -> np.ndarray:
        return self.forward_with_cache(X)[0]

    def forward_with_cache(self, X):
        a0 = _as_array(X)
        if a0.shape[0] != self.in_dim:
            raise ShapeMismatchError(f"extractor expects dimension {self.in_dim}, got {a0.shape[0]}")
        z1 = self.weights[0] @ a0 + self.biases[0][:, None]
        a1 = np.maximum(z1, 0.0)
        z2 = self.weights[1] @ a1 + self.biases[1][:, None]
        a2 = np.maximum(z2, 0.0)
        out = self.weights[2] @ a2 + self.biases[2][:, None]
        return out, (a0, z1, a1, z2, a2)

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients for ``parameters()`` order given dL/d(output)."""
        a0, z1, a1, z2, a2 = cache
        d_out = np.asarray(grad_out, dtype=np.float64)
        dW2 = d_out @ a2.T
        db2 = d_out.sum(axis=1)
        dz2 = (self.weights[2].T @ d_out) * (z2 > 0)
        dW1 = dz2 @ a1.T
        db1 = dz2.sum(axis=1)
        dz1 = (self.weights[1].T @ dz2) * (z1 > 0)
        dW0 = dz1 @ a0.T
        db0 = dz1.sum(axis=1)
        if self.freeze_first:
            dW0 = np.zeros_like(dW0)
            db0 = np.zeros_like(db0)
        return [dW0, dW1, dW2, db0, db1, db2]


class SoftmaxClassifier:
    """Linear classifier with a softmax head over ``c`` classes."""

    def __init__(self, in_dim: int, n_classes: int, seed: int = 0, tag: str = "classifier"):
        if in_dim < 1 or n_classes < 1:
            raise InvalidInputError("classifier dimensions must be >= 1")
        self.weight = _fan_in_uniform(seed, f"{tag}:W", (in_dim, n_classes), in_dim)
        self.bias = _fan_in_uniform(seed, f"{tag}:b", (n_classes,), in_dim)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def set_parameters(self, params: list[np.ndarray]) -> None:
        self.weight = np.asarray(params[0], dtype=np.float64).copy()
        self.bias = np.asarray(params[1], dtype=np.float64).copy()

    def logits(self, F) -> np.ndarray:
        F = _as_array(F)
        if F.shape[0] != self.weight.shape[0]:
            raise ShapeMismatchError(
                f"classifier expects dimension {self.weight.shape[0]}, got {F.shape[0]}"
            )
        return self.weight.T @ F + self.bias[:, None]

    def predict_proba(self, F) -> np.ndarray:
        z = self.logits(F)
        z = z - z.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)

    def predict(self, F) -> np.ndarray:
        return np.argmax(self.logits(F), axis=0)


def forward_extract(g: MlpExtractor, X_raw, domain_tag: str = "") -> FeatureMatrix:
    """Run the extractor and wrap the (p, b) output as a feature matrix."""
    return FeatureMatrix(g.forward(X_raw), domain_tag=domain_tag)


def _check_labels(y, n_classes: int, b: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (b,):
        raise ShapeMismatchError(f"labels must have shape ({b},), got {y.shape}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= n_classes:
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.intp)


def cross_entropy(c: SoftmaxClassifier, F, y) -> float:
    """Mean negative log-likelihood of the true classes."""
    F = _as_array(F)
    y = _check_labels(y, c.n_classes, F.shape[1])
    z = c.logits(F)
    z = z - z.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0))
    return float(np.mean(log_norm - z[y, np.arange(F.shape[1])]))


def _cross_entropy_grads(c: SoftmaxClassifier, F: np.ndarray, y: np.ndarray):
    b = F.shape[1]
    P = c.predict_proba(F)
    ll = np.log(P[y, np.arange(b)])
    loss = float(-ll.mean())
    P[y, np.arange(b)] -= 1.0
    P /= b
    dW = F @ P.T
    db = P.sum(axis=1)
    dF = c.weight @ P
    return loss, dW, db, dF


def sgd_step(params, grads, cfg: SgdConfig, velocity=None):
    """One momentum step; returns ``(new_params, new_velocity)``.

    Update rule: v <- momentum*v + grad + weight_decay*param, then
    param <- param - learning_rate * v.
    """
    if len(params) != len(grads):
        raise ShapeMismatchError("params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        v_new = cfg.momentum * v + g + cfg.weight_decay * p
        new_params.append(p - cfg.learning_rate * v_new)
        new_velocity.append(v_new)
    return new_params, new_velocity


@dataclass
class TrainBatch:
    """One mini-batch plus the most recent summed message from the other side."""

    X_raw: np.ndarray
    labels: np.ndarray | None = None
    remote_sums: list[np.ndarray] = field(default_factory=list)
    side: str = "source"

    def __post_init__(self):
        self.X_raw = np.asarray(self.X_raw, dtype=np.float64)
        if self.side not in ("source", "target"):
            raise InvalidInputError(f"side must be 'source' or 'target', got {self.side!r}")


@dataclass
class PipelineGrads:
    extractor: list[np.ndarray]
    classifier: list[np.ndarray] | None
    adaptive: np.ndarray
    classif_loss: float
    mmd_loss: float
    local_sum: np.ndarray


def _mmd_batch(local: np.ndarray, remote: np.ndarray, side: str) -> MmdBatch:
    if side == "source":
        return MmdBatch(summed_source=local, summed_target=remote)
    return MmdBatch(summed_source=remote, summed_target=local)


def hybrid_loss(g: MlpExtractor, c: SoftmaxClassifier | None, W_RF: np.ndarray,
                proj: RffProjection, batch: TrainBatch, weights: LossWeights):
    """Forward-only evaluation of the objective differentiated by ``backward_through``.

    Sources optimize classification plus ``lambda`` times the summed
    alignment losses; the (unlabeled) target optimizes the alignment
    losses alone.  Returns ``(total, classification, alignment)``.
    """
    features = g.forward(batch.X_raw)
    sigma = rff_map(features, proj)
    local = summed_feature(sigma, batch.side)
    ce = 0.0
    if batch.labels is not None:
        if c is None:
            raise InvalidInputError("labeled batch requires a classifier")
        ce = cross_entropy(c, W_RF.T @ sigma, batch.labels)
        coeff = weights.lambda_
    else:
        coeff = 1.0
    mmd_total = 0.0
    for remote in batch.remote_sums:
        d = _mmd_batch(local, remote, batch.side).discrepancy
        v = W_RF.T @ d
        mmd_total += float(v @ v)
    return ce + coeff * mmd_total, ce, mmd_total


def backward_through(g: MlpExtractor, c: SoftmaxClassifier | None, W_RF: np.ndarray,
                     proj: RffProjection, batch: TrainBatch,
                     weights: LossWeights = LossWeights()) -> PipelineGrads:
    """Gradients of the hybrid objective for every trainable tensor.

    Follows the chain raw batch -> extractor -> random feature map ->
    aligner/classifier, accumulating both the classification path and the
    alignment path into a single dL/dSigma before the trigonometric
    backprop step.
    """
    W_RF = np.asarray(W_RF, dtype=np.float64)
    features, cache = g.forward_with_cache(batch.X_raw)
    sigma = rff_map(features, proj)
    b = sigma.shape[1]
    local = summed_feature(sigma, batch.side)

    grad_sigma = np.zeros_like(sigma)
    dW_rf = np.zeros_like(W_RF)
    clf_grads = None
    ce = 0.0
    if batch.labels is not None:
        if c is None:
            raise InvalidInputError("labeled batch requires a classifier")
        y = _check_labels(batch.labels, c.n_classes, b)
        F = W_RF.T @ sigma
        ce, dWc, dbc, dF = _cross_entropy_grads(c, F, y)
        clf_grads = [dWc, dbc]
        dW_rf += sigma @ dF.T
        grad_sigma += W_RF @ dF
        coeff = weights.lambda_
    else:
        coeff = 1.0

    sign = 1.0 if batch.side == "source" else -1.0
    mmd_total = 0.0
    if coeff > 0.0 and batch.remote_sums:
        g_d_sum = np.zeros_like(local)
        for remote in batch.remote_sums:
            d = _mmd_batch(local, remote, batch.side).discrepancy
            v = W_RF.T @ d
            mmd_total += float(v @ v)
            dW_rf += coeff * 2.0 * np.outer(d, v)
            g_d_sum += 2.0 * (W_RF @ v)
        grad_sigma += (coeff * sign / b) * g_d_sum[:, None]

    if np.any(grad_sigma):
        d_features = rff_backprop(proj, features, grad_sigma)
    else:
        d_features = np.zeros_like(features)
    ext_grads = g.backward(cache, d_features)
    return PipelineGrads(
        extractor=ext_grads,
        classifier=clf_grads,
        adaptive=dW_rf,
        classif_loss=ce,
        mmd_loss=mmd_total,
        local_sum=local,
    )
