"""Client-side protocol steps, message framing, aggregation and voting.

Clients exchange three message kinds: length-2N summed feature vectors,
(2N, m) aligner weights, and flattened classifier parameters.  Sources
talk only to the target (features) and the aggregation point (weights,
classifiers); no source ever addresses another source.

Within a round, client steps consume the messages delivered at the end of
the previous round, so every step depends only on its own inbox and the
steps of one round can run in any order (or concurrently) without
changing the outcome.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataFormatError, InvalidInputError, ShapeMismatchError
from .kernels import RffProjection
from .learners import (
    MlpExtractor,
    PipelineGrads,
    SgdConfig,
    SoftmaxClassifier,
    TrainBatch,
    backward_through,
    sgd_step,
)
from .mmd import LossWeights
from . import rng

__all__ = [
    "KIND_SUMMED_FEATURE",
    "KIND_LAYER_WEIGHTS",
    "KIND_CLASSIFIER",
    "TARGET_ID",
    "ProtocolMessage",
    "RoundPlan",
    "DropoutPolicy",
    "ClientState",
    "StepConfig",
    "sample_participants",
    "source_step",
    "target_step",
    "aggregate",
    "hard_vote_predict",
    "apply_ordering_mode",
    "flatten_classifier",
    "unflatten_classifier",
]

KIND_SUMMED_FEATURE = "summed-feature"
KIND_LAYER_WEIGHTS = "layer-weights"
KIND_CLASSIFIER = "classifier-weights"

_KIND_CODES = {KIND_SUMMED_FEATURE: 1, KIND_LAYER_WEIGHTS: 2, KIND_CLASSIFIER: 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_HEADER = struct.Struct("<BIIQ")  # kind tag, sender id, round, payload element count

TARGET_ID = 0  # sources are 1..K


@dataclass
class ProtocolMessage:
    """One framed unit on the wire; payload element counts never depend on n."""

    kind: str
    sender: int
    round: int
    payload: np.ndarray

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise InvalidInputError(f"unknown message kind {self.kind!r}")
        self.payload = np.asarray(self.payload, dtype=np.float64)

    @property
    def size(self) -> int:
        """Number of scalar parameters carried."""
        return int(self.payload.size)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            _KIND_CODES[self.kind], self.sender, self.round, self.payload.size
        )
        return header + self.payload.ravel().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ProtocolMessage":
        if len(buf) < _HEADER.size:
            raise DataFormatError(f"message frame too short: {len(buf)} bytes", offset=0)
        code, sender, rnd, count = _HEADER.unpack_from(buf)
        if code not in _CODE_KINDS:
            raise DataFormatError(f"unknown message kind tag {code}", offset=0)
        expected = _HEADER.size + 8 * count
        if len(buf) != expected:
            raise DataFormatError(
                f"payload length mismatch: frame says {count} elements "
                f"({expected} bytes), got {len(buf)} bytes",
                offset=_HEADER.size,
            )
        payload = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
        return cls(kind=_CODE_KINDS[code], sender=sender, round=rnd, payload=payload)


@dataclass(frozen=True)
class RoundPlan:
    """Participant set and aggregation schedule for one round."""

    round: int
    participants: tuple[int, ...]
    classifier_round: bool


@dataclass(frozen=True)
class DropoutPolicy:
    """Nested per-kind delivery sets plus per-kind ordering modes.

    ``nested`` picks which clients' messages survive: ``AAA`` delivers all
    participants' messages of every kind; ``AAB`` drops classifiers down to
    a random subset B of the participants A; ``ABC`` additionally drops
    aligner weights down to B and classifiers down to C, a random subset
    of B.  Ordering modes optionally thin feature/weight messages to one
    per round (cycling or uniformly random sender).
    """

    nested: str = "AAA"
    feature_mode: str = "all"
    weight_mode: str = "all"

    def __post_init__(self):
        if self.nested not in ("AAA", "AAB", "ABC"):
            raise InvalidInputError(f"unknown nested policy {self.nested!r}")
        for mode in (self.feature_mode, self.weight_mode):
            if mode not in ("all", "ordered", "random"):
                raise InvalidInputError(f"unknown ordering mode {mode!r}")


@dataclass
class ClientState:
    """Everything a client holds between rounds."""

    role: str  # "source" | "target"
    client_id: int
    extractor: MlpExtractor
    classifier: SoftmaxClassifier
    adaptive: np.ndarray  # (2N, m)
    X_raw: np.ndarray     # (d, n) local samples
    labels: np.ndarray | None = None
    inbox: dict[int, tuple[np.ndarray, int]] = field(default_factory=dict)
    velocity: dict[str, list[np.ndarray] | None] = field(
        default_factory=lambda: {"extractor": None, "classifier": None, "adaptive": None}
    )

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise InvalidInputError(f"unknown role {self.role!r}")
        self.adaptive = np.asarray(self.adaptive, dtype=np.float64)

    def receive(self, msg_payload: np.ndarray, sender: int, rnd: int) -> None:
        """Cache a summed-feature message; the freshest round wins."""
        held = self.inbox.get(sender)
        if held is None or rnd >= held[1]:
            self.inbox[sender] = (np.asarray(msg_payload, dtype=np.float64), rnd)


@dataclass(frozen=True)
class StepConfig:
    """Per-round knobs handed to the client steps."""

    sgd: SgdConfig
    weights: LossWeights
    proj: RffProjection
    round: int
    classifier_round: bool
    seed: int
    local_steps: int = 1


def sample_participants(K: int, gen: np.random.Generator) -> tuple[int, ...]:
    """Draw |S_t| uniformly from {0..K}, then that many distinct client ids."""
    if K < 1:
        raise InvalidInputError(f"need K >= 1 source clients, got {K}")
    size = int(gen.integers(0, K + 1))
    if size == 0:
        return ()
    ids = gen.choice(K, size=size, replace=False) + 1
    return tuple(int(i) for i in np.sort(ids))


def _draw_batch(state: ClientState, cfg: StepConfig, step: int) -> np.ndarray:
    n = state.X_raw.shape[1]
    b = min(cfg.sgd.batch_size, n)
    gen = rng.stream(cfg.seed, f"batch:{state.client_id}:{cfg.round}:{step}")
    return np.sort(gen.choice(n, size=b, replace=False))


def _apply_grads(state: ClientState, grads: PipelineGrads, cfg: StepConfig,
                 update_adaptive: bool, update_classifier: bool) -> None:
    new, vel = sgd_step(state.extractor.parameters(), grads.extractor, cfg.sgd,
                        state.velocity["extractor"])
    state.extractor.set_parameters(new)
    state.velocity["extractor"] = vel
    if update_classifier and grads.classifier is not None:
        new, vel = sgd_step(state.classifier.parameters(), grads.classifier, cfg.sgd,
                            state.velocity["classifier"])
        state.classifier.set_parameters(new)
        state.velocity["classifier"] = vel
    if update_adaptive:
        new, vel = sgd_step([state.adaptive], [grads.adaptive], cfg.sgd,
                            state.velocity["adaptive"])
        state.adaptive = new[0]
        state.velocity["adaptive"] = vel


def source_step(state: ClientState, target_msg: np.ndarray | None, in_round: bool,
                cfg: StepConfig) -> tuple[list[ProtocolMessage], dict]:
    """One source-client round: always emit the summed feature; train locally.

    Participants with a target message in hand minimize the hybrid loss
    over extractor, aligner and classifier; everyone else (including a
    participant whose target message never arrived, which is flagged but
    not fatal) minimizes the classification loss alone, leaving the
    aligner untouched since the classification path does not reach it
    when the alignment term is absent.
    """
    if state.role != "source":
        raise InvalidInputError("source_step requires a source client")
    if target_msg is not None:
        state.receive(target_msg, TARGET_ID, cfg.round)
    cached = state.inbox.get(TARGET_ID)
    use_mmd = in_round and cached is not None and cfg.weights.lambda_ > 0
    fallback = in_round and cached is None

    info = {"classif_loss": 0.0, "mmd_loss": 0.0, "fallback": fallback}
    local_sum = None
    for step in range(max(1, cfg.local_steps)):
        idx = _draw_batch(state, cfg, step)
        batch = TrainBatch(
            X_raw=state.X_raw[:, idx],
            labels=None if state.labels is None else state.labels[idx],
            remote_sums=[cached[0]] if use_mmd else [],
            side="source",
        )
        weights = cfg.weights if use_mmd else LossWeights(0.0)
        grads = backward_through(state.extractor, state.classifier, state.adaptive,
                                 cfg.proj, batch, weights)
        if local_sum is None:
            local_sum = grads.local_sum
        _apply_grads(state, grads, cfg, update_adaptive=use_mmd, update_classifier=True)
        info["classif_loss"] = grads.classif_loss
        info["mmd_loss"] = grads.mmd_loss

    out = [ProtocolMessage(KIND_SUMMED_FEATURE, state.client_id, cfg.round, local_sum)]
    if in_round:
        out.append(ProtocolMessage(KIND_LAYER_WEIGHTS, state.client_id, cfg.round,
                                   state.adaptive.copy()))
        if cfg.classifier_round:
            out.append(ProtocolMessage(KIND_CLASSIFIER, state.client_id, cfg.round,
                                       flatten_classifier(state.classifier)))
    return out, info


def target_step(state: ClientState, source_msgs: Sequence[ProtocolMessage],
                cfg: StepConfig) -> tuple[list[ProtocolMessage], dict]:
    """One target-client round: emit the summed feature; align against every
    cached source message (stale ones included) by gradient descent on the
    summed per-source alignment losses."""
    if state.role != "target":
        raise InvalidInputError("target_step requires a target client")
    for msg in source_msgs:
        if msg.kind == KIND_SUMMED_FEATURE:
            state.receive(msg.payload, msg.sender, msg.round)
    remote = [vec for _, (vec, _) in sorted(state.inbox.items())]

    info = {"classif_loss": 0.0, "mmd_loss": 0.0, "fallback": not remote}
    local_sum = None
    if not remote:
        # nothing to align against yet: emit the message, skip the update
        idx = _draw_batch(state, cfg, 0)
        batch = TrainBatch(X_raw=state.X_raw[:, idx], side="target")
        grads = backward_through(state.extractor, None, state.adaptive, cfg.proj, batch,
                                 LossWeights(0.0))
        local_sum = grads.local_sum
    else:
        for step in range(max(1, cfg.local_steps)):
            idx = _draw_batch(state, cfg, step)
            batch = TrainBatch(X_raw=state.X_raw[:, idx], remote_sums=remote, side="target")
            grads = backward_through(state.extractor, None, state.adaptive, cfg.proj, batch)
            if local_sum is None:
                local_sum = grads.local_sum
            _apply_grads(state, grads, cfg, update_adaptive=True, update_classifier=False)
            info["mmd_loss"] = grads.mmd_loss

    out = [
        ProtocolMessage(KIND_SUMMED_FEATURE, TARGET_ID, cfg.round, local_sum),
        ProtocolMessage(KIND_LAYER_WEIGHTS, TARGET_ID, cfg.round, state.adaptive.copy()),
    ]
    return out, info


def aggregate(plan: RoundPlan, source_W: Mapping[int, np.ndarray],
              target_W: np.ndarray | None, source_C: Mapping[int, np.ndarray],
              ) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Unweighted averaging of delivered aligners (sources plus target) and,
    on classifier rounds, of delivered source classifiers.

    Summation runs in ascending client id so the result is bit-identical
    under any permutation of the inputs.  An empty participant set leaves
    the target's aligner as the average.
    """
    W_items = [source_W[i] for i in sorted(source_W)]
    if target_W is not None:
        W_items.append(target_W)
    W_avg = None
    if W_items:
        shapes = {w.shape for w in W_items}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"aligner shapes differ: {sorted(shapes)}")
        acc = np.zeros_like(W_items[0])
        for w in W_items:
            acc += w
        W_avg = acc / len(W_items)

    C_avg = None
    if plan.classifier_round and source_C:
        C_items = [source_C[i] for i in sorted(source_C)]
        shapes = {c.shape for c in C_items}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"classifier shapes differ: {sorted(shapes)}")
        acc = np.zeros_like(C_items[0])
        for cvec in C_items:
            acc += cvec
        C_avg = acc / len(C_items)
    return W_avg, C_avg


def flatten_classifier(c: SoftmaxClassifier) -> np.ndarray:
    return np.concatenate([c.weight.ravel(), c.bias])


def unflatten_classifier(flat: np.ndarray, in_dim: int, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    expected = in_dim * n_classes + n_classes
    if flat.shape[0] != expected:
        raise ShapeMismatchError(
            f"classifier payload has {flat.shape[0]} scalars, expected {expected}"
        )
    return flat[: in_dim * n_classes].reshape(in_dim, n_classes), flat[in_dim * n_classes:]


def hard_vote_predict(classifiers: Sequence[SoftmaxClassifier], F_T) -> np.ndarray:
    """Per-sample majority vote over classifiers; ties go to the lowest class."""
    if not classifiers:
        raise InvalidInputError("hard voting needs at least one classifier")
    F = np.asarray(F_T.data if hasattr(F_T, "data") else F_T, dtype=np.float64)
    n_classes = max(c.n_classes for c in classifiers)
    counts = np.zeros((n_classes, F.shape[1]), dtype=np.int64)
    for c in classifiers:
        pred = c.predict(F)
        counts[pred, np.arange(F.shape[1])] += 1
    return np.argmax(counts, axis=0)  # argmax takes the lowest index on ties


def apply_ordering_mode(msgs: Sequence[ProtocolMessage], mode: str,
                        gen: np.random.Generator, round_number: int, K: int,
                        ) -> list[ProtocolMessage]:
    """Thin a per-round message batch according to the delivery ordering mode.

    ``all`` passes everything through; ``ordered`` admits only the sender
    scheduled for this round (cycling 1..K); ``random`` admits one message
    drawn uniformly from those present.
    """
    msgs = list(msgs)
    if mode == "all":
        return msgs
    if mode == "ordered":
        scheduled = ((round_number - 1) % K) + 1
        return [m for m in msgs if m.sender == scheduled]
    if mode == "random":
        if not msgs:
            return []
        return [msgs[int(gen.integers(0, len(msgs)))]]
    raise InvalidInputError(f"unknown ordering mode {mode!r}")
