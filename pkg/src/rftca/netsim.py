"""Deterministic unreliable-network model and exact communication accounting.

Every delivery outcome is a pure function of ``(seed, round, kind, sender)``,
so a rerun of the same configuration reproduces the same losses bit for
bit regardless of message iteration order.  Client availability gates a
client's outgoing messages for the whole round; per-kind drop
probabilities then act independently per message.

Volumes are counted in scalar parameters (64-bit floats on the wire, so
bytes = 8 x scalars).  Only client-emitted messages are metered; the
aggregation point's downlink broadcasts are not.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .errors import InvalidInputError
from .protocol import (
    KIND_CLASSIFIER,
    KIND_LAYER_WEIGHTS,
    KIND_SUMMED_FEATURE,
    ProtocolMessage,
)

__all__ = [
    "NetworkConfig",
    "CommLedger",
    "deliver",
    "round_volume",
    "expected_round_volume",
    "complexity_table",
    "SCALAR_BYTES",
]

SCALAR_BYTES = 8
_KIND_ORDER = {KIND_SUMMED_FEATURE: 0, KIND_LAYER_WEIGHTS: 1, KIND_CLASSIFIER: 2}


@dataclass(frozen=True)
class NetworkConfig:
    """Per-kind drop probabilities, client availability, and the network seed."""

    drop_feature: float = 0.0
    drop_weights: float = 0.0
    drop_classifier: float = 0.0
    availability: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_feature", "drop_weights", "drop_classifier", "availability"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")

    def drop_probability(self, kind: str) -> float:
        return {
            KIND_SUMMED_FEATURE: self.drop_feature,
            KIND_LAYER_WEIGHTS: self.drop_weights,
            KIND_CLASSIFIER: self.drop_classifier,
        }[kind]


@dataclass
class _KindCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    volume_sent: int = 0
    volume_delivered: int = 0


@dataclass
class CommLedger:
    """Per-round, per-kind message and scalar-volume accounting."""

    rows: dict[tuple[int, str], _KindCounters] = field(default_factory=dict)

    def _bucket(self, round_number: int, kind: str) -> _KindCounters:
        return self.rows.setdefault((round_number, kind), _KindCounters())

    def record(self, round_number: int, kind: str, size: int, delivered: bool) -> None:
        bucket = self._bucket(round_number, kind)
        bucket.sent += 1
        bucket.volume_sent += size
        if delivered:
            bucket.delivered += 1
            bucket.volume_delivered += size
        else:
            bucket.dropped += 1

    def rounds(self) -> list[int]:
        return sorted({r for r, _ in self.rows})

    def totals(self, round_number: int) -> dict[str, _KindCounters]:
        return {kind: c for (r, kind), c in self.rows.items() if r == round_number}

    def volume_sent(self, round_number: int) -> int:
        return sum(c.volume_sent for c in self.totals(round_number).values())

    def volume_delivered(self, round_number: int) -> int:
        return sum(c.volume_delivered for c in self.totals(round_number).values())

    def conserved(self) -> bool:
        return all(c.sent == c.delivered + c.dropped for c in self.rows.values())

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("round,kind,sent,delivered,dropped,volume\n")
        for (r, kind) in sorted(self.rows, key=lambda rk: (rk[0], _KIND_ORDER[rk[1]])):
            c = self.rows[(r, kind)]
            out.write(f"{r},{kind},{c.sent},{c.delivered},{c.dropped},{c.volume_sent}\n")
        return out.getvalue()


def _is_available(cfg: NetworkConfig, round_number: int, client: int) -> bool:
    if cfg.availability >= 1.0:
        return True
    draw = rng.stream(cfg.seed, f"avail:{round_number}:{client}").random()
    return bool(draw < cfg.availability)


def _survives(cfg: NetworkConfig, round_number: int, msg: ProtocolMessage) -> bool:
    p = cfg.drop_probability(msg.kind)
    if p <= 0.0:
        return True
    if p >= 1.0:
        return False
    draw = rng.stream(cfg.seed, f"drop:{round_number}:{msg.kind}:{msg.sender}").random()
    return bool(draw >= p)


def deliver(msgs: Sequence[ProtocolMessage], cfg: NetworkConfig, round_number: int,
            ledger: CommLedger | None = None) -> tuple[list[ProtocolMessage], CommLedger]:
    """Apply availability and per-kind drops; returns survivors and the ledger."""
    if ledger is None:
        ledger = CommLedger()
    delivered = []
    for msg in msgs:
        ok = _is_available(cfg, round_number, msg.sender) and _survives(cfg, round_number, msg)
        ledger.record(round_number, msg.kind, msg.size, ok)
        if ok:
            delivered.append(msg)
    return delivered, ledger


def round_volume(ledger: CommLedger, round_number: int) -> int:
    """Scalar parameters put on the wire in one round."""
    if round_number not in ledger.rounds():
        raise InvalidInputError(f"round {round_number} is not recorded in the ledger")
    return ledger.volume_sent(round_number)


def expected_round_volume(K: int, N: int, m: int, n_participants: int,
                          classifier_round: bool = False, n_classes: int = 0) -> int:
    """Scalar volume of a full round under full message delivery.

    Features: K source messages plus the target's broadcast payload, 2N
    scalars each.  Weights: each participant plus the target uploads a
    (2N, m) aligner.  Classifiers ((m+1) c scalars each) ride along only
    on aggregation-boundary rounds.
    """
    feat = (K + 1) * 2 * N
    wts = (n_participants + 1) * 2 * N * m
    clf = n_participants * (m + 1) * n_classes if classifier_round else 0
    return feat + wts + clf


def complexity_table(entries: Iterable[dict], ciphertext_factor: int = 4) -> list[dict]:
    """Analytic per-round scalar costs of MMD-exchange protocols next to measured volumes.

    Each entry needs ``n``, ``K``, ``N``, ``m`` and a ``measured`` volume
    taken from an actual run's ledger.  Baseline rows follow the growth
    orders K*n*N (raw-feature exchange), K*n*N*P (the same under
    ciphertext expansion P); the measured column depends only on (K, N, m).
    """
    rows = []
    for e in entries:
        n, K, N, m = int(e["n"]), int(e["K"]), int(e["N"]), int(e["m"])
        rows.append({
            "n": n,
            "K": K,
            "N": N,
            "m": m,
            "feature_exchange": K * n * N,
            "encrypted_exchange": K * n * N * ciphertext_factor,
            "fedrf_measured": int(e["measured"]),
        })
    return rows
