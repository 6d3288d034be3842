"""Dataset ingestion, synthetic multi-domain generation, and persistence.

File formats
------------
* CSV: header ``f0,...,f{p-1}[,label]``, one row per sample.  Floats are
  written with ``repr`` so values round-trip exactly.
* Binary matrix: 8-byte magic ``RFTCAMX0``, uint32 version, two uint64
  dims (rows, cols), then row-major little-endian float64 data.
* Metrics: one JSON record per line; a header record precedes one record
  per protocol round.

Target-domain labels generated for evaluation never appear on the public
``labels`` field; they are reachable only through ``evaluation_labels``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import DataFormatError, InvalidInputError, ShapeMismatchError
from .kernels import FeatureMatrix

__all__ = [
    "DomainDataset",
    "SynthSpec",
    "RoundMetrics",
    "load_matrix",
    "save_matrix",
    "generate_synthetic",
    "unit_normalize",
    "evaluation_labels",
    "save_metrics",
    "load_metrics",
    "metrics_to_jsonl",
    "metrics_from_jsonl",
]

_MAGIC = b"RFTCAMX0"
_BIN_VERSION = 1
METRICS_FIELDS = (
    "round",
    "participant_count",
    "mmd_loss",
    "classif_loss",
    "target_accuracy",
    "volume_sent",
    "volume_delivered",
)


@dataclass
class DomainDataset:
    """Feature block for one domain, with labels public only on source domains."""

    features: FeatureMatrix
    labels: np.ndarray | None
    domain: str
    test_mask: np.ndarray | None = None
    _hidden_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.features.n_samples
        for name in ("labels", "_hidden_labels"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.shape != (n,):
                    raise ShapeMismatchError(
                        f"{name} has shape {arr.shape}, expected ({n},) for domain {self.domain!r}"
                    )
                setattr(self, name, arr.astype(np.int64))
        if self.test_mask is not None:
            self.test_mask = np.asarray(self.test_mask, dtype=bool)
            if self.test_mask.shape != (n,):
                raise ShapeMismatchError(f"test_mask must have shape ({n},)")

    @property
    def n_samples(self) -> int:
        return self.features.n_samples

    @property
    def dim(self) -> int:
        return self.features.dim


def evaluation_labels(ds: DomainDataset) -> np.ndarray:
    """Labels for scoring only; the sole accessor for a target domain's labels."""
    if ds.labels is not None:
        return ds.labels
    if ds._hidden_labels is not None:
        return ds._hidden_labels
    raise InvalidInputError(f"domain {ds.domain!r} has no labels, hidden or otherwise")


@dataclass(frozen=True)
class SynthSpec:
    """Shifted-and-rotated Gaussian class clusters across several domains.

    Class centers live mostly in the first two coordinates so that the
    in-plane rotation and shifts actually move samples across class
    structure.  Cluster noise is unit-variance, so ``shift`` is measured
    in cluster standard deviations.
    """

    classes: int = 3
    dim: int = 8
    shift: float = 5.0
    rotation: float = 0.6
    separation: float = 4.0
    samples_per_domain: int = 300
    n_sources: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise InvalidInputError("need at least two classes")
        if self.dim < 2:
            raise InvalidInputError("need dimension >= 2 for the rotation plane")
        if min(self.separation, self.samples_per_domain, self.n_sources) <= 0:
            raise InvalidInputError("separation, samples_per_domain and n_sources must be positive")
        if self.shift < 0 or self.rotation < 0:
            raise InvalidInputError("shift and rotation must be nonnegative")


def _rotation_matrix(dim: int, angle: float) -> np.ndarray:
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    R[0, 0] = c
    R[0, 1] = -s
    R[1, 0] = s
    R[1, 1] = c
    return R


def _class_centers(spec: SynthSpec) -> np.ndarray:
    """(dim, classes) centers: irregular ring in the rotation plane plus a
    small seeded off-plane component that breaks class symmetry."""
    c = spec.classes
    jitter = (rng.uniform(spec.seed, "synth:center-jitter", (c,)) - 0.5) * (np.pi / c)
    angles = 2.0 * np.pi * np.arange(c) / c + jitter
    centers = np.zeros((spec.dim, c))
    centers[0] = spec.separation * np.cos(angles)
    centers[1] = spec.separation * np.sin(angles)
    if spec.dim > 2:
        extra = rng.gaussian(spec.seed, "synth:center-extra", (spec.dim - 2, c))
        norms = np.linalg.norm(extra, axis=0, keepdims=True)
        norms[norms == 0] = 1.0
        centers[2:] = 0.3 * spec.separation * extra / norms
    return centers


def generate_synthetic(spec: SynthSpec) -> list[DomainDataset]:
    """K source domains plus one target, each a shifted/rotated copy of the
    same class clusters.  Sources get mild rotations and graded shifts;
    the target takes the full rotation and full shift, so it is the odd
    domain out.  Target labels are generated but quarantined."""
    centers = _class_centers(spec)
    K, n, p, c = spec.n_sources, spec.samples_per_domain, spec.dim, spec.classes

    datasets: list[DomainDataset] = []
    for d in range(K + 1):
        is_target = d == K
        if is_target:
            angle = spec.rotation
            magnitude = spec.shift
        else:
            spread = (d - (K - 1) / 2.0) / max(K - 1, 1)
            angle = 0.5 * spec.rotation * spread
            magnitude = spec.shift * d / (2.0 * K)
        psi = 2.0 * np.pi * float(rng.uniform(spec.seed, f"synth:shift-angle:{d}", (1,))[0])
        direction = np.zeros(p)
        direction[0], direction[1] = np.cos(psi), np.sin(psi)

        labels = np.arange(n) % c
        perm = rng.stream(spec.seed, f"synth:labels:{d}").permutation(n)
        labels = labels[perm]
        noise = rng.gaussian(spec.seed, f"synth:noise:{d}", (p, n))
        X = _rotation_matrix(p, angle) @ (centers[:, labels] + noise) + magnitude * direction[:, None]

        mask = np.zeros(n, dtype=bool)
        mask[::5] = True  # every fifth sample reserved for held-out scoring
        name = "target" if is_target else f"source-{d}"
        if is_target:
            datasets.append(DomainDataset(FeatureMatrix(X, name), None, name,
                                          test_mask=mask, _hidden_labels=labels))
        else:
            datasets.append(DomainDataset(FeatureMatrix(X, name), labels, name, test_mask=mask))
    return datasets


def unit_normalize(X) -> np.ndarray:
    """Scale every sample column to unit Euclidean norm."""
    data = np.asarray(X.data if isinstance(X, FeatureMatrix) else X, dtype=np.float64)
    norms = np.linalg.norm(data, axis=0)
    if np.any(norms == 0):
        raise InvalidInputError(f"column {int(np.argmax(norms == 0))} has zero norm")
    return data / norms[None, :]


# ---------------------------------------------------------------------------
# matrix persistence


def save_matrix(X, path, fmt: str = "binary", labels=None) -> None:
    """Write a (p, n) matrix; CSV optionally carries one label per sample."""
    data = np.asarray(X.data if isinstance(X, FeatureMatrix) else X, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-d matrix, got shape {data.shape}")
    path = Path(path)
    if fmt == "binary":
        if labels is not None:
            raise InvalidInputError("the binary matrix format does not carry labels")
        header = _MAGIC + struct.pack("<I", _BIN_VERSION)
        header += struct.pack("<QQ", data.shape[0], data.shape[1])
        path.write_bytes(header + data.astype("<f8").tobytes())
        return
    if fmt == "csv":
        p, n = data.shape
        cols = [f"f{i}" for i in range(p)]
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,):
                raise ShapeMismatchError(f"labels must have shape ({n},), got {labels.shape}")
            cols.append("label")
        lines = [",".join(cols)]
        for j in range(n):
            row = [repr(float(v)) for v in data[:, j]]
            if labels is not None:
                row.append(str(int(labels[j])))
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n")
        return
    raise InvalidInputError(f"unknown matrix format {fmt!r}")


def load_matrix(path, fmt: str = "binary") -> tuple[FeatureMatrix, np.ndarray | None]:
    """Read a matrix saved by :func:`save_matrix`; returns ``(features, labels)``."""
    path = Path(path)
    if fmt == "binary":
        buf = path.read_bytes()
        if len(buf) < len(_MAGIC) + 4 + 16:
            raise DataFormatError(f"file too short for a binary matrix: {len(buf)} bytes", offset=0)
        if buf[: len(_MAGIC)] != _MAGIC:
            raise DataFormatError(f"bad magic {buf[:8]!r}; not a binary matrix file", offset=0)
        (version,) = struct.unpack_from("<I", buf, len(_MAGIC))
        if version != _BIN_VERSION:
            raise DataFormatError(f"unsupported binary matrix version {version}", offset=len(_MAGIC))
        rows, cols = struct.unpack_from("<QQ", buf, len(_MAGIC) + 4)
        start = len(_MAGIC) + 4 + 16
        expected = start + 8 * rows * cols
        if len(buf) != expected:
            raise DataFormatError(
                f"payload length mismatch: header says {rows}x{cols} "
                f"({expected} bytes), file has {len(buf)}",
                offset=start,
            )
        data = np.frombuffer(buf, dtype="<f8", offset=start).reshape(rows, cols).copy()
        if not np.all(np.isfinite(data)):
            raise InvalidInputError(f"{path} contains non-finite values")
        return FeatureMatrix(data, domain_tag=path.stem), None
    if fmt == "csv":
        lines = path.read_text().splitlines()
        if not lines:
            raise DataFormatError("empty CSV file", line=0)
        header = lines[0].split(",")
        has_labels = header and header[-1] == "label"
        feat_cols = header[:-1] if has_labels else header
        expected_names = [f"f{i}" for i in range(len(feat_cols))]
        if feat_cols != expected_names:
            raise DataFormatError(f"unexpected CSV header {header!r}", line=1)
        p = len(feat_cols)
        width = p + (1 if has_labels else 0)
        values, labels = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise DataFormatError(
                    f"row {lineno} has {len(parts)} fields, expected {width}", line=lineno
                )
            try:
                values.append([float(v) for v in parts[:p]])
                if has_labels:
                    labels.append(int(parts[p]))
            except ValueError as exc:
                raise DataFormatError(f"row {lineno}: {exc}", line=lineno) from exc
        data = np.array(values, dtype=np.float64).T if values else np.empty((p, 0))
        if not np.all(np.isfinite(data)):
            raise InvalidInputError(f"{path} contains non-finite values")
        lab = np.array(labels, dtype=np.int64) if has_labels else None
        return FeatureMatrix(data, domain_tag=path.stem), lab
    raise InvalidInputError(f"unknown matrix format {fmt!r}")


# ---------------------------------------------------------------------------
# metrics stream


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    participant_count: int
    mmd_loss: float
    classif_loss: float
    target_accuracy: float
    volume_sent: int
    volume_delivered: int

    def to_record(self) -> dict:
        return {
            "record": "round",
            "round": self.round,
            "participant_count": self.participant_count,
            "mmd_loss": self.mmd_loss,
            "classif_loss": self.classif_loss,
            "target_accuracy": self.target_accuracy,
            "volume_sent": self.volume_sent,
            "volume_delivered": self.volume_delivered,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RoundMetrics":
        return cls(
            round=int(rec["round"]),
            participant_count=int(rec["participant_count"]),
            mmd_loss=float(rec["mmd_loss"]),
            classif_loss=float(rec["classif_loss"]),
            target_accuracy=float(rec["target_accuracy"]),
            volume_sent=int(rec["volume_sent"]),
            volume_delivered=int(rec["volume_delivered"]),
        )


def metrics_to_jsonl(trace: list[RoundMetrics]) -> str:
    header = {"record": "header", "schema": list(METRICS_FIELDS), "rounds": len(trace)}
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [json.dumps(m.to_record(), separators=(",", ":")) for m in trace]
    return "\n".join(lines) + "\n"


def metrics_from_jsonl(text: str) -> list[RoundMetrics]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError("metrics stream has no header record", line=0)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"line 1: {exc}", line=1) from exc
    if header.get("record") != "header":
        raise DataFormatError("first record is not a header", line=1)
    trace = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"line {lineno}: {exc}", line=lineno) from exc
        if rec.get("record") != "round":
            raise DataFormatError(f"line {lineno}: unexpected record kind", line=lineno)
        trace.append(RoundMetrics.from_record(rec))
    if header.get("rounds") != len(trace):
        raise DataFormatError(
            f"header promises {header.get('rounds')} rounds, stream has {len(trace)}", line=1
        )
    return trace


def save_metrics(trace: list[RoundMetrics], path) -> None:
    Path(path).write_text(metrics_to_jsonl(trace))


def load_metrics(path) -> list[RoundMetrics]:
    return metrics_from_jsonl(Path(path).read_text())
