"""Experiment configuration models and the command implementations behind the
service endpoints.

The configuration is one JSON document with sections for the data source,
the random-feature kernel, the alignment solver, the federated protocol,
the network model, and evaluation seeds.  ``None`` values for ``sigma``
and ``gamma`` are resolved by rule: sigma by the median-distance
heuristic, gamma by the balanced/unbalanced default.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from .data import (
    DomainDataset,
    SynthSpec,
    evaluation_labels,
    generate_synthetic,
    load_matrix,
    metrics_to_jsonl,
    unit_normalize,
)
from .errors import InvalidInputError
from .kernels import KernelConfig, gaussian_kernel, median_bandwidth
from .netsim import NetworkConfig, complexity_table, round_volume
from .protocol import DropoutPolicy
from .runner import FedConfig, run_protocol, train_source_only
from .solvers import (
    TcaConfig,
    default_gamma,
    eigen_gap,
    label_vector,
    r_tca,
    regularization_bounds,
    rf_tca,
    vanilla_tca,
)

__all__ = [
    "ExperimentConfig",
    "validate_config",
    "build_datasets",
    "resolve_sigma",
    "resolve_gamma",
    "run_rftca_bench",
    "run_fed_experiment",
    "run_comm_table",
    "run_validation",
    "BenchRow",
    "SeedRun",
]


class SyntheticSpecModel(BaseModel):
    classes: int = 3
    dim: int = 8
    shift: float = 5.0
    rotation: float = 0.6
    separation: float = 4.0
    samples_per_domain: int = 300
    n_sources: int = 3
    seed: Optional[int] = None  # None: follow the evaluation seed


class DomainPathModel(BaseModel):
    path: str
    format: Literal["csv", "binary"] = "csv"


class DatasetConfigModel(BaseModel):
    synthetic: Optional[SyntheticSpecModel] = Field(default_factory=SyntheticSpecModel)
    paths: Optional[list[DomainPathModel]] = None  # K source files then the target file


class KernelConfigModel(BaseModel):
    sigma: Optional[float] = None  # None: median-distance heuristic
    n_features: int = 1000
    seed: int = 0


class TcaConfigModel(BaseModel):
    gamma: Optional[float] = None  # None: balanced/unbalanced default rule
    m: int = 100


class ProtocolConfigModel(BaseModel):
    rounds: int = 200
    classifier_interval: int = 50
    trade_off: float = 1.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    local_steps: int = 1
    target_local_steps: int = 1
    hidden: int = 32
    feature_dim: int = 8
    m: int = 16
    participation: Literal["full", "sampled"] = "sampled"
    aggregation: Literal["interval", "hard-vote"] = "interval"


class NetworkConfigModel(BaseModel):
    drop_feature: float = 0.0
    drop_weights: float = 0.0
    drop_classifier: float = 0.0
    availability: float = 1.0
    nested_policy: Literal["AAA", "AAB", "ABC"] = "AAA"
    feature_ordering: Literal["all", "ordered", "random"] = "all"
    weight_ordering: Literal["all", "ordered", "random"] = "all"


class EvaluationConfigModel(BaseModel):
    seeds: list[int] = Field(default_factory=lambda: [0])


class BenchConfigModel(BaseModel):
    feature_grid: list[int] = Field(default_factory=lambda: [100, 500, 1000, 2000, 5000])


class CommTableConfigModel(BaseModel):
    n_grid: list[int] = Field(default_factory=lambda: [100, 1000, 10000])
    probe_rounds: int = 3
    ciphertext_factor: int = 4


class ExperimentConfig(BaseModel):
    dataset: DatasetConfigModel = Field(default_factory=DatasetConfigModel)
    kernel: KernelConfigModel = Field(default_factory=KernelConfigModel)
    tca: TcaConfigModel = Field(default_factory=TcaConfigModel)
    protocol: ProtocolConfigModel = Field(default_factory=ProtocolConfigModel)
    network: NetworkConfigModel = Field(default_factory=NetworkConfigModel)
    evaluation: EvaluationConfigModel = Field(default_factory=EvaluationConfigModel)
    bench: BenchConfigModel = Field(default_factory=BenchConfigModel)
    comm: CommTableConfigModel = Field(default_factory=CommTableConfigModel)


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Cross-field consistency checks; returns a list of problems (empty = valid)."""
    problems: list[str] = []
    two_n = 2 * cfg.kernel.n_features
    if cfg.kernel.n_features < 1:
        problems.append("kernel.n_features: must be >= 1")
    if cfg.kernel.sigma is not None and not (cfg.kernel.sigma > 0):
        problems.append("kernel.sigma: must be positive when given")
    if cfg.tca.gamma is not None and cfg.tca.gamma < 0:
        problems.append("tca.gamma: must be nonnegative when given")
    if cfg.tca.m < 1:
        problems.append("tca.m: must be >= 1")
    if cfg.tca.m > two_n:
        problems.append(f"tca.m: m={cfg.tca.m} exceeds 2N={two_n}")
    if cfg.tca.m > cfg.kernel.n_features:
        problems.append(f"tca.m: m={cfg.tca.m} exceeds N={cfg.kernel.n_features}")
    if cfg.protocol.m < 1:
        problems.append("protocol.m: must be >= 1")
    if cfg.protocol.m > two_n:
        problems.append(f"protocol.m: m={cfg.protocol.m} exceeds 2N={two_n}")
    if cfg.protocol.rounds < 1:
        problems.append("protocol.rounds: must be >= 1")
    if cfg.protocol.classifier_interval < 1:
        problems.append("protocol.classifier_interval: must be >= 1")
    if cfg.protocol.trade_off < 0:
        problems.append("protocol.trade_off: must be nonnegative")
    if not (cfg.protocol.learning_rate > 0):
        problems.append("protocol.learning_rate: must be positive")
    if cfg.protocol.batch_size < 1:
        problems.append("protocol.batch_size: must be >= 1")
    for name in ("drop_feature", "drop_weights", "drop_classifier", "availability"):
        value = getattr(cfg.network, name)
        if not (0.0 <= value <= 1.0):
            problems.append(f"network.{name}: must lie in [0, 1]")
    if not cfg.evaluation.seeds:
        problems.append("evaluation.seeds: must not be empty")
    if not cfg.bench.feature_grid or any(n < 1 for n in cfg.bench.feature_grid):
        problems.append("bench.feature_grid: must be a nonempty list of positive N values")
    if not cfg.comm.n_grid or any(n < 1 for n in cfg.comm.n_grid):
        problems.append("comm.n_grid: must be a nonempty list of positive sample sizes")
    if cfg.comm.probe_rounds < 1:
        problems.append("comm.probe_rounds: must be >= 1")
    has_synth = cfg.dataset.synthetic is not None
    has_paths = cfg.dataset.paths is not None
    if has_synth == has_paths:
        problems.append("dataset: exactly one of 'synthetic' or 'paths' must be set")
    elif has_paths and len(cfg.dataset.paths) < 2:
        problems.append("dataset.paths: need at least one source file and the target file")
    return problems


def build_datasets(cfg: ExperimentConfig, seed: int, samples_override: int | None = None,
                   ) -> list[DomainDataset]:
    """Materialize the configured domains (sources first, target last)."""
    if cfg.dataset.paths is not None:
        datasets = []
        for k, entry in enumerate(cfg.dataset.paths):
            features, labels = load_matrix(entry.path, entry.format)
            is_target = k == len(cfg.dataset.paths) - 1
            if is_target:
                datasets.append(DomainDataset(features, None, "target", _hidden_labels=labels))
            else:
                if labels is None:
                    raise InvalidInputError(f"source file {entry.path} carries no labels")
                datasets.append(DomainDataset(features, labels, f"source-{k}"))
        return datasets
    model = cfg.dataset.synthetic
    spec = SynthSpec(
        classes=model.classes,
        dim=model.dim,
        shift=model.shift,
        rotation=model.rotation,
        separation=model.separation,
        samples_per_domain=samples_override or model.samples_per_domain,
        n_sources=model.n_sources,
        seed=model.seed if model.seed is not None else seed,
    )
    return generate_synthetic(spec)


def resolve_sigma(cfg: ExperimentConfig, reference: np.ndarray, seed: int) -> float:
    """Configured bandwidth, or the median heuristic on the reference sample."""
    if cfg.kernel.sigma is not None:
        return cfg.kernel.sigma
    return median_bandwidth(reference, max_samples=256, seed=seed)


def resolve_gamma(cfg: ExperimentConfig, n_S: int, n_T: int) -> float:
    return cfg.tca.gamma if cfg.tca.gamma is not None else default_gamma(n_S, n_T)


# ---------------------------------------------------------------------------
# rftca-bench


@dataclass(frozen=True)
class BenchRow:
    method: str
    n_features: int  # 0 for the kernel-matrix baseline
    accuracy: float
    seconds: float


def _one_nn_accuracy(F_src: np.ndarray, y_src: np.ndarray,
                     F_tgt: np.ndarray, y_tgt: np.ndarray) -> float:
    def safe_unit(F):
        norms = np.linalg.norm(F, axis=0, keepdims=True)
        norms[norms == 0] = 1.0
        return F / norms

    A, B = safe_unit(F_src), safe_unit(F_tgt)
    d2 = (B * B).sum(0)[None, :] - 2.0 * (A.T @ B) + (A * A).sum(0)[:, None]
    pred = y_src[np.argmin(d2, axis=0)]
    return float(np.mean(pred == y_tgt))


def _bench_instance(cfg: ExperimentConfig, seed: int):
    datasets = build_datasets(cfg, seed)
    sources, target = datasets[:-1], datasets[-1]
    X_S = unit_normalize(np.hstack([ds.features.data for ds in sources]))
    y_S = np.concatenate([ds.labels for ds in sources])
    X_T = unit_normalize(target.features.data)
    y_T = evaluation_labels(target)
    if X_S.shape[1] == 0 or X_T.shape[1] == 0:
        raise InvalidInputError("bench dataset is empty")
    return X_S, y_S, X_T, y_T


def run_rftca_bench(cfg: ExperimentConfig) -> list[BenchRow]:
    """Accuracy and wall time of the kernel solver versus its random-features
    reduction across the configured feature grid (first evaluation seed)."""
    seed = cfg.evaluation.seeds[0]
    X_S, y_S, X_T, y_T = _bench_instance(cfg, seed)
    n_S, n_T = X_S.shape[1], X_T.shape[1]
    n = n_S + n_T
    sigma = resolve_sigma(cfg, np.hstack([X_S, X_T]), seed)
    gamma = resolve_gamma(cfg, n_S, n_T)
    m = min(cfg.tca.m, n - 1)

    rows: list[BenchRow] = []
    start = time.perf_counter()
    K = gaussian_kernel(np.hstack([X_S, X_T]), sigma)
    sol = vanilla_tca(K, label_vector(n_S, n_T), TcaConfig(gamma=gamma, m=m))
    elapsed = time.perf_counter() - start
    acc = _one_nn_accuracy(sol.aligned_features[:, :n_S], y_S,
                           sol.aligned_features[:, n_S:], y_T)
    rows.append(BenchRow("tca", 0, acc, elapsed))

    for N in cfg.bench.feature_grid:
        mm = min(m, N)
        start = time.perf_counter()
        sol = rf_tca(X_S, X_T, KernelConfig(sigma=sigma, n_features=N, seed=seed),
                     TcaConfig(gamma=gamma, m=mm, variant="random-features"))
        elapsed = time.perf_counter() - start
        acc = _one_nn_accuracy(sol.aligned_features[:, :n_S], y_S,
                               sol.aligned_features[:, n_S:], y_T)
        rows.append(BenchRow("rf-tca", N, acc, elapsed))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    lines = ["method,n_features,accuracy,seconds"]
    lines += [f"{r.method},{r.n_features},{r.accuracy!r},{r.seconds!r}" for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fed-run


@dataclass
class SeedRun:
    seed: int
    final_accuracy: float
    initial_mmd: float
    final_mmd: float
    source_only_accuracy: float | None
    metrics_jsonl: str
    ledger_csv: str


def _fed_config(cfg: ExperimentConfig, seed: int) -> FedConfig:
    p = cfg.protocol
    return FedConfig(
        rounds=p.rounds,
        classifier_interval=p.classifier_interval,
        lambda_=p.trade_off,
        participation=p.participation,
        aggregation=p.aggregation,
        learning_rate=p.learning_rate,
        momentum=p.momentum,
        weight_decay=p.weight_decay,
        batch_size=p.batch_size,
        local_steps=p.local_steps,
        target_local_steps=p.target_local_steps,
        hidden=p.hidden,
        feature_dim=p.feature_dim,
        m=p.m,
        seed=seed,
    )


def _network_config(cfg: ExperimentConfig, seed: int) -> NetworkConfig:
    net = cfg.network
    return NetworkConfig(
        drop_feature=net.drop_feature,
        drop_weights=net.drop_weights,
        drop_classifier=net.drop_classifier,
        availability=net.availability,
        seed=seed,
    )


def _policy(cfg: ExperimentConfig) -> DropoutPolicy:
    net = cfg.network
    return DropoutPolicy(nested=net.nested_policy, feature_mode=net.feature_ordering,
                         weight_mode=net.weight_ordering)


def _fed_kernel_config(cfg: ExperimentConfig, datasets: list[DomainDataset],
                       fed: FedConfig, seed: int) -> KernelConfig:
    """Bandwidth is resolved on the initial extractor's pooled outputs, the
    space the random feature map actually sees during federated training."""
    if cfg.kernel.sigma is not None:
        sigma = cfg.kernel.sigma
    else:
        from .learners import MlpExtractor

        probe = MlpExtractor(datasets[0].dim, fed.feature_dim, hidden=fed.hidden,
                             seed=seed, tag="init:extractor")
        pooled = np.hstack([ds.features.data for ds in datasets])
        sigma = median_bandwidth(probe.forward(pooled), max_samples=256, seed=seed)
    return KernelConfig(sigma=sigma, n_features=cfg.kernel.n_features, seed=seed)


def run_fed_experiment(cfg: ExperimentConfig, with_baseline: bool = False) -> list[SeedRun]:
    """One federated run per evaluation seed; optionally a source-only oracle."""
    runs: list[SeedRun] = []
    for seed in cfg.evaluation.seeds:
        datasets = build_datasets(cfg, seed)
        fed = _fed_config(cfg, seed)
        kcfg = _fed_kernel_config(cfg, datasets, fed, seed)
        result = run_protocol(datasets, kcfg, fed, _network_config(cfg, seed), _policy(cfg))
        baseline = train_source_only(datasets, kcfg, fed) if with_baseline else None
        runs.append(SeedRun(
            seed=seed,
            final_accuracy=result.final_accuracy,
            initial_mmd=result.initial_mmd,
            final_mmd=result.final_mmd,
            source_only_accuracy=baseline,
            metrics_jsonl=metrics_to_jsonl(result.trace),
            ledger_csv=result.ledger.to_csv(),
        ))
    return runs


# ---------------------------------------------------------------------------
# comm-table


def run_comm_table(cfg: ExperimentConfig) -> list[dict]:
    """Measure per-round volume from short full-participation traces across
    the sample-size grid and table it against the analytic baselines."""
    entries = []
    for n in cfg.comm.n_grid:
        datasets = build_datasets(cfg, cfg.evaluation.seeds[0], samples_override=n)
        fed = _fed_config(cfg, cfg.evaluation.seeds[0])
        fed = dataclasses.replace(fed, rounds=cfg.comm.probe_rounds, participation="full")
        kcfg = _fed_kernel_config(cfg, datasets, fed, cfg.evaluation.seeds[0])
        result = run_protocol(datasets, kcfg, fed)
        entries.append({
            "n": n,
            "K": len(datasets) - 1,
            "N": cfg.kernel.n_features,
            "m": cfg.protocol.m,
            "measured": round_volume(result.ledger, 1),
        })
    return complexity_table(entries, ciphertext_factor=cfg.comm.ciphertext_factor)


def comm_csv(rows: list[dict]) -> str:
    cols = ["n", "K", "N", "m", "feature_exchange", "encrypted_exchange", "fedrf_measured"]
    lines = [",".join(cols)]
    lines += [",".join(str(row[c]) for c in cols) for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validate


@dataclass
class ValidationReport:
    errors: list[str]
    warnings: list[str]
    hints: list[str]
    resolved: dict
    eigen_gap: float | None = None
    reg_lower: float | None = None
    reg_upper: float | None = None
    reg_value: float | None = None


def run_validation(cfg: ExperimentConfig) -> ValidationReport:
    """Resolve defaults and report instance diagnostics without training.

    Includes an eigen-gap estimate of the alignment spectrum on a small
    subsample and the regularization sandwich at the resolved gamma, with
    a hint when gamma sits outside the interval where it can influence
    the solution.
    """
    errors = validate_config(cfg)
    if errors:
        return ValidationReport(errors=errors, warnings=[], hints=[], resolved={})

    warnings: list[str] = []
    hints: list[str] = []
    seed = cfg.evaluation.seeds[0]
    datasets = build_datasets(cfg, seed)
    sources, target = datasets[:-1], datasets[-1]
    n_S = sum(ds.n_samples for ds in sources)
    n_T = target.n_samples
    gamma = resolve_gamma(cfg, n_S, n_T)

    if cfg.protocol.classifier_interval > cfg.protocol.rounds:
        warnings.append(
            "protocol.classifier_interval exceeds protocol.rounds: the classifier is "
            "never aggregated; select aggregation='hard-vote' explicitly if intended"
        )
    if cfg.protocol.batch_size > min(ds.n_samples for ds in datasets):
        warnings.append("protocol.batch_size exceeds the smallest domain; batches will clip")

    # diagnostic subsample: pooled, unit-normalized, capped at 200 samples
    X_S = np.hstack([ds.features.data for ds in sources])
    X_T = target.features.data
    keep_S = min(X_S.shape[1], 140)
    keep_T = min(X_T.shape[1], 60)
    X = unit_normalize(np.hstack([X_S[:, :keep_S], X_T[:, :keep_T]]))
    sigma = resolve_sigma(cfg, X, seed)
    K = gaussian_kernel(X, sigma)
    ell = label_vector(keep_S, keep_T)
    norm_K = float(np.linalg.norm(K, 2))

    m_probe = min(cfg.tca.m, K.shape[0] - 2)
    sol = r_tca(K, ell, TcaConfig(gamma=gamma, m=m_probe + 1, variant="regularized"))
    gap = eigen_gap(sol.eigenvalues, m_probe, norm_K)

    lower, upper, value = regularization_bounds(K, ell, gamma)
    u1 = K @ ell.values
    q = float(u1 @ u1)  # l'K^2 l: the scale where gamma switches regimes
    lo, hi = 0.05 * q, 20.0 * q
    if gamma < lo:
        hints.append(
            f"gamma={gamma:.4g} sits below the sensitive interval [{lo:.4g}, {hi:.4g}]: "
            "the alignment term is saturated and gamma has little effect"
        )
    elif gamma > hi:
        hints.append(
            f"gamma={gamma:.4g} sits above the sensitive interval [{lo:.4g}, {hi:.4g}]: "
            "the alignment term is negligible next to the regularizer"
        )

    resolved = {
        "sigma": sigma,
        "gamma": gamma,
        "n_features": cfg.kernel.n_features,
        "m": cfg.tca.m,
        "n_source": n_S,
        "n_target": n_T,
        "classes": int(max(ds.labels.max() for ds in sources)) + 1,
        "rounds": cfg.protocol.rounds,
        "classifier_interval": cfg.protocol.classifier_interval,
        "trade_off": cfg.protocol.trade_off,
        "participation": cfg.protocol.participation,
    }
    return ValidationReport(
        errors=[],
        warnings=warnings,
        hints=hints,
        resolved=resolved,
        eigen_gap=gap,
        reg_lower=lower,
        reg_upper=upper,
        reg_value=value,
    )
