"""Round-based orchestration of the federated alignment protocol, plus the
source-only and plain parameter-averaging baselines used for comparison.

Sequencing model: all client steps within a round read the inboxes frozen
at the start of the round (summed-feature messages travel with one round
of latency), while aligner/classifier uploads are aggregated at the end
of the same round.  Every stochastic choice is drawn from a counter
stream keyed by the master seed, the round, and the client, so a given
(seed, config) pair reproduces the identical trace byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .data import DomainDataset, RoundMetrics, evaluation_labels
from .errors import InvalidInputError, ShapeMismatchError
from .kernels import KernelConfig, RffProjection, make_projection, rff_map
from .learners import (
    MlpExtractor,
    SgdConfig,
    SoftmaxClassifier,
    TrainBatch,
    _cross_entropy_grads,
    backward_through,
    sgd_step,
)
from .mmd import LossWeights
from .netsim import CommLedger, NetworkConfig, deliver
from .protocol import (
    KIND_CLASSIFIER,
    KIND_LAYER_WEIGHTS,
    KIND_SUMMED_FEATURE,
    TARGET_ID,
    ClientState,
    DropoutPolicy,
    ProtocolMessage,
    RoundPlan,
    StepConfig,
    aggregate,
    apply_ordering_mode,
    flatten_classifier,
    hard_vote_predict,
    sample_participants,
    source_step,
    target_step,
    unflatten_classifier,
)

__all__ = ["FedConfig", "FedRunResult", "run_protocol", "train_source_only", "run_fedavg_baseline"]


@dataclass(frozen=True)
class FedConfig:
    """Hyperparameters of one federated training run."""

    rounds: int = 200
    classifier_interval: int = 50  # rounds between classifier aggregations
    lambda_: float = 1.0
    participation: str = "sampled"  # full | sampled
    aggregation: str = "interval"   # interval | hard-vote
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    local_steps: int = 1
    target_local_steps: int = 1
    hidden: int = 32
    feature_dim: int = 8  # extractor output dimension fed to the RFF map
    m: int = 16           # aligner output dimension
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidInputError("need at least one round")
        if self.classifier_interval < 1:
            raise InvalidInputError("classifier_interval must be >= 1")
        if self.participation not in ("full", "sampled"):
            raise InvalidInputError(f"unknown participation mode {self.participation!r}")
        if self.aggregation not in ("interval", "hard-vote"):
            raise InvalidInputError(f"unknown aggregation mode {self.aggregation!r}")
        if self.lambda_ < 0:
            raise InvalidInputError("lambda must be nonnegative")


@dataclass
class FedRunResult:
    trace: list[RoundMetrics]
    ledger: CommLedger
    final_accuracy: float
    initial_mmd: float
    final_mmd: float
    target_classifier: SoftmaxClassifier
    source_classifiers: list[SoftmaxClassifier]
    message_log: list[tuple[int, str, int, str]]  # (round, kind, sender, recipient)


def _split_domains(datasets: list[DomainDataset]) -> tuple[list[DomainDataset], DomainDataset]:
    if len(datasets) < 2:
        raise InvalidInputError("need at least one source domain and the target domain")
    sources, target = datasets[:-1], datasets[-1]
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise ShapeMismatchError(f"domains disagree on dimension: {sorted(dims)}")
    for ds in sources:
        if ds.labels is None:
            raise InvalidInputError(f"source domain {ds.domain!r} has no labels")
    return sources, target


def _n_classes(sources: list[DomainDataset]) -> int:
    return int(max(ds.labels.max() for ds in sources)) + 1


def _init_adaptive(cfg: FedConfig, two_n: int) -> np.ndarray:
    return rng.gaussian(cfg.seed, "init:adaptive", (two_n, cfg.m), scale=1.0 / np.sqrt(two_n))


def _make_client(role: str, client_id: int, ds: DomainDataset, cfg: FedConfig,
                 n_classes: int, two_n: int) -> ClientState:
    # shared initialization tags: every client starts from the same model
    extractor = MlpExtractor(ds.dim, cfg.feature_dim, hidden=cfg.hidden, seed=cfg.seed,
                             tag="init:extractor")
    classifier = SoftmaxClassifier(cfg.m, n_classes, seed=cfg.seed, tag="init:classifier")
    return ClientState(
        role=role,
        client_id=client_id,
        extractor=extractor,
        classifier=classifier,
        adaptive=_init_adaptive(cfg, two_n),
        X_raw=ds.features.data,
        labels=ds.labels,
    )


def _nested_subset(ids: tuple[int, ...], gen: np.random.Generator) -> tuple[int, ...]:
    if not ids:
        return ()
    size = int(gen.integers(0, len(ids) + 1))
    if size == 0:
        return ()
    pick = gen.choice(len(ids), size=size, replace=False)
    return tuple(sorted(ids[i] for i in pick))


def _policy_sets(participants: tuple[int, ...], policy: DropoutPolicy, seed: int, t: int):
    """Delivery sets (features, weights, classifiers) per the nested policy."""
    A = participants
    if policy.nested == "AAA":
        return A, A, A
    B = _nested_subset(A, rng.stream(seed, f"policy:B:{t}"))
    if policy.nested == "AAB":
        return A, A, B
    C = _nested_subset(B, rng.stream(seed, f"policy:C:{t}"))
    return A, B, C


def _target_features(state: ClientState, proj: RffProjection) -> np.ndarray:
    return state.adaptive.T @ rff_map(state.extractor.forward(state.X_raw), proj)


def _summed_full(state: ClientState, proj: RffProjection, side: str) -> np.ndarray:
    sigma = rff_map(state.extractor.forward(state.X_raw), proj)
    mean = sigma.mean(axis=1)
    return mean if side == "source" else -mean


def _global_mmd(sources: dict[int, ClientState], target: ClientState,
                proj: RffProjection, W: np.ndarray) -> float:
    t_vec = _summed_full(target, proj, "target")
    total = 0.0
    for i in sorted(sources):
        d = _summed_full(sources[i], proj, "source") + t_vec
        v = W.T @ d
        total += float(v @ v)
    return total


def _accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(pred == truth))


def run_protocol(datasets: list[DomainDataset], kcfg: KernelConfig, cfg: FedConfig,
                 net: NetworkConfig | None = None,
                 policy: DropoutPolicy | None = None) -> FedRunResult:
    """Train the federated alignment pipeline for ``cfg.rounds`` rounds.

    ``datasets`` holds the labeled source domains followed by the unlabeled
    target domain.  Returns the target-side classifier along with the
    full per-round metrics trace and the communication ledger.
    """
    net = net or NetworkConfig()
    policy = policy or DropoutPolicy()
    sources_ds, target_ds = _split_domains(datasets)
    K = len(sources_ds)
    n_classes = _n_classes(sources_ds)
    two_n = 2 * kcfg.n_features
    if cfg.m > two_n:
        raise InvalidInputError(f"m={cfg.m} exceeds 2N={two_n}")

    proj = make_projection(kcfg, cfg.feature_dim)
    sources = {i + 1: _make_client("source", i + 1, ds, cfg, n_classes, two_n)
               for i, ds in enumerate(sources_ds)}
    target = _make_client("target", TARGET_ID, target_ds, cfg, n_classes, two_n)
    target.labels = None  # the unlabeled side never sees labels
    truth = evaluation_labels(target_ds)

    initial_mmd = _global_mmd(sources, target, proj, target.adaptive)
    ledger = CommLedger()
    trace: list[RoundMetrics] = []
    message_log: list[tuple[int, str, int, str]] = []

    pending_for_target: list[ProtocolMessage] = []
    pending_broadcast: np.ndarray | None = None

    for t in range(1, cfg.rounds + 1):
        if cfg.participation == "full":
            participants = tuple(range(1, K + 1))
        else:
            participants = sample_participants(K, rng.stream(cfg.seed, f"participants:{t}"))
        plan = RoundPlan(round=t, participants=participants,
                         classifier_round=(t % cfg.classifier_interval == 0))
        feat_set, weight_set, clf_set = _policy_sets(participants, policy, cfg.seed, t)

        step = StepConfig(
            sgd=SgdConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                          seed=cfg.seed),
            weights=LossWeights(cfg.lambda_),
            proj=proj,
            round=t,
            classifier_round=plan.classifier_round,
            seed=cfg.seed,
            local_steps=cfg.local_steps,
        )

        # --- local steps (order is irrelevant: inboxes were frozen last round)
        feature_msgs: list[ProtocolMessage] = []
        weight_msgs: list[ProtocolMessage] = []
        classifier_msgs: list[ProtocolMessage] = []
        classif_losses = []
        for i in sorted(sources):
            out, info = source_step(sources[i], pending_broadcast, i in participants, step)
            classif_losses.append(info["classif_loss"])
            for msg in out:
                if msg.kind == KIND_SUMMED_FEATURE:
                    feature_msgs.append(msg)
                elif msg.kind == KIND_LAYER_WEIGHTS:
                    weight_msgs.append(msg)
                else:
                    classifier_msgs.append(msg)

        target_cfg = StepConfig(sgd=step.sgd, weights=step.weights, proj=proj, round=t,
                                classifier_round=plan.classifier_round, seed=cfg.seed,
                                local_steps=cfg.target_local_steps)
        t_out, _ = target_step(target, pending_for_target, target_cfg)
        target_feature_msg = next(m for m in t_out if m.kind == KIND_SUMMED_FEATURE)
        target_weight_msg = next(m for m in t_out if m.kind == KIND_LAYER_WEIGHTS)

        # --- routing: policy filters, ordering modes, then the lossy network
        src_features = [m for m in feature_msgs if m.sender in feat_set]
        src_features = apply_ordering_mode(src_features, policy.feature_mode,
                                           rng.stream(cfg.seed, f"ordering:feat:{t}"), t, K)
        src_weights = [m for m in weight_msgs if m.sender in weight_set]
        src_weights = apply_ordering_mode(src_weights, policy.weight_mode,
                                          rng.stream(cfg.seed, f"ordering:weight:{t}"), t, K)
        src_classifiers = [m for m in classifier_msgs if m.sender in clf_set]

        wire = src_features + [target_feature_msg] + src_weights + [target_weight_msg] \
            + src_classifiers
        for msg in wire:
            if msg.kind == KIND_SUMMED_FEATURE:
                recipient = "sources" if msg.sender == TARGET_ID else "target"
            else:
                recipient = "server"
            message_log.append((t, msg.kind, msg.sender, recipient))
        delivered, _ = deliver(wire, net, t, ledger)

        # --- aggregation barrier on this round's uploads
        source_W = {m.sender: m.payload.reshape(two_n, cfg.m)
                    for m in delivered
                    if m.kind == KIND_LAYER_WEIGHTS and m.sender != TARGET_ID}
        target_W = next((m.payload.reshape(two_n, cfg.m) for m in delivered
                         if m.kind == KIND_LAYER_WEIGHTS and m.sender == TARGET_ID), None)
        source_C = {m.sender: m.payload for m in delivered if m.kind == KIND_CLASSIFIER}
        W_avg, C_avg = aggregate(plan, source_W, target_W, source_C)
        if W_avg is not None:
            target.adaptive = W_avg.copy()
            for i in participants:
                sources[i].adaptive = W_avg.copy()
        if C_avg is not None:
            weight, bias = unflatten_classifier(C_avg, cfg.m, n_classes)
            target.classifier.set_parameters([weight, bias])
            for i in participants:
                sources[i].classifier.set_parameters([weight, bias])

        # --- summed-feature messages become next round's inboxes
        pending_for_target = [m for m in delivered
                              if m.kind == KIND_SUMMED_FEATURE and m.sender != TARGET_ID]
        delivered_broadcast = next((m for m in delivered
                                    if m.kind == KIND_SUMMED_FEATURE and m.sender == TARGET_ID),
                                   None)
        if delivered_broadcast is not None:
            pending_broadcast = delivered_broadcast.payload

        # --- metrics on the deployed state
        F_target = _target_features(target, proj)
        if cfg.aggregation == "hard-vote":
            preds = hard_vote_predict([sources[i].classifier for i in sorted(sources)], F_target)
        else:
            preds = target.classifier.predict(F_target)
        trace.append(RoundMetrics(
            round=t,
            participant_count=len(participants),
            mmd_loss=_global_mmd(sources, target, proj, target.adaptive),
            classif_loss=float(np.mean(classif_losses)),
            target_accuracy=_accuracy(preds, truth),
            volume_sent=ledger.volume_sent(t),
            volume_delivered=ledger.volume_delivered(t),
        ))

    return FedRunResult(
        trace=trace,
        ledger=ledger,
        final_accuracy=trace[-1].target_accuracy,
        initial_mmd=initial_mmd,
        final_mmd=trace[-1].mmd_loss,
        target_classifier=target.classifier,
        source_classifiers=[sources[i].classifier for i in sorted(sources)],
        message_log=message_log,
    )


def train_source_only(datasets: list[DomainDataset], kcfg: KernelConfig,
                      cfg: FedConfig) -> float:
    """Oracle baseline: the same architecture trained on pooled source data
    with plain supervised steps, then applied unchanged to the target."""
    sources_ds, target_ds = _split_domains(datasets)
    n_classes = _n_classes(sources_ds)
    two_n = 2 * kcfg.n_features
    proj = make_projection(kcfg, cfg.feature_dim)

    X_pool = np.hstack([ds.features.data for ds in sources_ds])
    y_pool = np.concatenate([ds.labels for ds in sources_ds])
    n = X_pool.shape[1]

    extractor = MlpExtractor(X_pool.shape[0], cfg.feature_dim, hidden=cfg.hidden,
                             seed=cfg.seed, tag="init:extractor")
    classifier = SoftmaxClassifier(cfg.m, n_classes, seed=cfg.seed, tag="init:classifier")
    W = _init_adaptive(cfg, two_n)
    sgd = SgdConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                    momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=cfg.seed)
    vel = {"extractor": None, "classifier": None, "adaptive": None}

    steps = cfg.rounds * max(1, cfg.local_steps)
    for step_idx in range(steps):
        gen = rng.stream(cfg.seed, f"source-only:batch:{step_idx}")
        idx = np.sort(gen.choice(n, size=min(cfg.batch_size, n), replace=False))
        batch = TrainBatch(X_raw=X_pool[:, idx], labels=y_pool[idx], side="source")
        grads = backward_through(extractor, classifier, W, proj, batch, LossWeights(0.0))
        new, vel["extractor"] = sgd_step(extractor.parameters(), grads.extractor, sgd,
                                         vel["extractor"])
        extractor.set_parameters(new)
        new, vel["classifier"] = sgd_step(classifier.parameters(), grads.classifier, sgd,
                                          vel["classifier"])
        classifier.set_parameters(new)
        # supervised baseline trains the aligner on the classification path too
        new, vel["adaptive"] = sgd_step([W], [grads.adaptive], sgd, vel["adaptive"])
        W = new[0]

    F_target = W.T @ rff_map(extractor.forward(target_ds.features.data), proj)
    return _accuracy(classifier.predict(F_target), evaluation_labels(target_ds))


def run_fedavg_baseline(datasets: list[DomainDataset], cfg: FedConfig) -> float:
    """Plain parameter averaging: per-client supervised models whose full
    parameter vectors are averaged every ``classifier_interval`` rounds.
    No alignment machinery; the last aggregate is evaluated on the target."""
    sources_ds, target_ds = _split_domains(datasets)
    n_classes = _n_classes(sources_ds)
    d = sources_ds[0].dim

    clients = []
    for ds in sources_ds:
        extractor = MlpExtractor(d, cfg.feature_dim, hidden=cfg.hidden, seed=cfg.seed,
                                 tag="init:extractor")
        head = SoftmaxClassifier(cfg.feature_dim, n_classes, seed=cfg.seed, tag="init:head")
        clients.append({"extractor": extractor, "head": head,
                        "vel_e": None, "vel_h": None, "ds": ds})

    sgd = SgdConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                    momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=cfg.seed)
    server: list[np.ndarray] | None = None

    for t in range(1, cfg.rounds + 1):
        for i, cl in enumerate(clients, start=1):
            ds = cl["ds"]
            n = ds.n_samples
            gen = rng.stream(cfg.seed, f"fedavg:batch:{i}:{t}")
            idx = np.sort(gen.choice(n, size=min(cfg.batch_size, n), replace=False))
            X, y = ds.features.data[:, idx], ds.labels[idx]
            feats, cache = cl["extractor"].forward_with_cache(X)
            _, dW, db, dF = _cross_entropy_grads(cl["head"], feats, y.astype(np.intp))
            ext_grads = cl["extractor"].backward(cache, dF)
            new, cl["vel_e"] = sgd_step(cl["extractor"].parameters(), ext_grads, sgd, cl["vel_e"])
            cl["extractor"].set_parameters(new)
            new, cl["vel_h"] = sgd_step(cl["head"].parameters(), [dW, db], sgd, cl["vel_h"])
            cl["head"].set_parameters(new)

        if t % cfg.classifier_interval == 0:
            stacks = [cl["extractor"].parameters() + cl["head"].parameters() for cl in clients]
            server = [sum(params[j] for params in stacks) / len(stacks)
                      for j in range(len(stacks[0]))]
            for cl in clients:
                k = len(cl["extractor"].parameters())
                cl["extractor"].set_parameters(server[:k])
                cl["head"].set_parameters(server[k:])

    if server is None:  # interval never reached inside the horizon
        stacks = [cl["extractor"].parameters() + cl["head"].parameters() for cl in clients]
        server = [sum(params[j] for params in stacks) / len(stacks)
                  for j in range(len(stacks[0]))]
    eval_extractor = MlpExtractor(d, cfg.feature_dim, hidden=cfg.hidden, seed=cfg.seed,
                                  tag="init:extractor")
    eval_head = SoftmaxClassifier(cfg.feature_dim, n_classes, seed=cfg.seed, tag="init:head")
    k = len(eval_extractor.parameters())
    eval_extractor.set_parameters(server[:k])
    eval_head.set_parameters(server[k:])
    feats = eval_extractor.forward(target_ds.features.data)
    return _accuracy(eval_head.predict(feats), evaluation_labels(target_ds))
