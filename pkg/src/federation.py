"""
Round-based federation: one-shot clustering in round 0, then per-cluster
local training and weighted aggregation.

FedAvg, FedProx and Local are degenerate configurations of the same loop:
one cluster (FedAvg/FedProx, the latter with a proximal term) or one
cluster per client with no traffic (Local).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import (
    LINKAGES,
    ClusterAssignment,
    Dendrogram,
    ProximityMatrix,
    agglomerative,
    assign_newcomer,
    pairwise_distance,
)
from .data_gen import ClientShard
from .nn_core import (
    BYTES_PER_PARAM,
    ModelParams,
    PartialWeights,
    TrainSpec,
    accuracy,
    derive_seed,
    extract_partial_weights,
    final_layer_param_count,
    init_model,
    local_train,
    param_count,
    weighted_average,
)


ALGORITHMS = ('fedclust', 'fedavg', 'fedprox', 'local')

# Purpose tags for derive_seed
_TAG_INIT = 1
_TAG_SAMPLE = 2
_TAG_TRAIN = 3
_TAG_NEWCOMER = 4
_TAG_PERSONALIZE = 5


@dataclass
class FederationConfig:
    """Inputs of the federation loop."""

    num_clients: int
    rounds: int
    layer_sizes: List[int]
    sampling_rate: float = 1.0
    lam: float = 1.0
    linkage: str = 'average'
    train: TrainSpec = field(default_factory=TrainSpec)
    round0_train: Optional[TrainSpec] = None
    algorithm: str = 'fedclust'
    mu: float = 0.0
    seed: int = 0
    personalization_epochs: int = 5
    workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.linkage not in LINKAGES:
            raise ValueError(f"Unknown linkage '{self.linkage}', expected one of {LINKAGES}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"Unknown algorithm '{self.algorithm}', expected one of {ALGORITHMS}")
        if self.algorithm == 'fedprox' and not self.mu > 0:
            raise ValueError("fedprox requires mu > 0")
        if self.personalization_epochs < 0:
            raise ValueError(f"personalization_epochs must be >= 0, got {self.personalization_epochs}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.round0_train is None:
            self.round0_train = self.train

    @property
    def transmits(self) -> bool:
        return self.algorithm != 'local'

    @property
    def proximal_mu(self) -> float:
        return self.mu if self.algorithm == 'fedprox' else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['lambda'] = data.pop('lam')
        return data


@dataclass
class ServerState:
    """Server-side view after a round."""

    assignment: ClusterAssignment
    cluster_models: Dict[int, ModelParams]
    representatives: Dict[int, PartialWeights]
    round_index: int
    initial_model: ModelParams
    proximity: Optional[ProximityMatrix] = None
    dendrogram: Optional[Dendrogram] = None

    def refresh_representatives(self):
        self.representatives = {
            k: extract_partial_weights(model) for k, model in sorted(self.cluster_models.items())
        }


@dataclass
class RoundLog:
    """Traffic and accuracy of one communication round."""

    round_index: int
    sampled_clients: List[int]
    uplink_bytes: Dict[int, int]
    downlink_bytes: Dict[int, int]
    cluster_accuracy: Dict[int, float]
    avg_accuracy: float

    @property
    def total_uplink(self) -> int:
        return sum(self.uplink_bytes.values())

    @property
    def total_downlink(self) -> int:
        return sum(self.downlink_bytes.values())

    @property
    def total_bytes(self) -> int:
        return self.total_uplink + self.total_downlink

    def to_dict(self) -> Dict[str, Any]:
        return {
            'round_index': self.round_index,
            'sampled_clients': list(self.sampled_clients),
            'uplink_bytes': {str(k): v for k, v in sorted(self.uplink_bytes.items())},
            'downlink_bytes': {str(k): v for k, v in sorted(self.downlink_bytes.items())},
            'cluster_accuracy': {str(k): v for k, v in sorted(self.cluster_accuracy.items())},
            'avg_accuracy': self.avg_accuracy,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RoundLog':
        return cls(
            round_index=int(data['round_index']),
            sampled_clients=[int(c) for c in data['sampled_clients']],
            uplink_bytes={int(k): int(v) for k, v in data['uplink_bytes'].items()},
            downlink_bytes={int(k): int(v) for k, v in data['downlink_bytes'].items()},
            cluster_accuracy={int(k): float(v) for k, v in data['cluster_accuracy'].items()},
            avg_accuracy=float(data['avg_accuracy']),
        )


@dataclass
class FederationHistory:
    """Everything a run produced: config echo, clusters, per-round logs."""

    config: Dict[str, Any]
    assignment: ClusterAssignment
    rounds: List[RoundLog]
    final_accuracies: Dict[int, float]
    dendrogram: Optional[Dendrogram] = None

    @property
    def num_clusters(self) -> int:
        return self.assignment.num_clusters

    @property
    def final_avg_accuracy(self) -> float:
        return self.rounds[-1].avg_accuracy

    @property
    def total_bytes(self) -> int:
        return sum(r.total_bytes for r in self.rounds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'config': self.config,
            'assignment': self.assignment.to_dict(),
            'num_clusters': self.num_clusters,
            'final_accuracies': {str(k): v for k, v in sorted(self.final_accuracies.items())},
            'final_avg_accuracy': self.final_avg_accuracy,
            'total_bytes': self.total_bytes,
            'dendrogram': self.dendrogram.to_dict() if self.dendrogram else None,
            'rounds': [r.to_dict() for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FederationHistory':
        dendro = data.get('dendrogram')
        return cls(
            config=data['config'],
            assignment=ClusterAssignment.from_dict(data['assignment']),
            rounds=[RoundLog.from_dict(r) for r in data['rounds']],
            final_accuracies={int(k): float(v) for k, v in data['final_accuracies'].items()},
            dendrogram=Dendrogram.from_dict(dendro) if dendro else None,
        )


@dataclass
class NewcomerResult:
    """Outcome of incorporating one client after the federation."""

    client_id: int
    cluster_id: int
    model: ModelParams
    uplink_bytes: int
    downlink_bytes: int
    cluster_accuracy: float
    personalized_accuracy: float


def _ordered(shards: Sequence[ClientShard]) -> List[ClientShard]:
    ordered = sorted(shards, key=lambda s: s.client_id)
    ids = [s.client_id for s in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("Client ids must be unique")
    return ordered


def _check_shards(config: FederationConfig, shards: Sequence[ClientShard]) -> List[ClientShard]:
    ordered = _ordered(shards)
    if len(ordered) != config.num_clients:
        raise ValueError(f"Config expects {config.num_clients} clients, got {len(ordered)} shards")
    return ordered


def _client_spec(base: TrainSpec, config: FederationConfig, round_index: int, client_id: int,
                 tag: int = _TAG_TRAIN, mu: float = 0.0) -> TrainSpec:
    return replace(
        base,
        seed=derive_seed(config.seed, tag, round_index, client_id),
        proximal_mu=mu,
    )


def init_server(config: FederationConfig) -> ModelParams:
    """Seeded initial model theta_0, identical across algorithms for one seed."""
    return init_model(config.layer_sizes, derive_seed(config.seed, _TAG_INIT))


def _map_clients(fn, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_round_zero_models(
    config: FederationConfig,
    shards: Sequence[ClientShard],
    initial: Optional[ModelParams] = None
) -> List[ModelParams]:
    """Every client trains theta_0 locally with round0_train (ascending client id)."""
    ordered = _check_shards(config, shards)
    initial = init_server(config) if initial is None else initial

    def train(shard: ClientShard) -> ModelParams:
        spec = _client_spec(config.round0_train, config, 0, shard.client_id)
        return local_train(initial, shard, spec)

    return _map_clients(train, ordered, config.workers)


def collect_fingerprints(
    config: FederationConfig,
    shards: Sequence[ClientShard],
    initial: Optional[ModelParams] = None
) -> List[PartialWeights]:
    """Round-0 partial weights uploaded by every client."""
    return [extract_partial_weights(m) for m in train_round_zero_models(config, shards, initial)]


def _evaluate(
    assignment: ClusterAssignment,
    cluster_models: Dict[int, ModelParams],
    shards: Sequence[ClientShard]
) -> Tuple[Dict[int, float], Dict[int, float], float]:
    per_client = {
        s.client_id: accuracy(cluster_models[assignment.cluster_of(s.client_id)], s.test)
        for s in shards
    }
    per_cluster = {
        k: float(np.mean([per_client[cid] for cid in assignment.members(k)]))
        for k in range(assignment.num_clusters)
    }
    overall = float(np.mean([per_client[s.client_id] for s in shards]))
    return per_client, per_cluster, overall


def round_zero(
    config: FederationConfig,
    shards: Sequence[ClientShard],
    fingerprints: Optional[Sequence[PartialWeights]] = None,
    verbose: bool = False
) -> Tuple[ServerState, RoundLog]:
    """Clustering round: local updates, partial-weight upload, one-shot HC.

    Every cluster model starts from theta_0; the locally trained models are
    only used for their fingerprints. FedAvg/FedProx skip clustering (one
    cluster), Local makes every client its own cluster and sends nothing.

    Args:
        config: Federation settings
        shards: One shard per client
        fingerprints: Precomputed round-0 partial weights (reused by sweeps)
        verbose: Print progress

    Returns:
        Tuple of (server state, round-0 log)
    """
    ordered = _check_shards(config, shards)
    ids = [s.client_id for s in ordered]
    initial = init_server(config)
    full_bytes = param_count(initial) * BYTES_PER_PARAM
    partial_bytes = final_layer_param_count(initial) * BYTES_PER_PARAM

    proximity = None
    dendrogram = None
    uplink: Dict[int, int] = {}
    downlink: Dict[int, int] = {}
    sampled: List[int] = []

    if config.algorithm == 'fedclust':
        if fingerprints is None:
            fingerprints = collect_fingerprints(config, ordered, initial)
        if len(fingerprints) != len(ordered):
            raise ValueError(f"Got {len(fingerprints)} fingerprints for {len(ordered)} clients")
        if len(ordered) > 1:
            proximity = pairwise_distance(fingerprints)
            assignment, dendrogram = agglomerative(proximity, config.linkage, config.lam, ids)
        else:
            assignment = ClusterAssignment({ids[0]: 0})
        sampled = list(ids)
        downlink = {cid: full_bytes for cid in ids}
        uplink = {cid: partial_bytes for cid in ids}
    elif config.algorithm in ('fedavg', 'fedprox'):
        assignment = ClusterAssignment({cid: 0 for cid in ids})
        sampled = list(ids)
        downlink = {cid: full_bytes for cid in ids}
    else:
        assignment = ClusterAssignment({cid: k for k, cid in enumerate(ids)})

    cluster_models = {k: initial.copy() for k in range(assignment.num_clusters)}
    state = ServerState(assignment, cluster_models, {}, 0, initial, proximity, dendrogram)
    state.refresh_representatives()

    _, per_cluster, overall = _evaluate(assignment, cluster_models, ordered)
    log = RoundLog(0, sampled, uplink, downlink, per_cluster, overall)
    if verbose:
        print(f"🧩 Round 0: {assignment.num_clusters} cluster(s) from {len(ids)} clients "
              f"({config.algorithm}, linkage={config.linkage}, lambda={config.lam:g})")
    return state, log


def sample_clients(num_clients: int, sampling_rate: float, round_index: int, seed: int) -> List[int]:
    """Uniform sample without replacement of max(ceil(R * N), 1) client positions.

    Depends only on (seed, round_index, N, R). Positions index the clients in
    ascending id order.
    """
    if not 0.0 < sampling_rate <= 1.0:
        raise ValueError(f"sampling_rate must be in (0, 1], got {sampling_rate}")
    size = min(max(math.ceil(round(sampling_rate * num_clients, 9)), 1), num_clients)
    rng = np.random.default_rng(derive_seed(seed, _TAG_SAMPLE, round_index))
    return sorted(int(i) for i in rng.choice(num_clients, size=size, replace=False))


def federated_round(
    state: ServerState,
    shards: Sequence[ClientShard],
    config: FederationConfig,
    round_index: int,
    verbose: bool = False
) -> Tuple[ServerState, RoundLog]:
    """One round of per-cluster training and |D_k|-weighted aggregation.

    Sampled clients download their cluster model, train it locally and upload
    the result. Each cluster with sampled members is replaced by the weighted
    average of their models in ascending client id order; other clusters keep
    their model. Accuracy is measured for all clients on their own cluster's
    new model.

    Args:
        state: Server state after the previous round
        shards: One shard per client
        config: Federation settings
        round_index: Round number (>= 1)
        verbose: Print progress

    Returns:
        Tuple of (new server state, round log)
    """
    if round_index < 1:
        raise ValueError(f"federated_round needs round_index >= 1, got {round_index}")
    ordered = _check_shards(config, shards)
    positions = sample_clients(config.num_clients, config.sampling_rate, round_index, config.seed)
    sampled = [ordered[i] for i in positions]
    full_bytes = param_count(state.initial_model) * BYTES_PER_PARAM

    def train(shard: ClientShard) -> ModelParams:
        received = state.cluster_models[state.assignment.cluster_of(shard.client_id)]
        spec = _client_spec(config.train, config, round_index, shard.client_id, mu=config.proximal_mu)
        return local_train(received, shard, spec)

    trained = _map_clients(train, sampled, config.workers)

    cluster_models = dict(state.cluster_models)
    for k in range(state.assignment.num_clusters):
        members = [(s, m) for s, m in zip(sampled, trained)
                   if state.assignment.cluster_of(s.client_id) == k]
        if not members:
            continue
        cluster_models[k] = weighted_average(
            [m for _, m in members], [len(s.train) for s, _ in members]
        )

    traffic = {s.client_id: full_bytes for s in sampled} if config.transmits else {}
    new_state = replace(state, cluster_models=cluster_models, round_index=round_index)
    new_state.refresh_representatives()

    _, per_cluster, overall = _evaluate(state.assignment, cluster_models, ordered)
    log = RoundLog(
        round_index, [s.client_id for s in sampled], dict(traffic), dict(traffic), per_cluster, overall
    )
    if verbose:
        print(f"📊 Round {round_index}: {len(sampled)} sampled, avg local test acc {overall:.4f}")
    return new_state, log


def run(
    config: FederationConfig,
    shards: Sequence[ClientShard],
    fingerprints: Optional[Sequence[PartialWeights]] = None,
    verbose: bool = False,
    return_state: bool = False
):
    """Round 0 followed by rounds 1 .. T-1.

    Args:
        config: Federation settings
        shards: One shard per client
        fingerprints: Precomputed round-0 partial weights
        verbose: Print progress
        return_state: Also return the final ServerState

    Returns:
        FederationHistory, or (FederationHistory, ServerState) with return_state
    """
    ordered = _check_shards(config, shards)
    if verbose:
        print(f"🚀 Federation: {config.algorithm}, N={config.num_clients}, T={config.rounds}, "
              f"R={config.sampling_rate:g}")
    state, log = round_zero(config, ordered, fingerprints, verbose)
    logs = [log]
    for r in range(1, config.rounds):
        state, log = federated_round(state, ordered, config, r, verbose)
        logs.append(log)

    per_client, _, overall = _evaluate(state.assignment, state.cluster_models, ordered)
    history = FederationHistory(config.to_dict(), state.assignment, logs, per_client, state.dendrogram)
    if verbose:
        print(f"✅ Done: {history.num_clusters} cluster(s), final avg local test acc {overall:.4f}, "
              f"{history.total_bytes / 1e6:.4f} Mb")
    if return_state:
        return history, state
    return history


def newcomer_flow(
    state: ServerState,
    new_shard: ClientShard,
    config: FederationConfig,
    personalization_epochs: Optional[int] = None
) -> NewcomerResult:
    """Assign a client that joins after the federation and personalize its model.

    The newcomer trains theta_0 with round0_train, uploads its partial
    weights, is assigned to the cluster with the nearest representative,
    downloads that cluster model and fine-tunes it locally.

    Args:
        state: Server state at the end of the federation
        new_shard: The newcomer's data
        config: Federation settings
        personalization_epochs: Fine-tuning epochs; config value when None

    Returns:
        NewcomerResult with the cluster id and personalized model
    """
    epochs = config.personalization_epochs if personalization_epochs is None else personalization_epochs
    if epochs < 0:
        raise ValueError(f"personalization_epochs must be >= 0, got {epochs}")
    cid = new_shard.client_id

    spec = _client_spec(config.round0_train, config, 0, cid, tag=_TAG_NEWCOMER)
    fingerprint = extract_partial_weights(local_train(state.initial_model, new_shard, spec))
    cluster_id = assign_newcomer(fingerprint, state.representatives)
    cluster_model = state.cluster_models[cluster_id]

    if epochs == 0:
        personalized = cluster_model.copy()
    else:
        fine_tune = replace(
            _client_spec(config.train, config, 0, cid, tag=_TAG_PERSONALIZE), epochs=epochs
        )
        personalized = local_train(cluster_model, new_shard, fine_tune)

    return NewcomerResult(
        client_id=cid,
        cluster_id=cluster_id,
        model=personalized,
        uplink_bytes=final_layer_param_count(cluster_model) * BYTES_PER_PARAM,
        downlink_bytes=param_count(cluster_model) * BYTES_PER_PARAM,
        cluster_accuracy=accuracy(cluster_model, new_shard.test),
        personalized_accuracy=accuracy(personalized, new_shard.test),
    )
