"""
Synthetic labeled datasets and non-IID client partitioners.

Partitioners route sample indices to clients and then split every client's
samples into a train and a test part with a per-client seeded shuffle.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from .nn_core import derive_seed


MAX_PARTITION_RETRIES = 100
MIN_CLIENT_SAMPLES = 2

# Purpose tags for derive_seed
_TAG_SPLIT = 11
_TAG_PARTITION = 12


@dataclass
class LabeledDataset:
    """Feature matrix [n x d] with class ids in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"Features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"Labels of shape {self.labels.shape} do not match {self.features.shape[0]} samples"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"Labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> 'LabeledDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ClientShard:
    """One client's local data D_i, split into train and test."""

    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    # Pre-repair label ownership; empty for schemes without ownership
    owned_labels: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if len(self.train) == 0 or len(self.test) == 0:
            raise ValueError(f"Client {self.client_id} needs nonempty train and test splits")

    @property
    def label_set(self) -> Set[int]:
        return set(np.unique(np.concatenate([self.train.labels, self.test.labels])).tolist())

    @property
    def num_samples(self) -> int:
        return len(self.train) + len(self.test)

    def label_histogram(self) -> np.ndarray:
        return self.train.label_histogram() + self.test.label_histogram()


@dataclass
class PartitionSpec:
    """Partitioning scheme and its parameters.

    scheme is 'label_skew' (uses delta) or 'dirichlet' (uses alpha).
    """

    scheme: str
    num_clients: int
    test_fraction: float = 0.2
    seed: int = 0
    delta: float = 0.2
    alpha: float = 0.1

    def __post_init__(self):
        if self.scheme not in ('label_skew', 'dirichlet'):
            raise ValueError(f"Unknown partition scheme: {self.scheme}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.scheme == 'label_skew' and not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")
        if self.scheme == 'dirichlet' and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def labels_per_client(self, num_classes: int) -> int:
        # round() guards against 0.3 * 10 = 3.0000000000000004
        return max(1, math.ceil(round(self.delta * num_classes, 9)))


@dataclass
class GroundTruthGroups:
    """Planted latent group of every client."""

    groups: Dict[int, int] = field(default_factory=dict)

    def group_of(self, client_id: int) -> int:
        return self.groups[client_id]

    def members(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for cid in sorted(self.groups):
            out.setdefault(self.groups[cid], []).append(cid)
        return out

    @property
    def num_groups(self) -> int:
        return len(set(self.groups.values()))


def synth_gaussian_classes(
    num_classes: int,
    dim: int,
    per_class: int,
    sep: float,
    seed: int
) -> LabeledDataset:
    """Isotropic unit-variance Gaussian blobs around random directions.

    Args:
        num_classes: Number of classes C (>= 2)
        dim: Feature dimension d (>= 2)
        per_class: Samples drawn per class
        sep: Norm of every class mean
        seed: Generator seed

    Returns:
        LabeledDataset with exactly per_class samples of each class
    """
    if num_classes < 2 or dim < 2:
        raise ValueError(f"Need num_classes >= 2 and dim >= 2, got {num_classes} and {dim}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if sep < 0:
        raise ValueError(f"sep must be non-negative, got {sep}")

    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = sep * directions

    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels, num_classes)


def _split_train_test(
    ds: LabeledDataset,
    indices: np.ndarray,
    client_id: int,
    test_fraction: float,
    seed: int,
    owned_labels: FrozenSet[int] = frozenset()
) -> ClientShard:
    rng = np.random.default_rng(derive_seed(seed, _TAG_SPLIT, client_id))
    indices = rng.permutation(np.asarray(indices, dtype=np.int64))
    n = indices.size
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    return ClientShard(
        client_id=client_id,
        train=ds.subset(indices[n_test:]),
        test=ds.subset(indices[:n_test]),
        owned_labels=owned_labels,
    )


def _shards_from_routes(
    ds: LabeledDataset,
    routes: List[List[np.ndarray]],
    spec: PartitionSpec,
    owned: Optional[List[FrozenSet[int]]] = None
) -> List[ClientShard]:
    shards = []
    for cid, parts in enumerate(routes):
        indices = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        shards.append(_split_train_test(
            ds, indices, cid, spec.test_fraction, spec.seed,
            owned[cid] if owned else frozenset()
        ))
    return shards


def _routes_large_enough(routes: List[List[np.ndarray]]) -> bool:
    return all(sum(p.size for p in parts) >= MIN_CLIENT_SAMPLES for parts in routes)


def partition_label_skew(ds: LabeledDataset, spec: PartitionSpec) -> List[ClientShard]:
    """Each client owns ceil(delta * C) labels; a label's samples are split among its owners.

    Ownership is drawn independently per client. Labels nobody owns go to
    one uniformly chosen client so no sample is dropped. Draws that leave a
    client with fewer than two samples are repeated.

    Args:
        ds: Pooled dataset
        spec: PartitionSpec with scheme 'label_skew'

    Returns:
        One ClientShard per client, ordered by client id
    """
    if spec.scheme != 'label_skew':
        raise ValueError(f"partition_label_skew got scheme {spec.scheme}")
    num_classes = ds.num_classes
    per_client = spec.labels_per_client(num_classes)
    if per_client > num_classes:
        raise ValueError(f"Clients cannot own {per_client} of {num_classes} labels")

    rng = np.random.default_rng(derive_seed(spec.seed, _TAG_PARTITION))
    by_label = [np.flatnonzero(ds.labels == c) for c in range(num_classes)]

    for _ in range(MAX_PARTITION_RETRIES):
        owned = [
            frozenset(rng.choice(num_classes, size=per_client, replace=False).tolist())
            for _ in range(spec.num_clients)
        ]
        owners: List[List[int]] = [[] for _ in range(num_classes)]
        for cid, labels in enumerate(owned):
            for c in labels:
                owners[c].append(cid)
        for c in range(num_classes):
            if not owners[c] and by_label[c].size:
                owners[c] = [int(rng.integers(spec.num_clients))]

        routes: List[List[np.ndarray]] = [[] for _ in range(spec.num_clients)]
        for c in range(num_classes):
            if not owners[c]:
                continue
            pool = rng.permutation(by_label[c])
            for cid, part in zip(owners[c], np.array_split(pool, len(owners[c]))):
                routes[cid].append(part)

        if _routes_large_enough(routes):
            return _shards_from_routes(ds, routes, spec, owned)

    raise ValueError(
        f"Label-skew partition left a client with < {MIN_CLIENT_SAMPLES} samples "
        f"after {MAX_PARTITION_RETRIES} draws (clients={spec.num_clients}, n={len(ds)})"
    )


def _dirichlet_proportions(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    draws = rng.standard_gamma(alpha, size=size)
    total = draws.sum()
    if total <= 0:
        # Every Gamma draw underflowed; put the mass on one client
        draws = np.zeros(size)
        draws[rng.integers(size)] = 1.0
        total = 1.0
    return draws / total


def partition_dirichlet(ds: LabeledDataset, spec: PartitionSpec) -> List[ClientShard]:
    """Route each label's samples to clients by proportions p ~ Dir(alpha * 1_m).

    Proportions come from normalized per-client Gamma(alpha) draws. The
    shuffled samples of a label are cut at the rounded cumulative
    proportions. Draws that leave a client with fewer than two samples are
    repeated.

    Args:
        ds: Pooled dataset
        spec: PartitionSpec with scheme 'dirichlet'

    Returns:
        One ClientShard per client, ordered by client id
    """
    if spec.scheme != 'dirichlet':
        raise ValueError(f"partition_dirichlet got scheme {spec.scheme}")
    m = spec.num_clients
    rng = np.random.default_rng(derive_seed(spec.seed, _TAG_PARTITION))
    by_label = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]

    for _ in range(MAX_PARTITION_RETRIES):
        routes: List[List[np.ndarray]] = [[] for _ in range(m)]
        for pool in by_label:
            if pool.size == 0:
                continue
            pool = rng.permutation(pool)
            p = _dirichlet_proportions(rng, spec.alpha, m)
            # Rounded cumulative cut, not a multinomial draw: shares converge to p as alpha grows
            cuts = np.rint(np.cumsum(p)[:-1] * pool.size).astype(np.int64)
            for cid, part in enumerate(np.split(pool, cuts)):
                if part.size:
                    routes[cid].append(part)

        if _routes_large_enough(routes):
            return _shards_from_routes(ds, routes, spec)

    raise ValueError(
        f"Dirichlet partition left a client with < {MIN_CLIENT_SAMPLES} samples "
        f"after {MAX_PARTITION_RETRIES} draws (alpha={spec.alpha}, clients={m}, n={len(ds)})"
    )


def partition(ds: LabeledDataset, spec: PartitionSpec) -> List[ClientShard]:
    """Dispatch on spec.scheme."""
    if spec.scheme == 'label_skew':
        return partition_label_skew(ds, spec)
    return partition_dirichlet(ds, spec)


def planted_cluster_partition(
    num_groups: int,
    clients_per_group: int,
    labels_per_group: Sequence[Sequence[int]],
    ds: LabeledDataset,
    seed: int,
    test_fraction: float = 0.2
) -> Tuple[List[ClientShard], GroundTruthGroups]:
    """Planted groups with disjoint label sets, samples split evenly inside a group.

    Client ids run group by group: group g owns ids
    g * clients_per_group ... (g + 1) * clients_per_group - 1.

    Args:
        num_groups: Number of latent groups
        clients_per_group: Clients in every group
        labels_per_group: Disjoint label sets, one per group
        ds: Pooled dataset
        seed: Shuffle seed
        test_fraction: Per-client test share

    Returns:
        Tuple of (shards ordered by client id, ground-truth groups)
    """
    if len(labels_per_group) != num_groups:
        raise ValueError(f"Expected {num_groups} label sets, got {len(labels_per_group)}")
    if clients_per_group < 1:
        raise ValueError(f"clients_per_group must be >= 1, got {clients_per_group}")
    seen: Set[int] = set()
    for g, labels in enumerate(labels_per_group):
        labels = set(int(c) for c in labels)
        if not labels:
            raise ValueError(f"Group {g} has no labels")
        if labels & seen:
            raise ValueError(f"Group {g} label set overlaps another group: {sorted(labels & seen)}")
        if min(labels) < 0 or max(labels) >= ds.num_classes:
            raise ValueError(f"Group {g} labels must lie in [0, {ds.num_classes})")
        seen |= labels

    rng = np.random.default_rng(derive_seed(seed, _TAG_PARTITION))
    shards: List[ClientShard] = []
    groups: Dict[int, int] = {}
    for g, labels in enumerate(labels_per_group):
        pool = rng.permutation(np.flatnonzero(np.isin(ds.labels, list(labels))))
        if pool.size < MIN_CLIENT_SAMPLES * clients_per_group:
            raise ValueError(f"Group {g} has {pool.size} samples for {clients_per_group} clients")
        for j, part in enumerate(np.array_split(pool, clients_per_group)):
            cid = g * clients_per_group + j
            shards.append(_split_train_test(ds, part, cid, test_fraction, seed))
            groups[cid] = g
    return shards, GroundTruthGroups(groups)


def label_entropy(shard: ClientShard) -> float:
    """Natural-log entropy of a client's label histogram."""
    hist = shard.label_histogram().astype(np.float64)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log(p)).sum())


def save_dataset_csv(ds: LabeledDataset, path: str):
    """Write a dataset as CSV with header f0..f{d-1},label."""
    frame = pd.DataFrame(ds.features, columns=[f"f{i}" for i in range(ds.dim)])
    frame['label'] = ds.labels
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"Could not write dataset CSV {path}: {e}") from e


def load_dataset_csv(path: str, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read a dataset written by save_dataset_csv.

    Args:
        path: CSV file
        num_classes: Class count; inferred as max(label) + 1 when omitted

    Returns:
        LabeledDataset
    """
    if not Path(path).exists():
        raise FileNotFoundError(f"Dataset CSV not found: {path}")
    frame = pd.read_csv(path)
    if 'label' not in frame.columns:
        raise ValueError(f"Dataset CSV {path} has no 'label' column")
    feature_cols = [c for c in frame.columns if c != 'label']
    expected = [f"f{i}" for i in range(len(feature_cols))]
    if feature_cols != expected:
        raise ValueError(f"Dataset CSV {path} must have columns {expected + ['label']}")
    labels = frame['label'].to_numpy(dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledDataset(frame[feature_cols].to_numpy(dtype=np.float64), labels, num_classes)
