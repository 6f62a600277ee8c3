"""
Client clustering on final-layer fingerprints.

Builds the Euclidean proximity matrix, runs agglomerative hierarchical
clustering cut at a distance threshold, scores block structure of distance
matrices against planted groups, and assigns newcomers to the nearest
cluster representative.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .data_gen import GroundTruthGroups
from .nn_core import ModelParams, PartialWeights


LINKAGES = ('single', 'average', 'complete')


@dataclass
class ProximityMatrix:
    """Symmetric m x m distance matrix with zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"Proximity matrix must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("Proximity matrix has non-finite entries")
        if np.any(v < 0):
            raise ValueError("Proximity matrix has negative entries")
        if not np.array_equal(v, v.T):
            raise ValueError("Proximity matrix is not symmetric")
        if np.any(np.diag(v) != 0):
            raise ValueError("Proximity matrix diagonal is not zero")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {'size': self.size, 'entries': self.values.tolist()}


@dataclass
class MergeStep:
    """One dendrogram merge, scipy numbering: leaves 0..m-1, merge i creates m + i."""

    cluster_a: int
    cluster_b: int
    distance: float
    size: int


@dataclass
class ClusterAssignment:
    """client_id -> contiguous cluster id, numbered by smallest member id."""

    labels: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted(set(self.labels.values()))
        if ids != list(range(len(ids))):
            raise ValueError(f"Cluster ids must be contiguous from 0, got {ids}")

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> 'ClusterAssignment':
        """Number groups of client ids by their smallest member."""
        ordered = sorted((sorted(g) for g in groups if len(g)), key=lambda g: g[0])
        return cls({cid: k for k, g in enumerate(ordered) for cid in g})

    @property
    def num_clusters(self) -> int:
        return len(set(self.labels.values()))

    def cluster_of(self, client_id: int) -> int:
        return self.labels[client_id]

    def members(self, cluster_id: int) -> List[int]:
        return sorted(cid for cid, k in self.labels.items() if k == cluster_id)

    def clusters(self) -> List[List[int]]:
        return [self.members(k) for k in range(self.num_clusters)]

    def as_partition(self) -> frozenset:
        """Partition as a set of sets, independent of cluster numbering."""
        return frozenset(frozenset(g) for g in self.clusters())

    def to_dict(self) -> Dict[str, int]:
        return {str(cid): self.labels[cid] for cid in sorted(self.labels)}

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> 'ClusterAssignment':
        return cls({int(cid): int(k) for cid, k in data.items()})


@dataclass
class Dendrogram:
    """Full merge history of agglomerative clustering."""

    merges: List[MergeStep]
    num_leaves: int
    client_ids: List[int]

    def merge_distances(self) -> List[float]:
        return [step.distance for step in self.merges]

    @property
    def min_merge_distance(self) -> float:
        return min(self.merge_distances()) if self.merges else 0.0

    @property
    def max_merge_distance(self) -> float:
        return max(self.merge_distances()) if self.merges else 0.0

    def cut(self, lam: float) -> ClusterAssignment:
        """Apply merges in order until one exceeds lam."""
        members: Dict[int, List[int]] = {i: [cid] for i, cid in enumerate(self.client_ids)}
        for i, step in enumerate(self.merges):
            if step.distance > lam:
                break
            members[self.num_leaves + i] = members.pop(step.cluster_a) + members.pop(step.cluster_b)
        return ClusterAssignment.from_groups(list(members.values()))

    def to_linkage(self) -> np.ndarray:
        """scipy-compatible linkage matrix [m-1 x 4]."""
        return np.array(
            [[s.cluster_a, s.cluster_b, s.distance, s.size] for s in self.merges],
            dtype=np.float64,
        ).reshape(-1, 4)

    def to_dict(self) -> dict:
        return {
            'num_leaves': self.num_leaves,
            'client_ids': list(self.client_ids),
            'merges': [
                {'a': s.cluster_a, 'b': s.cluster_b, 'distance': s.distance, 'size': s.size}
                for s in self.merges
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Dendrogram':
        merges = [MergeStep(m['a'], m['b'], m['distance'], m['size']) for m in data['merges']]
        return cls(merges, data['num_leaves'], list(data['client_ids']))


def pairwise_distance(fingerprints: Sequence[PartialWeights]) -> ProximityMatrix:
    """Euclidean distances between all fingerprint pairs.

    Args:
        fingerprints: At least two equally long partial-weight vectors

    Returns:
        ProximityMatrix, each unordered pair computed once
    """
    if len(fingerprints) < 2:
        raise ValueError(f"Need at least 2 fingerprints, got {len(fingerprints)}")
    lengths = {len(fp) for fp in fingerprints}
    if len(lengths) != 1:
        raise ValueError(f"Fingerprints differ in length: {sorted(lengths)}")
    stacked = np.stack([fp.values for fp in fingerprints])
    return ProximityMatrix(squareform(pdist(stacked, metric='euclidean')))


def agglomerative(
    matrix: ProximityMatrix,
    linkage: str = 'average',
    lam: float = math.inf,
    client_ids: Optional[Sequence[int]] = None
) -> Tuple[ClusterAssignment, Dendrogram]:
    """Bottom-up merging of the closest pair of clusters.

    Inter-cluster distances follow the Lance-Williams updates of the chosen
    linkage. Equal distances are resolved by the lexicographically smallest
    (smaller, larger) pair of cluster minimum member indices. Merging for the
    assignment stops once the closest pair is farther than lam; the returned
    dendrogram always holds all m - 1 merges.

    Args:
        matrix: Client proximity matrix
        linkage: 'single', 'average' or 'complete'
        lam: Clustering threshold
        client_ids: Ids of the matrix rows (ascending); defaults to 0..m-1

    Returns:
        Tuple of (assignment at lam, full dendrogram)
    """
    if linkage not in LINKAGES:
        raise ValueError(f"Unknown linkage '{linkage}', expected one of {LINKAGES}")
    if not lam > 0:
        raise ValueError(f"Clustering threshold must be positive, got {lam}")
    m = matrix.size
    ids = list(range(m)) if client_ids is None else [int(c) for c in client_ids]
    if len(ids) != m:
        raise ValueError(f"Got {len(ids)} client ids for a {m} x {m} matrix")

    # Slot i always holds the cluster whose smallest member index is i
    dist = matrix.values.copy()
    np.fill_diagonal(dist, np.inf)
    active = np.ones(m, dtype=bool)
    sizes = np.ones(m, dtype=np.int64)
    node = list(range(m))
    merges: List[MergeStep] = []

    for step in range(m - 1):
        upper = np.where(active[:, None] & active[None, :], dist, np.inf)
        upper[np.tril_indices(m)] = np.inf
        flat = int(np.argmin(upper))
        i, j = divmod(flat, m)
        d = float(upper[i, j])

        merges.append(MergeStep(node[i], node[j], d, int(sizes[i] + sizes[j])))

        if linkage == 'single':
            row = np.minimum(dist[i], dist[j])
        elif linkage == 'complete':
            row = np.maximum(dist[i], dist[j])
        else:
            row = (sizes[i] * dist[i] + sizes[j] * dist[j]) / (sizes[i] + sizes[j])
        dist[i, :] = row
        dist[:, i] = row
        dist[i, i] = np.inf
        active[j] = False
        sizes[i] += sizes[j]
        node[i] = m + step

    dendrogram = Dendrogram(merges, m, ids)
    return dendrogram.cut(lam), dendrogram


def lambda_for_clusters(dendrogram: Dendrogram, num_clusters: int) -> float:
    """Threshold in the middle of the band that yields exactly num_clusters.

    Args:
        dendrogram: Full merge history
        num_clusters: Target count in [1, m]

    Returns:
        A positive lam with dendrogram.cut(lam).num_clusters == num_clusters
    """
    m = dendrogram.num_leaves
    if not 1 <= num_clusters <= m:
        raise ValueError(f"num_clusters must be in [1, {m}], got {num_clusters}")
    distances = dendrogram.merge_distances()
    applied = m - num_clusters
    lo = distances[applied - 1] if applied > 0 else 0.0
    if applied == len(distances):
        return max(lo * 1.5, 1e-9) if lo > 0 else 1.0
    hi = distances[applied]
    if hi <= lo:
        raise ValueError(f"No threshold separates {num_clusters} clusters (tied merge distances)")
    return max(0.5 * (lo + hi), 1e-12)


def auto_lambda_grid(dendrogram: Dendrogram, points: int) -> List[float]:
    """Evenly spaced thresholds from below the smallest to above the largest merge."""
    if points < 2:
        raise ValueError(f"A grid needs at least 2 points, got {points}")
    lo = dendrogram.min_merge_distance * 0.5
    hi = dendrogram.max_merge_distance * 1.1
    if lo <= 0:
        lo = hi * 1e-3 if hi > 0 else 1e-3
    if hi <= lo:
        hi = lo * 2.0
    return [float(x) for x in np.linspace(lo, hi, points)]


def per_layer_distance(models: Sequence[ModelParams], layer_index: int) -> ProximityMatrix:
    """Euclidean distances on the flattened (weights, bias) of one layer.

    Negative indices count from the end, as in Python sequences.
    """
    if not models:
        raise ValueError("per_layer_distance needs at least one model")
    depth = len(models[0].layers)
    if not -depth <= layer_index < depth:
        raise ValueError(f"Layer index {layer_index} out of range for {depth} layers")
    for i, model in enumerate(models[1:], start=1):
        if not models[0].is_congruent(model):
            raise ValueError(f"Model {i} is not shape-congruent with model 0")
    stacked = np.stack([model.layers[layer_index].flatten() for model in models])
    if len(models) == 1:
        return ProximityMatrix(np.zeros((1, 1)))
    return ProximityMatrix(squareform(pdist(stacked, metric='euclidean')))


def block_structure_score(
    matrix: ProximityMatrix,
    groups: GroundTruthGroups,
    client_ids: Optional[Sequence[int]] = None
) -> float:
    """Mean between-group distance over mean within-group distance.

    Args:
        matrix: Proximity matrix over the clients
        groups: Planted group of every client
        client_ids: Ids of the matrix rows; defaults to 0..m-1

    Returns:
        The ratio; math.inf when all within-group distances are zero
    """
    m = matrix.size
    ids = list(range(m)) if client_ids is None else list(client_ids)
    labels = np.array([groups.group_of(cid) for cid in ids])
    if len(set(labels.tolist())) < 2:
        raise ValueError("block_structure_score needs at least 2 groups")

    iu = np.triu_indices(m, k=1)
    same = labels[iu[0]] == labels[iu[1]]
    values = matrix.values[iu]
    if not np.any(same):
        raise ValueError("No group has two members; within-group distance undefined")
    within = float(values[same].mean())
    between = float(values[~same].mean())
    if within == 0.0:
        return math.inf
    return between / within


def assign_newcomer(fingerprint: PartialWeights, representatives: Dict[int, PartialWeights]) -> int:
    """Cluster whose representative is nearest in Euclidean distance; ties go to the smallest id."""
    if not representatives:
        raise ValueError("No cluster representatives to assign against")
    best_id, best_dist = None, math.inf
    for cid in sorted(representatives):
        rep = representatives[cid]
        if len(rep) != len(fingerprint):
            raise ValueError(
                f"Fingerprint length {len(fingerprint)} != representative {cid} length {len(rep)}"
            )
        d = float(np.linalg.norm(fingerprint.values - rep.values))
        if best_id is None or d < best_dist:
            best_id, best_dist = cid, d
    return best_id
