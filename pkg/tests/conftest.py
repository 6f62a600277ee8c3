"""Shared fixtures: tiny planted federations that train in well under a second."""

import numpy as np
import pytest

from src.data_gen import ClientShard, LabeledDataset, planted_cluster_partition, synth_gaussian_classes
from src.federation import FederationConfig
from src.nn_core import TrainSpec


def planted_shards(seed=0, clients_per_group=3, per_class=30, dim=8, sep=4.0):
    """Two groups with labels {0..4} and {5..9}."""
    ds = synth_gaussian_classes(10, dim, per_class, sep, seed)
    return planted_cluster_partition(2, clients_per_group, [range(0, 5), range(5, 10)], ds, seed)


def tiny_config(num_clients=6, rounds=3, **kwargs):
    defaults = dict(
        num_clients=num_clients,
        rounds=rounds,
        layer_sizes=[8, 8, 10],
        sampling_rate=1.0,
        lam=1.0,
        train=TrainSpec(epochs=2, batch_size=10, learning_rate=0.05, momentum=0.5),
    )
    defaults.update(kwargs)
    return FederationConfig(**defaults)


def make_shard(client_id, features, labels, num_classes, test_rows=2):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return ClientShard(
        client_id,
        LabeledDataset(features[test_rows:], labels[test_rows:], num_classes),
        LabeledDataset(features[:test_rows], labels[:test_rows], num_classes),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def planted():
    """(shards, groups) for 2 groups x 3 clients."""
    return planted_shards()
