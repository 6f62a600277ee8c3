import json
from dataclasses import replace

import numpy as np
import pytest

from src.clustering import ClusterAssignment, lambda_for_clusters
from src.data_gen import PartitionSpec, partition, synth_gaussian_classes
from src.federation import (
    _TAG_NEWCOMER,
    FederationConfig,
    ServerState,
    _client_spec,
    collect_fingerprints,
    federated_round,
    init_server,
    newcomer_flow,
    round_zero,
    run,
    sample_clients,
    train_round_zero_models,
)
from src.nn_core import (
    BYTES_PER_PARAM,
    TrainSpec,
    accuracy,
    extract_partial_weights,
    final_layer_param_count,
    local_train,
    param_count,
    weighted_average,
)

from conftest import planted_shards, tiny_config


def _rounds(config, shards):
    """Cluster models after every round, keeping states for comparison."""
    state, _ = round_zero(config, shards)
    states = [state]
    for r in range(1, config.rounds):
        state, _ = federated_round(state, shards, config, r)
        states.append(state)
    return states


# init_server and config

def test_init_server_is_seeded():
    config = tiny_config()
    a = init_server(config)
    assert a.equals(init_server(tiny_config(algorithm='fedavg')))
    assert not a.equals(init_server(tiny_config(seed=1)))
    for layer in a.layers:
        assert np.all(layer.bias == 0.0)


def test_config_validation():
    with pytest.raises(ValueError, match="mu > 0"):
        tiny_config(algorithm='fedprox')
    with pytest.raises(ValueError, match="sampling_rate"):
        tiny_config(sampling_rate=0.0)
    with pytest.raises(ValueError, match="algorithm"):
        tiny_config(algorithm='scaffold')
    config = tiny_config()
    assert config.round0_train == config.train
    assert config.to_dict()['lambda'] == 1.0


# sample_clients

def test_sample_sizes():
    assert len(sample_clients(100, 0.1, 1, seed=0)) == 10
    assert sample_clients(7, 1.0, 3, seed=0) == list(range(7))
    assert len(sample_clients(100, 0.001, 1, seed=0)) == 1
    assert len(sample_clients(10, 0.3, 1, seed=0)) == 3


def test_sampling_depends_only_on_seed_and_round():
    a = sample_clients(50, 0.2, 4, seed=9)
    assert a == sample_clients(50, 0.2, 4, seed=9)
    assert a == sorted(set(a))
    assert all(0 <= i < 50 for i in a)
    assert len(a) == 10


# round_zero

def test_round_zero_fedclust_recovers_planted_groups(planted):
    shards, groups = planted
    config = tiny_config()
    fingerprints = collect_fingerprints(config, shards)
    state, _ = round_zero(config, shards, fingerprints)
    lam = lambda_for_clusters(state.dendrogram, 2)
    state, _ = round_zero(replace(config, lam=lam), shards, fingerprints)
    assert state.assignment.as_partition() == frozenset(frozenset(m) for m in groups.members().values())


def test_round_zero_starts_every_cluster_at_theta0(planted):
    shards, _ = planted
    config = tiny_config(lam=1e-9)
    state, log = round_zero(config, shards)
    theta0 = init_server(config)
    assert state.assignment.num_clusters == 6
    assert all(model.equals(theta0) for model in state.cluster_models.values())
    assert state.initial_model.equals(theta0)
    assert state.proximity.size == 6
    assert len(state.dendrogram.merges) == 5


def test_round_zero_accounting(planted):
    shards, _ = planted
    theta0 = init_server(tiny_config())
    full = param_count(theta0) * BYTES_PER_PARAM
    partial = final_layer_param_count(theta0) * BYTES_PER_PARAM

    _, log = round_zero(tiny_config(), shards)
    assert log.uplink_bytes == {cid: partial for cid in range(6)}
    assert log.downlink_bytes == {cid: full for cid in range(6)}

    state, log = round_zero(tiny_config(algorithm='fedavg'), shards)
    assert state.assignment.num_clusters == 1
    assert log.uplink_bytes == {}
    assert log.downlink_bytes == {cid: full for cid in range(6)}

    state, log = round_zero(tiny_config(algorithm='local'), shards)
    assert state.assignment.num_clusters == 6
    assert log.total_bytes == 0
    assert log.sampled_clients == []


def test_round_zero_checks_client_count(planted):
    shards, _ = planted
    with pytest.raises(ValueError, match="expects 5 clients"):
        round_zero(tiny_config(num_clients=5), shards)


def test_round_zero_models_are_seeded(planted):
    shards, _ = planted
    config = tiny_config()
    a = train_round_zero_models(config, shards)
    b = train_round_zero_models(config, shards)
    assert all(x.equals(y) for x, y in zip(a, b))
    fingerprints = collect_fingerprints(config, shards)
    assert all(np.array_equal(fp.values, extract_partial_weights(m).values) for fp, m in zip(fingerprints, a))


# federated_round

def test_two_equal_clients_average_to_midpoint():
    shards, _ = planted_shards(clients_per_group=1)
    assert len(shards[0].train) == len(shards[1].train)
    config = tiny_config(num_clients=2, algorithm='fedavg')
    state, _ = round_zero(config, shards)
    new_state, log = federated_round(state, shards, config, 1)
    trained = [local_train(state.cluster_models[0], s, _client_spec(config.train, config, 1, s.client_id))
               for s in shards]
    midpoint = weighted_average(trained, [1, 1])
    assert new_state.cluster_models[0].equals(midpoint)
    np.testing.assert_allclose(midpoint.flatten(), (trained[0].flatten() + trained[1].flatten()) / 2, atol=1e-12)
    assert log.sampled_clients == [0, 1]


def test_unsampled_clusters_keep_their_model(planted):
    shards, _ = planted
    config = tiny_config(algorithm='local', sampling_rate=0.5)
    state, _ = round_zero(config, shards)
    new_state, log = federated_round(state, shards, config, 1)
    assert len(log.sampled_clients) == 3
    for cid in range(6):
        k = state.assignment.cluster_of(cid)
        same = new_state.cluster_models[k].equals(state.cluster_models[k])
        assert same == (cid not in log.sampled_clients)
    assert log.total_bytes == 0


def test_round_refreshes_representatives(planted):
    shards, _ = planted
    config = tiny_config(algorithm='fedavg')
    state, _ = round_zero(config, shards)
    new_state, _ = federated_round(state, shards, config, 1)
    expected = extract_partial_weights(new_state.cluster_models[0]).values
    assert np.array_equal(new_state.representatives[0].values, expected)
    assert new_state.round_index == 1
    assert state.round_index == 0


def test_round_accounting_and_accuracy(planted):
    shards, _ = planted
    config = tiny_config(sampling_rate=0.5)
    state, _ = round_zero(config, shards)
    new_state, log = federated_round(state, shards, config, 1)
    full = param_count(state.initial_model) * BYTES_PER_PARAM
    assert log.uplink_bytes == {cid: full for cid in log.sampled_clients}
    assert log.downlink_bytes == log.uplink_bytes
    per_client = [accuracy(new_state.cluster_models[new_state.assignment.cluster_of(s.client_id)], s.test)
                  for s in shards]
    assert log.avg_accuracy == pytest.approx(np.mean(per_client))


def test_round_index_must_be_positive(planted):
    shards, _ = planted
    config = tiny_config()
    state, _ = round_zero(config, shards)
    with pytest.raises(ValueError, match="round_index"):
        federated_round(state, shards, config, 0)


# run: equivalences and determinism

def test_huge_lambda_reproduces_fedavg(planted):
    shards, _ = planted
    clust = _rounds(tiny_config(lam=1e9, rounds=4, sampling_rate=0.5), shards)
    avg = _rounds(tiny_config(algorithm='fedavg', rounds=4, sampling_rate=0.5), shards)
    for a, b in zip(clust, avg):
        assert a.assignment.num_clusters == 1
        assert a.cluster_models[0].equals(b.cluster_models[0])


def test_tiny_lambda_reproduces_independent_training(planted):
    shards, _ = planted
    config = tiny_config(lam=1e-9, rounds=3)
    clust = _rounds(config, shards)
    local = _rounds(tiny_config(algorithm='local', rounds=3), shards)
    for shard in shards:
        model = init_server(config)
        for r in range(1, config.rounds):
            model = local_train(model, shard, _client_spec(config.train, config, r, shard.client_id))
            k = clust[r].assignment.cluster_of(shard.client_id)
            assert clust[r].cluster_models[k].equals(model)
            assert local[r].cluster_models[local[r].assignment.cluster_of(shard.client_id)].equals(model)


def test_local_final_accuracy_matches_oracle(planted):
    shards, _ = planted
    config = tiny_config(algorithm='local', rounds=3)
    history = run(config, shards)
    for shard in shards:
        model = init_server(config)
        for r in range(1, config.rounds):
            model = local_train(model, shard, _client_spec(config.train, config, r, shard.client_id))
        assert history.final_accuracies[shard.client_id] == accuracy(model, shard.test)
    assert history.total_bytes == 0


def test_single_round_evaluates_theta0(planted):
    shards, _ = planted
    config = tiny_config(rounds=1)
    history = run(config, shards)
    theta0 = init_server(config)
    assert len(history.rounds) == 1
    assert history.final_avg_accuracy == pytest.approx(np.mean([accuracy(theta0, s.test) for s in shards]))


def test_run_is_deterministic(planted):
    shards, _ = planted
    config = tiny_config(sampling_rate=0.5)
    first = json.dumps(run(config, shards).to_dict(), sort_keys=True)
    second = json.dumps(run(config, shards).to_dict(), sort_keys=True)
    assert first == second


def test_worker_threads_do_not_change_results(planted):
    shards, _ = planted
    serial = run(tiny_config(), shards, return_state=True)[1]
    threaded = run(tiny_config(workers=3), shards, return_state=True)[1]
    for k, model in serial.cluster_models.items():
        assert model.equals(threaded.cluster_models[k])


def test_fedprox_differs_from_fedavg(planted):
    shards, _ = planted
    prox = run(tiny_config(algorithm='fedprox', mu=1.0, rounds=2), shards, return_state=True)[1]
    avg = run(tiny_config(algorithm='fedavg', rounds=2), shards, return_state=True)[1]
    assert not prox.cluster_models[0].equals(avg.cluster_models[0])


def test_accounting_for_67_parameter_model():
    ds = synth_gaussian_classes(3, 4, 40, 3.0, seed=0)
    shards = partition(ds, PartitionSpec('label_skew', num_clients=10, delta=1.0, seed=0))
    config = FederationConfig(num_clients=10, rounds=2, layer_sizes=[4, 8, 3], sampling_rate=1.0,
                              train=TrainSpec(epochs=1))
    history = run(config, shards)
    assert history.rounds[0].total_bytes == 10 * (27 + 67) * 4
    assert history.rounds[1].total_bytes == 10 * 2 * 67 * 4 == 5360
    assert history.total_bytes == 3760 + 5360


def test_bytes_recomputable_from_sampling_trace(planted):
    shards, _ = planted
    config = tiny_config(sampling_rate=0.5, rounds=4)
    history = run(config, shards)
    theta0 = init_server(config)
    full = param_count(theta0) * BYTES_PER_PARAM
    expected = 6 * (full + final_layer_param_count(theta0) * BYTES_PER_PARAM)
    for r in range(1, 4):
        sampled = sample_clients(6, 0.5, r, config.seed)
        assert history.rounds[r].sampled_clients == sampled
        expected += 2 * full * len(sampled)
    assert history.total_bytes == expected


# newcomer_flow

def _trained_state(shards, **kwargs):
    config = tiny_config(num_clients=len(shards), **kwargs)
    _, state = run(config, shards, return_state=True)
    return config, state


def test_newcomer_without_personalization_gets_cluster_model(planted):
    shards, _ = planted
    config, state = _trained_state(shards[1:])
    result = newcomer_flow(state, shards[0], config, personalization_epochs=0)
    assert result.model.equals(state.cluster_models[result.cluster_id])
    assert result.cluster_accuracy == result.personalized_accuracy
    assert result.uplink_bytes == final_layer_param_count(state.initial_model) * BYTES_PER_PARAM
    assert result.downlink_bytes == param_count(state.initial_model) * BYTES_PER_PARAM


def test_newcomer_single_cluster(planted):
    shards, _ = planted
    config, state = _trained_state(shards[1:], algorithm='fedavg')
    result = newcomer_flow(state, shards[0], config)
    assert result.cluster_id == 0
    assert not result.model.equals(state.cluster_models[0])


def test_newcomer_goes_to_nearest_representative(planted):
    shards, _ = planted
    config, state = _trained_state(shards[1:], lam=1e-9)
    result = newcomer_flow(state, shards[0], config, personalization_epochs=0)
    spec = _client_spec(config.round0_train, config, 0, 0, tag=_TAG_NEWCOMER)
    fingerprint = extract_partial_weights(local_train(state.initial_model, shards[0], spec)).values
    distances = {k: np.linalg.norm(fingerprint - rep.values) for k, rep in state.representatives.items()}
    assert result.cluster_id == min(distances, key=lambda k: (distances[k], k))


def test_newcomer_rejects_negative_epochs(planted):
    shards, _ = planted
    config, state = _trained_state(shards[1:], rounds=1)
    with pytest.raises(ValueError, match="personalization_epochs"):
        newcomer_flow(state, shards[0], config, personalization_epochs=-1)


def test_server_state_representatives_follow_models():
    model = init_server(tiny_config())
    state = ServerState(ClusterAssignment({0: 0}), {0: model}, {}, 0, model)
    state.refresh_representatives()
    assert np.array_equal(state.representatives[0].values, extract_partial_weights(model).values)
