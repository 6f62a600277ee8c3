"""
Main entry point for the federated clustering simulator.

Usage:
    python -m src.main run --config config.json
    python -m src.main run --config config.json --seed 3 --rounds 10
    python -m src.main sweep --config config.json --lambda 0.5 1 2 4
    python -m src.main sweep --config config.json --auto-grid 8
    python -m src.main newcomer --config config.json
    python -m src.main observe-layers --config config.json
    python -m src.main compare --config config.json

Exit codes: 0 success, 2 invalid configuration, 3 runtime error.
"""

import argparse
import math
import sys
from collections import Counter
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .clustering import (
    Dendrogram,
    ProximityMatrix,
    agglomerative,
    auto_lambda_grid,
    block_structure_score,
    pairwise_distance,
    per_layer_distance,
)
from .config import Config, ConfigError
from .data_gen import GroundTruthGroups
from .federation import (
    FederationHistory,
    collect_fingerprints,
    newcomer_flow,
    run,
    train_round_zero_models,
)
from .logger import ArtifactLogger
from .metrics_report import compare_algorithms, cost_report, export, lambda_sweep
from .nn_core import LayerParams, derive_seed


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_TAG_HOLDOUT = 31

NEWCOMER_COLUMNS = [
    'client_id', 'group', 'cluster_id', 'assigned_correctly', 'cluster_accuracy',
    'personalized_accuracy', 'uplink_bytes', 'downlink_bytes',
]
LAYER_COLUMNS = ['layer', 'fan_out', 'fan_in', 'block_structure_score']


def _banner(title: str):
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def layer_record(index: int, layer: LayerParams, client_ids: List[int],
                 matrix: ProximityMatrix, score: float) -> Dict:
    """JSON body of layers/layer_<i>.json.

    A zero within-group distance gives an infinite score, which JSON cannot
    hold; it is written as null with score_is_infinite set.
    """
    infinite = math.isinf(score)
    return {
        'layer_index': index,
        'shape': [layer.fan_out, layer.fan_in],
        'client_ids': client_ids,
        'matrix': matrix.to_dict(),
        'block_structure_score': None if infinite else score,
        'score_is_infinite': infinite,
    }


def _dominant_group(members: List[int], groups: GroundTruthGroups) -> int:
    counts = Counter(groups.group_of(cid) for cid in members)
    best = max(counts.values())
    return min(g for g, n in counts.items() if n == best)


class ExperimentRunner:
    """Binds an experiment file to the simulator commands."""

    def __init__(self, config: Config, verbose: bool = True):
        """
        Args:
            config: Loaded and validated experiment configuration
            verbose: Print progress
        """
        self.config = config
        self.verbose = verbose

    def _echo_config(self, writer: ArtifactLogger, seeds: List[int]):
        resolved = self.config.resolved()
        resolved['experiment']['seeds'] = list(seeds)
        writer.write_json('config.json', resolved)

    def cmd_run(self) -> List[FederationHistory]:
        """One federation per seed; history, summary, rounds table and cost report per run."""
        if self.verbose:
            _banner(f"🚀 RUN - {self.config.get('experiment', 'name')}")
        target = float(self.config.get('experiment', 'target_accuracy'))
        histories = []
        for seed in self.config.seeds:
            shards, _ = self.config.make_shards(seed)
            fed = self.config.federation_config(seed)
            history = run(fed, shards, verbose=self.verbose)
            out_dir = self.config.run_dir(seed, 'run')
            export(history, out_dir, self.verbose)
            export(cost_report(history, target), out_dir, self.verbose)
            self._echo_config(ArtifactLogger(out_dir, self.verbose), [seed])
            histories.append(history)
        return histories

    def cmd_sweep(self, lambdas: Optional[List[float]] = None, auto_grid: Optional[int] = None):
        """Lambda sweep per seed: sweep.csv, sweep.json and the round-0 dendrogram."""
        if self.verbose:
            _banner(f"📈 LAMBDA SWEEP - {self.config.get('experiment', 'name')}")
        if self.config.get('federation', 'algorithm') != 'fedclust':
            raise ConfigError('federation.algorithm', "lambda sweeps need fedclust")
        if lambdas:
            self.config.config['sweep']['lambdas'] = [float(x) for x in lambdas]
        if auto_grid is not None:
            self.config.config['sweep']['auto_grid'] = auto_grid
        self.config._validate()
        grid = list(self.config.get('sweep', 'lambdas'))
        auto = int(self.config.get('sweep', 'auto_grid'))
        if not grid and not auto:
            raise ConfigError('sweep.lambdas', "no lambda grid given (use --lambda or --auto-grid)")

        results = []
        for seed in self.config.seeds:
            shards, _ = self.config.make_shards(seed)
            fed = self.config.federation_config(seed)
            fingerprints = collect_fingerprints(fed, shards)
            ids = sorted(s.client_id for s in shards)
            if len(ids) > 1:
                _, dendrogram = agglomerative(pairwise_distance(fingerprints), fed.linkage, float('inf'), ids)
            else:
                dendrogram = Dendrogram([], 1, ids)
            seed_grid = grid if grid else auto_lambda_grid(dendrogram, auto)
            if self.verbose:
                print(f"🔎 Seed {seed}: merge distances {dendrogram.min_merge_distance:.4g} .. "
                      f"{dendrogram.max_merge_distance:.4g}, {len(seed_grid)} grid points")
            result = lambda_sweep(fed, shards, seed_grid, fingerprints, self.verbose)
            out_dir = self.config.run_dir(seed, 'sweep')
            export(result, out_dir, self.verbose)
            writer = ArtifactLogger(out_dir, self.verbose)
            writer.write_json('dendrogram.json', dendrogram.to_dict())
            self._echo_config(writer, [seed])
            results.append(result)
        return results

    def cmd_newcomer(self) -> List[Dict]:
        """Federate without a holdout set, then incorporate the holdout clients one by one."""
        if self.verbose:
            _banner(f"🆕 NEWCOMERS - {self.config.get('experiment', 'name')}")
        fraction = float(self.config.get('experiment', 'holdout_fraction'))
        if fraction <= 0:
            raise ConfigError('experiment.holdout_fraction', "must be > 0 to evaluate newcomers")

        summaries = []
        for seed in self.config.seeds:
            shards, groups = self.config.make_shards(seed)
            ids = sorted(s.client_id for s in shards)
            count = max(1, int(round(fraction * len(ids))))
            if count >= len(ids):
                raise ConfigError('experiment.holdout_fraction', f"holds out all {len(ids)} clients")
            rng = np.random.default_rng(derive_seed(seed, _TAG_HOLDOUT))
            holdout = set(int(c) for c in rng.choice(ids, size=count, replace=False))
            members = [s for s in shards if s.client_id not in holdout]
            newcomers = sorted((s for s in shards if s.client_id in holdout), key=lambda s: s.client_id)

            fed = self.config.federation_config(seed, num_clients=len(members))
            history, state = run(fed, members, verbose=self.verbose, return_state=True)

            rows = []
            for shard in newcomers:
                result = newcomer_flow(state, shard, fed)
                group = groups.group_of(shard.client_id) if groups else None
                correct = None
                if groups:
                    cluster_members = state.assignment.members(result.cluster_id)
                    correct = _dominant_group(cluster_members, groups) == group
                rows.append([
                    shard.client_id, group, result.cluster_id, correct, result.cluster_accuracy,
                    result.personalized_accuracy, result.uplink_bytes, result.downlink_bytes,
                ])
                if self.verbose:
                    print(f"  👤 Newcomer {shard.client_id} → cluster {result.cluster_id}"
                          f" (acc {result.cluster_accuracy:.3f} → {result.personalized_accuracy:.3f})")
            frame = pd.DataFrame(rows, columns=NEWCOMER_COLUMNS)

            summary = {
                'seed': seed,
                'num_newcomers': len(rows),
                'holdout_clients': sorted(holdout),
                'num_clusters': history.num_clusters,
                'mean_cluster_accuracy': float(frame['cluster_accuracy'].mean()),
                'mean_personalized_accuracy': float(frame['personalized_accuracy'].mean()),
                'median_personalized_accuracy': float(frame['personalized_accuracy'].median()),
                'personalization_epochs': fed.personalization_epochs,
            }
            if groups:
                summary['assignment_accuracy'] = float(frame['assigned_correctly'].astype(float).mean())

            out_dir = self.config.run_dir(seed, 'newcomer')
            export(history, out_dir, self.verbose)
            writer = ArtifactLogger(out_dir, self.verbose)
            writer.write_csv('newcomers.csv', frame)
            writer.write_json('newcomer_summary.json', summary)
            self._echo_config(writer, [seed])
            summaries.append(summary)
        return summaries

    def cmd_observe_layers(self) -> List[pd.DataFrame]:
        """Per-layer proximity matrices after round-0 training, scored against planted groups."""
        if self.verbose:
            _banner(f"🔬 LAYER OBSERVATION - {self.config.get('experiment', 'name')}")
        if not self.config.is_planted:
            raise ConfigError('partition.scheme', "layer observation needs a planted partition")

        tables = []
        for seed in self.config.seeds:
            shards, groups = self.config.make_shards(seed)
            if groups.num_groups < 2:
                raise ConfigError('partition.num_groups', "layer observation needs at least 2 groups")
            fed = self.config.federation_config(seed)
            models = train_round_zero_models(fed, shards)
            ids = sorted(s.client_id for s in shards)

            out_dir = self.config.run_dir(seed, 'observe')
            writer = ArtifactLogger(out_dir, self.verbose)
            rows = []
            for index, layer in enumerate(models[0].layers):
                matrix = per_layer_distance(models, index)
                score = block_structure_score(matrix, groups, ids)
                writer.write_json(f'layers/layer_{index}.json', layer_record(index, layer, ids, matrix, score))
                rows.append([index, layer.fan_out, layer.fan_in, score])
                if self.verbose:
                    print(f"  🧱 Layer {index} ({layer.fan_out}x{layer.fan_in}): block score {score:.3f}")
            table = pd.DataFrame(rows, columns=LAYER_COLUMNS)
            writer.write_csv('layers/scores.csv', table)
            self._echo_config(writer, [seed])
            tables.append(table)
        return tables

    def cmd_compare(self) -> pd.DataFrame:
        """Every algorithm in compare.algorithms over all seeds; one summary row each."""
        if self.verbose:
            _banner(f"⚖️  COMPARE - {self.config.get('experiment', 'name')}")
        target = float(self.config.get('experiment', 'target_accuracy'))
        results: Dict[str, List[FederationHistory]] = {}
        for algorithm in self.config.get('compare', 'algorithms'):
            results[algorithm] = []
            for seed in self.config.seeds:
                shards, _ = self.config.make_shards(seed)
                fed = replace(self.config.federation_config(seed), algorithm=algorithm)
                history = run(fed, shards)
                results[algorithm].append(history)
                if self.verbose:
                    print(f"  ⚙️  {algorithm} seed {seed}: final acc {history.final_avg_accuracy:.4f}, "
                          f"{history.num_clusters} cluster(s)")
        frame = compare_algorithms(results, target)
        out_dir = self.config.run_dir(self.config.seeds, 'compare')
        writer = ArtifactLogger(out_dir, self.verbose)
        writer.write_csv('compare.csv', frame)
        records = frame.astype(object).where(frame.notna(), None).to_dict(orient='records')
        writer.write_json('compare.json', {'target_accuracy': target, 'algorithms': records})
        self._echo_config(writer, self.config.seeds)
        return frame


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Federated clustering simulator (FedClust and baselines)')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument('--config', type=str, default='config.json', help='Experiment JSON file')
        p.add_argument('--seed', type=int, default=None, help='Run a single seed instead of the seed list')
        p.add_argument('--out', type=str, default=None, help='Output directory')
        p.add_argument('--rounds', type=int, default=None, help='Number of communication rounds T')
        p.add_argument('--quiet', action='store_true', help='Only print errors')

    p_run = sub.add_parser('run', help='Run one federation per seed')
    common(p_run)
    p_run.add_argument('--lambda', dest='lam', type=float, default=None, help='Clustering threshold')

    p_sweep = sub.add_parser('sweep', help='Sweep the clustering threshold')
    common(p_sweep)
    p_sweep.add_argument('--lambda', dest='lam', type=float, nargs='+', default=None, help='Threshold grid')
    p_sweep.add_argument('--auto-grid', type=int, default=None,
                         help='Build an N-point grid from the round-0 dendrogram merge distances')

    for name, text in (('newcomer', 'Evaluate clients joining after the federation'),
                       ('observe-layers', 'Per-layer distance matrices after round 0'),
                       ('compare', 'Compare algorithms over the seed list')):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument('--lambda', dest='lam', type=float, default=None, help='Clustering threshold')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    try:
        config = Config(args.config)
        single_lam = args.lam if not isinstance(args.lam, list) else None
        config.apply_overrides(seed=args.seed, out=args.out, lam=single_lam, rounds=args.rounds)
        runner = ExperimentRunner(config, verbose=not args.quiet)

        if args.command == 'run':
            runner.cmd_run()
        elif args.command == 'sweep':
            runner.cmd_sweep(args.lam, args.auto_grid)
        elif args.command == 'newcomer':
            runner.cmd_newcomer()
        elif args.command == 'observe-layers':
            runner.cmd_observe_layers()
        else:
            runner.cmd_compare()
    except ConfigError as e:
        print(f"❌ Invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if not args.quiet:
        print("\n👋 Done.")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
