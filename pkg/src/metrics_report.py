"""
Experiment metrics: rounds to a target accuracy, communication cost in Mb,
lambda sweeps, seed summaries and tabular export.

Mb convention: 1 Mb = 10^6 bytes, 4 bytes per transmitted parameter.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data_gen import ClientShard
from .federation import FederationConfig, FederationHistory, collect_fingerprints, run
from .logger import ArtifactLogger, read_json, read_jsonl
from .nn_core import PartialWeights


BYTES_PER_MB = 1_000_000

ROUND_COLUMNS = [
    'round', 'num_sampled', 'uplink_bytes', 'downlink_bytes', 'total_bytes',
    'cumulative_mb', 'avg_accuracy',
]
SWEEP_COLUMNS = ['lambda', 'num_clusters', 'final_accuracy']
COST_COLUMNS = ['algorithm', 'target_accuracy', 'rounds_to_target', 'megabytes_at_target', 'total_megabytes']


@dataclass
class SweepEntry:
    lam: float
    num_clusters: int
    final_accuracy: float


@dataclass
class SweepResult:
    """Cluster count and final accuracy per lambda, sorted by lambda."""

    entries: List[SweepEntry]
    base_config: Dict[str, Any] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[e.lam, e.num_clusters, e.final_accuracy] for e in self.entries],
            columns=SWEEP_COLUMNS,
        )

    def best(self) -> SweepEntry:
        """Entry with the highest final accuracy (first one on ties)."""
        return max(self.entries, key=lambda e: e.final_accuracy)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'base_config': self.base_config,
            'entries': [
                {'lambda': e.lam, 'num_clusters': e.num_clusters, 'final_accuracy': e.final_accuracy}
                for e in self.entries
            ],
        }


@dataclass
class CostReport:
    """Rounds and megabytes needed to reach a target average accuracy."""

    target_accuracy: float
    rounds_to_target: Optional[int]
    megabytes_at_target: Optional[float]
    total_megabytes: float
    algorithm: str = ''

    @property
    def reached(self) -> bool:
        return self.rounds_to_target is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'algorithm': self.algorithm,
            'target_accuracy': self.target_accuracy,
            'rounds_to_target': self.rounds_to_target,
            'megabytes_at_target': self.megabytes_at_target,
            'total_megabytes': self.total_megabytes,
            'mb_convention': '1 Mb = 10^6 bytes, 4 bytes per parameter',
        }


def rounds_to_target(history: FederationHistory, target: float) -> Optional[int]:
    """First round whose average local test accuracy reaches target; None if never."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must be in [0, 1], got {target}")
    for log in history.rounds:
        if log.avg_accuracy >= target:
            return log.round_index
    return None


def comm_cost_mb(history: FederationHistory, upto_round: int) -> float:
    """Megabytes moved in rounds 0 .. upto_round (inclusive)."""
    if not 0 <= upto_round < len(history.rounds):
        raise ValueError(f"upto_round must be in [0, {len(history.rounds)}), got {upto_round}")
    total = sum(log.total_bytes for log in history.rounds[:upto_round + 1])
    return total / BYTES_PER_MB


def cost_report(history: FederationHistory, target: float) -> CostReport:
    reached = rounds_to_target(history, target)
    return CostReport(
        target_accuracy=target,
        rounds_to_target=reached,
        megabytes_at_target=comm_cost_mb(history, reached) if reached is not None else None,
        total_megabytes=history.total_bytes / BYTES_PER_MB,
        algorithm=str(history.config.get('algorithm', '')),
    )


def lambda_sweep(
    base_config: FederationConfig,
    shards: Sequence[ClientShard],
    lambdas: Sequence[float],
    fingerprints: Optional[Sequence[PartialWeights]] = None,
    verbose: bool = False
) -> SweepResult:
    """Run the full federation once per lambda on identical seeds and shards.

    Round-0 fingerprints do not depend on lambda, so they are computed once
    and shared by all runs.

    Args:
        base_config: Federation settings (algorithm should be fedclust)
        shards: One shard per client
        lambdas: Thresholds to try
        fingerprints: Precomputed round-0 partial weights
        verbose: Print one line per run

    Returns:
        SweepResult sorted by lambda ascending
    """
    if not lambdas:
        raise ValueError("lambda_sweep needs at least one lambda")
    if fingerprints is None and base_config.algorithm == 'fedclust':
        fingerprints = collect_fingerprints(base_config, shards)

    entries = []
    for lam in sorted(float(x) for x in lambdas):
        history = run(replace(base_config, lam=lam), shards, fingerprints=fingerprints)
        entries.append(SweepEntry(lam, history.num_clusters, history.final_avg_accuracy))
        if verbose:
            print(f"  📈 lambda={lam:.6g}: {history.num_clusters} cluster(s), "
                  f"final acc {history.final_avg_accuracy:.4f}")
    return SweepResult(entries, base_config.to_dict())


def rounds_frame(history: FederationHistory) -> pd.DataFrame:
    """Per-round table, one row per round."""
    rows = []
    cumulative = 0
    for log in history.rounds:
        cumulative += log.total_bytes
        rows.append([
            log.round_index, len(log.sampled_clients), log.total_uplink, log.total_downlink,
            log.total_bytes, cumulative / BYTES_PER_MB, log.avg_accuracy,
        ])
    return pd.DataFrame(rows, columns=ROUND_COLUMNS)


def summary_dict(history: FederationHistory) -> Dict[str, Any]:
    data = history.to_dict()
    data.pop('rounds')
    data['num_rounds'] = len(history.rounds)
    data['total_megabytes'] = history.total_bytes / BYTES_PER_MB
    return data


def summarize_seeds(histories: Sequence[FederationHistory]) -> Dict[str, float]:
    """Mean and population std of final average accuracy over repeated trials."""
    if not histories:
        raise ValueError("summarize_seeds needs at least one history")
    finals = np.array([h.final_avg_accuracy for h in histories])
    return {
        'trials': int(finals.size),
        'mean_accuracy': float(finals.mean()),
        'std_accuracy': float(finals.std()),
        'mean_clusters': float(np.mean([h.num_clusters for h in histories])),
    }


def compare_algorithms(results: Dict[str, Sequence[FederationHistory]], target: float) -> pd.DataFrame:
    """One row per algorithm: accuracy over seeds, rounds and Mb to target.

    Args:
        results: algorithm name -> histories (one per seed)
        target: Target average local test accuracy

    Returns:
        DataFrame sorted by algorithm name
    """
    rows = []
    for name in sorted(results):
        histories = results[name]
        stats = summarize_seeds(histories)
        reports = [cost_report(h, target) for h in histories]
        reached = [r for r in reports if r.reached]
        rows.append({
            'algorithm': name,
            'trials': stats['trials'],
            'mean_accuracy': stats['mean_accuracy'],
            'std_accuracy': stats['std_accuracy'],
            'mean_clusters': stats['mean_clusters'],
            'target_accuracy': target,
            'reached_trials': len(reached),
            'median_rounds_to_target': float(np.median([r.rounds_to_target for r in reached])) if reached else math.nan,
            'median_mb_to_target': float(np.median([r.megabytes_at_target for r in reached])) if reached else math.nan,
            'mean_total_mb': float(np.mean([r.total_megabytes for r in reports])),
        })
    return pd.DataFrame(rows)


def export(
    result: Union[FederationHistory, SweepResult, CostReport],
    path: str,
    verbose: bool = False
) -> List[Path]:
    """Write a history, sweep or cost report into directory path.

    History: history.jsonl (one RoundLog per line), summary.json, rounds.csv.
    Sweep: sweep.csv (lambda,num_clusters,final_accuracy), sweep.json.
    Cost report: cost.csv, cost.json.

    Returns:
        Paths written
    """
    writer = ArtifactLogger(path, verbose)
    if isinstance(result, FederationHistory):
        return [
            writer.write_jsonl('history.jsonl', [r.to_dict() for r in result.rounds]),
            writer.write_json('summary.json', summary_dict(result)),
            writer.write_csv('rounds.csv', rounds_frame(result)),
        ]
    if isinstance(result, SweepResult):
        return [
            writer.write_csv('sweep.csv', result.to_frame()),
            writer.write_json('sweep.json', result.to_dict()),
        ]
    if isinstance(result, CostReport):
        data = result.to_dict()
        return [
            writer.write_csv('cost.csv', pd.DataFrame([[data[c] for c in COST_COLUMNS]], columns=COST_COLUMNS)),
            writer.write_json('cost.json', data),
        ]
    raise TypeError(f"Cannot export {type(result).__name__}")


def load_history(path: str) -> FederationHistory:
    """Re-import a history written by export."""
    directory = Path(path)
    summary = read_json(str(directory / 'summary.json'))
    rounds = read_jsonl(str(directory / 'history.jsonl'))
    summary['rounds'] = rounds
    return FederationHistory.from_dict(summary)
