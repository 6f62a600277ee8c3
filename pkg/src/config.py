"""
Experiment file loader for the federated clustering simulator.
Reads and validates a JSON experiment file and builds the objects a run needs.
"""

import copy
import hashlib
import json
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .data_gen import (
    ClientShard,
    GroundTruthGroups,
    LabeledDataset,
    PartitionSpec,
    load_dataset_csv,
    partition,
    planted_cluster_partition,
    synth_gaussian_classes,
)
from .federation import ALGORITHMS, FederationConfig
from .clustering import LINKAGES
from .nn_core import TrainSpec, derive_seed


class ConfigError(ValueError):
    """Experiment file problem, tagged with the dotted field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# Every accepted key with its default. None marks "optional, no default".
DEFAULTS: Dict[str, Dict[str, Any]] = {
    'experiment': {
        'name': 'fedclust',
        'output_dir': 'runs',
        'seeds': [0],
        'holdout_fraction': 0.2,
        'target_accuracy': 0.8,
    },
    'dataset': {
        'num_classes': 10,
        'dim': 16,
        'per_class': 100,
        'sep': 4.0,
        'csv': None,
    },
    'partition': {
        'scheme': 'planted',
        'delta': 0.2,
        'alpha': 0.1,
        'num_groups': 2,
        'labels_per_group': None,
        'test_fraction': 0.2,
    },
    'model': {
        'hidden': [32],
    },
    'federation': {
        'algorithm': 'fedclust',
        'num_clients': 20,
        'rounds': 30,
        'sampling_rate': 0.5,
        'lambda': 1.0,
        'linkage': 'average',
        'mu': 0.0,
        'personalization_epochs': 5,
        'workers': 1,
    },
    'train': {
        'epochs': 10,
        'batch_size': 10,
        'learning_rate': 0.01,
        'momentum': 0.5,
    },
    'round0_train': {
        'epochs': None,
        'batch_size': None,
        'learning_rate': None,
        'momentum': None,
    },
    'sweep': {
        'lambdas': [],
        'auto_grid': 0,
    },
    'compare': {
        'algorithms': ['fedclust', 'fedavg', 'local'],
    },
}

SCHEMES = ('planted', 'label_skew', 'dirichlet')

# Purpose tags for derive_seed
_TAG_DATASET = 21
_TAG_PARTITION = 22


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


class Config:
    """Experiment configuration merged over DEFAULTS."""

    def __init__(self, config_path: Optional[str] = None, data: Optional[Dict[str, Any]] = None):
        """
        Args:
            config_path: JSON experiment file
            data: Already parsed document (used instead of reading config_path)
        """
        self.config_path = config_path
        self.config: Dict[str, Any] = {}
        if data is not None:
            self.config = self._merge(data)
            self._validate()
        else:
            self.load()

    def load(self):
        """Load and validate the experiment file."""
        path = self.config_path or "config.json"
        if not os.path.exists(path):
            example_path = f"{path}.example"
            if os.path.exists(example_path):
                print(f"📋 {path} not found, using {example_path}")
                path = example_path
            else:
                raise FileNotFoundError(f"Config file not found: {path}")

        try:
            with open(path, 'r') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError('<file>', f"{path} is not valid JSON ({e})") from e

        self.config = self._merge(raw)
        self._validate()
        self.config_path = path

    @staticmethod
    def _merge(raw: Any) -> Dict[str, Any]:
        if not isinstance(raw, dict):
            raise ConfigError('<file>', "top level must be a JSON object")
        merged = copy.deepcopy(DEFAULTS)
        for section, values in raw.items():
            if section not in DEFAULTS:
                raise ConfigError(section, f"unknown section (expected one of {sorted(DEFAULTS)})")
            if not isinstance(values, dict):
                raise ConfigError(section, "must be a JSON object")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(
                        f"{section}.{key}", f"unknown key (expected one of {sorted(DEFAULTS[section])})"
                    )
                merged[section][key] = value
        return merged

    def _validate(self):
        """Validate configuration values; raises ConfigError on the first problem."""
        c = self.config

        def require(cond: bool, field: str, message: str):
            if not cond:
                raise ConfigError(field, message)

        exp = c['experiment']
        require(isinstance(exp['name'], str) and exp['name'] != '', 'experiment.name', "must be a nonempty string")
        require(isinstance(exp['output_dir'], str), 'experiment.output_dir', "must be a string")
        require(isinstance(exp['seeds'], list) and len(exp['seeds']) > 0
                and all(_is_int(s) and s >= 0 for s in exp['seeds']),
                'experiment.seeds', "must be a nonempty list of non-negative integers")
        require(_is_number(exp['holdout_fraction']) and 0 <= exp['holdout_fraction'] < 1,
                'experiment.holdout_fraction', "must be in [0, 1)")
        require(_is_number(exp['target_accuracy']) and 0 <= exp['target_accuracy'] <= 1,
                'experiment.target_accuracy', "must be in [0, 1]")

        ds = c['dataset']
        if ds['csv'] is None:
            require(_is_int(ds['num_classes']) and ds['num_classes'] >= 2, 'dataset.num_classes', "must be an integer >= 2")
            require(_is_int(ds['dim']) and ds['dim'] >= 2, 'dataset.dim', "must be an integer >= 2")
            require(_is_int(ds['per_class']) and ds['per_class'] >= 1, 'dataset.per_class', "must be an integer >= 1")
            require(_is_number(ds['sep']) and ds['sep'] >= 0, 'dataset.sep', "must be a non-negative number")
        else:
            require(isinstance(ds['csv'], str), 'dataset.csv', "must be a path string")
            require(_is_int(ds['num_classes']) and ds['num_classes'] >= 2, 'dataset.num_classes', "must be an integer >= 2")

        part = c['partition']
        fed = c['federation']
        require(part['scheme'] in SCHEMES, 'partition.scheme', f"must be one of {SCHEMES}")
        require(_is_number(part['test_fraction']) and 0 < part['test_fraction'] < 1,
                'partition.test_fraction', "must be in (0, 1)")
        if part['scheme'] == 'label_skew':
            require(_is_number(part['delta']) and 0 < part['delta'] <= 1, 'partition.delta', "must be in (0, 1]")
        if part['scheme'] == 'dirichlet':
            require(_is_number(part['alpha']) and part['alpha'] > 0, 'partition.alpha', "must be positive")
        if part['scheme'] == 'planted':
            require(_is_int(part['num_groups']) and part['num_groups'] >= 1,
                    'partition.num_groups', "must be an integer >= 1")
            require(_is_int(fed['num_clients']) and fed['num_clients'] % part['num_groups'] == 0,
                    'federation.num_clients', "must be divisible by partition.num_groups for planted partitions")
            groups = part['labels_per_group']
            if groups is not None:
                require(isinstance(groups, list) and len(groups) == part['num_groups']
                        and all(isinstance(g, list) and g and all(_is_int(x) for x in g) for g in groups),
                        'partition.labels_per_group', "must list one nonempty integer list per group")
                flat = [x for g in groups for x in g]
                require(len(flat) == len(set(flat)), 'partition.labels_per_group', "label sets must be disjoint")
                require(all(0 <= x < ds['num_classes'] for x in flat),
                        'partition.labels_per_group', f"labels must lie in [0, {ds['num_classes']})")
            else:
                require(part['num_groups'] <= ds['num_classes'],
                        'partition.num_groups', "cannot exceed dataset.num_classes")

        hidden = c['model']['hidden']
        require(isinstance(hidden, list) and all(_is_int(h) and h >= 1 for h in hidden),
                'model.hidden', "must be a list of positive integers")

        require(fed['algorithm'] in ALGORITHMS, 'federation.algorithm', f"must be one of {ALGORITHMS}")
        require(_is_int(fed['num_clients']) and fed['num_clients'] >= 1, 'federation.num_clients', "must be an integer >= 1")
        require(_is_int(fed['rounds']) and fed['rounds'] >= 1, 'federation.rounds', "must be an integer >= 1")
        require(_is_number(fed['sampling_rate']) and 0 < fed['sampling_rate'] <= 1,
                'federation.sampling_rate', "must be in (0, 1]")
        require(_is_number(fed['lambda']) and fed['lambda'] > 0, 'federation.lambda', "must be positive")
        require(fed['linkage'] in LINKAGES, 'federation.linkage', f"must be one of {LINKAGES}")
        require(_is_number(fed['mu']) and fed['mu'] >= 0, 'federation.mu', "must be non-negative")
        if fed['algorithm'] == 'fedprox':
            require(fed['mu'] > 0, 'federation.mu', "fedprox requires mu > 0")
        require(_is_int(fed['personalization_epochs']) and fed['personalization_epochs'] >= 0,
                'federation.personalization_epochs', "must be an integer >= 0")
        require(_is_int(fed['workers']) and fed['workers'] >= 1, 'federation.workers', "must be an integer >= 1")

        for section in ('train', 'round0_train'):
            values = c[section]
            for key in ('epochs', 'batch_size'):
                if values[key] is not None or section == 'train':
                    require(_is_int(values[key]) and values[key] >= 1, f"{section}.{key}", "must be an integer >= 1")
            if values['learning_rate'] is not None or section == 'train':
                require(_is_number(values['learning_rate']) and values['learning_rate'] >= 0,
                        f"{section}.learning_rate", "must be non-negative")
            if values['momentum'] is not None or section == 'train':
                require(_is_number(values['momentum']) and 0 <= values['momentum'] < 1,
                        f"{section}.momentum", "must be in [0, 1)")

        sweep = c['sweep']
        require(isinstance(sweep['lambdas'], list) and all(_is_number(x) and x > 0 for x in sweep['lambdas']),
                'sweep.lambdas', "must be a list of positive numbers")
        require(_is_int(sweep['auto_grid']) and (sweep['auto_grid'] == 0 or sweep['auto_grid'] >= 2),
                'sweep.auto_grid', "must be 0 (off) or an integer >= 2")

        algos = c['compare']['algorithms']
        require(isinstance(algos, list) and algos and all(a in ALGORITHMS for a in algos),
                'compare.algorithms', f"must be a nonempty list drawn from {ALGORITHMS}")
        if 'fedprox' in algos:
            require(fed['mu'] > 0, 'federation.mu', "comparing fedprox requires mu > 0")

    def get(self, *keys, default=None):
        """Get nested configuration value.

        Args:
            *keys: Path to config value (e.g., 'federation', 'lambda')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        value = self.config
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def apply_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                        lam: Optional[float] = None, rounds: Optional[int] = None):
        """Apply CLI overrides and re-validate."""
        if seed is not None:
            self.config['experiment']['seeds'] = [seed]
        if out is not None:
            self.config['experiment']['output_dir'] = out
        if lam is not None:
            self.config['federation']['lambda'] = lam
        if rounds is not None:
            self.config['federation']['rounds'] = rounds
        self._validate()

    def resolved(self) -> Dict[str, Any]:
        """Full configuration with defaults filled in."""
        return copy.deepcopy(self.config)

    def run_id(self, seeds: Union[int, Sequence[int]]) -> str:
        """Name of a run's output directory: <name>-<config hash>-seed<k>[-<k2>...].

        The hash covers everything except the seed list and output directory,
        so the same experiment lands in the same directory on every re-run.
        """
        content = self.resolved()
        content['experiment'].pop('seeds')
        content['experiment'].pop('output_dir')
        canonical = json.dumps(content, sort_keys=True, separators=(',', ':'))
        digest = hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:10]
        if isinstance(seeds, int):
            seeds = [seeds]
        suffix = "-".join(str(s) for s in seeds)
        return f"{self.config['experiment']['name']}-{digest}-seed{suffix}"

    def run_dir(self, seeds: Union[int, Sequence[int]], command: str = 'run') -> str:
        return os.path.join(self.config['experiment']['output_dir'], command, self.run_id(seeds))

    @property
    def seeds(self) -> List[int]:
        return list(self.config['experiment']['seeds'])

    @property
    def is_planted(self) -> bool:
        return self.config['partition']['scheme'] == 'planted'

    def _train_spec(self, section: str) -> TrainSpec:
        base = self.config['train']
        values = {k: (v if v is not None else base[k]) for k, v in self.config[section].items()}
        return TrainSpec(
            epochs=values['epochs'],
            batch_size=values['batch_size'],
            learning_rate=float(values['learning_rate']),
            momentum=float(values['momentum']),
        )

    def layer_sizes(self) -> List[int]:
        ds = self.config['dataset']
        return [ds['dim']] + list(self.config['model']['hidden']) + [ds['num_classes']]

    def federation_config(self, seed: int, num_clients: Optional[int] = None) -> FederationConfig:
        """FederationConfig for one seed."""
        fed = self.config['federation']
        return FederationConfig(
            num_clients=num_clients if num_clients is not None else fed['num_clients'],
            rounds=fed['rounds'],
            layer_sizes=self.layer_sizes(),
            sampling_rate=float(fed['sampling_rate']),
            lam=float(fed['lambda']),
            linkage=fed['linkage'],
            train=self._train_spec('train'),
            round0_train=self._train_spec('round0_train'),
            algorithm=fed['algorithm'],
            mu=float(fed['mu']),
            seed=seed,
            personalization_epochs=fed['personalization_epochs'],
            workers=fed['workers'],
        )

    def make_dataset(self, seed: int) -> LabeledDataset:
        """Synthetic dataset for one seed, or the CSV fixture when configured."""
        ds = self.config['dataset']
        if ds['csv'] is not None:
            dataset = load_dataset_csv(ds['csv'], ds['num_classes'])
            if dataset.dim != ds['dim']:
                raise ConfigError('dataset.dim', f"CSV has {dataset.dim} features, config says {ds['dim']}")
            return dataset
        return synth_gaussian_classes(
            ds['num_classes'], ds['dim'], ds['per_class'], float(ds['sep']),
            derive_seed(seed, _TAG_DATASET),
        )

    def labels_per_group(self) -> List[List[int]]:
        part = self.config['partition']
        if part['labels_per_group'] is not None:
            return [list(g) for g in part['labels_per_group']]
        # Consecutive, near-equal label blocks
        num_classes = self.config['dataset']['num_classes']
        bounds = [round(g * num_classes / part['num_groups']) for g in range(part['num_groups'] + 1)]
        return [list(range(bounds[g], bounds[g + 1])) for g in range(part['num_groups'])]

    def make_shards(self, seed: int) -> Tuple[List[ClientShard], Optional[GroundTruthGroups]]:
        """Client shards for one seed, plus planted groups when the scheme has them."""
        part = self.config['partition']
        num_clients = self.config['federation']['num_clients']
        dataset = self.make_dataset(seed)
        partition_seed = derive_seed(seed, _TAG_PARTITION)
        if part['scheme'] == 'planted':
            return planted_cluster_partition(
                part['num_groups'], num_clients // part['num_groups'], self.labels_per_group(),
                dataset, partition_seed, float(part['test_fraction']),
            )
        spec = PartitionSpec(
            scheme=part['scheme'],
            num_clients=num_clients,
            test_fraction=float(part['test_fraction']),
            seed=partition_seed,
            delta=float(part['delta']),
            alpha=float(part['alpha']),
        )
        return partition(dataset, spec), None
