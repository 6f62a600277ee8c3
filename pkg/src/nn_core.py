"""
Minimal dense feed-forward network with manual backpropagation.

Parameters are plain numpy arrays in float64. Hidden layers use ReLU, the
output layer is linear and trained with softmax cross-entropy.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .data_gen import ClientShard, LabeledDataset


# Communication accounting convention: one float32 per transmitted parameter
BYTES_PER_PARAM = 4


def derive_seed(*keys: int) -> int:
    """Derive an independent 64-bit seed from a tuple of integer keys.

    Args:
        *keys: e.g. (run seed, round index, client id, purpose tag)

    Returns:
        Unsigned 64-bit integer seed
    """
    seq = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class LayerParams:
    """One dense layer: weights [fan_out x fan_in] and bias [fan_out]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError(
                f"Layer needs 2-D weights and 1-D bias, got {self.weights.shape} and {self.bias.shape}"
            )
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"Bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def flatten(self) -> np.ndarray:
        """Row-major weights followed by bias."""
        return np.concatenate([self.weights.ravel(order='C'), self.bias])

    def copy(self) -> 'LayerParams':
        return LayerParams(self.weights.copy(), self.bias.copy())


@dataclass
class ModelParams:
    """Ordered dense layers; ReLU between layers, linear logits at the end."""

    layers: List[LayerParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("A model needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if cur.fan_in != prev.fan_out:
                raise ValueError(
                    f"Layer {i} fan_in {cur.fan_in} does not match layer {i - 1} fan_out {prev.fan_out}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    def copy(self) -> 'ModelParams':
        return ModelParams([layer.copy() for layer in self.layers])

    def arrays(self) -> List[np.ndarray]:
        """All parameter arrays in layer order (weights, bias, weights, ...)."""
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([layer.flatten() for layer in self.layers])

    def is_congruent(self, other: 'ModelParams') -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.weights.shape == b.weights.shape and a.bias.shape == b.bias.shape
            for a, b in zip(self.layers, other.layers)
        )

    def equals(self, other: 'ModelParams') -> bool:
        """Bit-exact parameter equality."""
        return self.is_congruent(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


# Gradients share the layout of the model they belong to
Gradients = ModelParams


@dataclass
class PartialWeights:
    """Final-layer fingerprint: row-major weights followed by bias."""

    values: np.ndarray
    layer_shape: Tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        fan_out, fan_in = self.layer_shape
        expected = fan_out * fan_in + fan_out
        if self.values.shape != (expected,):
            raise ValueError(
                f"Partial weights of layer {self.layer_shape} need {expected} values, got {self.values.shape}"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    def to_layer(self) -> LayerParams:
        """Invert the flattening back into a LayerParams."""
        fan_out, fan_in = self.layer_shape
        split = fan_out * fan_in
        return LayerParams(self.values[:split].reshape(fan_out, fan_in), self.values[split:].copy())


@dataclass
class TrainSpec:
    """Local optimizer settings for one local_train call."""

    epochs: int = 10
    batch_size: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.5
    proximal_mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.proximal_mu < 0:
            raise ValueError(f"proximal_mu must be non-negative, got {self.proximal_mu}")


def init_model(layer_sizes: Sequence[int], seed: int) -> ModelParams:
    """Glorot-uniform weights from a seeded generator, zero biases.

    Args:
        layer_sizes: [input_dim, hidden..., num_classes]
        seed: Generator seed

    Returns:
        Freshly initialized ModelParams
    """
    if len(layer_sizes) < 2:
        raise ValueError(f"layer_sizes needs input and output sizes, got {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(LayerParams(weights, np.zeros(fan_out)))
    return ModelParams(layers)


def _check_features(model: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise ValueError(
            f"Features of shape {features.shape} do not fit model input dim {model.input_dim}"
        )
    return features


def _forward_trace(model: ModelParams, features: np.ndarray) -> List[np.ndarray]:
    """Activations per layer input, plus the logits as last element."""
    activations = [features]
    h = features
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = h @ layer.weights.T + layer.bias
        h = z if i == last else np.maximum(z, 0.0)
        activations.append(h)
    return activations


def forward(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Compute logits [B x C] for a feature batch [B x d]."""
    features = _check_features(model, features)
    return _forward_trace(model, features)[-1]


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Predicted class ids (argmax of logits)."""
    return np.argmax(forward(model, features), axis=1)


def accuracy(model: ModelParams, dataset: 'LabeledDataset') -> float:
    """Fraction of correctly classified samples in a dataset."""
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate accuracy on an empty dataset")
    return float(np.mean(predict(model, dataset.features) == dataset.labels))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    model: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    anchor: Optional[ModelParams] = None,
    mu: float = 0.0
) -> Tuple[float, Gradients]:
    """Mean softmax cross-entropy plus optional proximal term, with exact gradients.

    Args:
        model: Current parameters
        features: Batch [B x d]
        labels: Class ids [B], each in [0, C)
        anchor: Reference model of the proximal term (required when mu > 0)
        mu: Proximal coefficient; loss gains (mu/2) * ||theta - anchor||^2

    Returns:
        Tuple of (loss, gradients shaped like the model)
    """
    features = _check_features(model, features)
    labels = np.asarray(labels)
    num_classes = model.num_classes
    if labels.shape != (features.shape[0],):
        raise ValueError(f"Labels of shape {labels.shape} do not match batch size {features.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    if mu > 0 and (anchor is None or not model.is_congruent(anchor)):
        raise ValueError("A shape-congruent anchor model is required when mu > 0")

    batch = features.shape[0]
    activations = _forward_trace(model, features)
    log_probs = _log_softmax(activations[-1])
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())

    delta = np.exp(log_probs)
    delta[rows, labels] -= 1.0
    delta /= batch

    grad_layers: List[LayerParams] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        h_in = activations[i]
        grad_layers[i] = LayerParams(delta.T @ h_in, delta.sum(axis=0))
        if i > 0:
            # ReLU derivative taken as 0 at the kink
            delta = (delta @ layer.weights) * (h_in > 0)

    if mu > 0:
        sq = 0.0
        for g, layer, ref in zip(grad_layers, model.layers, anchor.layers):
            dw = layer.weights - ref.weights
            db = layer.bias - ref.bias
            sq += float(np.sum(dw * dw) + np.sum(db * db))
            g.weights += mu * dw
            g.bias += mu * db
        loss += 0.5 * mu * sq

    return loss, ModelParams(grad_layers)


def local_train(model: ModelParams, shard: 'ClientShard', spec: TrainSpec) -> ModelParams:
    """Mini-batch SGD with heavy-ball momentum on a client's train split.

    The input model is not modified. Batch order is a fresh seeded
    permutation per epoch, the last partial batch is kept, and momentum
    buffers start at zero. With spec.proximal_mu > 0 the received model is
    the proximal anchor.

    Args:
        model: Received (cluster or global) model
        shard: Client data; only shard.train is used
        spec: Optimizer settings and seed

    Returns:
        Locally trained copy of the model
    """
    train = shard.train
    n = len(train)
    if n == 0:
        raise ValueError(f"Client {shard.client_id} has an empty train split")

    rng = np.random.default_rng(spec.seed)
    anchor = model if spec.proximal_mu > 0 else None
    params = model.copy()
    velocity = [np.zeros_like(a) for a in params.arrays()]

    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            _, grads = loss_and_grad(
                params, train.features[idx], train.labels[idx], anchor, spec.proximal_mu
            )
            for p, v, g in zip(params.arrays(), velocity, grads.arrays()):
                v *= spec.momentum
                v += g
                p -= spec.learning_rate * v
    return params


def extract_partial_weights(model: ModelParams) -> PartialWeights:
    """Final-layer weights (row-major) followed by final-layer bias."""
    final = model.layers[-1]
    return PartialWeights(final.flatten(), (final.fan_out, final.fan_in))


def param_count(model: ModelParams) -> int:
    """Total number of parameters across all layers."""
    return sum(layer.size for layer in model.layers)


def final_layer_param_count(model: ModelParams) -> int:
    return model.layers[-1].size


def weighted_average(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Per-parameter convex combination with weights normalized by their sum.

    Evaluated as theta_0 + sum_k (w_k / W) * (theta_k - theta_0) in ascending
    input order, so identical inputs come back bit-exact.

    Args:
        models: Shape-congruent models
        weights: Non-negative weights, one per model, with positive sum

    Returns:
        Averaged model
    """
    if not models:
        raise ValueError("weighted_average needs at least one model")
    if len(models) != len(weights):
        raise ValueError(f"Got {len(models)} models but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"Aggregation weights must be finite and non-negative, got {w.tolist()}")
    total = w.sum()
    if total <= 0:
        raise ValueError("Aggregation weights sum to zero")
    base = models[0]
    for i, m in enumerate(models[1:], start=1):
        if not base.is_congruent(m):
            raise ValueError(f"Model {i} is not shape-congruent with model 0")

    coeffs = w / total
    result = base.copy()
    for k in range(1, len(models)):
        if coeffs[k] == 0.0:
            continue
        for acc, p, p0 in zip(result.arrays(), models[k].arrays(), base.arrays()):
            acc += coeffs[k] * (p - p0)
    return result
