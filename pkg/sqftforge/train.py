"""Reverse-mode gradients and the fine-tuning loop for adapterized MLPs.

Only the adapters' A and B matrices are trained; base weights are frozen
read-only arrays. A layer computes Z = W_eff·X, hidden layers apply ReLU,
and the head is linear (regression) or softmax over logits
(classification)."""

from time import perf_counter
from typing import Callable, Optional, Sequence

import numpy as np

from .adapter import QA_SPARSE_PEFT, AdapterizedLayer, RankSpace, inside_clamp
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .tensor import Matrix, Rng, matmul
from .utils import Initializer

HEADS = frozenset({'regression', 'classification'})
OPTIMIZERS = frozenset({'adam', 'sgd'})


def relu(z: Matrix) -> Matrix:
    return np.maximum(z, 0.0)


def mlp_forward(weights: Sequence[Matrix], x: Matrix) -> Matrix:
    """Plain forward through fixed weights, ReLU between layers."""
    for i, weight in enumerate(weights):
        x = matmul(weight, x)
        if i < len(weights) - 1:
            x = relu(x)
    return x


class MlpModel(Initializer):
    layers: list[AdapterizedLayer]
    head = 'regression'

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("a model needs at least one layer")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        modes = {layer.mode for layer in self.layers}
        if len(modes) != 1:
            raise ConfigError(f"layers disagree on the adapter mode: {sorted(modes)}")
        for previous, layer in zip(self.layers, self.layers[1:]):
            if previous.out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer output {previous.out_dim} does not feed input {layer.in_dim}"
                )

    @property
    def mode(self) -> str:
        return self.layers[0].mode

    @property
    def kind(self) -> str:
        return 'mse' if self.head == 'regression' else 'cross_entropy'

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def rank_spaces(self) -> tuple[RankSpace, ...]:
        return tuple(layer.adapter.rank_space for layer in self.layers)

    def active_ranks(self) -> tuple[int, ...]:
        return tuple(layer.adapter.active_rank for layer in self.layers)

    def set_active_ranks(self, ranks: Sequence[int]) -> None:
        if len(ranks) != len(self.layers):
            raise ConfigError(f"{len(ranks)} ranks given for {len(self.layers)} layers")
        for layer, rank in zip(self.layers, ranks):
            layer.adapter.check_rank(rank)
        for layer, rank in zip(self.layers, ranks):
            layer.set_active_rank(rank)

    def _ranks(self, ranks: Optional[Sequence[int]]) -> Sequence[Optional[int]]:
        if ranks is None:
            return (None,) * len(self.layers)
        if len(ranks) != len(self.layers):
            raise ConfigError(f"{len(ranks)} ranks given for {len(self.layers)} layers")
        return ranks

    def effective_weights(
        self, ranks: Optional[Sequence[int]] = None, straight_through: bool = False
    ) -> list[Matrix]:
        return [
            layer.effective_weight(rank, straight_through)
            for layer, rank in zip(self.layers, self._ranks(ranks))
        ]

    def forward(
        self, x: Matrix, ranks: Optional[Sequence[int]] = None, straight_through: bool = False
    ) -> Matrix:
        """Outputs (logits for classification) for column samples x."""
        if x.shape[0] != self.in_dim:
            raise ShapeError(f"input has {x.shape[0]} rows, model expects {self.in_dim}")
        return mlp_forward(self.effective_weights(ranks, straight_through), x)

    def base_weights(self) -> list[Matrix]:
        return [layer.weight for layer in self.layers]

    def adapter_count(self, ranks: Optional[Sequence[int]] = None) -> int:
        total = 0
        for layer, rank in zip(self.layers, self._ranks(ranks)):
            rank = layer.adapter.check_rank(rank)
            total += rank * (layer.in_dim + layer.out_dim)
        return total

    def copy(self) -> 'MlpModel':
        return self.replace(layers=[layer.copy() for layer in self.layers])

    def __repr__(self):
        dims = [self.in_dim] + [layer.out_dim for layer in self.layers]
        return f"MlpModel({'->'.join(map(str, dims))}, {self.mode}, {self.head})"


def mse(predictions: Matrix, targets: Matrix) -> float:
    if predictions.shape != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} vs targets {targets.shape}")
    return float(np.mean(np.square(predictions - targets)))


def log_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))


def cross_entropy(logits: Matrix, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[1],):
        raise ShapeError(f"{labels.shape} labels for {logits.shape[1]} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[0]):
        raise ShapeError(f"labels outside 0..{logits.shape[0] - 1}")
    picked = log_softmax(logits)[labels, np.arange(labels.size)]
    return float(-np.mean(picked))


def loss_of(outputs: Matrix, targets: np.ndarray, kind: str) -> float:
    if kind == 'mse':
        return mse(outputs, targets)
    elif kind == 'cross_entropy':
        return cross_entropy(outputs, targets)
    raise ConfigError(f"unknown loss kind {kind!r}")


def loss(
    model: MlpModel,
    batch_x: Matrix,
    batch_y: np.ndarray,
    kind: Optional[str] = None,
    ranks: Optional[Sequence[int]] = None,
    straight_through: bool = False,
) -> float:
    """Mean-reduced loss of the model on a batch."""
    outputs = model.forward(batch_x, ranks, straight_through)
    return loss_of(outputs, batch_y, kind or model.kind)


def output_gradient(outputs: Matrix, targets: np.ndarray, kind: str) -> Matrix:
    if kind == 'mse':
        return 2.0 * (outputs - targets) / outputs.size
    probabilities = np.exp(log_softmax(outputs))
    probabilities[targets, np.arange(outputs.shape[1])] -= 1.0
    return probabilities / outputs.shape[1]


class Gradients(Initializer):
    """Per-layer ∂loss/∂A and ∂loss/∂B at full adapter size; rows and
    columns beyond the active rank are zero."""

    loss: float
    A: list[Matrix]
    B: list[Matrix]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(g), initial=0.0)) for g in self.A + self.B)


def backward(
    model: MlpModel,
    batch_x: Matrix,
    batch_y: np.ndarray,
    ranks: Optional[Sequence[int]] = None,
    straight_through: bool = False,
) -> Gradients:
    """Forward and exact reverse pass for the adapters of every layer.

    The mask multiplies the adapter product in the forward pass, so its
    gradient is masked the same way. Through the quantizer the
    straight-through estimator passes the gradient where the unclamped
    code is inside [0, Q_p] and blocks it elsewhere."""

    ranks = [
        layer.adapter.check_rank(rank) for layer, rank in zip(model.layers, model._ranks(ranks))
    ]
    inputs = []
    weights = []
    pre_activations = []
    x = batch_x
    for i, (layer, rank) in enumerate(zip(model.layers, ranks)):
        weight = layer.effective_weight(rank, straight_through)
        z = matmul(weight, x)
        inputs.append(x)
        weights.append(weight)
        pre_activations.append(z)
        x = relu(z) if i < len(model.layers) - 1 else z

    kind = model.kind
    value = loss_of(x, batch_y, kind)
    grad_z = output_gradient(x, batch_y, kind)

    grads_a = [np.zeros_like(layer.adapter.A) for layer in model.layers]
    grads_b = [np.zeros_like(layer.adapter.B) for layer in model.layers]
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        rank = ranks[i]
        adapter = layer.adapter
        grad_w = grad_z @ inputs[i].T
        if i:
            grad_z = (weights[i].T @ grad_z) * (pre_activations[i - 1] > 0)

        if layer.mode == QA_SPARSE_PEFT:
            combined = layer.weight + layer.delta(rank)
            grad_w = grad_w * inside_clamp(combined, layer.params)
        if layer.masked:
            grad_w = grad_w * layer.mask

        scaling = adapter.scaling(rank)
        grads_b[i][:, :rank] = scaling * (grad_w @ adapter.A[:rank].T)
        grads_a[i][:rank] = scaling * (adapter.B[:, :rank].T @ grad_w)

    return Gradients(loss=value, A=grads_a, B=grads_b)


class TrainConfig(Initializer):
    epochs = 20
    batch_size = 32
    learning_rate = 1e-3
    optimizer = 'adam'
    beta1 = 0.9
    beta2 = 0.999
    epsilon = 1e-8
    nls = True
    seed = 0

    def validate(self) -> 'TrainConfig':
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch size must be positive")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must not be negative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("adam moments need 0 <= beta < 1 and a positive epsilon")
        return self


class Adam(Initializer):
    config: TrainConfig
    step = 0

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.moments = {}

    def update(self, key, parameter: Matrix, gradient: Matrix) -> None:
        config = self.config
        first, second = self.moments.get(key, (0.0, 0.0))
        first = config.beta1 * first + (1 - config.beta1) * gradient
        second = config.beta2 * second + (1 - config.beta2) * np.square(gradient)
        self.moments[key] = first, second
        corrected_first = first / (1 - config.beta1**self.step)
        corrected_second = second / (1 - config.beta2**self.step)
        parameter -= config.learning_rate * corrected_first / (np.sqrt(corrected_second) + config.epsilon)


class Sgd(Initializer):
    config: TrainConfig
    step = 0

    def update(self, key, parameter: Matrix, gradient: Matrix) -> None:
        parameter -= self.config.learning_rate * gradient


optimizers = {'adam': Adam, 'sgd': Sgd}


class TrainResult(Initializer):
    history: list[float]
    steps: int
    seconds: float

    @property
    def steps_per_second(self) -> float:
        return self.steps / self.seconds if self.seconds > 0 else 0.0


def finetune(
    model: MlpModel,
    dataset,
    config: TrainConfig,
    progress: Optional[Callable[[int, float], None]] = None,
) -> tuple[MlpModel, TrainResult]:
    """Train the adapters in place; returns the model and per-epoch mean losses.

    With config.nls every step samples one rank per layer uniformly from
    that layer's rank space; otherwise the active ranks are used. Rank
    sampling and shuffling draw from separate streams."""

    config.validate()
    count = len(dataset)
    if not count:
        raise ConfigError("cannot fine-tune on an empty dataset")

    shuffle_rng = Rng(config.seed, 'finetune', 'shuffle')
    rank_rng = Rng(config.seed, 'finetune', 'ranks')
    optimizer = optimizers[config.optimizer](config=config)
    fixed = model.active_ranks()
    spaces = model.rank_spaces
    history = []
    steps = 0
    started = perf_counter()

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(count)
        losses = []
        for start in range(0, count, config.batch_size):
            batch = order[start : start + config.batch_size]
            if config.nls:
                ranks = tuple(space[int(rank_rng.integers(len(space)))] for space in spaces)
            else:
                ranks = fixed
            try:
                gradients = backward(model, dataset.x[:, batch], dataset.targets(batch), ranks)
            except DataError as e:
                raise TrainingError(f"diverged in epoch {epoch + 1}: {e}", history) from e
            if not np.isfinite(gradients.loss) or not np.isfinite(gradients.max_abs()):
                raise TrainingError(
                    f"loss diverged in epoch {epoch + 1} (step {steps + 1})", history
                )
            steps += 1
            optimizer.step = steps
            for i, layer in enumerate(model.layers):
                optimizer.update(('A', i), layer.adapter.A, gradients.A[i])
                optimizer.update(('B', i), layer.adapter.B, gradients.B[i])
            losses.append(gradients.loss)
        history.append(float(np.mean(losses)))
        if progress:
            progress(epoch + 1, history[-1])

    return model, TrainResult(history=history, steps=steps, seconds=perf_counter() - started)


def finite_diff_check(
    model: MlpModel,
    batch_x: Matrix,
    batch_y: np.ndarray,
    h: float = 1e-5,
    ranks: Optional[Sequence[int]] = None,
) -> float:
    """Largest relative difference between backward() and central differences.

    In qa_sparse_peft mode both sides use the straight-through surrogate
    forward; parameters whose perturbation moves an element across a clamp
    edge are skipped."""

    surrogate = model.mode == QA_SPARSE_PEFT
    analytic = backward(model, batch_x, batch_y, ranks, straight_through=surrogate)
    ranks = tuple(
        layer.adapter.check_rank(rank) for layer, rank in zip(model.layers, model._ranks(ranks))
    )

    def current_loss() -> float:
        return loss(model, batch_x, batch_y, ranks=ranks, straight_through=surrogate)

    def clamp_state() -> list[np.ndarray]:
        return [
            inside_clamp(layer.weight + layer.delta(rank), layer.params)
            for layer, rank in zip(model.layers, ranks)
        ]

    worst = 0.0
    for i, layer in enumerate(model.layers):
        rank = ranks[i]
        adapter = layer.adapter
        pairs = (
            (adapter.A[:rank], analytic.A[i][:rank]),
            (adapter.B[:, :rank], analytic.B[i][:, :rank]),
        )
        for view, exact in pairs:
            for index in np.ndindex(view.shape):
                original = view[index]
                view[index] = original + h
                plus = current_loss()
                crossed = surrogate and clamp_state()
                view[index] = original - h
                minus = current_loss()
                if surrogate:
                    crossed = any(
                        not np.array_equal(a, b) for a, b in zip(crossed, clamp_state())
                    )
                view[index] = original
                if crossed:
                    continue
                numeric = (plus - minus) / (2 * h)
                error = abs(exact[index] - numeric) / max(abs(exact[index]), abs(numeric), 1e-5)
                worst = max(worst, error)
    return worst


__all__ = (
    'Adam',
    'Gradients',
    'HEADS',
    'MlpModel',
    'OPTIMIZERS',
    'Sgd',
    'TrainConfig',
    'TrainResult',
    'backward',
    'cross_entropy',
    'finetune',
    'finite_diff_check',
    'log_softmax',
    'loss',
    'loss_of',
    'mlp_forward',
    'mse',
    'relu',
)
