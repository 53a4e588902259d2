"""Synthetic teacher-student tasks.

Inputs are correlated, x = G·u + 0.05·ε with a low-dimensional latent u and
a mixing matrix G whose rows have uneven scales, so some input features
carry far more signal than others. The teacher is a He-initialised ReLU
MLP without biases whose weights are float32 values."""

from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import CHECKPOINT_DTYPE, Matrix, Rng, frozen
from .train import HEADS, loss_of, mlp_forward
from .utils import Initializer, initializer


class TaskSpec(Initializer):
    kind = 'regression'
    in_dim = 64
    hidden: Sequence[int] = (64,)
    classes = 8
    train_size = 4096
    validation_size = 512
    test_size = 1024
    latent_dim = 16
    noise = 0.01
    input_noise = 0.05

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == 'regression' else self.classes

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)

    def validate(self) -> 'TaskSpec':
        if self.kind not in HEADS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        sizes = (self.train_size, self.validation_size, self.test_size)
        if min(sizes) <= 0 or min(self.dims) <= 0 or self.latent_dim <= 0:
            raise ConfigError("task sizes and dimensions must be positive")
        if self.kind == 'classification' and self.classes < 2:
            raise ConfigError("classification needs at least two classes")
        if self.noise < 0 or self.input_noise < 0:
            raise ConfigError("noise levels must not be negative")
        return self


class Dataset(Initializer):
    """Column samples x (in_dim × n) with regression targets (out × n) or
    integer class labels (n,)."""

    x: Matrix
    y: np.ndarray
    head = 'regression'

    def __len__(self):
        return self.x.shape[1]

    def targets(self, indices) -> np.ndarray:
        if self.head == 'classification':
            return self.y[indices]
        return self.y[:, indices]

    def subset(self, indices) -> 'Dataset':
        return Dataset(x=self.x[:, indices], y=self.targets(indices), head=self.head)

    def sample(self, count: int, rng: Rng) -> 'Dataset':
        if count >= len(self):
            return self
        return self.subset(np.sort(rng.generator.choice(len(self), size=count, replace=False)))

    def calibration(self, count: int) -> Matrix:
        """The first count samples as rows, for scoring and quantization."""
        return self.x[:, :count].T


class Task(Initializer):
    spec: TaskSpec
    seed: int
    teacher: list[Matrix]
    train: Dataset
    validation: Dataset
    test: Dataset

    def teacher_forward(self, x: Matrix) -> Matrix:
        return mlp_forward(self.teacher, x)

    @initializer
    def noise_floor(self) -> float:
        """Teacher loss on the test split."""
        kind = 'mse' if self.spec.kind == 'regression' else 'cross_entropy'
        return loss_of(self.teacher_forward(self.test.x), self.test.y, kind)


def make_task(spec: Optional[TaskSpec] = None, seed: int = 0) -> Task:
    spec = (spec or TaskSpec()).validate()
    rng = Rng(seed, 'task')

    mixing_rng = rng.derive('mixing')
    row_scales = np.exp(mixing_rng.normal(0.0, 0.5, (spec.in_dim, 1)))
    spread = 1.0 / np.sqrt(spec.latent_dim)
    mixing = row_scales * mixing_rng.normal(0.0, spread, (spec.in_dim, spec.latent_dim))

    teacher_rng = rng.derive('teacher')
    dims = spec.dims
    teacher = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        weight = teacher_rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_out, fan_in))
        teacher.append(frozen(weight.astype(CHECKPOINT_DTYPE).astype(np.float64)))

    total = spec.train_size + spec.validation_size + spec.test_size
    sample_rng = rng.derive('samples')
    latent = sample_rng.normal(0.0, 1.0, (spec.latent_dim, total))
    x = mixing @ latent + spec.input_noise * sample_rng.normal(0.0, 1.0, (spec.in_dim, total))
    outputs = mlp_forward(teacher, x)
    if spec.kind == 'regression':
        y = outputs + spec.noise * sample_rng.normal(0.0, 1.0, outputs.shape)
    else:
        y = np.argmax(outputs, axis=0)

    def split(start: int, stop: int) -> Dataset:
        indices = slice(start, stop)
        targets = y[:, indices] if spec.kind == 'regression' else y[indices]
        return Dataset(x=x[:, indices], y=targets, head=spec.kind)

    first = spec.train_size
    second = first + spec.validation_size
    return Task(
        spec=spec,
        seed=seed,
        teacher=teacher,
        train=split(0, first),
        validation=split(first, second),
        test=split(second, total),
    )


__all__ = (
    'Dataset',
    'Task',
    'TaskSpec',
    'make_task',
)
