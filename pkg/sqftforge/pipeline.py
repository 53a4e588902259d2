"""Stage orchestration, artifacts, evaluation and cost accounting.

A run goes sparsify → [quantize] → fine-tune → select ranks → [merge].
Merging modes deliver one checkpoint; the others deliver a base
checkpoint plus an adapter checkpoint holding the selected ranks."""

from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .adapter import (
    QA_SPARSE_PEFT,
    RESCALES,
    SPARSE_PEFT,
    VANILLA_LORA,
    AdapterizedLayer,
    ElasticAdapter,
    RankSpace,
    new_elastic_adapter,
)
from .checkpoint import Container, encode_checkpoint
from .errors import ConfigError, InvariantError, StageError
from .formats import Metadata
from .host import get_host_facts, resident_bytes
from .quant import QuantizedTensor, QuantParams, QuantSpec, dequantize, quantize_rtn
from .search import RankConfig, SearchParams, SearchState, heuristic_config, search_model
from .sparsity import (
    SparsityMask,
    check_group,
    check_level,
    mask_sparsity,
    measure_sparsity,
    prune,
    scorers,
)
from .tasks import Dataset, Task, TaskSpec, make_task
from .tensor import CHECKPOINT_DTYPE, Matrix, Rng
from .train import MlpModel, TrainConfig, TrainResult, finetune, loss_of, mlp_forward, relu
from .utils import Initializer, in_threads, warn

Progress = Optional[Callable[[str], None]]


class Method(Initializer):
    name: str
    mode: str
    elastic: bool
    quantized: bool


METHODS = {
    method.name: method
    for method in (
        Method(name='lora', mode=VANILLA_LORA, elastic=False, quantized=False),
        Method(name='nls', mode=VANILLA_LORA, elastic=True, quantized=False),
        Method(name='sqft', mode=VANILLA_LORA, elastic=True, quantized=True),
        Method(name='sqft_sparsepeft', mode=SPARSE_PEFT, elastic=True, quantized=False),
        Method(name='sqft_qa_sparsepeft', mode=QA_SPARSE_PEFT, elastic=True, quantized=True),
    )
}

# largest deliverable first
CANONICAL = ('lora', 'sqft_sparsepeft', 'sqft', 'sqft_qa_sparsepeft')


class PipelineSpec(Initializer):
    method = 'sqft_sparsepeft'
    sparsity = 0.5
    score = 'wanda'
    group = 'row'
    calibration = 128
    quant = QuantSpec()
    ranks: Sequence[int] = (16, 12, 8)
    rank: Optional[int] = None
    alpha = 64.0
    rescale = 'active'
    train = TrainConfig()
    task = TaskSpec()
    search = SearchParams()
    seed = 0

    @property
    def method_info(self) -> Method:
        try:
            return METHODS[self.method]
        except KeyError:
            raise ConfigError(f"unknown method {self.method!r}") from None

    def rank_space(self) -> RankSpace:
        """The elastic rank space, or the single fixed rank for plain LoRA."""
        space = RankSpace.parse(self.ranks)
        if self.method_info.elastic:
            return space
        if self.rank is not None:
            return RankSpace((int(self.rank),))
        return RankSpace(heuristic_config([space]))

    def train_config(self) -> TrainConfig:
        return self.train.replace(seed=self.seed, nls=self.method_info.elastic and self.train.nls)

    def search_params(self) -> SearchParams:
        return self.search.replace(seed=self.seed)

    def validate(self) -> 'PipelineSpec':
        method = self.method_info
        check_level(self.sparsity)
        check_group(self.group)
        if self.score not in scorers:
            raise ConfigError(f"unknown score {self.score!r}")
        if self.calibration <= 0:
            raise ConfigError("calibration needs at least one sample")
        self.quant.validate()
        if method.quantized and not self.quant.enabled:
            raise ConfigError(f"method {self.method} needs quantization, but quant is off")
        self.rank_space()
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.rescale not in RESCALES:
            raise ConfigError(f"unknown rescale rule {self.rescale!r}")
        self.train.validate()
        self.task.validate()
        self.search.validate()
        return self


@contextmanager
def stage(name: str):
    try:
        yield
    except InvariantError as e:
        raise StageError(name, e) from e


def layer_name(index: int, part: str) -> str:
    return f"layers.{index}.{part}"


class CompressedBase(Initializer):
    """Per-layer float base weights and masks, plus the integer form when quantized."""

    weights: list[Matrix]
    masks: list[SparsityMask]
    head = 'regression'
    quantized: Optional[list[QuantizedTensor]] = None

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1], *(weight.shape[0] for weight in self.weights))

    def sparsity(self) -> list[float]:
        return [measure_sparsity(weight) for weight in self.weights]

    def params(self, index: int) -> Optional[QuantParams]:
        return self.quantized[index].params if self.quantized else None

    def tensors(self, include_masks: bool = True) -> dict[str, np.ndarray]:
        tensors = {}
        for i, weight in enumerate(self.weights):
            if self.quantized:
                tensors.update(quantized_tensors(i, self.quantized[i]))
            else:
                tensors[layer_name(i, 'weight')] = weight.astype(CHECKPOINT_DTYPE)
            if include_masks:
                tensors[layer_name(i, 'mask')] = self.masks[i]
        return tensors

    def metadata(self) -> Metadata:
        metadata = Metadata(
            layers=len(self.weights),
            head=self.head,
            dims=self.dims,
            measured_sparsity=[f"{value:.6f}" for value in self.sparsity()],
        )
        if self.quantized:
            params = self.quantized[0].params
            metadata.update(
                bits=params.bits,
                group_size=params.group_size,
                range_mode=params.range_mode,
            )
        return metadata


def quantized_tensors(index: int, quantized: QuantizedTensor) -> dict[str, np.ndarray]:
    return {
        layer_name(index, 'codes'): quantized.codes,
        layer_name(index, 'scales'): quantized.params.scales.astype(CHECKPOINT_DTYPE),
        layer_name(index, 'zeros'): quantized.params.zeros.astype(np.int32),
    }


def base_from_container(container: Container) -> CompressedBase:
    metadata = container.metadata
    layers = int(metadata.number('layers', 0))
    if not layers:
        raise ConfigError("checkpoint does not describe any layers")
    quantized = layer_name(0, 'codes') in container
    weights = []
    masks = []
    integers = []
    for i in range(layers):
        if quantized:
            group_size = metadata.text('group_size')
            params = QuantParams(
                bits=int(metadata.number('bits')),
                scales=container[layer_name(i, 'scales')].astype(np.float64),
                zeros=container[layer_name(i, 'zeros')].astype(np.int64),
                group_size=int(group_size) if group_size else None,
                range_mode=metadata.text('range_mode', 'half'),
            )
            integer = QuantizedTensor(codes=container[layer_name(i, 'codes')], params=params)
            params.check(integer.shape)
            integers.append(integer)
            weight = dequantize(integer)
        else:
            weight = container[layer_name(i, 'weight')].astype(np.float64)
        mask_name = layer_name(i, 'mask')
        weights.append(weight)
        masks.append(container[mask_name] if mask_name in container else weight != 0)
    return CompressedBase(
        weights=weights,
        masks=masks,
        head=metadata.text('head', 'regression'),
        quantized=integers if quantized else None,
    )


def prune_stage(spec: PipelineSpec, task: Task) -> CompressedBase:
    """Prune the teacher layer by layer, scoring each on the activations
    the already pruned layers produce."""

    x = task.train.x[:, : spec.calibration]
    weights = []
    masks = []
    for i, weight in enumerate(task.teacher):
        pruned, mask = prune(weight, spec.sparsity, spec.score, spec.group, x.T)
        weights.append(pruned)
        masks.append(mask)
        if i < len(task.teacher) - 1:
            x = relu(pruned @ x)
    return CompressedBase(weights=weights, masks=masks, head=task.spec.kind)


def quantize_stage(spec: PipelineSpec, task: Task, base: CompressedBase) -> CompressedBase:
    x = task.train.x[:, : spec.calibration]
    weights = []
    integers = []
    for i, (weight, mask) in enumerate(zip(base.weights, base.masks)):
        quantized = spec.quant.quantize(weight, x.T, mask=mask)
        dequantized = dequantize(quantized)
        integers.append(quantized)
        weights.append(dequantized)
        if i < len(base.weights) - 1:
            x = relu(dequantized @ x)
    return base.replace(weights=weights, quantized=integers)


def compress(spec: PipelineSpec, task: Task) -> CompressedBase:
    with stage('sparsify'):
        base = prune_stage(spec, task)
    if spec.method_info.quantized:
        with stage('quantize'):
            base = quantize_stage(spec, task, base)
    return base


def build_model(spec: PipelineSpec, base: CompressedBase) -> MlpModel:
    mode = spec.method_info.mode
    space = spec.rank_space()
    layers = []
    for i, (weight, mask) in enumerate(zip(base.weights, base.masks)):
        out_dim, in_dim = weight.shape
        adapter = new_elastic_adapter(
            in_dim,
            out_dim,
            space.fit(in_dim, out_dim),
            spec.alpha,
            Rng(spec.seed, 'adapter', i),
            spec.rescale,
        )
        layers.append(
            AdapterizedLayer(
                weight=weight, adapter=adapter, mode=mode, mask=mask, params=base.params(i)
            )
        )
    return MlpModel(layers=layers, head=base.head)


def adapter_tensors(model: MlpModel, selected_only: bool = True) -> tuple[dict, Metadata]:
    """A and B per layer; with selected_only just the active leading slice."""
    tensors = {}
    adapters = []
    for i, layer in enumerate(model.layers):
        adapter = layer.adapter.sub_adapter() if selected_only else layer.adapter
        adapters.append(adapter)
        tensors[layer_name(i, 'A')] = adapter.A.astype(CHECKPOINT_DTYPE)
        tensors[layer_name(i, 'B')] = adapter.B.astype(CHECKPOINT_DTYPE)
    metadata = Metadata(
        layers=len(model.layers),
        mode=model.mode,
        rank_space=';'.join(str(adapter.rank_space) for adapter in adapters),
        active_rank=[adapter.active_rank for adapter in adapters],
        alpha=[repr(adapter.alpha) for adapter in adapters],
        rescale=adapters[0].rescale,
    )
    return tensors, metadata


def attach_adapters(base: CompressedBase, container: Optional[Container] = None) -> MlpModel:
    """Rebuild a model from a base and an adapter checkpoint.

    Without an adapter checkpoint every layer gets a zero adapter, which
    evaluates a merged or bare base as it is."""

    layers = []
    if container is None:
        for i, weight in enumerate(base.weights):
            out_dim, in_dim = weight.shape
            adapter = new_elastic_adapter(in_dim, out_dim, RankSpace((1,)), rng=Rng(0, 'zero'))
            layers.append(
                AdapterizedLayer(
                    weight=weight,
                    adapter=adapter,
                    params=base.params(i),
                )
            )
        return MlpModel(layers=layers, head=base.head)

    metadata = container.metadata
    mode = metadata.text('mode', VANILLA_LORA)
    spaces = [RankSpace.parse(text) for text in metadata.text('rank_space', '').split(';')]
    active = metadata.integers('active_rank')
    alphas = [float(value) for value in metadata.text('alpha', '').split(',')]
    if not len(spaces) == len(active) == len(alphas) == len(base.weights):
        raise ConfigError("adapter checkpoint does not match the base layers")
    for i, weight in enumerate(base.weights):
        adapter = ElasticAdapter(
            A=container[layer_name(i, 'A')].astype(np.float64),
            B=container[layer_name(i, 'B')].astype(np.float64),
            rank_space=spaces[i],
            active_rank=active[i],
            alpha=alphas[i],
            rescale=metadata.text('rescale', 'active'),
        )
        adapter.check_rank(active[i])
        layers.append(
            AdapterizedLayer(
                weight=weight,
                adapter=adapter,
                mode=mode,
                mask=base.masks[i],
                params=base.params(i),
            )
        )
    return MlpModel(layers=layers, head=base.head)


def merge_model(model: MlpModel, force: bool = False) -> list:
    """Merged weights per layer: float matrices, or QuantizedTensors in qa mode."""
    with stage('merge'):
        return [layer.merge(force) for layer in model.layers]


def merged_tensors(merged: Sequence) -> dict[str, np.ndarray]:
    tensors = {}
    for i, weight in enumerate(merged):
        if isinstance(weight, QuantizedTensor):
            tensors.update(quantized_tensors(i, weight))
        else:
            tensors[layer_name(i, 'weight')] = weight.astype(CHECKPOINT_DTYPE)
    return tensors


def payload_bytes(tensors: dict[str, np.ndarray]) -> int:
    """Resident bytes of the tensors a deployed model keeps in memory."""
    return sum(tensor.nbytes for tensor in tensors.values())


def merged_weights(model: MlpModel) -> list[Matrix]:
    """What a deployed merged model multiplies by, mode by mode.

    A vanilla adapter on a quantized base has to be requantized with the
    base's scales to stay integer, which is where it loses precision."""

    weights = []
    for layer in model.layers:
        merged = layer.merge(force=True)
        if isinstance(merged, QuantizedTensor):
            merged = dequantize(merged)
        elif layer.mode == VANILLA_LORA and layer.params is not None:
            merged = dequantize(quantize_rtn(merged, layer.params))
        weights.append(merged)
    return weights


def mergeable(model: MlpModel, x: Matrix) -> bool:
    """Merge for real and check that neither sparsity nor outputs change."""
    try:
        weights = merged_weights(model)
    except InvariantError as e:
        warn(f"merge refused: {e}")
        return False
    for layer, weight in zip(model.layers, weights):
        if layer.mask is not None:
            intended = mask_sparsity(layer.mask)
        else:
            intended = measure_sparsity(layer.weight)
        if measure_sparsity(weight) < intended:
            return False
    return bool(np.array_equal(mlp_forward(weights, x), model.forward(x)))


def evaluate(model: MlpModel, dataset: Dataset) -> dict:
    outputs = model.forward(dataset.x)
    metrics = {'loss': loss_of(outputs, dataset.y, model.kind)}
    if model.head == 'classification':
        metrics['accuracy'] = float(np.mean(np.argmax(outputs, axis=0) == dataset.y))
    else:
        metrics['accuracy'] = None
    metrics.update(
        sparsity=[measure_sparsity(weight) for weight in model.effective_weights()],
        ranks=list(model.active_ranks()),
        total_params=sum(layer.weight.size for layer in model.layers) + model.adapter_count(),
        adapter_params=model.adapter_count(),
        mergeable=mergeable(model, dataset.x),
    )
    return metrics


class RunResult(Initializer):
    spec: PipelineSpec
    task: Task
    base: CompressedBase
    model: MlpModel
    no_tune: dict
    metrics: dict
    training: TrainResult
    config: RankConfig
    search: Optional[SearchState] = None
    artifacts: dict[str, bytes]
    inference_bytes = 0
    rss = 0

    @property
    def method(self) -> str:
        return self.spec.method

    @property
    def storage_bytes(self) -> int:
        return sum(map(len, self.artifacts.values()))

    @property
    def adapter_bytes(self) -> int:
        return len(self.artifacts.get('adapter.sqck', b''))

    def precision(self) -> str:
        base = self.spec.quant.precision_label() if self.spec.method_info.quantized else "FP32"
        return base if 'adapter.sqck' not in self.artifacts else f"{base} + FP32"

    def inference_macs(self) -> int:
        """Multiply-accumulates per sample; unmerged adapters add r·(in + out)."""
        macs = sum(layer.weight.size for layer in self.model.layers)
        if 'adapter.sqck' in self.artifacts:
            macs += self.model.adapter_count()
        return macs

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, data in self.artifacts.items():
            path = directory / name
            path.write_bytes(data)
            written.append(path)
        return written

    def row(self) -> dict:
        return {
            'method': self.method,
            'loss': self.metrics['loss'],
            'no_tune_loss': self.no_tune['loss'],
            'accuracy': self.metrics['accuracy'],
            'ranks': list(self.config),
            'sparsity': min(self.metrics['sparsity']),
            'mergeable': self.metrics['mergeable'],
            'precision': self.precision(),
            'model_bytes': self.storage_bytes,
            'adapter_bytes': self.adapter_bytes,
            'inference_bytes': self.inference_bytes,
            'inference_macs': self.inference_macs(),
            'seconds': self.training.seconds,
            'steps_per_second': self.training.steps_per_second,
        }


def run_metadata(spec: PipelineSpec) -> dict:
    metadata = {
        'method': spec.method,
        'sparsity': spec.sparsity,
        'seed': spec.seed,
    }
    if spec.method_info.quantized:
        metadata['bits'] = spec.quant.bits
    return metadata


def select_config(
    spec: PipelineSpec, model: MlpModel, task: Task
) -> tuple[RankConfig, Optional[SearchState]]:
    params = spec.search_params()
    if params.turns and params.neighbors:
        state = search_model(model, params, task.validation)
        return state.anchor, state
    return heuristic_config(model.rank_spaces), None


def run_pipeline(spec: PipelineSpec, progress: Progress = None) -> RunResult:
    spec.validate()
    method = spec.method_info

    def report(message: str) -> None:
        if progress:
            progress(f"{spec.method}: {message}")

    task = make_task(spec.task, spec.seed)
    base = compress(spec, task)
    report(f"base sparsity {', '.join(f'{value:.3f}' for value in base.sparsity())}")

    model = build_model(spec, base)
    frozen_bases = [layer.weight.tobytes() for layer in model.layers]
    no_tune = evaluate(model, task.test)
    report(f"no-tune loss {no_tune['loss']:.6g}")

    with stage('fine-tune'):
        model, training = finetune(
            model,
            task.train,
            spec.train_config(),
            lambda epoch, value: report(f"epoch {epoch} loss {value:.6g}"),
        )
    if [layer.weight.tobytes() for layer in model.layers] != frozen_bases:
        raise StageError('fine-tune', InvariantError("base weights changed during fine-tuning"))

    config, state = select_config(spec, model, task)
    model.set_active_ranks(config)
    report(f"ranks {config}")
    metrics = evaluate(model, task.test)

    metadata = run_metadata(spec)
    metadata.update(head=base.head, dims=base.dims, layers=len(model.layers))
    if method.mode == VANILLA_LORA:
        base_tensors = base.tensors(include_masks=False)
        tensors, adapter_metadata = adapter_tensors(model)
        artifacts = {
            'base.sqck': encode_checkpoint(base_tensors, {**base.metadata(), **metadata}),
            'adapter.sqck': encode_checkpoint(tensors, {**adapter_metadata, **metadata}),
        }
        inference_bytes = payload_bytes(base_tensors) + payload_bytes(tensors)
    else:
        merged = merged_tensors(merge_model(model))
        merged_base = {**metadata, 'mode': method.mode}
        if method.quantized:
            merged_base.update(
                bits=spec.quant.bits,
                group_size=spec.quant.group_size,
                range_mode=spec.quant.range_mode,
            )
        artifacts = {'model.sqck': encode_checkpoint(merged, merged_base)}
        inference_bytes = payload_bytes(merged)

    report(f"loss {metrics['loss']:.6g}, mergeable {metrics['mergeable']}")
    return RunResult(
        spec=spec,
        task=task,
        base=base,
        model=model,
        no_tune=no_tune,
        metrics=metrics,
        training=training,
        config=config,
        search=state,
        artifacts=artifacts,
        inference_bytes=inference_bytes,
        rss=resident_bytes(),
    )


class CostReport(Initializer):
    rows: list[dict]
    storage_ok: bool
    inference_ok: bool
    host: dict

    def flags(self) -> dict:
        return {'storage_ordering': self.storage_ok, 'inference_ordering': self.inference_ok}


def _strictly_decreasing(values: Sequence[float]) -> bool:
    return all(a > b for a, b in zip(values, values[1:]))


def cost_report(results: Iterable[RunResult], host: Optional[dict] = None) -> CostReport:
    """Rows in canonical order and the orderings of the deliverables.

    storage:   lora pair > sparsepeft merged > sqft pair > qa merged
    inference: qa < sqft < sparsepeft < lora"""

    by_method = {result.method: result for result in results}
    missing = [name for name in CANONICAL if name not in by_method]
    if missing:
        raise ConfigError(f"cost report needs runs of {', '.join(missing)}")
    rows = [by_method[name].row() for name in CANONICAL]
    storage = [row['model_bytes'] for row in rows]
    inference = [by_method[name].inference_bytes for name in CANONICAL]
    storage_ok = _strictly_decreasing(storage)
    inference_ok = _strictly_decreasing(inference)
    if not storage_ok:
        warn(f"cost report: storage ordering violated: {dict(zip(CANONICAL, storage))}")
    if not inference_ok:
        warn(f"cost report: inference memory ordering violated: {dict(zip(CANONICAL, inference))}")
    if host is None:
        host = get_host_facts()
    host['rss'] = max([host.get('rss', 0)] + [result.rss for result in by_method.values()])
    return CostReport(rows=rows, storage_ok=storage_ok, inference_ok=inference_ok, host=host)


async def compare(
    spec: PipelineSpec, progress: Progress = None
) -> tuple[list[RunResult], CostReport]:
    """The four canonical methods on the same task and seed, in worker threads."""
    specs = [spec.replace(method=name) for name in CANONICAL]
    for each in specs:
        each.validate()
    results = await in_threads(lambda each: run_pipeline(each, progress), specs)
    for result in results:
        if isinstance(result, BaseException):
            raise result
    return list(results), cost_report(results)


def recovery(spec: PipelineSpec, progress: Progress = None) -> dict:
    """How much of the compression loss fine-tuning wins back."""
    result = run_pipeline(spec, progress)
    no_tune = result.no_tune['loss']
    tuned = result.metrics['loss']
    return {
        'method': spec.method,
        'sparsity': spec.sparsity,
        'teacher_loss': result.task.noise_floor,
        'no_tune_loss': no_tune,
        'loss': tuned,
        'recovery_ratio': tuned / no_tune if no_tune else None,
    }


DEFAULT_SWEEP = (0.3, 0.4, 0.5, 0.6, 0.7)


def sparsity_sweep(
    spec: PipelineSpec, levels: Sequence[float] = DEFAULT_SWEEP, progress: Progress = None
) -> list[dict]:
    rows = []
    for level in levels:
        result = run_pipeline(spec.replace(sparsity=level), progress)
        rows.append(
            {
                'sparsity': level,
                'measured': min(result.metrics['sparsity']),
                'no_tune_loss': result.no_tune['loss'],
                'loss': result.metrics['loss'],
                'accuracy': result.metrics['accuracy'],
            }
        )
    return rows


__all__ = (
    'CANONICAL',
    'CompressedBase',
    'CostReport',
    'DEFAULT_SWEEP',
    'METHODS',
    'Method',
    'PipelineSpec',
    'RunResult',
    'adapter_tensors',
    'attach_adapters',
    'base_from_container',
    'build_model',
    'compare',
    'compress',
    'cost_report',
    'evaluate',
    'merge_model',
    'merged_tensors',
    'merged_weights',
    'mergeable',
    'prune_stage',
    'quantize_stage',
    'recovery',
    'run_pipeline',
    'sparsity_sweep',
)
