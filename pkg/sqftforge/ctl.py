from argparse import ArgumentParser
from pathlib import Path
from typing import Optional

from .checkpoint import load_checkpoint, save_checkpoint
from .common import load_spec
from .errors import ForgeError
from .formats import render
from .pipeline import (
    DEFAULT_SWEEP,
    METHODS,
    PipelineSpec,
    adapter_tensors,
    attach_adapters,
    base_from_container,
    build_model,
    compare,
    evaluate,
    merge_model,
    merged_tensors,
    prune_stage,
    quantize_stage,
    recovery,
    run_metadata,
    run_pipeline,
    sparsity_sweep,
)
from .search import heuristic_config, search_model
from .tasks import make_task
from .train import finetune
from .utils import warn

COMMANDS = ('prune', 'quantize', 'finetune', 'search', 'merge', 'eval', 'run', 'compare', 'sweep')


def parser(procname: str) -> ArgumentParser:
    parser = ArgumentParser(prog=Path(procname).name, description="Sparsify, quantize, fine-tune and merge small networks.")
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help="Python configuration file")
    parser.add_argument('--out', default='forge-out', help="directory for checkpoints")
    parser.add_argument('--format', choices=('text', 'json-lines'), default='text')
    parser.add_argument('--quiet', action='store_true', help="no progress on standard error")
    parser.add_argument('--force', action='store_true', help="merge even when it loses sparsity or precision")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--method', choices=sorted(METHODS))
    parser.add_argument('--sparsity', type=float)
    parser.add_argument('--score', choices=('magnitude', 'wanda'))
    parser.add_argument('--group', choices=('row', 'matrix'))
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--learning-rate', type=float)
    parser.add_argument('--turns', type=int)
    parser.add_argument('--neighbors', type=int)
    parser.add_argument('--step', type=int)
    parser.add_argument('--eval-samples', type=int)
    parser.add_argument('--levels', type=float, nargs='+', default=list(DEFAULT_SWEEP), help="sparsity levels for sweep")
    parser.add_argument('--base', help="base checkpoint (default: from --out)")
    parser.add_argument('--adapter', help="adapter checkpoint (default: from --out)")
    parser.add_argument('--checkpoint', help="checkpoint to evaluate")
    return parser


def overrides(options) -> dict:
    return {
        'seed': options.seed,
        'method': options.method,
        'sparsity': options.sparsity,
        'score': options.score,
        'group': options.group,
        'train': {'epochs': options.epochs, 'learning_rate': options.learning_rate},
        'search': {
            'turns': options.turns,
            'neighbors': options.neighbors,
            'step': options.step,
            'eval_samples': options.eval_samples,
        },
    }


class Forge:
    """One CLI invocation: resolved spec, output directory and reporting."""

    def __init__(self, spec: PipelineSpec, options):
        self.spec = spec
        self.options = options
        self.out = Path(options.out)

    def progress(self, message: str) -> None:
        if not self.options.quiet:
            warn(message)

    def emit(self, records, columns=None) -> None:
        print(render(list(records), self.options.format, columns), end='', flush=True)

    def path(self, option: Optional[str], default: str) -> Path:
        return Path(option) if option else self.out / default

    def save(self, name: str, tensors, metadata) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        size = save_checkpoint(path, tensors, metadata)
        self.progress(f"wrote {path} ({size} bytes)")
        return path

    @property
    def default_base(self) -> str:
        return 'quantized.sqck' if self.spec.method_info.quantized else 'pruned.sqck'

    def load_model(self):
        base = base_from_container(load_checkpoint(self.path(self.options.base, self.default_base)))
        adapter = load_checkpoint(self.path(self.options.adapter, 'adapter.sqck'))
        return base, adapter, attach_adapters(base, adapter)

    async def prune(self):
        spec = self.spec
        base = prune_stage(spec, make_task(spec.task, spec.seed))
        metadata = {**base.metadata(), **run_metadata(spec), 'stage': 'pruned', 'score': spec.score, 'group': spec.group}
        self.save('pruned.sqck', base.tensors(), metadata)
        self.emit([{'layer': i, 'sparsity': value} for i, value in enumerate(base.sparsity())])

    async def quantize(self):
        spec = self.spec
        container = load_checkpoint(self.path(self.options.base, 'pruned.sqck'))
        base = quantize_stage(spec, make_task(spec.task, spec.seed), base_from_container(container))
        metadata = {**container.metadata, **base.metadata(), 'stage': 'quantized', 'quant': spec.quant.method}
        self.save('quantized.sqck', base.tensors(), metadata)
        self.emit([{'layer': i, 'sparsity': value} for i, value in enumerate(base.sparsity())])

    async def finetune(self):
        spec = self.spec
        task = make_task(spec.task, spec.seed)
        base = base_from_container(load_checkpoint(self.path(self.options.base, self.default_base)))
        model = build_model(spec, base)
        model, training = finetune(
            model,
            task.train,
            spec.train_config(),
            lambda epoch, value: self.progress(f"epoch {epoch} loss {value:.6g}"),
        )
        model.set_active_ranks(heuristic_config(model.rank_spaces))
        tensors, metadata = adapter_tensors(model, selected_only=False)
        self.save('adapter.sqck', tensors, {**metadata, **run_metadata(spec)})
        self.emit([{'epoch': epoch + 1, 'loss': value} for epoch, value in enumerate(training.history)])

    async def search(self):
        spec = self.spec
        task = make_task(spec.task, spec.seed)
        _, container, model = self.load_model()
        state = search_model(model, spec.search_params(), task.validation)
        model.set_active_ranks(state.anchor)
        tensors, metadata = adapter_tensors(model, selected_only=False)
        self.save('adapter.sqck', tensors, {**container.metadata, **metadata})
        distribution = state.rank_distribution()
        self.emit(
            {
                'layer': i,
                'rank': rank,
                'score': state.anchor_score,
                'visited': dict(sorted(distribution[i].items(), reverse=True)),
                'evaluations': state.evaluations,
            }
            for i, rank in enumerate(state.anchor)
        )

    async def merge(self):
        base, container, model = self.load_model()
        merged = merge_model(model, force=self.options.force)
        metadata = {**container.metadata, 'merged': 'yes'}
        if base.quantized and any(not hasattr(weight, 'codes') for weight in merged):
            warn("merged weights are float: the adapter was added to a quantized base without requantizing")
        self.save('merged.sqck', merged_tensors(merged), {**base.metadata(), **metadata})

    async def eval(self):
        spec = self.spec
        if not self.options.checkpoint:
            self.emit([recovery(spec, self.progress)])
            return
        base = base_from_container(load_checkpoint(self.options.checkpoint))
        adapter = load_checkpoint(self.options.adapter) if self.options.adapter else None
        model = attach_adapters(base, adapter)
        metrics = evaluate(model, make_task(spec.task, spec.seed).test)
        self.emit([metrics])

    async def run(self):
        result = run_pipeline(self.spec, self.progress)
        for path in result.write(self.out):
            self.progress(f"wrote {path}")
        self.emit([result.row()])

    async def compare(self):
        _, report = await compare(self.spec, self.progress)
        self.emit(report.rows)
        self.emit([{**report.flags(), **report.host['cpu'], 'ram': report.host['memory']['ram'], 'rss': report.host['rss']}])

    async def sweep(self):
        self.emit(sparsity_sweep(self.spec, self.options.levels, self.progress))


async def main(procname, *args, **env):
    options = parser(procname).parse_args(args)
    try:
        spec = load_spec(options.config, overrides(options))
        forge = Forge(spec, options)
        await getattr(forge, options.command)()
    except (ForgeError, OSError) as e:
        warn(f"{Path(procname).name}: {e}")
        return 1
    return None


__all__ = ('COMMANDS', 'main', 'parser')
