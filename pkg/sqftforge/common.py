import builtins as builtins_module
from pathlib import Path
from types import ModuleType
from typing import Any, Mapping, Optional, Union
from weakref import ref as weakref

from .errors import ConfigError
from .pipeline import PipelineSpec
from .quant import QuantSpec
from .search import SearchParams
from .tasks import TaskSpec
from .train import TrainConfig
from .utils import subdict

_builtins = vars(builtins_module)


def load_config(filename: Union[Path, str], **context) -> dict[str, Any]:
    """Run a Python configuration file and return its public top-level names.

    include('other.py') runs another file, relative to the including one,
    in the same namespace."""

    builtins: dict[str, Any] = subdict(__file__=None)
    builtins.update(_builtins)
    weak_builtins = weakref(builtins)

    variables: dict[str, Any] = subdict(__builtins__=builtins)
    variables.update(context)
    weak_variables = weakref(variables)

    def include(filename):
        builtins = weak_builtins()
        variables = weak_variables()

        old_file = builtins['__file__']
        new_file = str(Path(old_file or '.').parent / filename)
        content = Path(new_file).read_bytes()
        try:
            builtins['__file__'] = new_file
            code = compile(content, new_file, 'exec')
            exec(code, variables)
        finally:
            builtins['__file__'] = old_file

    builtins['include'] = include

    include(filename)

    return {
        name: value
        for name, value in variables.items()
        if not name.startswith('_')
        and name not in context
        and not isinstance(value, ModuleType)
    }


_sections = {
    'quant': (QuantSpec, {'method', 'bits', 'group_size', 'range_mode'}),
    'train': (
        TrainConfig,
        {'epochs', 'batch_size', 'learning_rate', 'optimizer', 'nls', 'beta1', 'beta2', 'epsilon'},
    ),
    'task': (
        TaskSpec,
        {
            'kind',
            'hidden',
            'in_dim',
            'classes',
            'train_size',
            'validation_size',
            'test_size',
            'latent_dim',
            'noise',
            'input_noise',
        },
    ),
    'search': (SearchParams, {'turns', 'neighbors', 'step', 'eval_samples'}),
}

_scalars = {
    'method',
    'sparsity',
    'score',
    'group',
    'calibration',
    'ranks',
    'rank',
    'alpha',
    'rescale',
    'seed',
}


def _section(name: str, value: Any, base: Any) -> Any:
    kind, keys = _sections[name]
    if isinstance(value, kind):
        return value
    if not isinstance(value, Mapping):
        raise ConfigError(f"{name} must be a dict, got {type(value).__name__}")
    unknown = set(value) - keys
    if unknown:
        raise ConfigError(f"unknown {name} keys: {', '.join(sorted(unknown))}")
    return base.replace(**value)


def spec_from_config(
    config: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None
) -> PipelineSpec:
    """Build and validate a PipelineSpec from configuration values.

    overrides use the same keys (sections as dicts, merged key by key) and
    take precedence; None values are ignored."""

    spec = PipelineSpec()
    for source in (config, overrides or {}):
        settings = {}
        for key, value in source.items():
            if value is None:
                continue
            if key in _sections:
                if isinstance(value, Mapping):
                    value = {k: v for k, v in value.items() if v is not None}
                settings[key] = _section(key, value, getattr(spec, key))
            elif key in _scalars:
                settings[key] = value
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        spec = spec.replace(**settings)
    return spec.validate()


def load_spec(
    filename: Optional[Union[Path, str]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> PipelineSpec:
    config = {}
    if filename is not None:
        try:
            config = load_config(filename)
        except (OSError, SyntaxError) as e:
            raise ConfigError(f"{filename}: {e}") from e
    return spec_from_config(config, overrides)


__all__ = (
    'load_config',
    'load_spec',
    'spec_from_config',
)
