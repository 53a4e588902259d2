"""Rank-configuration selection: the median heuristic and hill climbing.

A configuration is one rank per adapterized layer. The climber keeps an
anchor, samples unvisited neighbours whose per-layer positions in the
rank space differ by at most step, and moves to the best neighbour only
when it strictly beats the anchor."""

from collections import Counter
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

from .adapter import RankSpace
from .errors import ConfigError
from .tensor import Rng
from .utils import Initializer

ENUMERATION_LIMIT = 4096


class RankConfig(tuple):
    @property
    def total(self) -> int:
        return sum(self)

    def __str__(self):
        return '/'.join(map(str, self))


class SearchParams(Initializer):
    turns = 10
    neighbors = 8
    step = 1
    eval_samples = 256
    seed = 0

    def validate(self) -> 'SearchParams':
        if self.turns < 0 or self.neighbors < 0:
            raise ConfigError("search turns and neighbors must not be negative")
        if self.step <= 0 or self.eval_samples <= 0:
            raise ConfigError("search step and eval_samples must be positive")
        return self


class SearchState(Initializer):
    anchor: RankConfig
    anchor_score: float
    visited: set
    evaluations = 0

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.trace = [(self.anchor, self.anchor_score)]

    def rank_distribution(self) -> list[Counter]:
        """How often each rank was visited, per layer."""
        layers = len(self.anchor)
        return [Counter(config[i] for config in self.visited) for i in range(layers)]


def heuristic_config(spaces: Sequence[RankSpace]) -> RankConfig:
    """The median of every rank space; the lower middle one for even sizes."""
    if not spaces:
        raise ConfigError("no rank spaces to choose from")
    return RankConfig(space[len(space) // 2] for space in spaces)


def _positions(config: Sequence[int], spaces: Sequence[RankSpace]) -> tuple[int, ...]:
    if len(config) != len(spaces):
        raise ConfigError(f"configuration {tuple(config)} does not match {len(spaces)} layers")
    return tuple(space.position(rank) for space, rank in zip(spaces, config))


def _shift(
    positions: Sequence[int], offsets: Sequence[int], spaces: Sequence[RankSpace]
) -> Optional[RankConfig]:
    if not any(offsets):
        return None
    moved = []
    for position, offset, space in zip(positions, offsets, spaces):
        position += offset
        if not 0 <= position < len(space):
            return None
        moved.append(space[position])
    return RankConfig(moved)


def neighbor_sample(
    anchor: Sequence[int],
    spaces: Sequence[RankSpace],
    params: SearchParams,
    visited: set,
    rng: Rng,
) -> list[RankConfig]:
    """Up to params.neighbors distinct unvisited step-neighbours of anchor."""
    positions = _positions(anchor, spaces)
    wanted = params.neighbors
    if not wanted:
        return []
    step = params.step
    reach = range(-step, step + 1)

    if (2 * step + 1) ** len(spaces) <= ENUMERATION_LIMIT:
        candidates = []
        for offsets in product(reach, repeat=len(spaces)):
            config = _shift(positions, offsets, spaces)
            if config is not None and config not in visited:
                candidates.append(config)
        if len(candidates) <= wanted:
            return candidates
        return rng.choice(candidates, wanted)

    found = []
    seen = set()
    for _ in range(wanted * 64):
        offsets = rng.integers(-step, step + 1, size=len(spaces))
        config = _shift(positions, offsets.tolist(), spaces)
        if config is None or config in visited or config in seen:
            continue
        seen.add(config)
        found.append(config)
        if len(found) == wanted:
            break
    return found


def _preference(item: tuple[RankConfig, float]):
    config, score = item
    return -score, config.total, tuple(config)


def climb(
    spaces: Sequence[RankSpace],
    evaluate: Callable[[RankConfig], float],
    params: SearchParams,
    start: Optional[Sequence[int]] = None,
    rng: Optional[Rng] = None,
    evaluate_many: Optional[Callable[[list], list]] = None,
) -> SearchState:
    """Hill climbing over rank configurations against any scoring function.

    evaluate_many, when given, scores a whole turn of candidates at once
    (for instance in worker threads); it must return scores in order."""

    params.validate()
    spaces = [RankSpace(space) for space in spaces]
    anchor = RankConfig(heuristic_config(spaces) if start is None else start)
    _positions(anchor, spaces)
    rng = rng or Rng(params.seed, 'search', 'neighbors')
    evaluate_many = evaluate_many or (lambda configs: [evaluate(config) for config in configs])

    state = SearchState(anchor=anchor, anchor_score=evaluate(anchor), visited={anchor})
    state.evaluations = 1

    for _ in range(params.turns):
        candidates = neighbor_sample(state.anchor, spaces, params, state.visited, rng)
        if not candidates:
            break
        state.visited.update(candidates)
        scores = evaluate_many(candidates)
        state.evaluations += len(candidates)
        best, best_score = min(zip(candidates, scores), key=_preference)
        if best_score > state.anchor_score:
            state.anchor = best
            state.anchor_score = best_score
        state.trace.append((state.anchor, state.anchor_score))

    return state


def evaluate_config(model, config: Sequence[int], data) -> float:
    """Accuracy for classification, negative mean squared error for regression.

    The ranks are passed to the forward pass directly, so the model's
    active ranks are left as they were."""

    outputs = model.forward(data.x, ranks=tuple(config))
    if model.head == 'classification':
        return float(np.mean(np.argmax(outputs, axis=0) == data.y))
    return -float(np.mean(np.square(outputs - data.y)))


def search_model(
    model,
    params: SearchParams,
    validation,
    evaluate_many: Optional[Callable[[list], list]] = None,
) -> SearchState:
    """Climb from the heuristic configuration on a proxy subset of validation."""
    params.validate()
    proxy = validation.sample(params.eval_samples, Rng(params.seed, 'search', 'proxy'))
    return climb(
        model.rank_spaces,
        lambda config: evaluate_config(model, config, proxy),
        params,
        rng=Rng(params.seed, 'search', 'neighbors'),
        evaluate_many=evaluate_many,
    )


def hill_climb(model, params: SearchParams, validation) -> RankConfig:
    return search_model(model, params, validation).anchor


__all__ = (
    'ENUMERATION_LIMIT',
    'RankConfig',
    'SearchParams',
    'SearchState',
    'climb',
    'evaluate_config',
    'heuristic_config',
    'hill_climb',
    'neighbor_sample',
    'search_model',
)
