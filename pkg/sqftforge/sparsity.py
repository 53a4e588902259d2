"""Importance scoring, mask construction and sparsity accounting.

Calibration matrices hold one sample per row, so feature j of a
calibration matrix lines up with column j of the weight it scores.
Masks are boolean matrices: True keeps an entry, False prunes it."""

from math import floor
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Matrix, check_same_shape, col_l2_norms, ensure_finite

SparsityMask = np.ndarray

GROUPS = frozenset({'row', 'matrix'})
_group_aliases = {'per_row': 'row', 'per_matrix': 'matrix'}


def check_level(level: float) -> float:
    level = float(level)
    if not 0.0 <= level < 1.0:
        raise ConfigError(f"sparsity level must be in [0, 1), got {level}")
    return level


def check_group(group: str) -> str:
    group = _group_aliases.get(group, group)
    if group not in GROUPS:
        raise ConfigError(f"unknown comparison group {group!r}")
    return group


def score_magnitude(w: Matrix, calib_x: Optional[Matrix] = None) -> Matrix:
    return np.abs(w)


def score_wanda(w: Matrix, calib_x: Matrix) -> Matrix:
    if calib_x.ndim != 2 or calib_x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"calibration shape {calib_x.shape} does not match weight columns {w.shape[1]}"
        )
    return ensure_finite(np.abs(w) * col_l2_norms(calib_x)[np.newaxis, :])


scorers: dict[str, Callable[[Matrix, Optional[Matrix]], Matrix]] = {
    'magnitude': score_magnitude,
    'wanda': score_wanda,
}


def prune_count(level: float, group_size: int) -> int:
    # the epsilon keeps 0.29 * 100 from flooring to 28
    return min(group_size, floor(level * group_size + 1e-9))


def build_mask(scores: Matrix, level: float, group: str = 'row') -> SparsityMask:
    """Prune the floor(level * group size) lowest scores of every group.

    Ties go to the lowest row-major index, so equal scores are pruned in
    reading order and the result is fully deterministic."""

    ensure_finite(scores, "scores")
    level = check_level(level)
    group = check_group(group)
    mask = np.ones(scores.shape, dtype=bool)

    if group == 'row':
        k = prune_count(level, scores.shape[1])
        if k:
            order = np.argsort(scores, axis=1, kind='stable')
            np.put_along_axis(mask, order[:, :k], False, axis=1)
    else:
        k = prune_count(level, scores.size)
        if k:
            order = np.argsort(scores, axis=None, kind='stable')
            mask.flat[order[:k]] = False

    return mask


def apply_mask(w: Matrix, mask: SparsityMask) -> Matrix:
    check_same_shape(w, mask, "mask")
    # W ⊙ M; pruned entries come out as +0.0
    return np.where(mask, w, 0.0)


def measure_sparsity(w: np.ndarray) -> float:
    if w.size == 0:
        return 0.0
    return float(np.count_nonzero(w == 0)) / w.size


def mask_sparsity(mask: SparsityMask) -> float:
    if mask.size == 0:
        return 0.0
    return 1.0 - float(np.count_nonzero(mask)) / mask.size


def prune(
    w: Matrix,
    level: float,
    score: str = 'wanda',
    group: str = 'row',
    calib_x: Optional[Matrix] = None,
) -> tuple[Matrix, SparsityMask]:
    """Score, build the mask and apply it: returns (W^p, M)."""
    try:
        scorer = scorers[score]
    except KeyError:
        raise ConfigError(f"unknown score {score!r}") from None
    if score == 'wanda' and calib_x is None:
        raise ConfigError("wanda scoring needs calibration inputs")
    mask = build_mask(scorer(w, calib_x), level, group)
    return apply_mask(w, mask), mask


__all__ = (
    'GROUPS',
    'SparsityMask',
    'apply_mask',
    'build_mask',
    'check_group',
    'check_level',
    'mask_sparsity',
    'measure_sparsity',
    'prune',
    'prune_count',
    'score_magnitude',
    'score_wanda',
    'scorers',
)
