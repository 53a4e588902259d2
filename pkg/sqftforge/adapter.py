"""Elastic low-rank adapters and the three ways of attaching them.

vanilla_lora    Y = (W + Δ)·X            Δ = (α/c)·B[:, :c]·A[:c, :]
sparse_peft     Y = (W^p + Δ ⊙ M)·X
qa_sparse_peft  Y = deq(clamp(round((W^p + Δ ⊙ M)/s) + z, 0, Q_p))·X

Every mode builds its effective weight first and multiplies once, which is
exactly what a merged layer computes, so merged and unmerged outputs agree
bit for bit."""

from typing import Iterable, Optional, Union

import numpy as np

from .errors import ConfigError, InvariantError, ShapeError
from .quant import QuantizedTensor, QuantParams, dequantize, quantize_rtn
from .sparsity import SparsityMask
from .tensor import Matrix, Rng, check_same_shape, frozen, matmul
from .utils import Initializer, initializer

VANILLA_LORA = 'vanilla_lora'
SPARSE_PEFT = 'sparse_peft'
QA_SPARSE_PEFT = 'qa_sparse_peft'
MODES = (VANILLA_LORA, SPARSE_PEFT, QA_SPARSE_PEFT)

RESCALES = frozenset({'active', 'max'})


class RankSpace(tuple):
    """Strictly decreasing positive ranks; the first one is the maximum."""

    def __new__(cls, values: Iterable[int]):
        values = tuple(int(value) for value in values)
        if not values:
            raise ConfigError("rank space must not be empty")
        if values[-1] <= 0:
            raise ConfigError(f"ranks must be positive: {values}")
        if any(a <= b for a, b in zip(values, values[1:])):
            raise ConfigError(f"rank space must be strictly decreasing: {values}")
        return super().__new__(cls, values)

    @classmethod
    def parse(cls, values: Union[int, str, Iterable[int]]) -> 'RankSpace':
        """Accept a single rank, a comma separated string or any iterable."""
        if isinstance(values, int):
            values = (values,)
        elif isinstance(values, str):
            values = (int(value) for value in values.split(',') if value.strip())
        return cls(sorted(set(values), reverse=True))

    @property
    def max_rank(self) -> int:
        return self[0]

    def check_fits(self, in_dim: int, out_dim: int) -> None:
        if self.max_rank > min(in_dim, out_dim):
            raise ConfigError(
                f"rank {self.max_rank} too large for a {out_dim}x{in_dim} layer"
            )

    def fit(self, in_dim: int, out_dim: int) -> 'RankSpace':
        limit = min(in_dim, out_dim)
        fitting = [value for value in self if value <= limit]
        return type(self)(fitting or (limit,))

    def position(self, rank: int) -> int:
        try:
            return self.index(rank)
        except ValueError:
            raise ConfigError(f"rank {rank} is not in {list(self)}") from None

    def __str__(self):
        return ','.join(map(str, self))


class ElasticAdapter(Initializer):
    A: Matrix
    B: Matrix
    rank_space: RankSpace
    active_rank: int
    alpha = 64.0
    rescale = 'active'

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.B.shape[0]

    def check_rank(self, rank: Optional[int]) -> int:
        if rank is None:
            return self.active_rank
        self.rank_space.position(rank)
        return rank

    def scaling(self, rank: Optional[int] = None) -> float:
        rank = self.check_rank(rank)
        if self.rescale == 'max':
            return self.alpha / self.rank_space.max_rank
        return self.alpha / rank

    def set_active_rank(self, rank: int) -> None:
        self.active_rank = self.check_rank(rank)

    def active_delta(self, rank: Optional[int] = None) -> Matrix:
        rank = self.check_rank(rank)
        return self.scaling(rank) * matmul(self.B[:, :rank], self.A[:rank, :])

    def sub_adapter(self, rank: Optional[int] = None) -> 'ElasticAdapter':
        """The leading-rank slice as a standalone adapter with the same delta."""
        rank = self.check_rank(rank)
        alpha = self.alpha if self.rescale == 'active' else self.scaling(rank) * rank
        return ElasticAdapter(
            A=self.A[:rank].copy(),
            B=self.B[:, :rank].copy(),
            rank_space=RankSpace((rank,)),
            active_rank=rank,
            alpha=alpha,
            rescale='active',
        )

    def copy(self) -> 'ElasticAdapter':
        return self.replace(A=self.A.copy(), B=self.B.copy())

    def __repr__(self):
        return (
            f"ElasticAdapter({self.out_dim}x{self.in_dim}, ranks={list(self.rank_space)}, "
            f"active={self.active_rank}, alpha={self.alpha})"
        )


def new_elastic_adapter(
    in_dim: int,
    out_dim: int,
    rank_space: RankSpace,
    alpha: float = 64.0,
    rng: Optional[Rng] = None,
    rescale: str = 'active',
) -> ElasticAdapter:
    """A ~ U(±1/√in_dim), B = 0, so a fresh adapter adds nothing."""
    rank_space = RankSpace(rank_space)
    rank_space.check_fits(in_dim, out_dim)
    if rescale not in RESCALES:
        raise ConfigError(f"unknown rescale rule {rescale!r}")
    if not alpha > 0:
        raise ConfigError(f"adapter alpha must be positive, got {alpha}")
    rng = rng or Rng()
    bound = 1.0 / np.sqrt(in_dim)
    return ElasticAdapter(
        A=rng.uniform(-bound, bound, (rank_space.max_rank, in_dim)),
        B=np.zeros((out_dim, rank_space.max_rank)),
        rank_space=rank_space,
        active_rank=rank_space.max_rank,
        alpha=float(alpha),
        rescale=rescale,
    )


def sparse_delta(
    adapter: ElasticAdapter, mask: SparsityMask, rank: Optional[int] = None
) -> Matrix:
    """L^p = (BA) ⊙ M."""
    delta = adapter.active_delta(rank)
    check_same_shape(delta, mask, "adapter mask")
    return np.where(mask, delta, 0.0)


def merge_sparsepeft(
    w_p: Matrix, l_p: Matrix, mask: Optional[SparsityMask] = None
) -> Matrix:
    """W^p + L^p, refusing any L^p entry outside the kept positions."""
    check_same_shape(w_p, l_p, "merge")
    support = (w_p != 0) if mask is None else mask
    check_same_shape(w_p, support, "merge mask")
    stray = np.count_nonzero((l_p != 0) & ~support)
    if stray:
        raise InvariantError(
            f"refusing to merge: {stray} adapter entries fall on pruned positions"
        )
    return w_p + l_p


def merge_qa(
    w_p: Matrix,
    l_p: Matrix,
    params: QuantParams,
    mask: Optional[SparsityMask] = None,
) -> QuantizedTensor:
    """clamp(round((W^p + L^p)/s) + z, 0, Q_p) with the base's shared (s, z)."""
    check_same_shape(w_p, l_p, "merge")
    params.check(w_p.shape)
    if mask is not None:
        stray = np.count_nonzero((l_p != 0) & ~mask)
        if stray:
            raise InvariantError(
                f"refusing to merge: {stray} adapter entries fall on pruned positions"
            )
    return quantize_rtn(w_p + l_p, params)


def merge_dense(w: Matrix, delta: Matrix) -> Matrix:
    """Plain W + BA; densifies a sparse W."""
    check_same_shape(w, delta, "merge")
    return w + delta


class AdapterizedLayer(Initializer):
    """A frozen base weight with one elastic adapter attached.

    weight is the float base the adapter is added to: a dense W, a pruned
    W^p, or the dequantized sparse quantized base. params is present when
    the base is quantized; in qa_sparse_peft mode those are the scales and
    zeros shared with the adapter."""

    weight: Matrix
    adapter: ElasticAdapter
    mode = VANILLA_LORA
    mask: Optional[SparsityMask] = None
    params: Optional[QuantParams] = None

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.weight = frozen(self.weight)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown adapter mode {self.mode!r}")
        if self.mode != VANILLA_LORA and self.mask is None:
            raise ConfigError(f"{self.mode} needs a sparsity mask")
        if self.mode == QA_SPARSE_PEFT and self.params is None:
            raise ConfigError("qa_sparse_peft needs the base quantization parameters")
        shape = (self.adapter.out_dim, self.adapter.in_dim)
        if self.weight.shape != shape:
            raise ShapeError(f"adapter {shape} does not fit weight {self.weight.shape}")
        if self.mask is not None and self.mask.shape != shape:
            raise ShapeError(f"mask {self.mask.shape} does not fit weight {shape}")
        if self.params is not None:
            self.params.check(shape)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def masked(self) -> bool:
        return self.mode != VANILLA_LORA

    @initializer
    def quantized_base(self) -> Optional[QuantizedTensor]:
        if self.params is None:
            return None
        return quantize_rtn(self.weight, self.params)

    def set_active_rank(self, rank: int) -> None:
        self.adapter.set_active_rank(rank)

    def delta(self, rank: Optional[int] = None) -> Matrix:
        if self.masked:
            return sparse_delta(self.adapter, self.mask, rank)
        return self.adapter.active_delta(rank)

    def effective_weight(
        self, rank: Optional[int] = None, straight_through: bool = False
    ) -> Matrix:
        """The weight the layer multiplies by.

        With straight_through the qa rounding is replaced by the identity
        (the clamp stays), which is the function whose gradient training
        uses."""

        combined = self.weight + self.delta(rank)
        if self.mode != QA_SPARSE_PEFT:
            return combined
        if straight_through:
            return clamp_surrogate(combined, self.params)
        return dequantize(quantize_rtn(combined, self.params))

    def forward(self, x: Matrix, rank: Optional[int] = None) -> Matrix:
        if x.shape[0] != self.in_dim:
            raise ShapeError(f"input has {x.shape[0]} rows, layer expects {self.in_dim}")
        return matmul(self.effective_weight(rank), x)

    def merge(self, force: bool = False) -> Union[Matrix, QuantizedTensor]:
        delta = self.delta()
        if self.mode == SPARSE_PEFT:
            return merge_sparsepeft(self.weight, delta, self.mask)
        elif self.mode == QA_SPARSE_PEFT:
            return merge_qa(self.weight, delta, self.params, self.mask)
        if not force:
            raise InvariantError(
                "vanilla adapters are not mergeable without losing sparsity or precision"
            )
        return merge_dense(self.weight, delta)

    def copy(self) -> 'AdapterizedLayer':
        return self.replace(adapter=self.adapter.copy())

    def __repr__(self):
        return f"AdapterizedLayer({self.mode}, {self.adapter!r})"


def clamp_surrogate(combined: Matrix, params: QuantParams) -> Matrix:
    """s·(clamp(v/s + z, 0, Q_p) − z): the quantizer without its rounding."""
    cols = combined.shape[1]
    scales = params.element_scales(cols)
    zeros = params.element_zeros(cols)
    return scales * (np.clip(combined / scales + zeros, 0, params.q_max) - zeros)


def inside_clamp(combined: Matrix, params: QuantParams) -> np.ndarray:
    """Where v/s + z lies in [0, Q_p]; the straight-through gradient is 1 there."""
    cols = combined.shape[1]
    codes = combined / params.element_scales(cols) + params.element_zeros(cols)
    return (codes >= 0) & (codes <= params.q_max)


__all__ = (
    'AdapterizedLayer',
    'ElasticAdapter',
    'MODES',
    'QA_SPARSE_PEFT',
    'RESCALES',
    'RankSpace',
    'SPARSE_PEFT',
    'VANILLA_LORA',
    'clamp_surrogate',
    'inside_clamp',
    'merge_dense',
    'merge_qa',
    'merge_sparsepeft',
    'new_elastic_adapter',
    'sparse_delta',
)
