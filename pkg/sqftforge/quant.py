"""Group-wise affine integer quantization.

code = clamp(round(w / s) + z, 0, Q_p) and w ≈ s · (code − z), with one
(s, z) pair per (row, group). A group is a run of group_size consecutive
columns, or the whole row when group_size is None. Rounding is
half-away-from-zero everywhere."""

from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Matrix, frobenius_sq, matmul
from .utils import Initializer, initializer, warn

RANGE_MODES = frozenset({'half', 'full'})
METHODS = frozenset({'off', 'rtn', 'gptq_lite'})


def q_max(bits: int, range_mode: str = 'half') -> int:
    if not 2 <= bits <= 8:
        raise ConfigError(f"bit-width must be between 2 and 8, got {bits}")
    if range_mode == 'half':
        return 2 ** (bits - 1) - 1
    elif range_mode == 'full':
        return 2**bits - 1
    raise ConfigError(f"unknown range mode {range_mode!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    whole = np.trunc(x)
    # x - trunc(x) is exact, so ties are detected without floor(x + 0.5) drift
    return whole + np.where(np.abs(x - whole) >= 0.5, np.sign(x), 0.0)


class QuantParams(Initializer):
    bits: int
    scales: np.ndarray
    zeros: np.ndarray
    group_size: Optional[int] = None
    range_mode = 'half'

    @initializer
    def q_max(self) -> int:
        return q_max(self.bits, self.range_mode)

    @property
    def rows(self) -> int:
        return self.scales.shape[0]

    def group_width(self, cols: int) -> int:
        return cols if self.group_size is None else self.group_size

    def check(self, shape: tuple[int, int]) -> None:
        rows, cols = shape
        width = self.group_width(cols)
        if cols % width or self.scales.shape != (rows, cols // width):
            raise ShapeError(
                f"quantization groups {self.scales.shape} (group size {width}) "
                f"do not fit a {rows}x{cols} weight"
            )
        if self.zeros.shape != self.scales.shape:
            raise ShapeError(f"zeros {self.zeros.shape} and scales {self.scales.shape} differ")

    def expand(self, values: np.ndarray, cols: int) -> np.ndarray:
        return np.repeat(values, self.group_width(cols), axis=1)

    def element_scales(self, cols: int) -> np.ndarray:
        return self.expand(self.scales, cols)

    def element_zeros(self, cols: int) -> np.ndarray:
        return self.expand(self.zeros, cols)

    def __eq__(self, other):
        return (
            isinstance(other, QuantParams)
            and self.bits == other.bits
            and self.group_size == other.group_size
            and self.range_mode == other.range_mode
            and np.array_equal(self.scales, other.scales)
            and np.array_equal(self.zeros, other.zeros)
        )

    def __repr__(self):
        return (
            f"QuantParams(bits={self.bits}, group_size={self.group_size}, "
            f"range_mode={self.range_mode!r}, groups={self.scales.shape})"
        )


class QuantizedTensor(Initializer):
    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def __repr__(self):
        return f"QuantizedTensor(shape={self.shape}, params={self.params!r})"


def _group_ranges(w: Matrix, width: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = w.shape
    grouped = w.reshape(rows, cols // width, width)
    low = np.minimum(grouped.min(axis=2), 0.0)
    high = np.maximum(grouped.max(axis=2), 0.0)
    return low, high


def calibrate_params(
    w: Matrix,
    bits: int,
    group_size: Optional[int] = None,
    range_mode: str = 'half',
) -> QuantParams:
    """Scale and zero point per (row, group) from the group's value range.

    The range is widened to contain 0, so the zero point needs no clamping
    and an exact 0 always quantizes to z and dequantizes to 0.0. Scales are
    rounded to float32 values so they survive a checkpoint unchanged."""

    if not np.all(np.isfinite(w)):
        raise DataError("cannot calibrate quantization on non-finite weights")
    qmax = q_max(bits, range_mode)
    rows, cols = w.shape
    width = cols if group_size is None else group_size
    if width <= 0 or cols % width:
        raise ShapeError(f"group size {width} does not divide {cols} columns")

    low, high = _group_ranges(w, width)
    span = high - low
    degenerate = span == 0
    if np.any(degenerate) and rows * cols:
        warn(f"quantization: {int(degenerate.sum())} all-zero group(s), using unit scale")
    scales = np.where(degenerate, 1.0, span / qmax)
    scales = scales.astype(np.float32).astype(np.float64)
    scales[~(scales > 0)] = 1.0
    zeros = np.clip(round_half_away(-low / scales), 0, qmax).astype(np.int64)

    return QuantParams(
        bits=bits,
        group_size=group_size,
        range_mode=range_mode,
        scales=scales,
        zeros=zeros,
    )


def quantize_codes(w: Matrix, params: QuantParams) -> np.ndarray:
    params.check(w.shape)
    cols = w.shape[1]
    codes = round_half_away(w / params.element_scales(cols)) + params.element_zeros(cols)
    return np.clip(codes, 0, params.q_max).astype(np.uint8)


def quantize_rtn(w: Matrix, params: QuantParams) -> QuantizedTensor:
    return QuantizedTensor(codes=quantize_codes(w, params), params=params)


def dequantize(q: QuantizedTensor) -> Matrix:
    params = q.params
    cols = q.shape[1]
    offsets = q.codes.astype(np.int64) - params.element_zeros(cols)
    return params.element_scales(cols) * offsets


def recon_error(w: Matrix, w_hat: Matrix, calib_x: Matrix) -> float:
    if w.shape != w_hat.shape or calib_x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"reconstruction shapes {w.shape}, {w_hat.shape}, {calib_x.shape} do not line up"
        )
    return frobenius_sq(matmul(w - w_hat, calib_x.T))


def _upper_inverse_factor(calib_x: Matrix) -> np.ndarray:
    """Upper Cholesky factor of (XᵀX + λI)⁻¹ with λ = 0.01·mean(diag XᵀX)."""
    cols = calib_x.shape[1]
    hessian = calib_x.T @ calib_x
    damp = 0.01 * float(np.mean(np.diag(hessian)))
    if not damp > 0:
        damp = 1.0
    hessian[np.diag_indices(cols)] += damp
    inverse = np.linalg.inv(hessian)
    inverse = (inverse + inverse.T) / 2
    return np.linalg.cholesky(inverse).T


def quantize_gptq_lite(
    w: Matrix,
    calib_x: Matrix,
    bits: int,
    group_size: Optional[int] = None,
    range_mode: str = 'half',
    mask: Optional[np.ndarray] = None,
) -> tuple[QuantizedTensor, float]:
    """Greedy column-by-column quantization with error feedback.

    Each column is rounded, and its residual is pushed onto the columns
    not yet quantized through the damped inverse Hessian of the
    calibration inputs. Pruned positions (mask False, or exact zeros when
    no mask is given) stay pinned to the zero point. The result never has
    a larger reconstruction error than round-to-nearest."""

    if calib_x.ndim != 2 or calib_x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"calibration shape {calib_x.shape} does not match weight columns {w.shape[1]}"
        )
    rows, cols = w.shape
    pinned = (w == 0) if mask is None else ~mask

    baseline = quantize_rtn(w, calibrate_params(w, bits, group_size, range_mode))
    baseline.codes[pinned] = baseline.params.element_zeros(cols)[pinned]
    baseline_error = recon_error(w, dequantize(baseline), calib_x)

    width = cols if group_size is None else group_size
    factor = _upper_inverse_factor(calib_x)
    work = np.array(w, dtype=np.float64, copy=True)
    qmax = q_max(bits, range_mode)

    if group_size is None:
        params = baseline.params
    else:
        params = QuantParams(
            bits=bits,
            group_size=group_size,
            range_mode=range_mode,
            scales=np.ones((rows, cols // width)),
            zeros=np.zeros((rows, cols // width), dtype=np.int64),
        )
    codes = np.zeros((rows, cols), dtype=np.uint8)

    for j in range(cols):
        group = j // width
        if group_size is not None and j % width == 0:
            local = calibrate_params(work[:, j : j + width], bits, None, range_mode)
            params.scales[:, group] = local.scales[:, 0]
            params.zeros[:, group] = local.zeros[:, 0]
        scale = params.scales[:, group]
        zero = params.zeros[:, group]
        column = work[:, j]
        code = np.clip(round_half_away(column / scale) + zero, 0, qmax)
        code = np.where(pinned[:, j], zero, code)
        codes[:, j] = code
        residual = (column - scale * (code - zero)) / factor[j, j]
        work[:, j + 1 :] -= np.outer(residual, factor[j, j + 1 :])

    result = QuantizedTensor(codes=codes, params=params)
    error = recon_error(w, dequantize(result), calib_x)
    if error > baseline_error:
        warn(
            f"gptq-lite: compensated error {error:.6g} exceeds round-to-nearest "
            f"{baseline_error:.6g}, keeping round-to-nearest"
        )
        return baseline, baseline_error
    return result, error


class QuantSpec(Initializer):
    method = 'gptq_lite'
    bits = 4
    group_size: Optional[int] = None
    range_mode = 'half'

    @property
    def enabled(self) -> bool:
        return self.method != 'off'

    def validate(self) -> 'QuantSpec':
        if self.method not in METHODS:
            raise ConfigError(f"unknown quantization method {self.method!r}")
        if self.range_mode not in RANGE_MODES:
            raise ConfigError(f"unknown range mode {self.range_mode!r}")
        q_max(self.bits, self.range_mode)
        if self.group_size is not None and self.group_size <= 0:
            raise ConfigError(f"group size must be positive, got {self.group_size}")
        return self

    def quantize(
        self, w: Matrix, calib_x: Matrix, mask: Optional[np.ndarray] = None
    ) -> QuantizedTensor:
        if self.method == 'gptq_lite':
            quantized, _ = quantize_gptq_lite(
                w, calib_x, self.bits, self.group_size, self.range_mode, mask=mask
            )
            return quantized
        elif self.method == 'rtn':
            params = calibrate_params(w, self.bits, self.group_size, self.range_mode)
            return quantize_rtn(w, params)
        raise ConfigError("quantization is switched off")

    def precision_label(self) -> str:
        return f"INT{self.bits}" if self.enabled else "FP32"


__all__ = (
    'METHODS',
    'QuantParams',
    'QuantSpec',
    'QuantizedTensor',
    'RANGE_MODES',
    'calibrate_params',
    'dequantize',
    'q_max',
    'quantize_codes',
    'quantize_gptq_lite',
    'quantize_rtn',
    'recon_error',
    'round_half_away',
)
