"""Uniform int8 quantization, bf16 storage, single-bit faults and Hamming counts.

Stored words are the attack surface: int8 values are two's-complement bytes
and bf16 values are raw 16-bit IEEE patterns held in ``uint16`` arrays.
Scales are kept as float32 so the binary container round-trips them exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_matrix

DTYPES = ("int8", "bf16")
SCALE_MODES = ("per_tensor", "per_row")
_STORAGE = {"int8": np.int8, "bf16": np.uint16}
_UNSIGNED = {1: np.uint8, 2: np.uint16, 4: np.uint32, 8: np.uint64}


@dataclass(frozen=True)
class QuantizedTensor:
    dtype: str
    values: np.ndarray
    scale: np.ndarray
    zero_point: int = 0
    scale_mode: str = "per_row"
    degenerate: bool = False

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.values.dtype != _STORAGE[self.dtype] or self.values.ndim != 2:
            raise ValueError(f"{self.dtype} tensor needs 2-D {_STORAGE[self.dtype].__name__} storage")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")
        expected = self.rows if self.scale_mode == "per_row" else 1
        if self.scale.shape != (expected,):
            raise ValueError(f"expected {expected} scales, got shape {self.scale.shape}")
        if not np.all(self.scale > 0):
            raise ValueError("scales must be positive")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def bit_width(self) -> int:
        return self.values.dtype.itemsize * 8

    @property
    def n_bits(self) -> int:
        return self.values.size * self.bit_width

    def row_scales(self) -> np.ndarray:
        """Scale for every row as a float64 column vector."""
        s = self.scale.astype(np.float64)
        if self.scale_mode == "per_tensor":
            s = np.full(self.rows, s[0])
        return s.reshape(-1, 1)

    def words(self) -> np.ndarray:
        """Stored words reinterpreted as unsigned integers."""
        return self.values.view(_UNSIGNED[self.values.dtype.itemsize])

    def with_values(self, values: np.ndarray) -> "QuantizedTensor":
        return replace(self, values=values)


@dataclass(frozen=True)
class FlipLocation:
    layer_id: int
    row: int
    col: int
    bit: int

    def to_dict(self) -> dict:
        return {"layer_id": self.layer_id, "row": self.row, "col": self.col, "bit": self.bit}

    @classmethod
    def from_dict(cls, d: dict) -> "FlipLocation":
        return cls(int(d["layer_id"]), int(d["row"]), int(d["col"]), int(d["bit"]))


def float_to_bf16_bits(a) -> np.ndarray:
    """Round to bf16 (nearest, ties to even) via float32 and return the bit patterns."""
    f = np.asarray(a, dtype=np.float32)
    u = f.view(np.uint32).astype(np.uint64)
    out = ((u + 0x7FFF + ((u >> 16) & 1)) >> 16).astype(np.uint16)
    nan = np.isnan(f)
    if nan.any():
        out[nan] = ((u[nan] >> 16) | 0x40).astype(np.uint16)
    return out


def bf16_bits_to_float(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16)
    with np.errstate(invalid="ignore"):
        return (b.astype(np.uint32) << 16).view(np.float32).astype(np.float64)


def compute_scales(w: np.ndarray, scale_mode: str = "per_row", bits: int = 8) -> tuple[np.ndarray, bool]:
    qmax = 2 ** (bits - 1) - 1
    if scale_mode == "per_row":
        peak = np.max(np.abs(w), axis=1) if w.shape[1] else np.zeros(w.shape[0])
    elif scale_mode == "per_tensor":
        peak = np.array([np.max(np.abs(w)) if w.size else 0.0])
    else:
        raise ValueError(f"unknown scale mode {scale_mode!r}")
    zero = peak == 0
    scale = np.where(zero, 1.0, peak / qmax).astype(np.float32)
    # float32 rounding can land on zero for denormal peaks
    scale[scale == 0] = np.float32(1.0)
    return scale, bool(zero.any())


def quantize(w, scale_mode: str = "per_row", bits: int = 8, dtype: str = "int8",
             zero_point: int = 0, scale=None) -> QuantizedTensor:
    """Quantize ``w`` to int8 (round half to even, then clamp) or round it to bf16.

    ``scale`` freezes the scales instead of deriving them from max-abs. The bf16
    path ignores scales and stores the rounded bit patterns directly.
    """
    w = as_matrix(w, "W")
    if dtype == "bf16":
        return QuantizedTensor("bf16", float_to_bf16_bits(w), np.ones(1, dtype=np.float32),
                               scale_mode="per_tensor")
    if dtype != "int8":
        raise ValueError(f"unknown dtype {dtype!r}")
    if bits != 8:
        raise ValueError(f"int8 storage needs bits=8, got {bits}")
    if scale is None:
        scale, degenerate = compute_scales(w, scale_mode, bits)
        if degenerate:
            warnings.warn("all-zero rows or tensor quantized with scale 1.0", RuntimeWarning, stacklevel=2)
    else:
        scale, degenerate = np.asarray(scale, dtype=np.float32).reshape(-1), False
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    s = scale.astype(np.float64)
    s = s.reshape(-1, 1) if scale_mode == "per_row" else s[0]
    q = np.clip(np.rint(w / s) + zero_point, lo, hi).astype(np.int8)
    return QuantizedTensor("int8", q, scale, int(zero_point), scale_mode, degenerate)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.dtype == "bf16":
        return bf16_bits_to_float(q.values)
    return q.row_scales() * (q.values.astype(np.float64) - q.zero_point)


def element_value(q: QuantizedTensor, row: int, col: int) -> float:
    if q.dtype == "bf16":
        return float(bf16_bits_to_float(q.values[row, col]))
    return float(q.row_scales()[row, 0]) * (float(q.values[row, col]) - q.zero_point)


def _check_location(q: QuantizedTensor, row: int, col: int, bit: int) -> None:
    if not (0 <= row < q.rows and 0 <= col < q.cols):
        raise IndexError(f"element ({row}, {col}) outside tensor of shape {q.shape}")
    if not 0 <= bit < q.bit_width:
        raise IndexError(f"bit {bit} outside {q.bit_width}-bit word")


def flip_bit(q: QuantizedTensor, loc: FlipLocation) -> tuple[QuantizedTensor, float]:
    """XOR one stored bit; returns the new tensor and the dequantized change at that element."""
    _check_location(q, loc.row, loc.col, loc.bit)
    values = q.values.copy()
    words = values.view(_UNSIGNED[values.dtype.itemsize])
    words[loc.row, loc.col] ^= words.dtype.type(1 << loc.bit)
    new = q.with_values(values)
    with np.errstate(invalid="ignore", over="ignore"):
        delta = element_value(new, loc.row, loc.col) - element_value(q, loc.row, loc.col)
    return new, delta


def flip_bits(q: QuantizedTensor, rows, cols, bits) -> QuantizedTensor:
    """Apply many flips at once. Repeated locations cancel, as XOR does."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    bits = np.asarray(bits, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= q.rows or cols.min() < 0 or cols.max() >= q.cols
                      or bits.min() < 0 or bits.max() >= q.bit_width):
        raise IndexError("flip location out of bounds")
    values = q.values.copy()
    words = values.view(_UNSIGNED[values.dtype.itemsize])
    masks = np.left_shift(np.ones_like(bits, dtype=np.uint64), bits.astype(np.uint64)).astype(words.dtype)
    np.bitwise_xor.at(words, (rows, cols), masks)
    return q.with_values(values)


def _word_view(a) -> np.ndarray:
    if isinstance(a, QuantizedTensor):
        return a.words()
    a = np.ascontiguousarray(a)
    return a.view(_UNSIGNED[a.dtype.itemsize])


def hamming_distance(a, b) -> int:
    """Number of differing stored bits between two tensors of equal dtype and shape."""
    if isinstance(a, QuantizedTensor) != isinstance(b, QuantizedTensor):
        raise TypeError("cannot compare a quantized tensor with a raw array")
    if isinstance(a, QuantizedTensor) and a.dtype != b.dtype:
        raise ValueError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    wa, wb = _word_view(a), _word_view(b)
    if wa.dtype != wb.dtype or wa.shape != wb.shape:
        raise ValueError(f"shape/dtype mismatch: {wa.shape}/{wa.dtype} vs {wb.shape}/{wb.dtype}")
    return int(np.bitwise_count(wa ^ wb).sum(dtype=np.int64))
