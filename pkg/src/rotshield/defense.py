"""Offline outlier calibration, WY construction, weight fusion and the online correction."""
from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .linalg import (CompactWY, apply_wy_right, apply_wy_transpose_left, as_matrix,
                     householder_from_outlier, wy_append)
from .outliers import DEFAULT_ALPHA, ChannelStats, channel_linf, compute_threshold
from .quant import QuantizedTensor, dequantize, quantize

FULL_PRECISION_TOL = 1e-9


@dataclass(frozen=True)
class DefenseConfig:
    alpha: float = DEFAULT_ALPHA
    m_max: int | None = None
    lossless_tol: float | None = None
    requantize_fused: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.m_max is not None and self.m_max < 0:
            raise ValueError(f"m_max must be >= 0, got {self.m_max}")
        if self.lossless_tol is not None and self.lossless_tol <= 0:
            raise ValueError("lossless_tol must be positive")

    def cap(self, d: int) -> int:
        """Reflector budget for a layer with ``d`` input channels."""
        return self.m_max if self.m_max is not None else math.ceil(0.01 * d)


@dataclass(frozen=True)
class ProtectedLayer:
    fused_weights: QuantizedTensor | np.ndarray
    wy: CompactWY
    original_scale_info: dict | None = None
    layer_id: int = 0

    def __post_init__(self):
        if self.wy.dim != self.fused_weights.shape[0]:
            raise ValueError(f"rotation dim {self.wy.dim} != fused weight rows {self.fused_weights.shape[0]}")

    @property
    def d_in(self) -> int:
        return self.fused_weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.fused_weights.shape[1]

    @property
    def m(self) -> int:
        return self.wy.m

    def weights(self) -> np.ndarray:
        if isinstance(self.fused_weights, QuantizedTensor):
            return dequantize(self.fused_weights)
        return self.fused_weights

    def with_weights(self, fused) -> "ProtectedLayer":
        return ProtectedLayer(fused, self.wy, self.original_scale_info, self.layer_id)


@dataclass(frozen=True)
class LosslessReport:
    deviation: float
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {"deviation": self.deviation, "tol": self.tol, "passed": self.passed}


def scale_info(w) -> dict | None:
    if not isinstance(w, QuantizedTensor):
        return None
    return {
        "dtype": w.dtype,
        "scale_mode": w.scale_mode,
        "scale": [float(s) for s in w.scale],
        "zero_point": w.zero_point,
    }


def calibrate(layer_inputs: Mapping, cfg: DefenseConfig = DefenseConfig(),
              layers: Sequence | None = None) -> dict:
    """Per-layer channel statistics from calibration activations.

    ``layer_inputs`` maps a layer id to one activation matrix or a list of
    batches; batches are stacked along the token axis. ``layers`` names the
    layers that must be present.
    """
    wanted = list(layers) if layers is not None else list(layer_inputs)
    stats = {}
    for lid in wanted:
        if lid not in layer_inputs:
            raise KeyError(f"no calibration activations for layer {lid!r}")
        x = layer_inputs[lid]
        if isinstance(x, (list, tuple)):
            x = np.vstack([as_matrix(b) for b in x])
        s = compute_threshold(channel_linf(x), cfg.alpha)
        stats[lid] = s.truncated(cfg.cap(s.dim))
    return stats


def build_rotation(stats: ChannelStats) -> CompactWY:
    """One reflector per flagged channel, appended in ascending channel order."""
    d = stats.dim
    wy = CompactWY.empty(d)
    for k in sorted(stats.outliers):
        if not 0 <= k < d:
            raise ValueError(f"outlier channel {k} outside [0, {d})")
        wy = wy_append(wy, householder_from_outlier(d, k))
    return wy


def fuse_weights(w, wy: CompactWY, cfg: DefenseConfig = DefenseConfig(), layer_id: int = 0) -> ProtectedLayer:
    """Absorb ``Q^T`` into the weights; optionally re-quantize with fresh scales."""
    if w.shape[0] != wy.dim:
        raise ValueError(f"dimension mismatch: W has {w.shape[0]} rows, rotation has dim {wy.dim}")
    info = scale_info(w)
    if wy.m == 0:
        return ProtectedLayer(w, wy, info, layer_id)
    dense = dequantize(w) if isinstance(w, QuantizedTensor) else as_matrix(w)
    fused = apply_wy_transpose_left(dense, wy)
    if cfg.requantize_fused:
        if isinstance(w, QuantizedTensor):
            fused = quantize(fused, scale_mode=w.scale_mode, dtype=w.dtype, zero_point=w.zero_point)
        else:
            fused = quantize(fused)
    return ProtectedLayer(fused, wy, info, layer_id)


def protected_forward(x, layer: ProtectedLayer) -> np.ndarray:
    x = as_matrix(x, "X")
    if x.shape[1] != layer.d_in:
        raise ValueError(f"dimension mismatch: X has {x.shape[1]} columns, layer expects {layer.d_in}")
    return apply_wy_right(x, layer.wy) @ layer.weights()


def default_tolerance(layer: ProtectedLayer, cfg: DefenseConfig | None = None) -> float:
    if cfg is not None and cfg.lossless_tol is not None:
        return cfg.lossless_tol
    if layer.m > 0 and isinstance(layer.fused_weights, QuantizedTensor):
        if layer.fused_weights.dtype == "bf16":
            # bf16 keeps 8 significant bits
            return 2.0 ** -8 * 2.0 * layer.d_in
        return 2.0 * float(np.max(layer.fused_weights.scale)) * layer.d_in
    return FULL_PRECISION_TOL


def relative_linf_deviation(y, y_ref) -> float:
    ref = float(np.max(np.abs(y_ref))) if np.size(y_ref) else 0.0
    diff = float(np.max(np.abs(np.asarray(y) - y_ref))) if np.size(y_ref) else 0.0
    return diff / ref if ref > 0 else diff


def verify_lossless(original, layer: ProtectedLayer, x, tol: float | None = None) -> LosslessReport:
    """Compare the protected layer against ``X @ W`` on probe activations."""
    w = dequantize(original) if isinstance(original, QuantizedTensor) else as_matrix(original)
    if w.shape != layer.fused_weights.shape:
        raise ValueError(f"shape mismatch: original {w.shape} vs protected {layer.fused_weights.shape}")
    tol = default_tolerance(layer) if tol is None else tol
    dev = relative_linf_deviation(protected_forward(x, layer), as_matrix(x) @ w)
    return LosslessReport(deviation=dev, tol=tol, passed=bool(dev <= tol))


def correction_flop_ratio(d_in: int, d_out: int, m: int, batch: int = 1) -> float:
    correction = 2 * batch * d_in * m + 2 * batch * m * m + 2 * batch * m * d_in
    return correction / (2 * batch * d_in * d_out)


def flop_overhead(layer: ProtectedLayer, batch: int = 1) -> float:
    """FLOPs of the online WY correction relative to the layer GEMM."""
    return correction_flop_ratio(layer.d_in, layer.d_out, layer.m, batch)
