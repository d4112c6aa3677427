"""A small stack of quantized linear layers with plantable activation outliers.

Each layer sees ``gain * act(h)`` (``gain * x`` for the first layer), where the
per-channel gain plays the role of a normalization weight. A planted outlier
is a channel whose gain is raised, so every token carries a spike there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .defense import ProtectedLayer
from .linalg import CompactWY, apply_wy_right, as_matrix
from .quant import QuantizedTensor, quantize


@dataclass(frozen=True)
class PlantedOutlier:
    layer: int
    channel: int
    magnitude: float

    def to_list(self) -> list:
        return [self.layer, self.channel, self.magnitude]


@dataclass(frozen=True)
class ToyModel:
    layers: tuple[ProtectedLayer, ...]
    gains: tuple[np.ndarray, ...]
    planted_outliers: tuple[PlantedOutlier, ...] = ()
    seed: int = 0

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(l.d_in for l in self.layers) + (self.layers[-1].d_out,)

    @property
    def n_bits(self) -> int:
        return sum(stored_bits(l.fused_weights) for l in self.layers)

    @property
    def reflector_count(self) -> int:
        return sum(l.m for l in self.layers)

    def stored(self, i: int):
        return self.layers[i].fused_weights

    def with_weights(self, i: int, w) -> "ToyModel":
        layers = list(self.layers)
        layers[i] = layers[i].with_weights(w)
        return replace(self, layers=tuple(layers))

    def with_layers(self, layers) -> "ToyModel":
        return replace(self, layers=tuple(layers))


def stored_bits(w) -> int:
    if isinstance(w, QuantizedTensor):
        return w.n_bits
    return w.size * w.dtype.itemsize * 8


def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return x / (1.0 + np.exp(-x))


def build_toy_model(dims, seed: int = 0, outliers=(), dtype: str = "int8",
                    scale_mode: str = "per_row") -> ToyModel:
    """Seeded ``N(0, 1/d)`` weights, quantized, with planted gain spikes.

    ``outliers`` holds ``(layer, channel, magnitude)`` triples.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 3:
        raise ValueError(f"need at least 2 layers (3 dims), got dims={dims}")
    if min(dims) < 8:
        raise ValueError(f"every dim must be >= 8, got dims={dims}")
    rng = np.random.default_rng(seed)
    planted = tuple(o if isinstance(o, PlantedOutlier) else PlantedOutlier(int(o[0]), int(o[1]), float(o[2]))
                    for o in outliers)
    gains = [np.ones(d) for d in dims[:-1]]
    for o in planted:
        if not 0 <= o.layer < len(gains) or not 0 <= o.channel < dims[o.layer]:
            raise ValueError(f"planted outlier {o} outside model with dims {dims}")
        if o.magnitude <= 0:
            raise ValueError(f"planted outlier magnitude must be positive: {o}")
        gains[o.layer][o.channel] = o.magnitude
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)
        if dtype in ("int8", "bf16"):
            w = quantize(w, scale_mode=scale_mode, dtype=dtype)
        elif dtype != "f64":
            raise ValueError(f"unknown model dtype {dtype!r}")
        layers.append(ProtectedLayer(w, CompactWY.empty(d_in), None, i))
    return ToyModel(tuple(layers), tuple(gains), planted, int(seed))


def probe_inputs(d: int, tokens: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((tokens, d))


def layer_inputs(model: ToyModel, x) -> list[np.ndarray]:
    """Unrotated activations entering each layer (what calibration measures)."""
    h = as_matrix(x)
    out = []
    for i, layer in enumerate(model.layers):
        a = (h if i == 0 else silu(h)) * model.gains[i]
        out.append(a)
        h = apply_wy_right(a, layer.wy) @ layer.weights()
    return out


def forward(model: ToyModel, x) -> np.ndarray:
    h = as_matrix(x)
    if h.shape[1] != model.dims[0]:
        raise ValueError(f"input has {h.shape[1]} channels, model expects {model.dims[0]}")
    with np.errstate(over="ignore", invalid="ignore"):
        for i, layer in enumerate(model.layers):
            a = (h if i == 0 else silu(h)) * model.gains[i]
            h = apply_wy_right(a, layer.wy) @ layer.weights()
    return h


def proxy_metric(model: ToyModel, x, reference) -> float:
    """``exp`` of the per-token squared L2 error, averaged over tokens.

    Against the model's own clean outputs this is exactly 1.0. Non-finite
    errors map to ``inf``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        y = forward(model, x)
        mse = float(np.mean(np.sum((y - reference) ** 2, axis=1)))
        if not math.isfinite(mse):
            return math.inf
        return math.exp(mse) if mse < 709.0 else math.inf
