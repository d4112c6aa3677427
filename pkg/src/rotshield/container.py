"""RORT binary tensor container and toy-model persistence.

Layout (all integers little-endian)::

    "RORT" | u16 version | u32 record count
    record: u16 name length | UTF-8 name | u8 dtype | u8 quantized flag
            [u8 scale mode | u32 scale count | f32 scales | i32 zero point]   (quantized only)
            u8 ndim | u64 dims | raw row-major payload

dtype codes: 0 f32, 1 bf16, 2 i8, 3 f64. Stored words are written verbatim.
Model containers carry a JSON sidecar at ``<path>.json``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .defense import ProtectedLayer
from .linalg import CompactWY
from .model import PlantedOutlier, ToyModel
from .quant import QuantizedTensor

MAGIC = b"RORT"
VERSION = 1
DTYPE_CODES = {"f32": 0, "bf16": 1, "i8": 2, "f64": 3}
_NP = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("i1"), 3: np.dtype("<f8")}
_SCALE_MODES = {"per_tensor": 0, "per_row": 1}


class ContainerError(ValueError):
    pass


@dataclass
class RortContainer:
    tensors: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return encode(self.tensors, self.version)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RortContainer":
        return cls(decode(data))


def _code_for(t) -> tuple[int, np.ndarray]:
    if isinstance(t, QuantizedTensor):
        return (1, t.values) if t.dtype == "bf16" else (2, t.values)
    a = np.asarray(t)
    for code, dt in _NP.items():
        if a.dtype == dt.newbyteorder("=") or a.dtype == dt:
            return code, a
    raise ContainerError(f"unsupported array dtype {a.dtype}")


def encode(tensors: dict, version: int = VERSION) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", version, len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        code, arr = _code_for(t)
        out += struct.pack("<H", len(raw)) + raw
        quantized = isinstance(t, QuantizedTensor) and t.dtype == "int8"
        out += struct.pack("<BB", code, int(quantized))
        if quantized:
            out += struct.pack("<BI", _SCALE_MODES[t.scale_mode], t.scale.size)
            out += t.scale.astype("<f4").tobytes()
            out += struct.pack("<i", t.zero_point)
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_NP[code]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated {what} at byte {self.pos}: "
                                 f"expected {n} bytes, {len(self.data) - self.pos} available")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> dict:
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r} at byte 0, expected {MAGIC!r}")
    r.pos = 4
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version} at byte 4")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        if name in tensors:
            raise ContainerError(f"duplicate tensor name {name!r} at byte {start}")
        code, quantized = r.unpack("<BB", f"header of {name!r}")
        if code not in _NP:
            raise ContainerError(f"unknown dtype code {code} for {name!r} at byte {r.pos - 2}")
        scale_mode = scales = zero_point = None
        if quantized:
            mode, n = r.unpack("<BI", f"scale header of {name!r}")
            scales = np.frombuffer(r.take(4 * n, f"scales of {name!r}"), dtype="<f4").astype(np.float32)
            (zero_point,) = r.unpack("<i", f"zero point of {name!r}")
            scale_mode = {v: k for k, v in _SCALE_MODES.items()}.get(mode)
            if scale_mode is None:
                raise ContainerError(f"unknown scale mode {mode} for {name!r}")
        (ndim,) = r.unpack("<B", f"ndim of {name!r}")
        dims = r.unpack(f"<{ndim}Q", f"dims of {name!r}")
        dt = _NP[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if r.pos + nbytes > len(data):
            raise ContainerError(f"truncated payload of tensor {name!r} at byte {r.pos}: "
                                 f"expected {nbytes} bytes, got {len(data) - r.pos}")
        arr = np.frombuffer(r.take(nbytes, f"payload of {name!r}"), dtype=dt).reshape(dims)
        arr = arr.astype(dt.newbyteorder("="))
        if quantized:
            if code != 2 or ndim != 2:
                raise ContainerError(f"quantized tensor {name!r} must be 2-D i8")
            try:
                tensors[name] = QuantizedTensor("int8", arr, scales, int(zero_point), scale_mode)
            except ValueError as e:
                raise ContainerError(f"invalid quantized tensor {name!r}: {e}") from e
        elif code == 1 and ndim == 2:
            tensors[name] = QuantizedTensor("bf16", arr, np.ones(1, dtype=np.float32), scale_mode="per_tensor")
        else:
            tensors[name] = arr
    if r.pos != len(data):
        raise ContainerError(f"{len(data) - r.pos} trailing bytes at byte {r.pos}")
    return tensors


def write_container(path, tensors: dict) -> None:
    Path(path).write_bytes(encode(tensors))


def read_container(path) -> dict:
    return decode(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_model(path, model: ToyModel, extra: dict | None = None) -> None:
    """Write weights, gains and rotation factors plus the JSON sidecar."""
    tensors = {}
    layers = []
    for i, layer in enumerate(model.layers):
        tensors[f"layer{i}.weight"] = layer.fused_weights
        tensors[f"layer{i}.gain"] = np.asarray(model.gains[i], dtype=np.float64)
        if layer.m:
            tensors[f"layer{i}.wy.V"] = layer.wy.V
            tensors[f"layer{i}.wy.T"] = layer.wy.T
        layers.append({"name": f"layer{i}", "protected_channels": list(layer.wy.protected_channels),
                       "original_scale_info": layer.original_scale_info})
    write_container(path, tensors)
    meta = {
        "format": "rotshield-model",
        "version": VERSION,
        "dims": list(model.dims),
        "seed": model.seed,
        "planted_outliers": [o.to_list() for o in model.planted_outliers],
        "layers": layers,
    }
    if extra:
        meta.update(extra)
    write_json(sidecar_path(path), meta)


def load_model(path) -> tuple[ToyModel, dict]:
    side = sidecar_path(path)
    if not side.exists():
        raise ContainerError(f"missing model sidecar {side}")
    meta = json.loads(side.read_text())
    tensors = read_container(path)
    layers, gains = [], []
    for i, info in enumerate(meta["layers"]):
        try:
            w = tensors[f"layer{i}.weight"]
            gain = tensors[f"layer{i}.gain"]
        except KeyError as e:
            raise ContainerError(f"model container lacks tensor {e.args[0]!r}") from e
        chans = tuple(int(c) for c in info.get("protected_channels", ()))
        if chans:
            wy = CompactWY(tensors[f"layer{i}.wy.V"], tensors[f"layer{i}.wy.T"], chans, w.shape[0])
        else:
            wy = CompactWY.empty(w.shape[0])
        layers.append(ProtectedLayer(w, wy, info.get("original_scale_info"), i))
        gains.append(np.asarray(gain, dtype=np.float64))
    planted = tuple(PlantedOutlier(int(a), int(b), float(c)) for a, b, c in meta.get("planted_outliers", ()))
    return ToyModel(tuple(layers), tuple(gains), planted, int(meta.get("seed", 0))), meta
