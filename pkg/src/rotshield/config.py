"""JSON run configuration shared by every CLI command."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacks import FailureRule
from .defense import DefenseConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # toy model
    dims: list = field(default_factory=lambda: [256, 128, 32])
    model_seed: int = 0
    outliers: list = field(default_factory=lambda: [[0, 7, 32.0]])
    dtype: str = "int8"
    scale_mode: str = "per_row"
    # defense
    alpha: float = 6.0
    m_max: int | None = None
    requantize: bool = True
    lossless_tol: float | None = None
    opt_out: list = field(default_factory=list)
    # data
    calib_batches: int = 8
    calib_tokens: int = 128
    calib_seed: int = 1
    probe_tokens: int = 64
    probe_seed: int = 2
    # attacks
    ber: float = 3e-4
    trials: int = 500
    base_seed: int = 0
    workers: int = 1
    n_flips: int = 50
    policy: str = "saliency"
    top_k: int = 32
    fail_abs: float = 100.0
    fail_rel: float = 20.0
    alphas: list = field(default_factory=lambda: [9.0, 6.0, 3.0])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(isinstance(self.dims, list) and len(self.dims) >= 3
             and all(isinstance(d, int) and d >= 8 for d in self.dims),
             "dims", "need at least 3 integers, each >= 8")
        for o in self.outliers:
            need(isinstance(o, list) and len(o) == 3 and isinstance(o[0], int) and isinstance(o[1], int)
                 and isinstance(o[2], (int, float)), "outliers", "entries are [layer, channel, magnitude]")
            need(0 <= o[0] < len(self.dims) - 1 and 0 <= o[1] < self.dims[o[0]], "outliers",
                 f"{o} outside the model")
            need(o[2] > 0, "outliers", "magnitude must be positive")
        need(self.dtype in ("int8", "bf16", "f64"), "dtype", "one of int8, bf16, f64")
        need(self.scale_mode in ("per_row", "per_tensor"), "scale_mode", "one of per_row, per_tensor")
        need(self.alpha >= 0, "alpha", "must be >= 0")
        need(self.m_max is None or (isinstance(self.m_max, int) and self.m_max >= 0), "m_max",
             "must be an integer >= 0 or null")
        need(self.lossless_tol is None or self.lossless_tol > 0, "lossless_tol", "must be > 0 or null")
        need(all(isinstance(i, int) for i in self.opt_out), "opt_out", "layer indices")
        for name in ("calib_batches", "calib_tokens", "probe_tokens", "trials", "workers", "top_k"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(0.0 <= self.ber <= 1.0, "ber", "must lie in [0, 1]")
        need(self.n_flips >= 0, "n_flips", "must be >= 0")
        need(self.policy in ("saliency", "magnitude"), "policy", "one of saliency, magnitude")
        need(self.fail_abs > 0, "fail_abs", "must be > 0")
        need(self.fail_rel > 0, "fail_rel", "must be > 0")
        need(len(self.alphas) > 0 and all(isinstance(a, (int, float)) and a >= 0 for a in self.alphas), "alphas", "nonempty, each >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        defaults = cls.__new__(cls)
        for f in fields(cls):
            setattr(defaults, f.name, f.default_factory() if callable(f.default_factory) else f.default)
        for key, value in d.items():
            _check_type(key, value, getattr(defaults, key))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(d)

    def defense(self) -> DefenseConfig:
        return DefenseConfig(self.alpha, self.m_max, self.lossless_tol, self.requantize)

    def failure_rule(self) -> FailureRule:
        return FailureRule(self.fail_abs, self.fail_rel)


def _check_type(key, value, default) -> None:
    if default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__ if default is not None else 'number or null'}, "
                          f"got {type(value).__name__}")
