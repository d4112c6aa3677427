"""Whole-model protection, paired Monte Carlo evaluation and the alpha sweep."""
from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .attacks import AttackOutcome, FailureRule, greedy_bit_search, make_policy, random_ber_attack
from .defense import DefenseConfig, build_rotation, calibrate, fuse_weights
from .linalg import CompactWY
from .model import ToyModel, forward, layer_inputs, proxy_metric

CSV_COLUMNS = ("trial", "seed", "n_flips", "metric_before", "metric_after", "failed")


class Bench:
    """A model paired with its probe set and its own clean reference outputs."""

    def __init__(self, model: ToyModel, probe):
        self.model = model
        self.probe = np.asarray(probe, dtype=np.float64)
        self.reference = forward(model, self.probe)

    def metric(self, model: ToyModel) -> float:
        return proxy_metric(model, self.probe, self.reference)

    @property
    def clean_metric(self) -> float:
        return self.metric(self.model)


def protect_model(model: ToyModel, calib, cfg: DefenseConfig = DefenseConfig(),
                  opt_out: Sequence[int] = ()) -> tuple[ToyModel, dict]:
    """Calibrate every layer on ``calib`` and fuse its rotation.

    ``calib`` is one input matrix or a list of batches (stacked on the token
    axis). Layers listed in ``opt_out`` keep their original weights.
    """
    if isinstance(calib, (list, tuple)):
        calib = np.vstack(calib)
    inputs = layer_inputs(model, calib)
    stats = calibrate(dict(enumerate(inputs)), cfg)
    layers = []
    for lid, layer in enumerate(model.layers):
        if layer.m:
            raise ValueError(f"layer {lid} is already protected")
        wy = CompactWY.empty(layer.d_in) if lid in opt_out else build_rotation(stats[lid])
        layers.append(fuse_weights(layer.fused_weights, wy, cfg, lid))
    return model.with_layers(layers), stats


@dataclass
class EvalReport:
    trials: int
    mean_metric: float
    max_metric: float
    fail_rate: float
    outcomes: list[AttackOutcome]

    @classmethod
    def from_outcomes(cls, outcomes: list[AttackOutcome]) -> "EvalReport":
        n = len(outcomes)
        metrics = [o.metric_after for o in outcomes]
        failed = sum(o.failed for o in outcomes)
        mean = math.inf if any(math.isinf(m) for m in metrics) else math.fsum(metrics) / n
        return cls(n, mean, max(metrics), failed / n, outcomes)

    def summary(self) -> dict:
        return {"trials": self.trials, "mean_metric": self.mean_metric,
                "max_metric": self.max_metric, "fail_rate": self.fail_rate}

    def to_dict(self) -> dict:
        return self.summary() | {"outcomes": [o.to_dict() for o in self.outcomes]}

    def csv_rows(self) -> list[dict]:
        return [{"trial": i, "seed": o.seed, "n_flips": len(o.flips), "metric_before": o.metric_before,
                 "metric_after": o.metric_after, "failed": int(o.failed)} for i, o in enumerate(self.outcomes)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.csv_rows())


_worker_state: dict = {}


def _init_worker(model, probe, ber, rule):
    bench = Bench(model, probe)
    _worker_state.update(bench=bench, ber=ber, rule=rule, clean=bench.clean_metric)


def _run_trials(seeds: Sequence[int]) -> list[AttackOutcome]:
    st = _worker_state
    bench = st["bench"]
    return [random_ber_attack(bench.model, st["ber"], s, bench.metric, st["rule"], st["clean"]) for s in seeds]


def monte_carlo(model: ToyModel, probe, ber: float, trials: int, base_seed: int = 0,
                rule: FailureRule = FailureRule(), workers: int = 1) -> EvalReport:
    """Independent random-BER trials; trial ``i`` uses seed ``base_seed + i``.

    Results are collected in trial order, so the report does not depend on
    the number of workers.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seeds = [base_seed + i for i in range(trials)]
    if workers <= 1:
        _init_worker(model, probe, ber, rule)
        outcomes = _run_trials(seeds)
    else:
        chunk = math.ceil(trials / (4 * workers))
        chunks = [seeds[i:i + chunk] for i in range(0, trials, chunk)]
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(model, probe, ber, rule)) as pool:
            outcomes = [o for part in pool.map(_run_trials, chunks) for o in part]
    return EvalReport.from_outcomes(outcomes)


def greedy_attack(model: ToyModel, probe, n_flips: int, policy: str = "saliency", top_k: int = 32,
                  rule: FailureRule = FailureRule()) -> AttackOutcome:
    bench = Bench(model, probe)
    return greedy_bit_search(model, bench.metric, n_flips, make_policy(policy, top_k, probe), rule,
                             bench.clean_metric)


def alpha_sweep(model: ToyModel, calib, probe, alphas: Sequence[float], n_flips: int = 50,
                policy: str = "saliency", top_k: int = 32, cfg: DefenseConfig = DefenseConfig(),
                rule: FailureRule = FailureRule()) -> list[dict]:
    """Reflector count and post-attack metric for each threshold sensitivity."""
    if not alphas:
        raise ValueError("alphas must be nonempty")
    rows = []
    for alpha in alphas:
        protected, _ = protect_model(model, calib, replace(cfg, alpha=float(alpha)))
        out = greedy_attack(protected, probe, n_flips, policy, top_k, rule)
        rows.append({"alpha": float(alpha), "reflectors": protected.reflector_count,
                     "post_attack_metric": out.metric_after,
                     "steps_to_failure": out.extra["steps_to_failure"]})
    return rows
