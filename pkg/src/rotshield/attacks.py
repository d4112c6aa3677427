"""Random bit-error injection, greedy bit search, fault localization and the
white-box column attack against rotated weights."""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .defense import ProtectedLayer
from .linalg import apply_wy_right
from .model import ToyModel, layer_inputs, stored_bits
from .outliers import channel_linf
from .quant import (QuantizedTensor, FlipLocation, dequantize, flip_bit, float_to_bf16_bits,
                    flip_bits, _word_view)

MetricFn = Callable[[ToyModel], float]


@dataclass(frozen=True)
class FailureRule:
    absolute: float = 100.0
    relative: float = 20.0

    def threshold(self, clean: float) -> float:
        return max(self.absolute, self.relative * clean)

    def failed(self, metric: float, clean: float) -> bool:
        # NaN compares false, so it counts as a failure
        return not metric <= self.threshold(clean)


@dataclass
class AttackOutcome:
    flips: list[FlipLocation]
    metric_before: float | None
    metric_after: float | None
    failed: bool
    hamming_cost: int
    seed: int | None = None
    kind: str = "random"
    trace: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "seed": self.seed,
            "n_flips": len(self.flips),
            "hamming_cost": self.hamming_cost,
            "metric_before": self.metric_before,
            "metric_after": self.metric_after,
            "failed": self.failed,
            "flips": [f.to_dict() for f in self.flips],
        }
        if self.trace is not None:
            d["trace"] = list(self.trace)
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackOutcome":
        return cls(
            flips=[FlipLocation.from_dict(f) for f in d["flips"]],
            metric_before=d["metric_before"],
            metric_after=d["metric_after"],
            failed=bool(d["failed"]),
            hamming_cost=int(d["hamming_cost"]),
            seed=d.get("seed"),
            kind=d.get("kind", "random"),
            trace=d.get("trace"),
            extra=d.get("extra", {}),
        )


def bit_width_of(w) -> int:
    if isinstance(w, QuantizedTensor):
        return w.bit_width
    return w.dtype.itemsize * 8


def _flip_raw(w: np.ndarray, rows, cols, bits) -> np.ndarray:
    out = np.ascontiguousarray(w).copy()
    words = _word_view(out)
    masks = np.left_shift(np.ones(len(bits), dtype=np.uint64),
                          np.asarray(bits, dtype=np.uint64)).astype(words.dtype)
    np.bitwise_xor.at(words, (np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)), masks)
    return out


def flip_weights(w, rows, cols, bits):
    if isinstance(w, QuantizedTensor):
        return flip_bits(w, rows, cols, bits)
    return _flip_raw(w, rows, cols, bits)


def flip_delta(w, loc: FlipLocation) -> float:
    """Change of the stored value at ``loc`` when its bit is inverted."""
    if isinstance(w, QuantizedTensor):
        return flip_bit(w, loc)[1]
    new = flip_weights(w, [loc.row], [loc.col], [loc.bit])
    with np.errstate(invalid="ignore", over="ignore"):
        return float(new[loc.row, loc.col] - w[loc.row, loc.col])


def apply_flips(model: ToyModel, flips: Sequence[FlipLocation]) -> ToyModel:
    """Return a copy of ``model`` with every listed stored bit inverted."""
    by_layer: dict[int, list[FlipLocation]] = {}
    for f in flips:
        by_layer.setdefault(f.layer_id, []).append(f)
    layers = list(model.layers)
    for lid, fs in by_layer.items():
        if not 0 <= lid < len(layers):
            raise IndexError(f"flip targets layer {lid}, model has {len(layers)}")
        w = layers[lid].fused_weights
        layers[lid] = layers[lid].with_weights(
            flip_weights(w, [f.row for f in fs], [f.col for f in fs], [f.bit for f in fs]))
    return model.with_layers(layers)


def sample_ber_flips(model: ToyModel, ber: float, seed: int) -> list[FlipLocation]:
    """Every stored weight bit flips independently with probability ``ber``.

    Drawn as a binomial count followed by a uniform subset, which has the same
    distribution as independent per-bit draws. Bits are addressed layer by
    layer, row-major, LSB first within each word.
    """
    if not 0.0 <= ber <= 1.0:
        raise ValueError(f"ber must lie in [0, 1], got {ber}")
    rng = np.random.default_rng(seed)
    sizes = [stored_bits(l.fused_weights) for l in model.layers]
    total = sum(sizes)
    n = int(rng.binomial(total, ber))
    picks = np.sort(rng.choice(total, size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
    flips = []
    offset = 0
    for lid, (layer, size) in enumerate(zip(model.layers, sizes)):
        sel = picks[(picks >= offset) & (picks < offset + size)] - offset
        bw = bit_width_of(layer.fused_weights)
        elem, bit = np.divmod(sel, bw)
        row, col = np.divmod(elem, layer.d_out)
        flips.extend(FlipLocation(lid, int(r), int(c), int(b)) for r, c, b in zip(row, col, bit))
        offset += size
    return flips


def random_ber_attack(model: ToyModel, ber: float, seed: int, metric_fn: MetricFn | None = None,
                      rule: FailureRule = FailureRule(), clean_metric: float | None = None) -> AttackOutcome:
    flips = sample_ber_flips(model, ber, seed)
    before = after = None
    failed = False
    if metric_fn is not None:
        before = metric_fn(model) if clean_metric is None else clean_metric
        after = metric_fn(apply_flips(model, flips)) if flips else before
        failed = rule.failed(after, before)
    return AttackOutcome(flips, before, after, failed, len(flips), seed, "random")


def damaging_bit(w) -> int:
    """Bit that moves a stored value the most: int8 sign bit, top exponent bit otherwise."""
    bw = bit_width_of(w)
    return 7 if bw == 8 else bw - 2


def msb_delta(w) -> np.ndarray:
    """Per-element change from flipping :func:`damaging_bit`, non-finite mapped to ``inf``."""
    bit = damaging_bit(w)
    old = dequantize(w) if isinstance(w, QuantizedTensor) else w
    rows, cols = np.indices(w.shape)
    new_w = flip_weights(w, rows.ravel(), cols.ravel(), np.full(w.size, bit))
    new = dequantize(new_w) if isinstance(new_w, QuantizedTensor) else new_w
    with np.errstate(invalid="ignore", over="ignore"):
        d = np.abs(new - old)
    return np.where(np.isfinite(d), d, np.inf)


def _top_locations(lid: int, score: np.ndarray, k: int, bit: int, exclude: set) -> list[FlipLocation]:
    order = np.argsort(-score, axis=None, kind="stable")
    out = []
    cols = score.shape[1]
    for flat in order:
        r, c = divmod(int(flat), cols)
        loc = FlipLocation(lid, r, c, bit)
        if loc not in exclude:
            out.append(loc)
            if len(out) == k:
                break
    return out


def magnitude_candidates(model: ToyModel, top_k: int = 32, exclude=frozenset()) -> list[FlipLocation]:
    """Damaging bit of the ``top_k`` largest-magnitude weights in every layer."""
    out = []
    for lid, layer in enumerate(model.layers):
        w = layer.fused_weights
        out += _top_locations(lid, np.abs(layer.weights()), top_k, damaging_bit(w), exclude)
    return out


def saliency_candidates(model: ToyModel, probe, top_k: int = 32, exclude=frozenset()) -> list[FlipLocation]:
    """Rank damaging-bit flips by ``|delta| * peak of the deployed layer input``.

    This is the first-order worst-case bound, i.e. what a gradient-guided
    search ranks highly, evaluated on the stored (possibly rotated) weights.
    """
    out = []
    for lid, (layer, x) in enumerate(zip(model.layers, layer_inputs(model, probe))):
        peaks = channel_linf(apply_wy_right(x, layer.wy))
        w = layer.fused_weights
        with np.errstate(invalid="ignore", over="ignore"):
            score = np.nan_to_num(msb_delta(w) * peaks[:, None], nan=np.inf)
        out += _top_locations(lid, score, top_k, damaging_bit(w), exclude)
    return out


def make_policy(name: str, top_k: int = 32, probe=None):
    if name == "magnitude":
        return lambda model, exclude: magnitude_candidates(model, top_k, exclude)
    if name == "saliency":
        if probe is None:
            raise ValueError("saliency policy needs probe inputs")
        return lambda model, exclude: saliency_candidates(model, probe, top_k, exclude)
    raise ValueError(f"unknown candidate policy {name!r}")


def greedy_bit_search(model: ToyModel, metric_fn: MetricFn, n_flips: int, policy,
                      rule: FailureRule = FailureRule(), clean_metric: float | None = None) -> AttackOutcome:
    """Progressively flip the candidate bit that raises the metric the most.

    ``policy(model, exclude)`` proposes candidates; already-flipped bits are
    excluded. When no candidate raises the metric the step is a no-op, so the
    recorded trace never decreases.
    """
    if n_flips < 0:
        raise ValueError("n_flips must be >= 0")
    clean = metric_fn(model) if clean_metric is None else clean_metric
    current, metric = model, clean
    flips: list[FlipLocation] = []
    trace = [clean]
    stalled = 0
    for _ in range(n_flips):
        best, best_metric = None, metric
        if not math.isinf(metric):
            for loc in policy(current, set(flips)):
                m = metric_fn(apply_flips(current, [loc]))
                if m > best_metric:
                    best, best_metric = loc, m
        if best is None:
            stalled += 1
        else:
            current = apply_flips(current, [best])
            flips.append(best)
            metric = best_metric
        trace.append(metric)
    steps_to_fail = next((i for i, m in enumerate(trace) if rule.failed(m, clean)), None)
    extra = {"stalled_steps": stalled, "steps_to_failure": steps_to_fail}
    return AttackOutcome(flips, clean, metric, rule.failed(metric, clean), len(flips), None, "greedy", trace, extra)


@dataclass(frozen=True)
class LocateResult:
    location: FlipLocation | None
    evaluations: int
    isolable: bool

    def to_dict(self) -> dict:
        return {
            "location": None if self.location is None else self.location.to_dict(),
            "evaluations": self.evaluations,
            "isolable": self.isolable,
        }


def spfa_locate(model: ToyModel, flips: Sequence[FlipLocation], metric_fn: MetricFn,
                rule: FailureRule = FailureRule(), clean_metric: float | None = None) -> LocateResult:
    """Bisect a failing flip set down to one flip that is fatal on its own.

    Each half is replayed on a fresh copy of ``model``. If neither half fails
    alone the failure needs an interaction and the result is non-isolable.
    Uses at most ``2 * ceil(log2 N) + 1`` metric evaluations.
    """
    clean = metric_fn(model) if clean_metric is None else clean_metric
    evals = 0

    def fails(subset) -> bool:
        nonlocal evals
        evals += 1
        return rule.failed(metric_fn(apply_flips(model, subset)), clean)

    current = list(flips)
    if not current or not fails(current):
        raise ValueError("the given flip set does not trigger the failure rule")
    while len(current) > 1:
        mid = len(current) // 2
        left, right = current[:mid], current[mid:]
        if fails(left):
            current = left
        elif fails(right):
            current = right
        else:
            return LocateResult(None, evals, False)
    return LocateResult(current[0], evals, True)


def rotated_basis_column(layer: ProtectedLayer, r: int) -> np.ndarray:
    """Column ``r`` of ``Q^T = I - V T^T V^T``."""
    wy = layer.wy
    col = np.zeros(wy.dim)
    col[r] = 1.0
    if wy.m:
        col -= wy.V @ (wy.T.T @ wy.V[r, :])
    return col


def realize_column(w, c: int, target: np.ndarray):
    """Store ``target`` as column ``c`` of ``w`` keeping its scales frozen."""
    if isinstance(w, QuantizedTensor):
        values = w.values.copy()
        if w.dtype == "bf16":
            values[:, c] = float_to_bf16_bits(target)
        else:
            s = w.row_scales()[:, 0]
            with np.errstate(invalid="ignore", over="ignore"):
                q = np.rint(target / s) + w.zero_point
            values[:, c] = np.clip(np.nan_to_num(q), -128, 127).astype(np.int8)
        return w.with_values(values)
    out = np.array(w, copy=True)
    out[:, c] = target
    return out


def diff_locations(layer_id: int, a, b) -> list[FlipLocation]:
    wa, wb = _word_view(a), _word_view(b)
    x = wa ^ wb
    out = []
    for r, c in np.argwhere(x != 0):
        word = int(x[r, c])
        out += [FlipLocation(layer_id, int(r), int(c), bit) for bit in range(wa.dtype.itemsize * 8)
                if word >> bit & 1]
    return out


def spfa_column_attack(layer: ProtectedLayer, r: int, c: int, delta: float,
                       metric_fn: Callable[[ProtectedLayer], float] | None = None,
                       rule: FailureRule = FailureRule()) -> tuple[np.ndarray, AttackOutcome]:
    """Reproduce a ``delta`` change of original weight ``W[r, c]`` through the rotation.

    The required change to the stored weights is ``delta * Q^T[:, r]`` in
    column ``c``. It is realized on the stored tensor with frozen scales and
    costed as the bitwise Hamming distance.
    """
    if not (0 <= r < layer.d_in and 0 <= c < layer.d_out):
        raise IndexError(f"({r}, {c}) outside weight shape {(layer.d_in, layer.d_out)}")
    pert = float(delta) * rotated_basis_column(layer, r)
    w = layer.fused_weights
    current = layer.weights()[:, c]
    perturbed = realize_column(w, c, current + pert)
    flips = diff_locations(layer.layer_id, w, perturbed)
    before = after = None
    failed = False
    if metric_fn is not None:
        before = metric_fn(layer)
        after = metric_fn(layer.with_weights(perturbed))
        failed = rule.failed(after, before)
    changed = int(np.count_nonzero(_word_view(w)[:, c] != _word_view(perturbed)[:, c]))
    outcome = AttackOutcome(flips, before, after, failed, len(flips), None, "spfa_column",
                            extra={"row": r, "col": c, "delta": float(delta), "elements_changed": changed})
    return pert, outcome


def worst_case_perturbation(layer: ProtectedLayer, x, bits: Sequence[int] | None = None) -> tuple[float, FlipLocation]:
    """Exhaustive single-flip sweep of ``max |dY|`` over every (row, col, bit).

    A flip at ``(r, c)`` with value change ``delta`` changes the output by
    ``X_rot[:, r] * delta`` in column ``c``, so its infinity norm is
    ``|delta| * peak_r`` of the rotated input.
    """
    peaks = channel_linf(apply_wy_right(x, layer.wy))
    w = layer.fused_weights
    old = layer.weights()
    bits = range(bit_width_of(w)) if bits is None else bits
    rows, cols = np.indices(w.shape)
    rows, cols = rows.ravel(), cols.ravel()
    best, best_loc = -1.0, None
    for bit in bits:
        nw = flip_weights(w, rows, cols, np.full(rows.size, bit))
        new = dequantize(nw) if isinstance(nw, QuantizedTensor) else nw
        with np.errstate(invalid="ignore", over="ignore"):
            score = np.where(peaks[:, None] == 0, 0.0, np.abs(new - old) * peaks[:, None])
        score = np.where(np.isnan(score), np.inf, score)
        flat = int(np.argmax(score))
        if score.flat[flat] > best:
            best = float(score.flat[flat])
            r, c = divmod(flat, w.shape[1])
            best_loc = FlipLocation(layer.layer_id, r, c, int(bit))
    return best, best_loc
