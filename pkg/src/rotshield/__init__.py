"""Rotation-based hardening of quantized linear layers against bit-flip faults."""
from .attacks import (
    AttackOutcome,
    FailureRule,
    greedy_bit_search,
    random_ber_attack,
    sample_ber_flips,
    spfa_column_attack,
    spfa_locate,
    worst_case_perturbation,
)
from .config import ConfigError, RunConfig
from .container import ContainerError, RortContainer, load_model, read_container, save_model, write_container
from .defense import (
    DefenseConfig,
    ProtectedLayer,
    build_rotation,
    calibrate,
    correction_flop_ratio,
    fuse_weights,
    protected_forward,
    verify_lossless,
)
from .harness import Bench, EvalReport, alpha_sweep, greedy_attack, monte_carlo, protect_model
from .linalg import CompactWY, HouseholderVector, apply_householder, householder_from_outlier, wy_append
from .model import ToyModel, build_toy_model, forward, probe_inputs, proxy_metric
from .outliers import ChannelStats, channel_linf, compute_threshold
from .quant import FlipLocation, QuantizedTensor, dequantize, flip_bit, hamming_distance, quantize

__version__ = "0.1.0"
