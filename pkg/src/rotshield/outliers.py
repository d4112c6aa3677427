"""Per-channel activation peaks and the composite outlier threshold."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_matrix

DEFAULT_ALPHA = 6.0
ABSOLUTE_FLOOR = 1.0


@dataclass(frozen=True)
class ChannelStats:
    peaks: np.ndarray
    mean: float
    stddev: float
    alpha: float
    tau: float
    outliers: tuple[int, ...]
    # channels above tau that were not kept because of a per-layer cap
    dropped: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return self.peaks.shape[0]

    def to_dict(self) -> dict:
        return {
            "peaks": [float(p) for p in self.peaks],
            "mean": self.mean,
            "stddev": self.stddev,
            "alpha": self.alpha,
            "tau": self.tau,
            "outliers": list(self.outliers),
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(
            peaks=np.asarray(d["peaks"], dtype=np.float64),
            mean=float(d["mean"]),
            stddev=float(d["stddev"]),
            alpha=float(d["alpha"]),
            tau=float(d["tau"]),
            outliers=tuple(int(i) for i in d["outliers"]),
            dropped=tuple(int(i) for i in d.get("dropped", ())),
        )

    def truncated(self, m_max: int) -> "ChannelStats":
        """Keep only the ``m_max`` flagged channels with the largest peaks."""
        flagged = self.outliers + self.dropped
        if len(flagged) <= m_max:
            return self
        # stable sort on descending peak, ties broken by channel index
        ranked = sorted(flagged, key=lambda j: (-self.peaks[j], j))
        keep = tuple(sorted(ranked[:m_max]))
        drop = tuple(sorted(ranked[m_max:]))
        return replace(self, outliers=keep, dropped=drop)


def channel_linf(x) -> np.ndarray:
    """Column-wise max absolute value, ``peaks[j] = max_i |x[i, j]|``."""
    x = as_matrix(x, "X")
    if x.size == 0:
        raise ValueError("cannot compute channel peaks of an empty matrix")
    return np.max(np.abs(x), axis=0)


def compute_threshold(peaks, alpha: float = DEFAULT_ALPHA) -> ChannelStats:
    """Flag channels whose peak exceeds ``max(mu + alpha*sigma, 2*mu, 1.0)``.

    ``sigma`` is the population standard deviation. A channel sitting exactly
    on the threshold is not flagged.
    """
    peaks = np.asarray(peaks, dtype=np.float64).ravel()
    if peaks.size == 0:
        raise ValueError("peaks must be nonempty")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    mu = float(np.mean(peaks))
    sigma = float(np.std(peaks))
    tau = max(mu + alpha * sigma, 2.0 * mu, ABSOLUTE_FLOOR)
    outliers = tuple(int(j) for j in np.flatnonzero(peaks > tau))
    return ChannelStats(peaks=peaks, mean=mu, stddev=sigma, alpha=float(alpha), tau=tau, outliers=outliers)


def amplification_bound(delta_w: float, peaks, j: int) -> float:
    """Worst per-token output error from perturbing any weight in row ``j`` by ``delta_w``."""
    peaks = np.asarray(peaks, dtype=np.float64)
    if not 0 <= j < peaks.shape[0]:
        raise IndexError(f"channel {j} out of range for {peaks.shape[0]} channels")
    return abs(float(delta_w)) * float(peaks[j])
