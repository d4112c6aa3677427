"""Dense matrix helpers and Householder / compact-WY rotation machinery.

Matrices are plain 2-D ``float64`` numpy arrays. A product of Householder
reflectors ``H_1 H_2 ... H_m`` is carried in compact WY form
``Q = I - V T V^T`` so that applying it costs two skinny products instead
of a dense ``d x d`` multiply.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(x, w) -> np.ndarray:
    """Return ``x @ w`` after checking that the inner dimensions agree."""
    x = as_matrix(x, "X")
    w = as_matrix(w, "W")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"dimension mismatch: X is {x.shape}, W is {w.shape}")
    return x @ w


@dataclass(frozen=True)
class HouseholderVector:
    """Unit normal ``v`` of the reflection ``H = I - 2 v v^T``."""

    v: np.ndarray
    target_channel: int

    @property
    def dim(self) -> int:
        return self.v.shape[0]

    def dense(self) -> np.ndarray:
        return np.eye(self.dim) - 2.0 * np.outer(self.v, self.v)


def uniform_direction(d: int) -> np.ndarray:
    return np.full(d, 1.0 / np.sqrt(d))


def householder_from_outlier(d: int, k: int) -> HouseholderVector:
    """Reflector that swaps the basis vector ``e_k`` with the flat vector ``u``.

    ``u`` has every entry equal to ``1/sqrt(d)``, so ``H e_k = u`` spreads a
    spike on channel ``k`` evenly over all ``d`` channels.
    """
    if d < 2:
        raise ValueError(f"reflection needs d >= 2, got d={d}")
    if not 0 <= k < d:
        raise ValueError(f"channel {k} out of range for d={d}")
    v = -uniform_direction(d)
    v[k] += 1.0
    v /= np.linalg.norm(v)
    return HouseholderVector(v=v, target_channel=int(k))


def apply_householder(x, h: HouseholderVector) -> np.ndarray:
    x = as_matrix(x, "X")
    if x.shape[1] != h.dim:
        raise ValueError(f"dimension mismatch: X has {x.shape[1]} columns, reflector has {h.dim}")
    return x - 2.0 * np.outer(x @ h.v, h.v)


@dataclass(frozen=True)
class CompactWY:
    """``Q = I - V T V^T`` with ``V`` (d x m) unit columns and ``T`` (m x m) upper triangular."""

    V: np.ndarray
    T: np.ndarray
    protected_channels: tuple[int, ...] = field(default=())
    dim: int = 0

    @property
    def m(self) -> int:
        return self.V.shape[1]

    @classmethod
    def empty(cls, d: int) -> "CompactWY":
        return cls(V=np.zeros((d, 0)), T=np.zeros((0, 0)), protected_channels=(), dim=int(d))


def wy_append(wy: CompactWY, h: HouseholderVector, m_max: int | None = None) -> CompactWY:
    """Right-multiply the represented rotation by ``H = I - 2 v v^T``.

    With ``Q_old = I - V T V^T``, the product ``Q_old H`` equals
    ``I - [V v] [[T, t], [0, 2]] [V v]^T`` where ``t = -2 T (V^T v)``.
    """
    if h.dim != wy.dim:
        raise ValueError(f"reflector dimension {h.dim} != rotation dimension {wy.dim}")
    m = wy.m
    if m_max is not None and m + 1 > m_max:
        raise ValueError(f"appending would exceed m_max={m_max}")
    t = -2.0 * (wy.T @ (wy.V.T @ h.v))
    T = np.zeros((m + 1, m + 1))
    T[:m, :m] = wy.T
    T[:m, m] = t
    T[m, m] = 2.0
    V = np.column_stack([wy.V, h.v]) if m else h.v.reshape(-1, 1).copy()
    return CompactWY(V=V, T=T, protected_channels=wy.protected_channels + (h.target_channel,), dim=wy.dim)


def wy_to_dense(wy: CompactWY) -> np.ndarray:
    """Materialize ``Q``. Only meant for tests and white-box analysis."""
    return np.eye(wy.dim) - wy.V @ wy.T @ wy.V.T


def apply_wy_right(x, wy: CompactWY) -> np.ndarray:
    """Return ``X Q`` computed as ``X - (X V) T V^T``."""
    x = as_matrix(x, "X")
    if x.shape[1] != wy.dim:
        raise ValueError(f"dimension mismatch: X has {x.shape[1]} columns, rotation has dim {wy.dim}")
    if wy.m == 0:
        return x
    return x - ((x @ wy.V) @ wy.T) @ wy.V.T


def apply_wy_transpose_left(w, wy: CompactWY) -> np.ndarray:
    """Return ``Q^T W`` computed as ``W - V T^T (V^T W)``."""
    w = as_matrix(w, "W")
    if w.shape[0] != wy.dim:
        raise ValueError(f"dimension mismatch: W has {w.shape[0]} rows, rotation has dim {wy.dim}")
    if wy.m == 0:
        return w
    return w - wy.V @ (wy.T.T @ (wy.V.T @ w))
