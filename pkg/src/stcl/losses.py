"""InfoNCE loss, its in-batch form and the analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    symmetrized: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(z - m), axis=axis))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def infonce_loss(q, k_pos, negs: Sequence, cfg: LossConfig = LossConfig()) -> float:
    """Negative log softmax probability of ``k_pos`` among ``{k_pos} + negs``."""
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    negs = np.asarray(negs, dtype=np.float64) if len(negs) else np.empty((0,) + q.shape)
    if q.ndim != 1 or k_pos.shape != q.shape or negs.ndim != 2 or negs.shape[1] != q.shape[0]:
        raise ValueError("dimension mismatch between query and keys")
    if len(negs) == 0:
        return 0.0
    logits = np.concatenate([[q @ k_pos], negs @ q]) / cfg.temperature
    return float(_logsumexp(logits) - logits[0])


def _check_batch(queries, keys) -> Tuple[np.ndarray, np.ndarray]:
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"queries {q.shape} and keys {k.shape} must be equal n x d arrays")
    if q.shape[0] < 2:
        raise ValueError("in-batch InfoNCE needs at least 2 rows")
    return q, k


def infonce_batch(queries, keys, cfg: LossConfig = LossConfig()) -> float:
    """Mean InfoNCE with row ``i`` of ``keys`` positive for query ``i`` and other rows negative."""
    return infonce_grad(queries, keys, cfg)[0]


def infonce_grad(queries, keys, cfg: LossConfig = LossConfig()) -> Tuple[float, np.ndarray, np.ndarray]:
    """Return ``(loss, dloss/dqueries, dloss/dkeys)`` of :func:`infonce_batch`.

    The gradient treats rows as free vectors; callers that normalize
    upstream chain through the normalization themselves.
    """
    q, k = _check_batch(queries, keys)
    n = q.shape[0]
    tau = cfg.temperature
    logits = q @ k.T / tau
    diag = np.diag(logits)
    eye = np.eye(n)
    loss_qk = np.mean(_logsumexp(logits, axis=1) - diag)
    g = (_softmax(logits) - eye) / n
    if cfg.symmetrized:
        loss_kq = np.mean(_logsumexp(logits, axis=0) - diag)
        g = 0.5 * g + 0.5 * (_softmax(logits.T) - eye).T / n
        loss = 0.5 * (loss_qk + loss_kq)
    else:
        loss = loss_qk
    return float(loss), g @ k / tau, g.T @ q / tau
