"""Attention distance, Fourier log-amplitude ratio, and top-k retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .formats import EmbeddingSet
from .geo import ImageRecord, haversine_m

LOG_EPS = 1e-12


def patch_centers(rows: int, cols: int, patch_size: float) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return (np.stack([r.ravel(), c.ravel()], axis=1) + 0.5) * patch_size


def _strip_class_token(attn: np.ndarray) -> np.ndarray:
    a = attn[..., 1:, 1:]
    s = a.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("a patch token attends only to the class token")
    return a / s


def attention_distance(
    attn,
    rows: int,
    cols: int,
    patch_size: float = 16.0,
    class_token: bool = False,
    atol: float = 1e-4,
) -> np.ndarray:
    """Attention-weighted mean query-key pixel distance.

    ``attn`` has shape ``(..., N, N)`` with rows summing to one; the result
    drops the last two axes (typically giving ``(layers, heads)``).
    """
    attn = np.asarray(attn, dtype=np.float64)
    n = rows * cols + (1 if class_token else 0)
    if attn.shape[-2:] != (n, n):
        raise ValueError(f"expected trailing shape ({n}, {n}), got {attn.shape[-2:]}")
    if np.any(attn < 0) or np.any(np.abs(attn.sum(axis=-1) - 1.0) > atol):
        raise ValueError("attention rows must be non-negative and sum to 1")
    if class_token:
        attn = _strip_class_token(attn)
    pos = patch_centers(rows, cols, patch_size)
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    return (attn * dist).sum(axis=-1).mean(axis=-1)


def radial_frequency(rows: int, cols: int) -> np.ndarray:
    """Normalized radius of each centred FFT bin; 1 at the half-diagonal."""
    fy = np.fft.fftshift(np.fft.fftfreq(rows))
    fx = np.fft.fftshift(np.fft.fftfreq(cols))
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return r / np.sqrt(0.5)


def delta_log_amplitude(
    fmap,
    rows: int,
    cols: int,
    class_token: bool = False,
    low_band: Tuple[float, float] = (0.0, 0.1),
    high_band: Tuple[float, float] = (0.9, 1.0),
    log_base: Optional[float] = None,
) -> np.ndarray:
    """High- minus low-frequency log amplitude of token feature maps.

    ``fmap`` has shape ``(..., N, C)``; the result drops the last two axes.
    Natural log unless ``log_base`` is given.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if rows < 2 or cols < 2:
        raise ValueError("frequency analysis needs at least a 2 x 2 grid")
    if class_token:
        fmap = fmap[..., 1:, :]
    if fmap.shape[-2] != rows * cols:
        raise ValueError(f"expected {rows * cols} tokens, got {fmap.shape[-2]}")
    grid = np.moveaxis(fmap.reshape(fmap.shape[:-2] + (rows, cols, fmap.shape[-1])), -1, -3)
    amp = np.abs(np.fft.fftshift(np.fft.fft2(grid), axes=(-2, -1)))
    r = radial_frequency(rows, cols)
    low = (r >= low_band[0]) & (r <= low_band[1])
    high = (r >= high_band[0]) & (r <= high_band[1])
    delta = np.log(amp[..., high].mean(-1) + LOG_EPS) - np.log(amp[..., low].mean(-1) + LOG_EPS)
    if log_base is not None:
        delta = delta / np.log(log_base)
    return delta.mean(axis=-1)


@dataclass
class RetrievalHit:
    id: str
    cosine_distance: float
    geo_distance_m: float
    year: int
    month: int
    heading_deg: float


@dataclass
class RetrievalResult:
    query_id: str
    hits: List[RetrievalHit]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "results": [dict(rank=n + 1, **vars(h)) for n, h in enumerate(self.hits)],
        }


def retrieve_topk(query_id: str, embeddings: EmbeddingSet, records: Sequence[ImageRecord], k: int = 5) -> RetrievalResult:
    """Nearest rows by cosine distance, excluding the query; ties broken by id."""
    row = embeddings.row_of()
    if query_id not in row:
        raise KeyError(f"unknown query id {query_id!r}")
    by_id = {r.id: r for r in records}
    qi = row[query_id]
    dist = 1.0 - embeddings.matrix @ embeddings.matrix[qi]
    others = [i for i in range(len(embeddings)) if i != qi]
    others.sort(key=lambda i: (dist[i], embeddings.ids[i]))
    q = by_id.get(query_id)
    hits = []
    for i in others[:k]:
        rid = embeddings.ids[i]
        r = by_id.get(rid)
        hits.append(
            RetrievalHit(
                id=rid,
                cosine_distance=float(dist[i]),
                geo_distance_m=haversine_m(q.pos, r.pos) if q and r else float("nan"),
                year=r.capture_year if r else 0,
                month=r.capture_month if r else 0,
                heading_deg=r.heading_deg if r else float("nan"),
            )
        )
    return RetrievalResult(query_id, hits)
