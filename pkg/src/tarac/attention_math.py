"""Attention-row kernels: softmax, single-query attention, head reduction,
renormalization and image-span mass.

Rows are float64 numpy arrays shaped ``(H, N_t)`` (or ``(N_t,)`` for a single
head).  The checked entry points validate their inputs; ``softmax`` is the
unchecked batched variant used on the decode hot path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ImageSpan:
    """Half-open, zero-based range ``[start, end)`` of image-token positions."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid image span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def check_within(self, n: int) -> None:
        if self.end > n:
            raise ValueError(f"image span [{self.start}, {self.end}) out of bounds for length {n}")

    @classmethod
    def parse(cls, text: str) -> "ImageSpan":
        lo, _, hi = text.partition(":")
        return cls(int(lo), int(hi))


def softmax(scores: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis, no validation."""
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_row(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("empty row")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    return softmax(s)


def causal_attention_row(query, keys, scale: float | None = None) -> np.ndarray:
    """Attention of one query over the cached prefix ``keys`` (N_t x d_head).

    Causality is the caller's job: pass exactly the keys of positions up to
    and including the current one.
    """
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] == 0:
        raise ValueError("keys must be a non-empty N_t x d_head matrix")
    if q.ndim != 1 or q.shape[0] != k.shape[1]:
        raise ValueError(f"dimension mismatch: query {q.shape} vs keys {k.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[0])
    return softmax_row(k @ q * scale)


def reduce_heads(slice_, mode: str = "max") -> np.ndarray:
    """Collapse an ``H x N_i`` slice across heads with elementwise max or mean."""
    a = np.asarray(slice_, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("reduce_heads needs at least one head")
    if mode == "max":
        return a.max(axis=0)
    if mode == "mean":
        return a.mean(axis=0)
    raise ValueError(f"unknown head reducer {mode!r}")


def renormalize_last_row(row, mode: str = "rowsum") -> np.ndarray:
    """Restore each head's row to a probability distribution.

    ``rowsum`` divides by the row sum and keeps within-head ratios.
    ``softmax-diagnostic`` re-applies softmax; it flattens rows toward
    ``1/N_t`` and exists only to exhibit that failure in tests.
    """
    r = np.asarray(row, dtype=np.float64)
    if mode == "rowsum":
        sums = r.sum(axis=-1, keepdims=True)
        if np.any(sums <= 0.0):
            raise ValueError("zero attention mass")
        return r / sums
    if mode in ("softmax-diagnostic", "softmax"):
        return softmax(r)
    raise ValueError(f"unknown renorm mode {mode!r}")


def image_mass(row, span: ImageSpan) -> float:
    r = np.asarray(row, dtype=np.float64)
    span.check_within(r.shape[-1])
    return float(r[..., span.start:span.end].sum())
