"""Accumulated image-attention injection applied inside the attention module.

Per generated position and per gated layer the pipeline is:

1. capture: reduce the current row's image slice across heads (max by default)
2. accumulate: fold the captured vector into the layer's running state
3. inject: add ``beta * accumulated`` to every head's image slice
4. renormalize: divide each head's row by its sum

The state for each layer is isolated; layers outside ``layer_range`` never
allocate state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tarac.attention_math import ImageSpan, reduce_heads, renormalize_last_row

HEAD_REDUCERS = ("max", "mean")
RENORM_MODES = ("rowsum", "softmax-diagnostic")
UPDATE_RULES = ("ema", "two-step-literal")

_ALIASES = {"softmax": "softmax-diagnostic", "literal": "two-step-literal"}


@dataclass(frozen=True)
class TaracConfig:
    alpha: float = 0.5
    beta: float = 0.5
    layer_range: tuple[int, int] = (10, 16)
    head_reducer: str = "max"
    renorm_mode: str = "rowsum"
    update_rule: str = "ema"

    def __post_init__(self):
        object.__setattr__(self, "renorm_mode", _ALIASES.get(self.renorm_mode, self.renorm_mode))
        object.__setattr__(self, "update_rule", _ALIASES.get(self.update_rule, self.update_rule))
        object.__setattr__(self, "layer_range", tuple(int(x) for x in self.layer_range))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta >= 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.beta > 2.0:
            warnings.warn(
                f"beta={self.beta} > 2: injected attention may dominate and cause repetitive generation",
                stacklevel=3,
            )
        lo, hi = self.layer_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid layer range {lo}:{hi}")
        if self.head_reducer not in HEAD_REDUCERS:
            raise ValueError(f"head_reducer must be one of {HEAD_REDUCERS}")
        if self.renorm_mode not in RENORM_MODES:
            raise ValueError(f"renorm_mode must be one of {RENORM_MODES}")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")

    def check_layers(self, n_layers: int) -> None:
        if self.layer_range[1] > n_layers:
            raise ValueError(f"layer range {self.layers_str} exceeds model depth {n_layers}")

    def gates(self, layer: int) -> bool:
        return self.layer_range[0] <= layer < self.layer_range[1]

    @property
    def layers_str(self) -> str:
        return f"{self.layer_range[0]}:{self.layer_range[1]}"

    @staticmethod
    def parse_layers(text: str) -> tuple[int, int]:
        lo, sep, hi = str(text).partition(":")
        if not sep:
            raise ValueError(f"layer range must look like 'lo:hi', got {text!r}")
        return int(lo), int(hi)


class AccumulatedAttention:
    """Per-layer accumulated image attention of one generation session.

    State lives in one contiguous ``(layers, 2, N_i)`` block holding the
    accumulated and previous captured vector of each layer, plus a per-layer
    step count.  With a fixed
    ``layer_range`` the blocks cover exactly the gated layers and updates to
    other layers are rejected; without one they grow to cover whatever layers
    are updated.
    """

    __slots__ = ("layer_range", "_lo", "_block", "_t")

    def __init__(self, layer_range: Optional[tuple[int, int]] = None):
        self.layer_range = layer_range if layer_range is None or isinstance(layer_range, tuple) else tuple(layer_range)
        self._clear()

    def _clear(self) -> None:
        self._lo = 0
        self._block: Optional[np.ndarray] = None
        self._t: list[int] = []

    def _slot(self, layer: int, n_image: int) -> int:
        if self._block is None:
            lo, hi = self.layer_range if self.layer_range is not None else (layer, layer + 1)
            if not lo <= layer < hi:
                raise ValueError(f"layer {layer} outside state range {lo}:{hi}")
            self._lo = lo
            self._block = np.zeros((hi - lo, 2, n_image))
            self._t = [0] * (hi - lo)
        if self._block.shape[2] != n_image:
            raise ValueError(f"captured length {n_image} != accumulated length {self._block.shape[2]}")
        i = layer - self._lo
        if 0 <= i < len(self._t):
            return i
        if self.layer_range is not None:
            raise ValueError(f"layer {layer} outside state range {self.layer_range}")
        lo = min(self._lo, layer)
        hi = max(self._lo + len(self._t), layer + 1)
        block = np.zeros((hi - lo, 2, n_image))
        t = [0] * (hi - lo)
        k = self._lo - lo
        block[k:k + len(self._t)] = self._block
        t[k:k + len(self._t)] = self._t
        self._lo, self._block, self._t = lo, block, t
        return layer - lo

    @property
    def t(self) -> int:
        """Generated positions processed (max over layers; 0 after reset)."""
        return max(self._t, default=0)

    def layer_t(self, layer: int) -> int:
        i = layer - self._lo
        return self._t[i] if 0 <= i < len(self._t) else 0

    @property
    def layers(self) -> list[int]:
        """Layers currently holding state."""
        return [self._lo + i for i, t in enumerate(self._t) if t > 0]

    def accumulated(self, layer: int) -> Optional[np.ndarray]:
        return self._block[layer - self._lo, 0] if self.layer_t(layer) else None

    def previous(self, layer: int) -> Optional[np.ndarray]:
        return self._block[layer - self._lo, 1] if self.layer_t(layer) else None

    @property
    def nbytes(self) -> int:
        return 0 if self._block is None else self._block.nbytes


def capture_image_attention(row, span: ImageSpan, reducer: str = "max") -> np.ndarray:
    r = np.asarray(row, dtype=np.float64)
    if r.ndim == 1:
        r = r[None, :]
    span.check_within(r.shape[-1])
    return reduce_heads(r[:, span.start:span.end], reducer)


def update_accumulated(
    state: AccumulatedAttention,
    layer: int,
    captured,
    alpha: float,
    rule: str = "ema",
) -> AccumulatedAttention:
    """Fold this step's captured vector into ``layer``'s accumulated attention.

    The first update stores the captured vector as-is.  Later updates mix it
    with weight ``alpha`` against either the running accumulation (``ema``)
    or the previous step's captured vector (``two-step-literal``).  Updates
    happen in place.
    """
    a = np.asarray(captured, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("captured attention must be a vector")
    i = state._slot(layer, a.shape[0])
    acc, prev = state._block[i]
    if state._t[i] > 0:
        if rule == "ema":
            acc *= 1.0 - alpha
        elif rule in ("two-step-literal", "literal"):
            np.multiply(prev, 1.0 - alpha, out=acc)
        else:
            raise ValueError(f"unknown update rule {rule!r}")
        acc += alpha * a
    else:
        acc[:] = a
    prev[:] = a
    state._t[i] += 1
    return state


def inject_accumulated(row, accumulated, beta: float, span: ImageSpan) -> np.ndarray:
    """Return ``row`` with ``beta * accumulated`` added to every head's image slice."""
    acc = np.asarray(accumulated, dtype=np.float64)
    if acc.shape != (len(span),):
        raise ValueError(f"accumulated length {acc.shape} != span length {len(span)}")
    out = np.array(row, dtype=np.float64)
    span.check_within(out.shape[-1])
    if beta != 0.0:
        out[..., span.start:span.end] += beta * acc
    return out


def apply_layer_intervention(
    layer: int,
    row,
    state: AccumulatedAttention,
    cfg: TaracConfig,
    span: ImageSpan,
) -> np.ndarray:
    """Capture, accumulate, inject and renormalize one layer's current row.

    Equivalent to chaining :func:`capture_image_attention`,
    :func:`update_accumulated`, :func:`inject_accumulated` and
    :func:`renormalize_last_row`, fused into one copy of the row because it
    runs once per gated layer per generated token.
    """
    lo, hi = cfg.layer_range
    s, e = span.start, span.end
    if not lo <= layer < hi or s == e:
        return row
    r = row if isinstance(row, np.ndarray) and row.ndim == 2 else np.atleast_2d(np.asarray(row, dtype=np.float64))
    if e > r.shape[1]:
        span.check_within(r.shape[1])
    sl = r[:, s:e]
    captured = sl.max(axis=0) if cfg.head_reducer == "max" else sl.mean(axis=0)
    update_accumulated(state, layer, captured, cfg.alpha, cfg.update_rule)
    acc = state._block[layer - state._lo, 0]
    out = r.copy()
    if cfg.beta != 0.0:
        out[:, s:e] += cfg.beta * acc
    if cfg.renorm_mode == "rowsum":
        sums = out.sum(axis=1, keepdims=True)
        if not sums.min() > 0.0:
            raise ValueError("zero attention mass")
        out /= sums
    else:
        out = renormalize_last_row(out, cfg.renorm_mode)
    return out if np.ndim(row) == 2 else out[0]


def reset(state: AccumulatedAttention) -> AccumulatedAttention:
    state._clear()
    return state


class TaracHook:
    """Attention hook binding a config to a fresh per-session state."""

    __slots__ = ("cfg", "state")

    def __init__(self, cfg: TaracConfig):
        self.cfg = cfg
        self.state = AccumulatedAttention(cfg.layer_range)

    def reset(self) -> None:
        reset(self.state)

    def __call__(self, layer: int, row: np.ndarray, span: ImageSpan, step: int) -> np.ndarray:
        return apply_layer_intervention(layer, row, self.state, self.cfg, span)
