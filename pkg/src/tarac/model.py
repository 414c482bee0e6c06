"""Minimal pre-norm decoder-only transformer with a KV cache.

The model exists to host the attention hook.  Weights are drawn from the
portable SplitMix64 streams in :mod:`tarac.rng`, rounded to float32 (the
storage precision of the weight file) and computed with in float64.

Vocabulary layout: id 0 is BOS, id 1 is EOS, the top ``image_vocab`` ids are
image tokens (embeddings from their own stream), everything else is text.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from tarac.attention_math import ImageSpan, softmax
from tarac.rng import Stream

# hook(layer, row[H, N_t], span, step) -> row
AttentionHook = Callable[[int, np.ndarray, ImageSpan, int], np.ndarray]

MAGIC = b"TTWT"
FORMAT_VERSION = 1
_NO_SPAN = ImageSpan(0, 0)


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 8
    d_model: int = 256
    vocab_size: int = 1024
    max_seq_len: int = 256
    seed: int = 0
    image_vocab: int = 256
    bos_id: int = 0
    eos_id: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.d_model < 1 or self.d_model % self.n_heads:
            raise ValueError("d_model must be a positive multiple of n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if not 0 <= self.image_vocab <= self.vocab_size - 2:
            raise ValueError("image_vocab must leave room for BOS/EOS")
        for name in ("bos_id", "eos_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ValueError(f"{name} outside vocabulary")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def image_ids(self) -> range:
        return range(self.vocab_size - self.image_vocab, self.vocab_size)

    @property
    def text_ids(self) -> range:
        return range(2, self.vocab_size - self.image_vocab)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    NAMES = ("wq", "wk", "wv", "wo", "w1", "w2")

    @cached_property
    def wqkv(self) -> np.ndarray:
        return np.concatenate([self.wq, self.wk, self.wv], axis=1)


@dataclass
class Weights:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    w_out: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, lw in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", getattr(lw, n)) for n in LayerWeights.NAMES)
        out.append(("w_out", self.w_out))
        return out

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for _, a in self.tensors())


def expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = config.d_model, config.d_ff
    shapes = [("tok_emb", (config.vocab_size, d)), ("pos_emb", (config.max_seq_len, d))]
    per_layer = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, f), "w2": (f, d)}
    for i in range(config.n_layers):
        shapes.extend((f"layer{i}.{n}", per_layer[n]) for n in LayerWeights.NAMES)
    shapes.append(("w_out", (d, config.vocab_size)))
    return shapes


def _draw(seed: int, name: str, shape: tuple[int, ...], scale: float) -> np.ndarray:
    n = int(np.prod(shape))
    x = Stream(seed, name).normal(n) * scale
    return x.astype(np.float32).astype(np.float64).reshape(shape)


def _assemble(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Weights:
    layers = [
        LayerWeights(**{n: arrays[f"layer{i}.{n}"] for n in LayerWeights.NAMES})
        for i in range(config.n_layers)
    ]
    return Weights(config, arrays["tok_emb"], arrays["pos_emb"], layers, arrays["w_out"])


def init_weights(config: ModelConfig) -> Weights:
    """Draw all tensors as N(0, 1/d_model), one named stream per tensor.

    Image-token embedding rows come from the ``image_emb`` stream instead of
    ``tok_emb`` so image ids are statistically independent of text ids.
    """
    scale = 1.0 / math.sqrt(config.d_model)
    arrays = {name: _draw(config.seed, name, shape, scale) for name, shape in expected_shapes(config)}
    if config.image_vocab:
        lo = config.image_ids.start
        arrays["tok_emb"][lo:] = _draw(config.seed, "image_emb", (config.image_vocab, config.d_model), scale)
    return _assemble(config, arrays)


def save_weights(weights: Weights, path) -> None:
    tensors = weights.tensors()
    header = json.dumps(
        {
            "config": asdict(weights.config),
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        for _, a in tensors:
            fh.write(a.astype("<f4").tobytes())


def load_weights(path) -> Weights:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != MAGIC:
        raise WeightFormatError("unrecognized format")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise WeightFormatError("unrecognized format")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
        declared = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError("corrupt file") from exc
    if declared != expected_shapes(config):
        raise WeightFormatError("corrupt file")
    payload = memoryview(data)[10 + hlen:]
    total = sum(int(np.prod(s)) for _, s in declared) * 4
    if len(payload) != total:
        raise WeightFormatError("corrupt file")
    arrays, off = {}, 0
    for name, shape in declared:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
    return _assemble(config, arrays)


@dataclass
class KvCache:
    """Keys/values shaped (L, H, max_seq_len, d_head); ``length`` positions are valid."""

    k: np.ndarray
    v: np.ndarray
    length: int = 0
    prompt_len: int = 0

    @classmethod
    def empty(cls, config: ModelConfig) -> "KvCache":
        shape = (config.n_layers, config.n_heads, config.max_seq_len, config.d_head)
        return cls(np.zeros(shape), np.zeros(shape))

    def layer_lengths(self) -> list[int]:
        return [self.length] * self.k.shape[0]


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _check_tokens(config: ModelConfig, tokens) -> None:
    for t in tokens:
        if not 0 <= t < config.vocab_size:
            raise ValueError(f"token id {t} outside vocabulary")


def forward_full(
    weights: Weights,
    tokens,
    hook: Optional[AttentionHook] = None,
    span: ImageSpan = _NO_SPAN,
    first_hooked: Optional[int] = None,
    cache: Optional[KvCache] = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the whole sequence without a cache (causal mask over all positions).

    The hook is called for every position ``p >= first_hooked`` in increasing
    order with ``step = p - first_hooked + 1``.  Returns logits for every
    position and the final position's (post-hook) attention row per layer.
    When ``cache`` is given its first ``len(tokens)`` slots are filled.
    """
    cfg = weights.config
    tokens = list(tokens)
    n = len(tokens)
    if n == 0:
        raise ValueError("empty prompt")
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence of {n} tokens exceeds max_seq_len={cfg.max_seq_len}")
    _check_tokens(cfg, tokens)
    if first_hooked is None:
        first_hooked = n - 1
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    mask = np.triu(np.full((n, n), -np.inf), k=1)

    x = weights.tok_emb[tokens] + weights.pos_emb[:n]
    last_rows = []
    for li, lw in enumerate(weights.layers):
        qkv = _layer_norm(x) @ lw.wqkv
        q, k, v = (qkv[:, i * cfg.d_model:(i + 1) * cfg.d_model].reshape(n, H, dh).transpose(1, 0, 2) for i in range(3))
        if cache is not None:
            cache.k[li, :, :n] = k
            cache.v[li, :, :n] = v
        att = softmax(q @ k.transpose(0, 2, 1) * scale + mask)
        if hook is not None:
            for p in range(first_hooked, n):
                att[:, p, : p + 1] = hook(li, att[:, p, : p + 1].copy(), span, p - first_hooked + 1)
        last_rows.append(att[:, -1, :])
        out = (att @ v).transpose(1, 0, 2).reshape(n, cfg.d_model)
        x = x + out @ lw.wo
        x = x + _gelu(_layer_norm(x) @ lw.w1) @ lw.w2
    logits = _layer_norm(x) @ weights.w_out
    return logits, last_rows


def prefill(
    weights: Weights,
    tokens,
    hook: Optional[AttentionHook] = None,
    span: ImageSpan = _NO_SPAN,
) -> tuple[KvCache, np.ndarray, list[np.ndarray]]:
    """Process the prompt, hooking only the final position (generation step 1)."""
    cache = KvCache.empty(weights.config)
    logits, rows = forward_full(weights, tokens, hook, span, first_hooked=None, cache=cache)
    cache.length = cache.prompt_len = len(tokens)
    return cache, logits[-1], rows


def forward_token(
    weights: Weights,
    cache: KvCache,
    token: int,
    hook: Optional[AttentionHook] = None,
    span: ImageSpan = _NO_SPAN,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Append one token to the cache and return next-token logits.

    Only the new position's query/key/value are computed; its attention row is
    passed through ``hook`` between softmax and value mixing.  The step index
    given to the hook counts generated positions, the final prefill position
    being step 1.
    """
    cfg = weights.config
    n = cache.length
    if n == 0:
        raise ValueError("forward_token needs a prefilled cache")
    if n >= cfg.max_seq_len:
        raise ValueError(f"cache overflow: max_seq_len={cfg.max_seq_len}")
    if not 0 <= token < cfg.vocab_size:
        raise ValueError(f"token id {token} outside vocabulary")
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    scale = 1.0 / math.sqrt(dh)
    step = n - cache.prompt_len + 2

    x = weights.tok_emb[token] + weights.pos_emb[n]
    rows = []
    for li, lw in enumerate(weights.layers):
        qkv = _layer_norm(x) @ lw.wqkv
        cache.k[li, :, n] = qkv[d:2 * d].reshape(H, dh)
        cache.v[li, :, n] = qkv[2 * d:].reshape(H, dh)
        keys = cache.k[li, :, : n + 1]
        scores = (keys @ qkv[:d].reshape(H, dh, 1))[:, :, 0] * scale
        row = softmax(scores)
        if hook is not None:
            row = hook(li, row, span, step)
        rows.append(row)
        out = (row[:, None, :] @ cache.v[li, :, : n + 1]).reshape(d)
        x = x + out @ lw.wo
        x = x + _gelu(_layer_norm(x) @ lw.w1) @ lw.w2
    cache.length = n + 1
    return _layer_norm(x) @ weights.w_out, rows
