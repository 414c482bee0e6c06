"""Autoregressive generation sessions with optional accumulated-attention hook."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tarac.analytics import TraceRecord
from tarac.attention_math import ImageSpan, softmax
from tarac.intervention import TaracConfig, TaracHook
from tarac.model import ModelConfig, Weights, forward_token, prefill
from tarac.rng import Stream


@dataclass(frozen=True)
class SequenceLayout:
    """Prompt layout ``[leading tokens][image tokens][text tokens]``.

    ``n_prompt`` counts every non-image prompt token, the ``image_offset``
    leading ones included, so the prompt length is ``n_image + n_prompt``.
    """

    n_image: int = 64
    n_prompt: int = 16
    image_offset: int = 1

    def __post_init__(self):
        if self.n_image < 0 or self.n_prompt < 0 or self.image_offset < 0:
            raise ValueError("layout counts must be non-negative")
        if self.image_offset > self.n_prompt:
            raise ValueError("image_offset cannot exceed n_prompt")

    @property
    def span(self) -> ImageSpan:
        return ImageSpan(self.image_offset, self.image_offset + self.n_image)

    @property
    def prompt_len(self) -> int:
        return self.n_image + self.n_prompt

    def n_t(self, t: int) -> int:
        """Attention-row length at generation step ``t`` (1-based)."""
        return self.n_image + self.n_prompt + t - 1


def build_prompt(config: ModelConfig, layout: SequenceLayout, seed: int = 0) -> list[int]:
    """Deterministic synthetic prompt: BOS, filler text, image ids, text ids."""
    def pick(name: str, ids: range, n: int) -> list[int]:
        if n == 0:
            return []
        if len(ids) == 0:
            raise ValueError(f"model has no {name} ids")
        w = Stream(seed, f"prompt.{name}").words(n)
        return [ids.start + int(x % np.uint64(len(ids))) for x in w]

    lead = [config.bos_id] + pick("lead", config.text_ids, layout.image_offset - 1) if layout.image_offset else []
    image = pick("image", config.image_ids, layout.n_image)
    text = pick("text", config.text_ids, layout.n_prompt - layout.image_offset)
    return lead + image + text


def greedy_pick(logits) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty logits")
    if np.all(x == -np.inf):
        raise ValueError("all logits are -inf")
    return int(np.argmax(x))


@dataclass(frozen=True)
class Sampler:
    kind: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if self.kind == "temperature" and not self.temperature > 0:
            raise ValueError("temperature must be > 0")

    def pick(self, logits: np.ndarray, step: int) -> int:
        if self.kind == "greedy":
            return greedy_pick(logits)
        p = softmax(np.asarray(logits, dtype=np.float64) / self.temperature)
        u = Stream(self.seed, "sampler").uniform(1, start=step - 1)[0]
        c = np.cumsum(p)
        return int(min(np.searchsorted(c, u * c[-1], side="right"), len(p) - 1))


@dataclass
class GenerationResult:
    tokens: list[int] = field(default_factory=list)
    records: list[TraceRecord] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)
    stop_reason: str = "max_new_tokens"
    logits: list[np.ndarray] = field(default_factory=list)
    # head-mean image mass of each recorded row before the hook touched it
    pre_masses: list[float] = field(default_factory=list)

    def mean_mass(self) -> float:
        return float(np.mean([r.mass for r in self.records])) if self.records else 0.0

    def within_run_uplift(self) -> float:
        """Mean recorded image mass after the hook minus before it."""
        if not self.records:
            return 0.0
        return self.mean_mass() - float(np.mean(self.pre_masses))

    def tpot(self) -> float:
        """Mean decode-phase seconds per token (prefill-bearing first token excluded)."""
        t = self.timings[1:] or self.timings
        return float(np.mean(t)) if t else 0.0


class _Recorder:
    def __init__(self, inner, layers: set[int], profile: bool):
        self.inner = inner
        self.layers = layers
        self.profile = profile
        self.records: list[TraceRecord] = []
        self.pre_masses: list[float] = []

    def __call__(self, layer, row, span, step):
        if layer in self.layers:
            self.pre_masses.append(float(row[:, span.start:span.end].sum(axis=1).mean()))
        if self.inner is not None:
            row = self.inner(layer, row, span, step)
        if layer in self.layers:
            sl = row[:, span.start:span.end]
            prof = sl.mean(axis=0) if self.profile else None
            self.records.append(TraceRecord(step, layer, float(sl.sum(axis=1).mean()), prof))
        return row


def _record_set(record_layers, tarac: Optional[TaracConfig], n_layers: int) -> set[int]:
    if record_layers is None or record_layers == "intervened":
        if tarac is None:
            return set(range(n_layers))
        return set(range(*tarac.layer_range))
    if record_layers == "all":
        return set(range(n_layers))
    if record_layers == "none":
        return set()
    return set(record_layers)


class DecodeSession:
    """One generation in progress: owns the KV cache and the hook state.

    ``step()`` produces one token (the first call runs prefill).  Sessions
    share only the immutable weights, so several may be stepped alternately,
    which is how the overhead benchmark pairs its arms.
    """

    def __init__(
        self,
        weights: Weights,
        layout: SequenceLayout,
        prompt: Sequence[int],
        tarac: Optional[TaracConfig] = None,
        max_new_tokens: int = 64,
        sampler: Sampler = Sampler(),
        record_layers="intervened",
        record_profile: bool = False,
        keep_logits: bool = False,
    ):
        cfg = weights.config
        self.prompt = list(prompt)
        if not self.prompt:
            raise ValueError("empty prompt")
        if max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        self.span = layout.span
        self.span.check_within(len(self.prompt))
        if max_new_tokens and len(self.prompt) + max_new_tokens - 1 > cfg.max_seq_len:
            raise ValueError(
                f"prompt of {len(self.prompt)} + {max_new_tokens} new tokens exceeds max_seq_len={cfg.max_seq_len}"
            )
        self.weights = weights
        self.max_new_tokens = max_new_tokens
        self.sampler = sampler
        self.keep_logits = keep_logits
        self.result = GenerationResult()
        self.done = max_new_tokens == 0
        self.tarac_hook = None
        hook = None
        if tarac is not None:
            tarac.check_layers(cfg.n_layers)
            hook = self.tarac_hook = TaracHook(tarac)
        layers = _record_set(record_layers, tarac, cfg.n_layers)
        self.recorder = None
        if layers:
            hook = self.recorder = _Recorder(hook, layers, record_profile)
        self.hook = hook
        self.cache = None
        self._last = None

    def step(self) -> int:
        if self.done:
            raise RuntimeError("generation finished")
        res = self.result
        t0 = time.perf_counter()
        if self.cache is None:
            self.cache, logits, _ = prefill(self.weights, self.prompt, self.hook, self.span)
        else:
            logits, _ = forward_token(self.weights, self.cache, self._last, self.hook, self.span)
        tok = self.sampler.pick(logits, len(res.tokens) + 1)
        res.timings.append(time.perf_counter() - t0)
        res.tokens.append(tok)
        if self.keep_logits:
            res.logits.append(logits)
        self._last = tok
        if tok == self.weights.config.eos_id:
            res.stop_reason = "end_token"
            self.done = True
        elif len(res.tokens) >= self.max_new_tokens:
            self.done = True
        if self.done and self.recorder is not None:
            res.records = self.recorder.records
            res.pre_masses = self.recorder.pre_masses
        return tok

    def run(self) -> GenerationResult:
        while not self.done:
            self.step()
        return self.result


def generate(
    weights: Weights,
    layout: SequenceLayout,
    prompt: Sequence[int],
    tarac: Optional[TaracConfig] = None,
    max_new_tokens: int = 64,
    sampler: Sampler = Sampler(),
    record_layers="intervened",
    record_profile: bool = False,
    keep_logits: bool = False,
) -> GenerationResult:
    """Prefill ``prompt`` and decode up to ``max_new_tokens`` tokens.

    ``record_layers`` selects which layers' image mass is logged: the
    intervened layers (default; every layer when ``tarac`` is None), ``"all"``,
    ``"none"`` or an explicit iterable of layer indices.
    """
    return DecodeSession(
        weights, layout, prompt, tarac, max_new_tokens, sampler, record_layers, record_profile, keep_logits
    ).run()


@dataclass
class CompareReport:
    baseline: GenerationResult
    tarac: GenerationResult
    first_divergence: Optional[int]
    mean_mass_baseline: float
    mean_mass_tarac: float

    @property
    def uplift(self) -> float:
        return self.mean_mass_tarac - self.mean_mass_baseline


def compare_runs(
    weights: Weights,
    layout: SequenceLayout,
    prompt: Sequence[int],
    tarac: TaracConfig,
    max_new_tokens: int = 64,
    sampler: Sampler = Sampler(),
    record_profile: bool = False,
    record_layers="intervened",
) -> CompareReport:
    """Paired baseline vs intervention run on identical prompt and sampler.

    Both runs log image mass on the same layers (the intervened ones unless
    ``record_layers`` says otherwise).  ``first_divergence`` is the 1-based
    step of the first differing token, or None.
    """
    layers = _record_set(record_layers, tarac, weights.config.n_layers)
    kw = dict(max_new_tokens=max_new_tokens, sampler=sampler, record_layers=layers, record_profile=record_profile)
    base = generate(weights, layout, prompt, None, **kw)
    treat = generate(weights, layout, prompt, tarac, **kw)
    div = None
    for i, (a, b) in enumerate(zip(base.tokens, treat.tokens)):
        if a != b:
            div = i + 1
            break
    if div is None and len(base.tokens) != len(treat.tokens):
        div = min(len(base.tokens), len(treat.tokens)) + 1
    return CompareReport(base, treat, div, base.mean_mass(), treat.mean_mass())
