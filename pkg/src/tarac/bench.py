"""Decode overhead of the intervention: TPOT ratio and peak-memory delta."""

from __future__ import annotations

import gc
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from tarac.decoding import DecodeSession, GenerationResult, Sampler, SequenceLayout, generate
from tarac.intervention import TaracConfig
from tarac.model import Weights


@dataclass
class BenchReport:
    repeats: int
    max_new_tokens: int
    tpot_baseline: float
    tpot_tarac: float
    ratio: float
    peak_baseline_bytes: int
    peak_tarac_bytes: int
    memory_delta_bytes: int
    state_bytes_measured: int
    state_bytes_analytic: int

    @property
    def memory_delta_mb(self) -> float:
        return self.memory_delta_bytes / 2**20

    def as_dict(self) -> dict:
        d = asdict(self)
        d["memory_delta_mb"] = self.memory_delta_mb
        return d


def state_bytes(tarac: Optional[TaracConfig], n_image: int, itemsize: int = 8) -> int:
    """Accumulated vector plus previous captured vector per gated layer."""
    if tarac is None or n_image == 0:
        return 0
    lo, hi = tarac.layer_range
    return (hi - lo) * n_image * 2 * itemsize


def _run(weights, layout, prompt, cfg, n, sampler) -> GenerationResult:
    return generate(weights, layout, prompt, cfg, n, sampler, record_layers="none")


def _paired(weights, layout, prompt, arms, n, sampler, first: int) -> tuple[float, float]:
    """Step both arms' sessions alternately, one token each, and return their TPOTs."""
    sessions = [DecodeSession(weights, layout, prompt, cfg, n, sampler, record_layers="none") for cfg in arms]
    order = (first, 1 - first)
    while not all(s.done for s in sessions):
        for k in order:
            if not sessions[k].done:
                sessions[k].step()
    return sessions[0].result.tpot(), sessions[1].result.tpot()


def _held_array_bytes(weights, layout, prompt, cfg, n, sampler) -> int:
    """numpy data-buffer bytes still held by a finished session (headers excluded)."""
    gc.collect()
    tracemalloc.start()
    try:
        session = DecodeSession(weights, layout, prompt, cfg, n, sampler, record_layers="none")
        session.run()
        snap = tracemalloc.take_snapshot()
    finally:
        tracemalloc.stop()
    snap = snap.filter_traces([tracemalloc.DomainFilter(True, np.lib.tracemalloc_domain)])
    held = sum(t.size for t in snap.traces)
    del session
    return held


def _peak(weights, layout, prompt, cfg, n, sampler) -> int:
    gc.collect()
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        _run(weights, layout, prompt, cfg, n, sampler)
        return tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()


def run_bench(
    weights: Weights,
    layout: SequenceLayout,
    prompt: Sequence[int],
    tarac: Optional[TaracConfig],
    max_new_tokens: int = 64,
    repeats: int = 10,
    sampler: Sampler = Sampler(),
    baseline: Optional[TaracConfig] = None,
) -> BenchReport:
    """Time ``repeats`` baseline and intervention generations.

    Each repeat runs one session per arm in a single thread, alternating
    token by token so both arms see the same machine conditions; neither
    records a trace.  One untimed warmup pair precedes timing.  A run's TPOT
    is its decode-phase mean; the reported ratio is the median over repeats
    of the paired TARAC/baseline ratios.  Peak memory comes from
    separate tracemalloc-instrumented runs so tracing never skews timing.
    Memory is reported twice: ``memory_delta_bytes`` is the difference in
    peak traced allocations (Python objects included), ``state_bytes_measured``
    the difference in numpy data buffers a finished session still holds, the
    analog of allocator-level tensor memory.
    ``baseline`` lets the control arm carry a config too (self-comparison).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    arms = (baseline, tarac)
    _paired(weights, layout, prompt, arms, max_new_tokens, sampler, 0)
    tpots: tuple[list[float], list[float]] = ([], [])
    ratios = []
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for i in range(repeats):
            tb, tt = _paired(weights, layout, prompt, arms, max_new_tokens, sampler, i % 2)
            tpots[0].append(tb)
            tpots[1].append(tt)
            ratios.append(tt / tb)
    finally:
        if gc_was:
            gc.enable()
    peaks = [
        int(statistics.median(_peak(weights, layout, prompt, cfg, max_new_tokens, sampler) for _ in range(3)))
        for cfg in arms
    ]
    held = [_held_array_bytes(weights, layout, prompt, cfg, max_new_tokens, sampler) for cfg in arms]
    tb, tt = statistics.median(tpots[0]), statistics.median(tpots[1])
    return BenchReport(
        repeats=repeats,
        max_new_tokens=max_new_tokens,
        tpot_baseline=tb,
        tpot_tarac=tt,
        ratio=statistics.median(ratios),
        peak_baseline_bytes=peaks[0],
        peak_tarac_bytes=peaks[1],
        memory_delta_bytes=peaks[1] - peaks[0],
        state_bytes_measured=held[1] - held[0],
        state_bytes_analytic=state_bytes(tarac, layout.n_image) - state_bytes(baseline, layout.n_image),
    )
