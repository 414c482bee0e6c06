"""Attention-trace persistence and analysis.

Trace files are JSON lines: a header object ``{"header": {...config echo...}}``
followed by one record per (run, step, layer)::

    {"run_id": "tarac", "step": 3, "layer": 2, "mass": 0.61, "profile": [...]}

Label files are CSV rows ``step,word,class,multi_token`` with class in
{correct, hallucinated}; an optional header row is skipped.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

CLASSES = ("correct", "hallucinated")
_MASS_TOL = 1e-9


@dataclass
class TraceRecord:
    step: int
    layer: int
    mass: float
    profile: Optional[np.ndarray] = None
    run_id: str = ""

    def __post_init__(self):
        if not -_MASS_TOL <= self.mass <= 1.0 + _MASS_TOL:
            raise ValueError(f"mass {self.mass} outside [0, 1]")

    def to_json(self) -> dict:
        d = {"run_id": self.run_id, "step": self.step, "layer": self.layer, "mass": self.mass}
        if self.profile is not None:
            d["profile"] = [float(x) for x in self.profile]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TraceRecord":
        prof = d.get("profile")
        return cls(
            int(d["step"]),
            int(d["layer"]),
            float(d["mass"]),
            None if prof is None else np.asarray(prof, dtype=np.float64),
            str(d.get("run_id", "")),
        )


@dataclass(frozen=True)
class LabeledToken:
    step: int
    word: str
    cls: str
    multi_token: bool = False

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"label class must be one of {CLASSES}, got {self.cls!r}")


class TraceWriter:
    """Single-producer streaming writer; use as a context manager."""

    def __init__(self, path, header: dict):
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(json.dumps({"header": header}) + "\n")

    def write(self, records: Iterable[TraceRecord], run_id: Optional[str] = None) -> None:
        for r in records:
            d = r.to_json()
            if run_id is not None:
                d["run_id"] = run_id
            self._fh.write(json.dumps(d) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_trace(path) -> Iterator[dict | TraceRecord]:
    """Yield the header dict first (if present), then records, one line at a time."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed trace line") from exc
            yield d["header"] if "header" in d else TraceRecord.from_json(d)


def read_trace(path, run_id: Optional[str] = None) -> tuple[dict, list[TraceRecord]]:
    header: dict = {}
    records = []
    for item in iter_trace(path):
        if isinstance(item, TraceRecord):
            if run_id is None or item.run_id == run_id:
                records.append(item)
        else:
            header = item
    return header, records


def read_labels(path) -> list[LabeledToken]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if i == 0 and not row[0].strip().lstrip("-").isdigit():
                continue
            step, word, cls, multi = (c.strip() for c in row[:4])
            out.append(LabeledToken(int(step), word, cls, multi.lower() in ("1", "true", "yes")))
    return out


def write_labels(path, labels: Iterable[LabeledToken]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "word", "class", "multi_token"])
        for lab in labels:
            w.writerow([lab.step, lab.word, lab.cls, int(lab.multi_token)])


def visual_attention_series(trace: Sequence[TraceRecord]) -> np.ndarray:
    """Per-step visual attention: mean over recorded layers of head-mean image mass.

    Element ``i`` belongs to generation step ``i + 1``; steps must run 1..T.
    """
    if not trace:
        raise ValueError("empty trace")
    by_step: dict[int, list[float]] = defaultdict(list)
    for r in trace:
        by_step[r.step].append(r.mass)
    steps = sorted(by_step)
    if steps != list(range(1, len(steps) + 1)):
        raise ValueError("trace steps must be contiguous from 1")
    return np.array([np.mean(by_step[s]) for s in steps])


def image_token_profile(trace: Sequence[TraceRecord]) -> np.ndarray:
    profiles = [r.profile for r in trace if r.profile is not None]
    if not profiles:
        raise ValueError("profile not recorded")
    return np.mean(np.stack(profiles), axis=0)


class GaussianKDE:
    """1-D Gaussian kernel density estimate with a single global bandwidth."""

    def __init__(self, samples, bandwidth="scott"):
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size == 0:
            raise ValueError("no samples")
        self.samples = x
        if bandwidth == "scott":
            sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
            if sd == 0.0:
                warnings.warn("zero sample variance; falling back to bandwidth 1e-3", stacklevel=2)
                self.h = 1e-3
            else:
                self.h = sd * x.size ** (-0.2)
        else:
            h = float(bandwidth)
            if not h > 0:
                raise ValueError("bandwidth must be > 0")
            self.h = h

    def __call__(self, points) -> np.ndarray:
        p = np.atleast_1d(np.asarray(points, dtype=np.float64))
        z = (p[:, None] - self.samples[None, :]) / self.h
        f = np.exp(-0.5 * z * z).sum(axis=1) / (self.samples.size * self.h * math.sqrt(2 * math.pi))
        return f if np.ndim(points) else f[0]

    def grid(self, n: int = 2048, pad: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
        x = np.linspace(self.samples.min() - pad * self.h, self.samples.max() + pad * self.h, n)
        return x, self(x)


def gaussian_kde(samples, bandwidth="scott") -> GaussianKDE:
    return GaussianKDE(samples, bandwidth)


def first_occurrence_filter(labels: Iterable[LabeledToken]) -> list[LabeledToken]:
    """Keep the earliest-step record per word and drop multi-token words.

    Output stays in input order.
    """
    labels = [lab for lab in labels if not lab.multi_token]
    first: dict[str, int] = {}
    for i, lab in enumerate(labels):
        j = first.get(lab.word)
        if j is None or lab.step < labels[j].step:
            first[lab.word] = i
    keep = set(first.values())
    return [lab for i, lab in enumerate(labels) if i in keep]


@dataclass
class ClassDensity:
    n: int
    attention: Optional[GaussianKDE]
    position: Optional[GaussianKDE]
    attention_samples: np.ndarray
    position_samples: np.ndarray


def class_attention_densities(
    trace_or_series,
    labels: Iterable[LabeledToken],
    filter: bool = True,
    bandwidth="scott",
) -> dict[str, ClassDensity]:
    """Visual-attention and step-position densities per label class.

    Each label is joined to the visual-attention series at its step.  A class
    without samples gets ``attention``/``position`` of None.
    """
    if isinstance(trace_or_series, np.ndarray):
        series = trace_or_series
    else:
        series = visual_attention_series(trace_or_series)
    labels = list(labels)
    if filter:
        labels = first_occurrence_filter(labels)
    out = {}
    for cls in CLASSES:
        steps = [lab.step for lab in labels if lab.cls == cls]
        for s in steps:
            if not 1 <= s <= len(series):
                raise ValueError(f"label step {s} outside trace of {len(series)} steps")
        att = np.array([series[s - 1] for s in steps], dtype=np.float64)
        pos = np.array(steps, dtype=np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out[cls] = ClassDensity(
                len(steps),
                gaussian_kde(att, bandwidth) if steps else None,
                gaussian_kde(pos, bandwidth) if steps else None,
                att,
                pos,
            )
    return out
