"""Shared domain records and the metric/request trace formats.

A metric trace is a CSV file with a required header line and one sample per
line, columns in the fixed order ``ts,n_f,n_r,n_a,n_p,t_r,m_u,g_u``:

========  =====================================================
ts        seconds since trace start (strictly increasing)
n_f       finished requests per second
n_r       running requests
n_a       arriving requests per second
n_p       pending requests
t_r       mean execution time of a finished request (s)
m_u       GPU memory utilization, fraction in [0, 1]
g_u       GPU utilization, fraction in [0, 1]
========  =====================================================

Floats are written with ``repr`` so a read/write cycle is lossless.  A
labeled trace adds a ninth ``label`` column holding +1 (normal) or -1
(anomalous).  Request traces are JSON lines, one :class:`RequestRecord` each.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

TRACE_FIELDS = ("ts", "n_f", "n_r", "n_a", "n_p", "t_r", "m_u", "g_u")
METRIC_NAMES = TRACE_FIELDS[1:]
DEFAULT_WINDOW = 900


class TraceError(ValueError):
    """Raised for malformed or invalid trace input."""


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class MetricSample:
    timestamp: float
    n_f: float
    n_r: float
    n_a: float
    n_p: float
    t_r: float
    m_u: float
    g_u: float

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise TraceError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for name in ("n_f", "n_r", "n_a", "n_p", "t_r"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                out.append(f"{name}={v!r} must be finite and >= 0")
        for name in ("m_u", "g_u"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                out.append(f"{name}={v!r} outside [0, 1]")
        if not math.isfinite(self.timestamp):
            out.append(f"timestamp={self.timestamp!r} not finite")
        return out

    def as_vector(self) -> list[float]:
        """The seven metrics in trace column order (timestamp excluded)."""
        return [self.n_f, self.n_r, self.n_a, self.n_p, self.t_r, self.m_u, self.g_u]


@dataclass(frozen=True)
class MetricWindow:
    samples: tuple[MetricSample, ...]

    def __post_init__(self):
        ts = [s.timestamp for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise TraceError("window timestamps must be strictly increasing")

    @property
    def window_length_w(self) -> int:
        return len(self.samples)

    def __len__(self):
        return len(self.samples)

    def column(self, name: str):
        """Return one metric as a float numpy array."""
        import numpy as np

        attr = "timestamp" if name == "ts" else name
        return np.array([getattr(s, attr) for s in self.samples], dtype=float)


@dataclass(frozen=True)
class GpuDeviceSpec:
    gpu_type_id: str
    memory_total: float
    device_count_N: int
    tokens_per_second_capacity: float
    # decode speed of a single sequence; None means one sequence can use the
    # whole device (pure processor sharing)
    per_sequence_token_rate: float | None = None

    def __post_init__(self):
        if self.memory_total <= 0:
            raise ValueError("memory_total must be > 0")
        if self.device_count_N < 0:
            raise ValueError("device_count_N must be >= 0")
        if self.tokens_per_second_capacity <= 0:
            raise ValueError("tokens_per_second_capacity must be > 0")


@dataclass(frozen=True)
class ModelProfile:
    params_bytes: float
    dtype_bytes: float
    token_mem: float
    overhead_others: float

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be > 0")

    @property
    def static_bytes(self) -> float:
        return self.params_bytes + self.overhead_others


@dataclass(frozen=True)
class ServiceConfig:
    """One model's serving configuration across GPU types.

    ``gpu_memory`` is the per-device allocation in bytes; a replica pools
    ``parallel_size`` devices.  ``max_tokens`` maps community id to an output
    cap, with the key ``"*"`` acting as the default for unknown communities.
    """

    parallel_size: int
    gpu_memory: float
    max_num_seqs: int
    max_tokens: Mapping[str, int]
    replicas: Mapping[str, int]
    weights: Mapping[str, float]
    # optional per-type overrides; the scalar fields above are the fallback
    per_type: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.parallel_size < 1:
            raise ValueError("parallel_size must be >= 1")
        if self.max_num_seqs < 1:
            raise ValueError("max_num_seqs must be >= 1")
        if self.gpu_memory <= 0:
            raise ValueError("gpu_memory must be > 0")
        if any(v < 0 for v in self.replicas.values()):
            raise ValueError("replica counts must be >= 0")
        if any(v < 1 for v in self.max_tokens.values()):
            raise ValueError("max_tokens must be positive")
        active = [g for g, r in self.replicas.items() if r > 0]
        for g in active:
            w = self.weights.get(g)
            if w is None or not (0.0 < w <= 1.0):
                raise ValueError(f"weight for {g!r} must be in (0, 1]")
        if active and not math.isclose(max(self.weights[g] for g in active), 1.0):
            raise ValueError("the largest routing weight must equal 1")

    def for_type(self, gpu_type_id: str) -> tuple[int, float, int]:
        """(parallel_size, gpu_memory, max_num_seqs) effective for one GPU type."""
        o = self.per_type.get(gpu_type_id, {})
        return (
            int(o.get("parallel_size", self.parallel_size)),
            float(o.get("gpu_memory", self.gpu_memory)),
            int(o.get("max_num_seqs", self.max_num_seqs)),
        )

    def max_tokens_for(self, community_id: str | None) -> int | None:
        if community_id is not None and community_id in self.max_tokens:
            return int(self.max_tokens[community_id])
        v = self.max_tokens.get("*")
        return None if v is None else int(v)

    @property
    def total_replicas(self) -> int:
        return sum(self.replicas.values())

    def to_dict(self) -> dict:
        return {
            "parallel_size": self.parallel_size,
            "gpu_memory": self.gpu_memory,
            "max_num_seqs": self.max_num_seqs,
            "max_tokens": dict(sorted(self.max_tokens.items())),
            "replicas": dict(sorted(self.replicas.items())),
            "weights": dict(sorted(self.weights.items())),
            "per_type": {k: dict(sorted(v.items())) for k, v in sorted(self.per_type.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServiceConfig":
        return cls(
            parallel_size=int(d["parallel_size"]),
            gpu_memory=float(d["gpu_memory"]),
            max_num_seqs=int(d["max_num_seqs"]),
            max_tokens={str(k): int(v) for k, v in d["max_tokens"].items()},
            replicas={str(k): int(v) for k, v in d["replicas"].items()},
            weights={str(k): float(v) for k, v in d["weights"].items()},
            per_type={str(k): dict(v) for k, v in d.get("per_type", {}).items()},
        )


@dataclass
class RequestRecord:
    request_id: int
    arrival_time: float
    prompt_text: str
    input_length: int
    output_length_target: int
    community_id: str | None = None
    start_time: float | None = None
    finish_time: float | None = None

    def __post_init__(self):
        if self.input_length <= 0 or self.output_length_target <= 0:
            raise ValueError("request lengths must be > 0")


# -- metric traces -----------------------------------------------------------


def _format(v: float) -> str:
    return repr(float(v))


def dumps_trace(samples: Iterable[MetricSample], labels: Sequence[int] | None = None) -> str:
    samples = list(samples)
    if labels is not None and len(labels) != len(samples):
        raise TraceError("labels and samples differ in length")
    buf = io.StringIO()
    header = list(TRACE_FIELDS) + (["label"] if labels is not None else [])
    buf.write(",".join(header) + "\n")
    prev = None
    for i, s in enumerate(samples):
        if prev is not None and s.timestamp <= prev:
            raise TraceError(f"sample {i}: timestamps must be strictly increasing")
        prev = s.timestamp
        row = [_format(s.timestamp)] + [_format(v) for v in s.as_vector()]
        if labels is not None:
            row.append(str(int(labels[i])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_trace(samples: Iterable[MetricSample], destination, labels: Sequence[int] | None = None) -> None:
    """Write samples (and optionally a label column) to ``destination``.

    ``destination`` is a path or a writable text stream.  An empty sequence
    produces an empty file.
    """
    samples = list(samples)
    text = dumps_trace(samples, labels) if samples else ""
    if hasattr(destination, "write"):
        destination.write(text)
        return
    try:
        Path(destination).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise TraceError(f"cannot write trace to {destination}: {exc}") from exc


def _parse_rows(text: str, want_labels: bool):
    lines = text.splitlines()
    if not lines:
        return [], []
    header = [h.strip() for h in lines[0].split(",")]
    expected = list(TRACE_FIELDS) + (["label"] if want_labels else [])
    if header != expected:
        raise TraceError(f"line 1: expected header {','.join(expected)}, got {lines[0]!r}")
    samples, labels = [], []
    prev = None
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise TraceError(f"line {lineno}: expected {len(expected)} fields, got {len(row)}")
        try:
            vals = [float(x) for x in row[: len(TRACE_FIELDS)]]
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        try:
            s = MetricSample(*vals)
        except TraceError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        if prev is not None and s.timestamp <= prev:
            raise TraceError(f"line {lineno}: timestamp {s.timestamp} not after {prev}")
        prev = s.timestamp
        samples.append(s)
        if want_labels:
            lab = int(float(row[-1]))
            if lab not in (1, -1):
                raise TraceError(f"line {lineno}: label must be +1 or -1, got {row[-1]!r}")
            labels.append(lab)
    return samples, labels


def _read_text(source) -> str:
    if hasattr(source, "read"):
        return source.read()
    try:
        return Path(source).read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceError(f"cannot read trace {source}: {exc}") from exc


def read_trace(source) -> list[MetricSample]:
    """Parse a metric trace written by :func:`write_trace`."""
    return _parse_rows(_read_text(source), want_labels=False)[0]


def read_labeled_trace(source) -> tuple[list[MetricSample], list[int]]:
    return _parse_rows(_read_text(source), want_labels=True)


def window(samples: Sequence[MetricSample], w: int = DEFAULT_WINDOW, end_index: int | None = None) -> MetricWindow:
    """Return the ``w`` samples ending at ``end_index`` (inclusive)."""
    if w < 1:
        raise ValueError("w must be >= 1")
    if end_index is None:
        end_index = len(samples) - 1
    if end_index >= len(samples) or end_index < 0:
        raise InsufficientHistory(f"end_index {end_index} outside trace of {len(samples)} samples")
    if end_index < w - 1:
        raise InsufficientHistory(f"need {w} samples ending at {end_index}, only {end_index + 1} available")
    return MetricWindow(tuple(samples[end_index - w + 1 : end_index + 1]))


# -- request traces ----------------------------------------------------------


def write_requests(records: Iterable[RequestRecord], destination) -> None:
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    text = "".join(line + "\n" for line in lines)
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        Path(destination).write_text(text, encoding="utf-8")


def read_requests(source) -> list[RequestRecord]:
    out = []
    for lineno, line in enumerate(_read_text(source).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(RequestRecord(**json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
    return out
