"""Discrete-event simulation of multi-replica LLM serving.

Each replica runs continuous batching: pending requests are admitted into the
running batch whenever a slot (``max_num_seqs``) and KV-cache memory allow,
and the running batch shares the replica's token rate.  With
``per_sequence_token_rate = r`` and device capacity ``C`` a batch of ``n``
sequences generates ``min(C, n * r)`` tokens/s split evenly between them;
``r = None`` is pure processor sharing.

Within a tick the simulation is event driven (arrivals, completions, KV
exhaustion, restart ends); one :class:`MetricSample` per replica plus one
aggregate sample are emitted at every tick boundary.  Per-second rates
(``n_f``, ``n_a``) and ``t_r`` are computed over a trailing ``rate_window``
of ticks; ``n_r``, ``n_p`` and ``m_u`` are time averages over the tick.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import GpuDeviceSpec, MetricSample, ModelProfile, RequestRecord, ServiceConfig

RESTART_DELAY = 60.0
KV_WATERMARK = 0.01
_EPS_TOKENS = 1e-7


class InfeasibleConfig(ValueError):
    pass


def kv_memory(profile: ModelProfile, max_num_seqs: float, seq_length: float) -> float:
    """Bytes needed by a replica: weights + KV cache for the batch + overhead."""
    total = profile.params_bytes + max_num_seqs * seq_length * profile.token_mem + profile.overhead_others
    if not math.isfinite(total):
        return math.inf
    return total


# -- workload ----------------------------------------------------------------


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: ``fixed(a)``, ``uniform(a, b)`` or ``lognormal(median=a, sigma=b)``."""

    kind: str = "fixed"
    a: float = 128
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown length distribution {self.kind!r}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "fixed":
            x = np.full(size, self.a)
        elif self.kind == "uniform":
            x = rng.integers(int(self.a), int(self.b) + 1, size=size)
        else:
            x = rng.lognormal(math.log(self.a), self.b, size=size)
        return np.maximum(np.rint(x), 1).astype(int)

    def mean(self) -> float:
        if self.kind == "fixed":
            return float(max(round(self.a), 1))
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.a * math.exp(0.5 * self.b**2)

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d.get("a", 128)), float(d.get("b", 0.0)))


@dataclass(frozen=True)
class WorkloadSpec:
    arrival_rate: float
    input_length: LengthDist
    output_length: LengthDist
    duration: float
    rng_seed: int = 0
    community_mix: Mapping[str, float] = field(default_factory=lambda: {"default": 1.0})
    # piecewise-constant rate changes: ((t0, rate0), (t1, rate1), ...)
    rate_schedule: tuple[tuple[float, float], ...] = ()
    community_output: Mapping[str, LengthDist] = field(default_factory=dict)

    def __post_init__(self):
        if self.arrival_rate < 0 or any(r < 0 for _, r in self.rate_schedule):
            raise ValueError("arrival rates must be >= 0")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        if not math.isclose(sum(self.community_mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("community_mix probabilities must sum to 1")

    def segments(self) -> list[tuple[float, float, float]]:
        points = [(0.0, self.arrival_rate)] + sorted((float(t), float(r)) for t, r in self.rate_schedule)
        out = []
        for i, (t0, rate) in enumerate(points):
            t1 = points[i + 1][0] if i + 1 < len(points) else self.duration
            t1 = min(t1, self.duration)
            if t1 > t0:
                out.append((t0, t1, rate))
        return out

    def rate_at(self, t: float) -> float:
        for t0, t1, rate in self.segments():
            if t0 <= t < t1:
                return rate
        return 0.0

    def mean_input_length(self) -> float:
        return self.input_length.mean()

    def to_dict(self):
        return {
            "arrival_rate": self.arrival_rate,
            "input_length": self.input_length.to_dict(),
            "output_length": self.output_length.to_dict(),
            "duration": self.duration,
            "rng_seed": self.rng_seed,
            "community_mix": dict(self.community_mix),
            "rate_schedule": [list(p) for p in self.rate_schedule],
            "community_output": {k: v.to_dict() for k, v in self.community_output.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            arrival_rate=float(d["arrival_rate"]),
            input_length=LengthDist.from_dict(d["input_length"]),
            output_length=LengthDist.from_dict(d["output_length"]),
            duration=float(d["duration"]),
            rng_seed=int(d.get("rng_seed", 0)),
            community_mix={str(k): float(v) for k, v in d.get("community_mix", {"default": 1.0}).items()},
            rate_schedule=tuple((float(t), float(r)) for t, r in d.get("rate_schedule", [])),
            community_output={k: LengthDist.from_dict(v) for k, v in d.get("community_output", {}).items()},
        )


def generate_workload(spec: WorkloadSpec) -> list[RequestRecord]:
    """Poisson arrivals (piecewise-constant rate) with random lengths; deterministic per seed."""
    rng = np.random.default_rng(spec.rng_seed)
    times = []
    for t0, t1, rate in spec.segments():
        if rate <= 0:
            continue
        # a homogeneous Poisson process on [t0, t1): Poisson count, uniform order statistics
        count = rng.poisson(rate * (t1 - t0))
        times.append(np.sort(rng.uniform(t0, t1, size=count)))
    arrivals = np.concatenate(times) if times else np.zeros(0)
    n = arrivals.size
    names = sorted(spec.community_mix)
    probs = np.array([spec.community_mix[c] for c in names])
    comm_idx = rng.choice(len(names), size=n, p=probs / probs.sum()) if n else np.zeros(0, int)
    inputs = spec.input_length.sample(rng, n)
    outputs = spec.output_length.sample(rng, n)
    for c in sorted(spec.community_output):
        if c in names:
            mask = comm_idx == names.index(c)
            outputs[mask] = spec.community_output[c].sample(rng, int(mask.sum()))
    return [
        RequestRecord(
            request_id=i,
            arrival_time=float(arrivals[i]),
            prompt_text=f"{names[comm_idx[i]]} request {i}",
            input_length=int(inputs[i]),
            output_length_target=int(outputs[i]),
            community_id=names[comm_idx[i]],
        )
        for i in range(n)
    ]


# -- replicas and routing ----------------------------------------------------


class _Job:
    __slots__ = ("rec", "offset", "generated", "target", "reserve", "admit_seq", "resumed", "first_start")

    def __init__(self, rec: RequestRecord):
        self.rec = rec
        self.offset = 0.0
        self.generated = 0.0
        self.target = rec.output_length_target
        self.reserve = 0.0
        self.admit_seq = 0
        self.resumed = False
        self.first_start = None


@dataclass
class ReplicaState:
    replica_id: int
    gpu_type_id: str
    parallel_size: int
    gpu_memory: float
    max_num_seqs: int
    max_tokens: Mapping[str, int]
    kv_budget: float
    tokens_per_second_capacity: float
    per_sequence_token_rate: float
    memory_pool: float
    static_bytes: float
    token_mem: float
    running: list = field(default_factory=list)
    pending: deque = field(default_factory=deque)
    restarting_until: float | None = None
    # virtual per-sequence service clock and running sums over the batch
    service: float = 0.0
    kv_tokens_base: float = 0.0
    offset_sum: float = 0.0
    reserved_tokens: float = 0.0
    admit_counter: int = 0

    @property
    def kv_bytes_used(self) -> float:
        return self.token_mem * self.kv_tokens

    @property
    def kv_tokens(self) -> float:
        return self.kv_tokens_base + len(self.running) * self.service - self.offset_sum

    def ready(self, t: float) -> bool:
        return self.restarting_until is None or self.restarting_until <= t

    def total_rate(self) -> float:
        n = len(self.running)
        return min(self.tokens_per_second_capacity, n * self.per_sequence_token_rate) if n else 0.0

    def seq_rate(self) -> float:
        n = len(self.running)
        return self.total_rate() / n if n else 0.0


class Router:
    """Weighted-random choice of GPU type, round-robin within a type.

    The probability of sending a request to type ``i`` is proportional to
    ``weight_i * ready_replicas_i``.  Replicas that are still (re)starting
    only receive traffic when no replica is ready.
    """

    def __init__(self, weights: Mapping[str, float], seed: int = 0):
        self.weights = dict(weights)
        self.rng = np.random.default_rng(seed)
        self._rr: dict[str, int] = {}

    def dispatch(self, replicas: Sequence[ReplicaState], t: float) -> ReplicaState:
        pool = [r for r in replicas if r.ready(t)] or list(replicas)
        if not pool:
            raise RuntimeError("no replicas to dispatch to")
        groups: dict[str, list[ReplicaState]] = {}
        for r in pool:
            groups.setdefault(r.gpu_type_id, []).append(r)
        types = sorted(groups)
        w = np.array([self.weights.get(g, 1.0) * len(groups[g]) for g in types], dtype=float)
        g = types[0] if len(types) == 1 else types[int(self.rng.choice(len(types), p=w / w.sum()))]
        members = groups[g]
        k = self._rr.get(g, 0)
        self._rr[g] = k + 1
        return members[k % len(members)]


# -- simulation state --------------------------------------------------------


@dataclass
class _TickCounters:
    arrivals: int = 0
    admitted: int = 0
    finished: int = 0
    exec_sum: float = 0.0
    tokens: float = 0.0
    run_area: float = 0.0
    pend_area: float = 0.0
    kv_area: float = 0.0


@dataclass
class SimState:
    t: float
    replicas: list[ReplicaState]
    router: Router
    config: ServiceConfig
    devices: dict[str, GpuDeviceSpec]
    profile: ModelProfile
    arrivals: list[RequestRecord]
    next_arrival: int = 0
    optimistic_admission: bool = False
    rate_window: int = 60
    next_replica_id: int = 0
    completed: list[RequestRecord] = field(default_factory=list)
    samples: list[MetricSample] = field(default_factory=list)
    replica_samples: dict[int, list[MetricSample]] = field(default_factory=dict)
    replica_types: dict[int, str] = field(default_factory=dict)
    tick_log: list[dict] = field(default_factory=list)
    gpu_seconds: float = 0.0
    tokens_total: float = 0.0
    truncated: int = 0
    output_lengths: dict[int, int] = field(default_factory=dict)
    _history: dict = field(default_factory=dict)
    _last_tr: dict = field(default_factory=dict)

    @property
    def in_system(self) -> int:
        return sum(len(r.running) + len(r.pending) for r in self.replicas)

    @property
    def arrived(self) -> int:
        return self.next_arrival


def _make_replica(rid: int, gpu: GpuDeviceSpec, cfg: ServiceConfig, profile: ModelProfile) -> ReplicaState:
    ps, mem, mns = cfg.for_type(gpu.gpu_type_id)
    pool = ps * gpu.memory_total
    rate = gpu.per_sequence_token_rate
    return ReplicaState(
        replica_id=rid,
        gpu_type_id=gpu.gpu_type_id,
        parallel_size=ps,
        gpu_memory=mem,
        max_num_seqs=mns,
        max_tokens=dict(cfg.max_tokens),
        kv_budget=ps * mem - profile.static_bytes,
        tokens_per_second_capacity=gpu.tokens_per_second_capacity * ps,
        per_sequence_token_rate=math.inf if rate is None else rate * ps,
        memory_pool=pool,
        static_bytes=profile.static_bytes,
        token_mem=profile.token_mem,
    )


def check_feasible(config: ServiceConfig, devices: Mapping[str, GpuDeviceSpec], profile: ModelProfile,
                   seq_length: float) -> None:
    """Raise :class:`InfeasibleConfig` unless every deployed type fits its devices.

    ``seq_length`` is the expected context length used in the memory model.
    """
    if config.total_replicas < 1:
        raise InfeasibleConfig("configuration deploys no replicas")
    for g, n in sorted(config.replicas.items()):
        if n == 0:
            continue
        if g not in devices:
            raise InfeasibleConfig(f"unknown GPU type {g!r}")
        dev = devices[g]
        ps, mem, mns = config.for_type(g)
        if ps * n > dev.device_count_N:
            raise InfeasibleConfig(f"{g}: {n} replicas x parallel_size {ps} exceeds {dev.device_count_N} devices")
        if mem > dev.memory_total * (1 + 1e-12):
            raise InfeasibleConfig(f"{g}: gpu_memory {mem:.4g} exceeds device memory {dev.memory_total:.4g}")
        need = kv_memory(profile, mns, seq_length)
        if need > ps * mem:
            raise InfeasibleConfig(
                f"{g}: max_num_seqs={mns} needs {need:.4g} bytes but only {ps * mem:.4g} are allocated")


def init_state(requests: Sequence[RequestRecord], config: ServiceConfig, devices: Sequence[GpuDeviceSpec] | Mapping,
               profile: ModelProfile, *, seed: int = 0, optimistic_admission: bool = False,
               rate_window: int = 60) -> SimState:
    devs = dict(devices) if isinstance(devices, Mapping) else {d.gpu_type_id: d for d in devices}
    st = SimState(
        t=0.0,
        replicas=[],
        router=Router(config.weights, seed=seed + 7919),
        config=config,
        devices=devs,
        profile=profile,
        arrivals=sorted(requests, key=lambda r: (r.arrival_time, r.request_id)),
        optimistic_admission=optimistic_admission,
        rate_window=max(int(rate_window), 1),
    )
    for g in sorted(config.replicas):
        for _ in range(config.replicas[g]):
            st.replicas.append(_make_replica(st.next_replica_id, devs[g], config, profile))
            st.next_replica_id += 1
    return st


# -- per-replica mechanics ---------------------------------------------------


def _cap_for(rep: ReplicaState, rec: RequestRecord) -> int | None:
    if rec.community_id is not None and rec.community_id in rep.max_tokens:
        return int(rep.max_tokens[rec.community_id])
    v = rep.max_tokens.get("*")
    return None if v is None else int(v)


def _admit(rep: ReplicaState, job: _Job, t: float, st: SimState, counters: _TickCounters) -> None:
    cap = _cap_for(rep, job.rec)
    job.target = job.rec.output_length_target if cap is None else min(job.rec.output_length_target, cap)
    job.reserve = job.rec.input_length + (cap if cap is not None else job.rec.output_length_target)
    job.offset = rep.service - job.generated
    rep.admit_counter += 1
    job.admit_seq = rep.admit_counter
    rep.running.append(job)
    rep.kv_tokens_base += job.rec.input_length
    rep.offset_sum += job.offset
    rep.reserved_tokens += job.reserve
    if not job.resumed:
        job.first_start = t
        counters.admitted += 1


def _detach(rep: ReplicaState, job: _Job) -> None:
    job.generated = rep.service - job.offset
    rep.running.remove(job)
    rep.kv_tokens_base -= job.rec.input_length
    rep.offset_sum -= job.offset
    rep.reserved_tokens -= job.reserve
    if not rep.running:
        # reset sums to shed accumulated round-off
        rep.kv_tokens_base = rep.offset_sum = rep.reserved_tokens = 0.0


def _admit_pending(rep: ReplicaState, t: float, st: SimState, counters: _TickCounters) -> None:
    if not rep.ready(t):
        return
    tm = rep.token_mem
    while rep.pending and len(rep.running) < rep.max_num_seqs:
        job = rep.pending[0]
        if st.optimistic_admission:
            need = (job.rec.input_length + job.generated) * tm
            fits = rep.kv_bytes_used + need <= rep.kv_budget * (1 - KV_WATERMARK)
        else:
            cap = _cap_for(rep, job.rec)
            reserve = job.rec.input_length + (cap if cap is not None else job.rec.output_length_target)
            fits = (rep.reserved_tokens + reserve) * tm <= rep.kv_budget
        if not fits and rep.running:
            break
        rep.pending.popleft()
        _admit(rep, job, t, st, counters)


def _next_event(rep: ReplicaState, t: float) -> float:
    if rep.restarting_until is not None and rep.restarting_until > t:
        return rep.restarting_until
    if not rep.running:
        return math.inf
    per = rep.seq_rate()
    remaining = min(j.offset + j.target for j in rep.running) - rep.service
    t_done = t + max(remaining, 0.0) / per
    growth = rep.total_rate() * rep.token_mem
    headroom = rep.kv_budget - rep.kv_bytes_used
    t_full = t + max(headroom, 0.0) / growth if growth > 0 else math.inf
    return min(t_done, t_full)


def _advance(rep: ReplicaState, dt: float, c: _TickCounters) -> None:
    n = len(rep.running)
    c.pend_area += len(rep.pending) * dt
    c.run_area += n * dt
    kv0 = rep.kv_bytes_used
    if n and dt > 0:
        total = rep.total_rate()
        rep.service += (total / n) * dt
        c.tokens += total * dt
        c.kv_area += kv0 * dt + 0.5 * total * rep.token_mem * dt * dt
    else:
        c.kv_area += kv0 * dt


def _settle(rep: ReplicaState, t: float, st: SimState, c: _TickCounters) -> None:
    """Finish completed jobs and resolve KV exhaustion at time ``t``."""
    if rep.restarting_until is not None and rep.restarting_until <= t:
        rep.restarting_until = None
    done = [j for j in rep.running if j.offset + j.target - rep.service <= _EPS_TOKENS * max(1.0, j.target)]
    for job in done:
        _detach(rep, job)
        _finish(job, job.target, t, st, c)
    while rep.running and rep.kv_bytes_used >= rep.kv_budget * (1 - 1e-9):
        if len(rep.running) == 1:
            job = rep.running[0]
            _detach(rep, job)
            st.truncated += 1
            _finish(job, max(int(job.generated), 1), t, st, c)
        else:
            victim = max(rep.running, key=lambda j: j.admit_seq)
            _detach(rep, victim)
            victim.resumed = True
            rep.pending.appendleft(victim)


def _finish(job: _Job, out_len: int, t: float, st: SimState, c: _TickCounters) -> None:
    rec = job.rec
    rec.start_time = job.first_start
    rec.finish_time = t
    st.completed.append(rec)
    st.output_lengths[rec.request_id] = out_len
    c.finished += 1
    c.exec_sum += t - job.first_start


# -- stepping ----------------------------------------------------------------


def _rate_metrics(hist: deque, last_tr: float, dt: float) -> tuple[float, float, float]:
    fin = sum(h[0] for h in hist)
    exe = sum(h[1] for h in hist)
    arr = sum(h[2] for h in hist)
    span = len(hist) * dt
    t_r = exe / fin if fin else last_tr
    return fin / span, arr / span, t_r


def step(state: SimState, dt: float = 1.0) -> tuple[SimState, list[MetricSample]]:
    """Advance the simulation by ``dt`` seconds.

    Returns the state (mutated in place) and the emitted samples: the
    aggregate sample first, then one per replica in replica-id order.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    st = state
    t0, t1 = st.t, st.t + dt
    counters = {r.replica_id: _TickCounters() for r in st.replicas}
    cur = t0
    while True:
        na = st.arrivals[st.next_arrival].arrival_time if st.next_arrival < len(st.arrivals) else math.inf
        ev = min((_next_event(r, cur) for r in st.replicas), default=math.inf)
        nxt = min(max(na, cur), ev, t1)
        for r in st.replicas:
            _advance(r, nxt - cur, counters[r.replica_id])
        cur = nxt
        for r in st.replicas:
            _settle(r, cur, st, counters[r.replica_id])
        while st.next_arrival < len(st.arrivals) and st.arrivals[st.next_arrival].arrival_time <= cur \
                and st.arrivals[st.next_arrival].arrival_time < t1:
            rec = st.arrivals[st.next_arrival]
            st.next_arrival += 1
            rep = st.router.dispatch(st.replicas, cur)
            rep.pending.append(_Job(rec))
            counters[rep.replica_id].arrivals += 1
        for r in st.replicas:
            _admit_pending(r, cur, st, counters[r.replica_id])
        if cur >= t1:
            break
    st.t = t1
    emitted = _emit(st, counters, dt)
    return st, emitted


def _emit(st: SimState, counters: dict[int, _TickCounters], dt: float) -> list[MetricSample]:
    out = []
    tot = _TickCounters()
    gpu_weighted_m = gpu_weighted_g = gpus = 0.0
    rep_samples = []
    for r in st.replicas:
        c = counters[r.replica_id]
        for f in ("arrivals", "admitted", "finished", "exec_sum", "tokens", "run_area", "pend_area"):
            setattr(tot, f, getattr(tot, f) + getattr(c, f))
        hist = st._history.setdefault(r.replica_id, deque(maxlen=st.rate_window))
        hist.append((c.finished, c.exec_sum, c.arrivals))
        n_f, n_a, t_r = _rate_metrics(hist, st._last_tr.get(r.replica_id, 0.0), dt)
        st._last_tr[r.replica_id] = t_r
        m_u = min(max((r.static_bytes + c.kv_area / dt) / r.memory_pool, 0.0), 1.0)
        g_u = min(max(c.tokens / (r.tokens_per_second_capacity * dt), 0.0), 1.0)
        gpus += r.parallel_size
        gpu_weighted_m += m_u * r.parallel_size
        gpu_weighted_g += g_u * r.parallel_size
        s = MetricSample(st.t, n_f, c.run_area / dt, n_a, c.pend_area / dt, t_r, m_u, g_u)
        st.replica_samples.setdefault(r.replica_id, []).append(s)
        st.replica_types[r.replica_id] = r.gpu_type_id
        rep_samples.append(s)
    hist = st._history.setdefault("agg", deque(maxlen=st.rate_window))
    hist.append((tot.finished, tot.exec_sum, tot.arrivals))
    n_f, n_a, t_r = _rate_metrics(hist, st._last_tr.get("agg", 0.0), dt)
    st._last_tr["agg"] = t_r
    agg = MetricSample(
        st.t, n_f, tot.run_area / dt, n_a, tot.pend_area / dt, t_r,
        gpu_weighted_m / gpus if gpus else 0.0, gpu_weighted_g / gpus if gpus else 0.0,
    )
    st.samples.append(agg)
    st.gpu_seconds += gpus * dt
    st.tokens_total += tot.tokens
    st.tick_log.append({
        "t": st.t, "arrivals": tot.arrivals, "admitted": tot.admitted, "finished": tot.finished,
        "tokens": tot.tokens, "replicas": len(st.replicas), "gpus": gpus,
    })
    out.append(agg)
    out.extend(rep_samples)
    return out


# -- reconfiguration ---------------------------------------------------------


def _reset_job(job: _Job) -> _Job:
    job.generated = 0.0
    job.resumed = False
    job.first_start = None
    return job


def apply_config(state: SimState, new_config: ServiceConfig, restart_delay: float = RESTART_DELAY,
                 seq_length: float | None = None) -> SimState:
    """Reconfigure the running system.

    Replicas whose ``parallel_size``, ``gpu_memory`` or ``max_num_seqs``
    change restart for ``restart_delay`` seconds; their running requests go
    back to the head of their pending queue and lose their progress.  Added
    replicas start after ``restart_delay``.  Removed replicas hand their
    requests back to the router.  Weight and ``max_tokens`` changes apply
    immediately without a restart.
    """
    st = state
    if seq_length is not None:
        check_feasible(new_config, st.devices, st.profile, seq_length)
    old = st.config
    if new_config == old:
        return st
    t = st.t
    orphans: list[_Job] = []
    survivors: list[ReplicaState] = []
    for g in sorted(set(old.replicas) | set(new_config.replicas)):
        mine = [r for r in st.replicas if r.gpu_type_id == g]
        want = new_config.replicas.get(g, 0)
        keep, drop = mine[:want], mine[want:]
        for r in drop:
            for job in sorted(r.running, key=lambda j: j.admit_seq):
                _detach(r, job)
                orphans.append(_reset_job(job))
            orphans.extend(r.pending)
            r.pending.clear()
        restart = old.for_type(g) != new_config.for_type(g)
        for r in keep:
            fresh = _make_replica(r.replica_id, st.devices[g], new_config, st.profile)
            if restart:
                jobs = sorted(r.running, key=lambda j: j.admit_seq)
                for job in jobs:
                    _detach(r, job)
                fresh.pending = deque([_reset_job(j) for j in jobs] + list(r.pending))
                fresh.restarting_until = t + restart_delay
                survivors.append(fresh)
            else:
                r.max_tokens = dict(new_config.max_tokens)
                survivors.append(r)
        for _ in range(want - len(keep)):
            fresh = _make_replica(st.next_replica_id, st.devices[g], new_config, st.profile)
            st.next_replica_id += 1
            fresh.restarting_until = t + restart_delay
            survivors.append(fresh)
    st.replicas = sorted(survivors, key=lambda r: r.replica_id)
    live = {r.replica_id for r in st.replicas}
    for k in [k for k in st._history if k != "agg" and k not in live]:
        del st._history[k]
    st.router.weights = dict(new_config.weights)
    st.config = new_config
    for job in sorted(orphans, key=lambda j: (j.rec.arrival_time, j.rec.request_id)):
        st.router.dispatch(st.replicas, t).pending.append(job)
    return st


# -- whole runs --------------------------------------------------------------


@dataclass
class SimResult:
    samples: list[MetricSample]
    replica_samples: dict[int, list[MetricSample]]
    completed: list[RequestRecord]
    throughput: float
    latency: float
    tick_log: list[dict]
    arrived: int
    in_system: int
    truncated: int = 0
    replica_types: dict[int, str] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        attr = "timestamp" if name == "ts" else name
        return np.array([getattr(s, attr) for s in self.samples], dtype=float)

    def counts(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.tick_log], dtype=float)

    def summary(self) -> dict:
        return {
            "throughput_tokens_per_gpu_s": self.throughput,
            "latency_s_per_token": self.latency,
            "arrived": self.arrived,
            "completed": len(self.completed),
            "in_system": self.in_system,
            "truncated": self.truncated,
            "ticks": len(self.samples),
        }


def result_of(st: SimState) -> SimResult:
    lat = [
        (r.finish_time - r.arrival_time) / st.output_lengths[r.request_id]
        for r in st.completed
    ]
    return SimResult(
        samples=list(st.samples),
        replica_samples={k: list(v) for k, v in st.replica_samples.items()},
        completed=list(st.completed),
        throughput=st.tokens_total / st.gpu_seconds if st.gpu_seconds else 0.0,
        latency=float(np.mean(lat)) if lat else 0.0,
        tick_log=list(st.tick_log),
        arrived=st.arrived,
        in_system=st.in_system,
        truncated=st.truncated,
        replica_types=dict(st.replica_types),
    )


def run(workload: WorkloadSpec, config: ServiceConfig, gpus: Sequence[GpuDeviceSpec], profile: ModelProfile, *,
        dt: float = 1.0, optimistic_admission: bool = False, rate_window: int = 60) -> SimResult:
    """Simulate ``workload`` against a fixed configuration for its whole duration."""
    devs = {d.gpu_type_id: d for d in gpus}
    check_feasible(config, devs, profile, workload.mean_input_length())
    st = init_state(generate_workload(workload), config, devs, profile, seed=workload.rng_seed,
                    optimistic_admission=optimistic_admission, rate_window=rate_window)
    for _ in range(int(round(workload.duration / dt))):
        step(st, dt)
    return result_of(st)


# -- scenario files ----------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce a simulation: JSON-serializable."""

    workload: WorkloadSpec
    devices: tuple[GpuDeviceSpec, ...]
    profile: ModelProfile
    config: ServiceConfig
    optimistic_admission: bool = False
    rate_window: int = 60
    restart_delay: float = RESTART_DELAY
    name: str = ""

    def device_map(self) -> dict[str, GpuDeviceSpec]:
        return {d.gpu_type_id: d for d in self.devices}

    def with_rate(self, rate: float, seed: int | None = None, **workload_changes) -> "Scenario":
        w = replace(self.workload, arrival_rate=rate, **workload_changes)
        if seed is not None:
            w = replace(w, rng_seed=seed)
        return replace(self, workload=w)

    def run(self, **kw) -> SimResult:
        return run(self.workload, self.config, self.devices, self.profile,
                   optimistic_admission=self.optimistic_admission, rate_window=self.rate_window, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "workload": self.workload.to_dict(),
            "devices": [device_to_dict(d) for d in self.devices],
            "profile": {
                "params_bytes": self.profile.params_bytes,
                "dtype_bytes": self.profile.dtype_bytes,
                "token_mem": self.profile.token_mem,
                "overhead_others": self.profile.overhead_others,
            },
            "config": self.config.to_dict(),
            "optimistic_admission": self.optimistic_admission,
            "rate_window": self.rate_window,
            "restart_delay": self.restart_delay,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(
            workload=WorkloadSpec.from_dict(d["workload"]),
            devices=tuple(device_from_dict(x) for x in d["devices"]),
            profile=ModelProfile(**{k: float(v) for k, v in d["profile"].items()}),
            config=ServiceConfig.from_dict(d["config"]),
            optimistic_admission=bool(d.get("optimistic_admission", False)),
            rate_window=int(d.get("rate_window", 60)),
            restart_delay=float(d.get("restart_delay", RESTART_DELAY)),
            name=str(d.get("name", "")),
        )


def device_to_dict(d: GpuDeviceSpec) -> dict:
    return {
        "gpu_type_id": d.gpu_type_id,
        "memory_total": d.memory_total,
        "device_count_N": d.device_count_N,
        "tokens_per_second_capacity": d.tokens_per_second_capacity,
        "per_sequence_token_rate": d.per_sequence_token_rate,
    }


def device_from_dict(d: Mapping) -> GpuDeviceSpec:
    rate = d.get("per_sequence_token_rate")
    return GpuDeviceSpec(
        gpu_type_id=str(d["gpu_type_id"]),
        memory_total=float(d["memory_total"]),
        device_count_N=int(d["device_count_N"]),
        tokens_per_second_capacity=float(d["tokens_per_second_capacity"]),
        per_sequence_token_rate=None if rate is None else float(rate),
    )


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"scenario file not found: {p}")
    try:
        return Scenario.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"invalid scenario {p}: {exc}") from exc


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
