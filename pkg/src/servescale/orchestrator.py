"""Closed autoscaling loop: collect metrics, detect, re-recommend, apply.

The loop talks to the serving system through :class:`ServingSystem`
(``advance`` / ``samples`` / ``apply``); :class:`SimulatedSystem` adapts the
simulator to it.  Guards against flapping: a sustained-anomaly confirmation
period, a cooldown between attempts, an hourly action cap, and a direction
check that only lets overload grow the configuration and underload shrink it.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import GpuDeviceSpec, MetricSample, MetricWindow, ModelProfile, ServiceConfig
from .detector import LabeledDataset, VaeConfig, VaeDetector, Verdict, calibrate_threshold, detect_many, \
    score_many, train
from .recommender import CapacityEstimate, estimate_capacity, estimate_demand, recommend_detailed
from .simulator import Scenario, SimResult, SimState, apply_config, check_feasible, generate_workload, \
    init_state, result_of, step
from .stats import ols_fit
from .taskcluster import CommunityModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControlLoopConfig:
    tick_interval: float = 1.0
    window: int = 900
    cooldown: float = 120.0
    max_actions_per_hour: int = 6
    # an action needs confirm_fraction of the last confirm_ticks verdicts anomalous
    confirm_ticks: int = 60
    confirm_fraction: float = 0.8
    restart_delay: float = 60.0
    min_seq_growth: float = 0.10
    min_memory_change: float = 0.01
    best_effort: bool = True
    # overload demand adds the standing queue spread over this many seconds
    drain_time: float = 600.0
    # demand is read from the newest samples of the anomalous episode
    demand_ticks: int = 30

    def __post_init__(self):
        if self.tick_interval <= 0:
            raise ValueError("tick_interval must be > 0")
        if self.cooldown < self.restart_delay:
            raise ValueError("cooldown must be at least restart_delay")
        if self.confirm_ticks < 1 or not (0 < self.confirm_fraction <= 1):
            raise ValueError("bad confirmation settings")


@dataclass(frozen=True)
class RecommenderInputs:
    devices: Mapping[str, GpuDeviceSpec]
    profile: ModelProfile
    seq_length: float
    request_history: CommunityModel | None = None
    prior_capacity: Mapping[str, CapacityEstimate] | None = None
    # the server reserves prompt + max_tokens of KV per admitted sequence
    reserve_max_tokens: bool = False


@dataclass(frozen=True)
class ScalingAction:
    timestamp: float
    verdict: Verdict
    old: ServiceConfig
    new: ServiceConfig
    rationale: str

    def to_dict(self) -> dict:
        return {
            "type": "action",
            "t": self.timestamp,
            "verdict": _verdict_dict(self.verdict),
            "old": self.old.to_dict(),
            "new": self.new.to_dict(),
            "rationale": self.rationale,
        }


def _verdict_dict(v: Verdict) -> dict:
    return {"score": v.score, "is_anomaly": v.is_anomaly, "direction": v.direction, "md": v.md}


@dataclass
class AuditLog:
    verdicts: list[tuple[float, Verdict]] = field(default_factory=list)
    actions: list[ScalingAction] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def records(self, include_verdicts: bool = True) -> list[dict]:
        out = [a.to_dict() for a in self.actions] + list(self.skipped)
        if include_verdicts:
            out += [{"type": "verdict", "t": t, **_verdict_dict(v)} for t, v in self.verdicts]
        order = {"verdict": 0, "skipped": 1, "action": 2}
        return sorted(out, key=lambda r: (r["t"], order[r["type"]]))

    def write_jsonl(self, path, include_verdicts: bool = True) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records(include_verdicts)]
        Path(path).write_text("".join(x + "\n" for x in lines), encoding="utf-8")


# -- serving-system interface ------------------------------------------------


class ServingSystem(Protocol):
    @property
    def now(self) -> float: ...

    @property
    def config(self) -> ServiceConfig: ...

    def advance(self, dt: float) -> MetricSample: ...

    def samples(self) -> Sequence[MetricSample]: ...

    def type_samples(self, gpu_type_id: str) -> Sequence[MetricSample]: ...

    def apply(self, config: ServiceConfig, restart_delay: float) -> None: ...


class SimulatedSystem:
    """:class:`ServingSystem` backed by an in-process simulation."""

    def __init__(self, state: SimState):
        self.state = state

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "SimulatedSystem":
        w = scenario.workload
        return cls(init_state(generate_workload(w), scenario.config, scenario.device_map(), scenario.profile,
                              seed=w.rng_seed, optimistic_admission=scenario.optimistic_admission,
                              rate_window=scenario.rate_window))

    @property
    def now(self) -> float:
        return self.state.t

    @property
    def config(self) -> ServiceConfig:
        return self.state.config

    def advance(self, dt: float) -> MetricSample:
        _, out = step(self.state, dt)
        return out[0]

    def samples(self) -> Sequence[MetricSample]:
        return self.state.samples

    def type_samples(self, gpu_type_id: str) -> Sequence[MetricSample]:
        """Samples of the longest-lived replica of one GPU type."""
        ids = [r.replica_id for r in self.state.replicas if r.gpu_type_id == gpu_type_id]
        return self.state.replica_samples.get(min(ids), []) if ids else []

    def apply(self, config: ServiceConfig, restart_delay: float) -> None:
        apply_config(self.state, config, restart_delay)


# -- decisions ---------------------------------------------------------------


def _grew(old: ServiceConfig, new: ServiceConfig, loop: ControlLoopConfig) -> bool:
    types = set(old.replicas) | set(new.replicas)
    if any(new.replicas.get(g, 0) < old.replicas.get(g, 0) for g in types):
        return False
    if any(new.replicas.get(g, 0) > old.replicas.get(g, 0) for g in types):
        return True
    for g in types:
        if old.replicas.get(g, 0) == 0:
            continue
        ps0, m0, s0 = old.for_type(g)
        ps1, m1, s1 = new.for_type(g)
        if ps1 * m1 >= ps0 * m0 * (1 + loop.min_memory_change) or s1 >= s0 * (1 + loop.min_seq_growth):
            return True
    return False


def _shrank(old: ServiceConfig, new: ServiceConfig, loop: ControlLoopConfig) -> bool:
    types = set(old.replicas) | set(new.replicas)
    if any(new.replicas.get(g, 0) > old.replicas.get(g, 0) for g in types):
        return False
    if new.total_replicas < old.total_replicas:
        return True
    for g in types:
        if new.replicas.get(g, 0) == 0:
            continue
        ps0, m0, _ = old.for_type(g)
        ps1, m1, _ = new.for_type(g)
        if ps1 * m1 <= ps0 * m0 * (1 - loop.min_memory_change):
            return True
    return False


@dataclass
class LoopState:
    recent: deque = field(default_factory=deque)
    last_attempt: float = -math.inf
    action_times: list[float] = field(default_factory=list)
    streak_start: float | None = None
    audit: AuditLog = field(default_factory=AuditLog)


def _windows(system: ServingSystem, n: int) -> dict[str, MetricWindow]:
    out = {}
    for g, r in sorted(system.config.replicas.items()):
        if r > 0:
            s = list(system.type_samples(g))[-n:]
            out[g] = MetricWindow(tuple(s))
    return out


def _propose(system: ServingSystem, verdict: Verdict, inputs: RecommenderInputs,
             loop: ControlLoopConfig) -> tuple[ServiceConfig | None, str]:
    """Run the recommender on the current episode; returns (config or None, reason)."""
    cur = system.config
    episode = _windows(system, loop.confirm_ticks)
    memory = _windows(system, loop.window)
    agg = MetricWindow(tuple(list(system.samples())[-loop.confirm_ticks:]))
    try:
        demand = estimate_demand([MetricWindow(agg.samples[-loop.demand_ticks:])])
        if verdict.direction == "overload":
            demand += agg.samples[-1].n_p / loop.drain_time
        rec = recommend_detailed(
            episode, inputs.request_history, inputs.devices, inputs.profile, demand,
            current=cur, seq_length=inputs.seq_length, memory_windows=memory,
            prior_capacity=inputs.prior_capacity, best_effort=loop.best_effort,
            reserve_max_tokens=inputs.reserve_max_tokens,
        )
    except ValueError as exc:
        return None, f"recommendation failed: {exc}"
    new = rec.config
    if inputs.request_history is None:
        new = replace(new, max_tokens=dict(cur.max_tokens))
    ok = _grew(cur, new, loop) if verdict.direction == "overload" else _shrank(cur, new, loop)
    if not ok:
        return None, f"{verdict.direction}: recommendation is not a material change in that direction"
    try:
        check_feasible(new, inputs.devices, inputs.profile, inputs.seq_length)
    except ValueError as exc:
        return None, f"infeasible recommendation: {exc}"
    why = f"{verdict.direction} (score {verdict.score:.3g}, md {verdict.md:+.3g}); demand {demand:.2f} req/s"
    if rec.notes:
        why += "; " + "; ".join(rec.notes)
    return new, why


def tick(system: ServingSystem, detector: VaeDetector, inputs: RecommenderInputs, loop: ControlLoopConfig,
         state: LoopState) -> tuple[ServingSystem, Verdict, ScalingAction | None]:
    """Advance one interval, judge the newest sample and act if warranted."""
    system.advance(loop.tick_interval)
    t = system.now
    rows = [s.as_vector() for s in list(system.samples())[-max(detector.smooth, 1):]]
    verdict = detect_many(detector, rows)[-1]
    state.audit.verdicts.append((t, verdict))
    state.recent.append(verdict)
    while len(state.recent) > loop.confirm_ticks:
        state.recent.popleft()
    if verdict.is_anomaly:
        if state.streak_start is None:
            state.streak_start = t
    elif not any(v.is_anomaly for v in state.recent):
        state.streak_start = None

    hits = [v for v in state.recent if v.is_anomaly]
    confirmed = (verdict.is_anomaly and len(state.recent) == loop.confirm_ticks
                 and len(hits) >= loop.confirm_fraction * loop.confirm_ticks)
    if not confirmed or len(system.samples()) < loop.window:
        return system, verdict, None
    if t - state.last_attempt < loop.cooldown:
        return system, verdict, None
    if sum(1 for a in state.action_times if a > t - 3600.0) >= loop.max_actions_per_hour:
        return system, verdict, None
    over = sum(1 for v in hits if v.direction == "overload")
    judged = replace(verdict, direction="overload" if 2 * over >= len(hits) else "underload")
    state.last_attempt = t
    new, why = _propose(system, judged, inputs, loop)
    if new is None:
        state.audit.skipped.append({"type": "skipped", "t": t, "reason": why, "verdict": _verdict_dict(judged)})
        log.info("t=%.0f skipped: %s", t, why)
        return system, verdict, None
    action = ScalingAction(t, judged, system.config, new, why)
    system.apply(new, loop.restart_delay)
    state.action_times.append(t)
    state.audit.actions.append(action)
    log.info("t=%.0f action: %s", t, why)
    return system, verdict, action


@dataclass
class LoopResult:
    audit: AuditLog
    result: SimResult

    def first_detection_after(self, t0: float) -> float | None:
        for t, v in self.audit.verdicts:
            if t > t0 and v.is_anomaly:
                return t
        return None


def run_loop(scenario: Scenario, detector: VaeDetector, loop: ControlLoopConfig = ControlLoopConfig(),
             inputs: RecommenderInputs | None = None, duration: float | None = None) -> LoopResult:
    """Simulate ``scenario`` under closed-loop control."""
    if inputs is None:
        inputs = scenario_inputs(scenario)
    system = SimulatedSystem.from_scenario(scenario)
    state = LoopState()
    total = scenario.workload.duration if duration is None else duration
    for _ in range(int(round(total / loop.tick_interval))):
        tick(system, detector, inputs, loop, state)
    return LoopResult(state.audit, result_of(system.state))


# -- offline helpers ---------------------------------------------------------


def scenario_inputs(scenario: Scenario, prior_capacity=None, request_history=None) -> RecommenderInputs:
    return RecommenderInputs(scenario.device_map(), scenario.profile, scenario.workload.mean_input_length(),
                             request_history, prior_capacity, not scenario.optimistic_admission)


def probe_capacity(scenario: Scenario, probe_rate: float, duration: float = 1200.0,
                   warmup: float = 300.0) -> dict[str, CapacityEstimate]:
    """Saturating load probe: one replica per deployed type under ``probe_rate`` req/s."""
    out = {}
    for g, r in sorted(scenario.config.replicas.items()):
        if r == 0:
            continue
        solo = replace(scenario.config, replicas={g: 1}, weights={g: 1.0})
        w = replace(scenario.workload, arrival_rate=probe_rate, rate_schedule=(), duration=duration)
        res = replace(scenario, config=solo, workload=w).run()
        samples = [s for s in res.samples if s.timestamp > warmup]
        out[g] = estimate_capacity(MetricWindow(tuple(samples)), saturated=True)
    return out


def stationary_rows(scenario: Scenario, rates: Sequence[float], seeds: Sequence[int], duration: float = 1800.0,
                    warmup: float = 120.0) -> np.ndarray:
    """Aggregate metric rows from stationary runs of the scenario's configuration."""
    rows = []
    for rate in rates:
        for seed in seeds:
            w = replace(scenario.workload, arrival_rate=rate, rate_schedule=(), duration=duration, rng_seed=seed)
            res = replace(scenario, workload=w).run()
            rows.extend(s.as_vector() for s in res.samples if s.timestamp > warmup)
    return np.array(rows)


def fit_loop_detector(scenario: Scenario, normal_rates: Sequence[float], *, anomaly_rates: Sequence[float] = (),
                      seeds: Sequence[int] = (0, 1), calib_seeds: Sequence[int] = (100, 101),
                      duration: float = 1800.0, anomaly_duration: float = 600.0,
                      config: VaeConfig = VaeConfig(epochs=60, log_counts=True), risk_q: float = 1e-3) -> VaeDetector:
    """Train on stationary runs and calibrate on independent normal ones.

    Runs at ``normal_rates`` are labeled normal; runs at ``anomaly_rates``
    (one seed each) are labeled anomalous.
    """
    normal = stationary_rows(scenario, normal_rates, seeds, duration)
    parts, labels = [normal], [np.ones(len(normal))]
    if anomaly_rates:
        bad = stationary_rows(scenario, anomaly_rates, seeds[:1], anomaly_duration)
        parts.append(bad)
        labels.append(-np.ones(len(bad)))
    det = train(LabeledDataset(np.vstack(parts), np.concatenate(labels)), config)
    calib = stationary_rows(scenario, normal_rates, calib_seeds, duration)
    return calibrate_threshold(det, score_many(det, calib), risk_q=risk_q)


def sustained_admitted_rate(result: SimResult, t0: float, t1: float) -> float:
    """Mean admissions per second over ticks in (t0, t1] that had a queue."""
    adm = result.counts("admitted")
    t = result.counts("t")
    n_p = result.column("n_p")
    mask = (t > t0) & (t <= t1) & (n_p > 0)
    return float(adm[mask].mean()) if mask.any() else 0.0


def pending_slope(result: SimResult, t0: float, t1: float) -> float:
    t = result.column("ts")
    mask = (t > t0) & (t <= t1)
    return ols_fit(t[mask], result.column("n_p")[mask]).slope
