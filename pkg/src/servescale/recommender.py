"""Service-configuration recommendation.

Four determinations feed one :class:`~servescale.core.ServiceConfig`:

* capacity (``n_limit``, ``t_r_limit``) from the finished-vs-running
  relationship, and ``max_num_seqs`` from their product;
* ``gpu_memory`` and ``parallel_size`` from a linear memory model;
* per-community ``max_tokens`` from output-length densities;
* replica counts per GPU type from a small integer program.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core import GpuDeviceSpec, MetricWindow, ModelProfile, ServiceConfig
from .simulator import check_feasible, kv_memory
from .stats import ALPHA, BLOCK_SIZE, DegenerateInput, OlsFit, block_maxima, kde_fit, kde_quantile, ols_fit
from .taskcluster import CommunityModel

log = logging.getLogger(__name__)

SAFETY_CAP = 0.95
COVERAGE_Q = 0.99
CAPACITY_Q = 0.99
SATURATED_Q = 0.5
DEMAND_Q = 0.95
MIN_SAMPLES = 30
MIN_COMMUNITY = 20
DEFAULT_MAX_TOKENS = 256
TEST_PERIOD = 60.0
MIN_PERIODS = 8


class InsufficientVariation(ValueError):
    pass


class InfeasiblePlacement(ValueError):
    def __init__(self, message: str, max_capacity: float):
        super().__init__(message)
        self.max_capacity = max_capacity


class NegativeMemorySlope(ValueError):
    pass


# -- capacity ----------------------------------------------------------------


@dataclass(frozen=True)
class CapacityEstimate:
    n_limit: float
    t_r_limit: float
    saturated: bool
    quantile: float
    fit: OlsFit | None = None

    def __post_init__(self):
        if not (self.n_limit > 0 and self.t_r_limit > 0):
            raise ValueError(f"n_limit and t_r_limit must be > 0 (got {self.n_limit}, {self.t_r_limit})")


def _kde_q(x, q: float) -> float:
    return kde_quantile(kde_fit(x), q)


def _period_means(window: MetricWindow, period: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-period means of (n_r, n_f) over complete periods."""
    ts = window.column("ts")
    key = np.floor((ts - ts[0]) / period).astype(int)
    ids, counts = np.unique(key, return_counts=True)
    full = ids[counts == counts.max()]
    n_r, n_f = window.column("n_r"), window.column("n_f")
    return (np.array([n_r[key == k].mean() for k in full]),
            np.array([n_f[key == k].mean() for k in full]))


def saturation_test(window: MetricWindow, period: float = TEST_PERIOD, min_periods: int = MIN_PERIODS) -> OlsFit:
    """OLS of ``n_f`` on ``n_r`` for the saturation verdict.

    Sub-minute samples are strongly autocorrelated, which makes the slope's
    t-test overconfident, so when the window spans at least ``min_periods``
    periods the regression runs on per-period means.
    """
    x, y = _period_means(window, period)
    if x.size < min_periods or x.size == len(window):
        x, y = window.column("n_r"), window.column("n_f")
    try:
        return ols_fit(x, y)
    except DegenerateInput:
        raise InsufficientVariation("n_r does not vary in this window; run a load probe") from None


def estimate_capacity(window: MetricWindow, *, alpha: float = ALPHA, quantile: float = CAPACITY_Q,
                      saturated_quantile: float = SATURATED_Q, block_size: int = BLOCK_SIZE,
                      min_samples: int = MIN_SAMPLES, test_period: float = TEST_PERIOD,
                      saturated: bool | None = None) -> CapacityEstimate:
    """Estimate the sustainable request rate and the execution time at that rate.

    ``n_f`` is regressed on ``n_r`` (see :func:`saturation_test`).  Without a significant positive slope the
    service is saturated: finished requests fluctuate around the capacity, so
    the estimate is a central KDE quantile (``saturated_quantile``) of the
    raw samples.  With a significant positive slope the service still has
    headroom and only its peaks approach capacity, so the estimate is the
    ``quantile`` of a KDE over block maxima.  ``t_r_limit`` uses the same
    quantile over the ``t_r`` values at the timestamps of the ``n_f`` samples
    used (ticks before the first completion, where ``t_r`` is 0, are skipped).
    Passing ``saturated`` skips the test (a saturating load probe pins
    ``n_r`` at ``max_num_seqs``, so there is nothing to regress).

    Raises
    ------
    InsufficientVariation
        Too few samples, or ``n_r`` never varies.  Run a load probe that
        sweeps concurrency before estimating capacity.
    """
    n = len(window)
    if n < min_samples:
        raise InsufficientVariation(f"window has {n} samples; need {min_samples} (run a load probe)")
    n_f, t_r = window.column("n_f"), window.column("t_r")
    fit = None
    if saturated is None:
        if np.ptp(window.column("n_r")) <= 1e-12:
            raise InsufficientVariation("n_r does not vary in this window; run a load probe")
        fit = saturation_test(window, test_period)
        saturated = not (fit.significant(alpha) and fit.slope > 0)
    if saturated:
        q = saturated_quantile
        idx = np.arange(n)
    else:
        q = quantile
        idx = np.array([i + int(np.argmax(n_f[i : i + block_size])) for i in range(0, n, block_size)])
    n_limit = _kde_q(n_f[idx], q) if idx.size > 1 else float(n_f[idx].max())
    paired = t_r[idx][t_r[idx] > 0]
    if paired.size == 0:
        raise InsufficientVariation("no request finished in the window; run a load probe")
    t_r_limit = _kde_q(paired, q) if paired.size > 1 else float(paired[0])
    if n_limit <= 0 or t_r_limit <= 0:
        raise InsufficientVariation("window carries no completed work")
    return CapacityEstimate(n_limit, t_r_limit, saturated, q, fit)


def determine_max_num_seqs(cap: CapacityEstimate) -> int:
    # the tolerance keeps exact products such as 6 * 4 from rounding up
    return max(1, math.ceil(cap.n_limit * cap.t_r_limit - 1e-9))


# -- memory ------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryModel:
    slope: float
    intercept: float
    fit: OlsFit | None = None

    def fraction(self, n_r: float) -> float:
        return self.intercept + self.slope * n_r


def fit_memory_model(window: MetricWindow) -> MemoryModel:
    """Regress memory utilization on the number of running requests."""
    try:
        fit = ols_fit(window.column("n_r"), window.column("m_u"))
    except DegenerateInput:
        raise InsufficientVariation("n_r does not vary in this window; run a load probe") from None
    if fit.slope < -1e-12:
        raise NegativeMemorySlope(f"memory utilization falls with running requests (slope {fit.slope:.3g}); "
                                  "the trace is unusable for memory sizing")
    return MemoryModel(max(fit.slope, 0.0), fit.intercept, fit)


def determine_gpu_memory(model: MemoryModel, max_num_seqs: int, device: GpuDeviceSpec, *,
                         safety_cap: float = SAFETY_CAP, observed_parallel_size: int = 1,
                         min_bytes: float = 0.0) -> tuple[float, int]:
    """Per-device ``gpu_memory`` (bytes) and ``parallel_size`` for ``max_num_seqs``.

    The model is fitted on utilization of the pooled memory of
    ``observed_parallel_size`` devices.  The requirement (at least
    ``min_bytes``) is split over the fewest devices that keep each device at
    or below ``safety_cap`` of its memory.
    """
    m = device.memory_total
    required = max(model.fraction(max_num_seqs) * observed_parallel_size * m, min_bytes)
    ps = max(1, math.ceil(required / (m * safety_cap) - 1e-12))
    return min(required / ps, m * safety_cap), ps


def required_bytes(model: MemoryModel, max_num_seqs: int, device: GpuDeviceSpec,
                   observed_parallel_size: int = 1) -> float:
    return model.fraction(max_num_seqs) * observed_parallel_size * device.memory_total


# -- max_tokens --------------------------------------------------------------


def _tokens_at(lengths, q: float) -> int:
    return max(1, math.ceil(kde_quantile(kde_fit(lengths), q) - 1e-6))


def determine_max_tokens(communities: CommunityModel | None, coverage_q: float = COVERAGE_Q, *,
                         min_size: int = MIN_COMMUNITY, default: int = DEFAULT_MAX_TOKENS) -> dict[str, int]:
    """Output-length cap per community, plus ``"*"`` for unmatched traffic.

    A community with fewer than ``min_size`` observed lengths gets the global
    quantile and a warning.  Without any history every request gets
    ``default``.
    """
    if communities is None or len(communities.all_lengths()) == 0:
        log.warning("no request history; max_tokens falls back to the default %d", default)
        return {"*": int(default)}
    everything = communities.all_lengths()
    glob = _tokens_at(everything, coverage_q)
    out = {"*": glob}
    for c in communities.communities:
        if c.output_lengths.size < min_size:
            log.warning("community %s has %d lengths (< %d); using the global value %d",
                        c.community_id, c.output_lengths.size, min_size, glob)
            out[c.community_id] = glob
        else:
            out[c.community_id] = _tokens_at(c.output_lengths, coverage_q)
    return out


# -- placement ---------------------------------------------------------------


@dataclass(frozen=True)
class PlacementProblem:
    gpu_types: tuple[str, ...]
    scores: tuple[float, ...]
    n_limits: tuple[float, ...]
    parallel_sizes: tuple[int, ...]
    device_counts: tuple[int, ...]
    demand: float

    def __post_init__(self):
        k = len(self.gpu_types)
        if not all(len(x) == k for x in (self.scores, self.n_limits, self.parallel_sizes, self.device_counts)):
            raise ValueError("per-type fields must have equal length")
        if not self.demand > 0:
            raise ValueError("demand must be > 0")
        if any(s < 0 for s in self.scores) or any(p < 1 for p in self.parallel_sizes):
            raise ValueError("scores must be >= 0 and parallel sizes >= 1")

    def upper_bounds(self) -> list[int]:
        return [n // p if lim > 0 else 0
                for n, p, lim in zip(self.device_counts, self.parallel_sizes, self.n_limits)]


@dataclass(frozen=True)
class PlacementPlan:
    replicas: dict[str, int]
    weights: dict[str, float]
    objective: float
    capacity: float


def placement_weights(n_limits: Mapping[str, float], replicas: Mapping[str, int]) -> dict[str, float]:
    live = {g: n_limits[g] for g, r in replicas.items() if r > 0}
    top = max(live.values())
    return {g: v / top for g, v in sorted(live.items())}


def _better(a: tuple, b: tuple | None) -> bool:
    """Order candidates by objective, then fewer replicas, more capacity, lexicographic counts."""
    if b is None:
        return True
    oa, ob = a[0], b[0]
    if not math.isclose(oa, ob, rel_tol=1e-12, abs_tol=1e-15):
        return oa < ob
    return (a[1], -a[2], a[3]) < (b[1], -b[2], b[3])


def solve_placement(problem: PlacementProblem) -> PlacementPlan:
    """Minimize total score subject to covering demand with the devices available.

    Depth-first branch and bound over replica counts.  The bound is the
    fractional covering relaxation of the remaining types (greedy by score
    per unit of capacity), which is exact for the continuous problem.
    """
    p = problem
    ub = p.upper_bounds()
    k = len(p.gpu_types)
    max_cap = sum(u * lim for u, lim in zip(ub, p.n_limits))
    if max_cap < p.demand * (1 - 1e-12):
        raise InfeasiblePlacement(f"demand {p.demand:.4g} req/s exceeds the maximum achievable "
                                  f"capacity {max_cap:.4g} req/s", max_cap)
    best: list = [None]

    def bound(i: int, residual: float) -> float:
        if residual <= 0:
            return 0.0
        rest = sorted((p.scores[j] / p.n_limits[j], j) for j in range(i, k) if ub[j] > 0)
        cost = 0.0
        for ratio, j in rest:
            take = min(ub[j] * p.n_limits[j], residual)
            cost += ratio * take
            residual -= take
            if residual <= 1e-12 * p.demand:
                return cost
        return math.inf

    counts = [0] * k

    def dfs(i: int, cost: float, cap: float):
        residual = p.demand - cap
        if best[0] is not None and cost + bound(i, residual) > best[0][0] * (1 + 1e-12) + 1e-15:
            return
        if i == k:
            if residual <= 1e-12 * p.demand:
                cand = (cost, sum(counts), cap, tuple(counts))
                if _better(cand, best[0]):
                    best[0] = cand
            return
        for r in range(ub[i] + 1):
            counts[i] = r
            dfs(i + 1, cost + p.scores[i] * r, cap + p.n_limits[i] * r)
        counts[i] = 0

    dfs(0, 0.0, 0.0)
    if best[0] is None:
        raise InfeasiblePlacement("no integer assignment covers demand", max_cap)
    cost, _, cap, reps = best[0]
    replicas = dict(zip(p.gpu_types, reps))
    limits = dict(zip(p.gpu_types, p.n_limits))
    return PlacementPlan(replicas, placement_weights(limits, replicas), cost, cap)


# -- composition -------------------------------------------------------------


@dataclass
class TypeDetail:
    capacity: CapacityEstimate
    memory: MemoryModel
    max_num_seqs: int
    gpu_memory: float
    parallel_size: int
    score: float
    memory_bound: bool = False


@dataclass
class Recommendation:
    config: ServiceConfig
    plan: PlacementPlan
    demand: float
    per_type: dict[str, TypeDetail]
    max_tokens: dict[str, int]
    notes: list[str] = field(default_factory=list)

    def describe(self) -> str:
        lines = [f"demand: {self.demand:.3f} req/s; planned capacity {self.plan.capacity:.3f} req/s"]
        for g, d in sorted(self.per_type.items()):
            lines.append(
                f"{g}: replicas={self.plan.replicas.get(g, 0)} weight={self.plan.weights.get(g, 0):.2f} "
                f"n_limit={d.capacity.n_limit:.3f} t_r_limit={d.capacity.t_r_limit:.3f} "
                f"saturated={d.capacity.saturated} max_num_seqs={d.max_num_seqs} "
                f"gpu_memory={d.gpu_memory / 1e9:.2f}GB parallel_size={d.parallel_size}")
        lines.append("max_tokens: " + ", ".join(f"{k}={v}" for k, v in sorted(self.max_tokens.items())))
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def estimate_demand(windows: Mapping[str, MetricWindow] | Sequence[MetricWindow], q: float = DEMAND_Q) -> float:
    """Offered load: the ``q`` KDE quantile of ``n_a``, summed over windows."""
    ws = windows.values() if isinstance(windows, Mapping) else windows
    return float(sum(kde_quantile(kde_fit(w.column("n_a")), q) for w in ws))


def _memory_bound(window: MetricWindow, mns0: int) -> bool:
    """A standing queue while well under ``max_num_seqs``: KV memory is the bottleneck."""
    n_r = window.column("n_r")
    n_p = window.column("n_p")
    return float(np.median(n_p)) >= 1.0 and float(np.median(n_r)) <= 0.9 * mns0


def recommend_detailed(windows: Mapping[str, MetricWindow], request_history, devices, profile: ModelProfile,
                       demand: float | None = None, *, current: ServiceConfig | None = None,
                       seq_length: float | None = None, observed_parallel_size: Mapping[str, int] | None = None,
                       coverage_q: float = COVERAGE_Q, safety_cap: float = SAFETY_CAP,
                       quantile: float = CAPACITY_Q, saturated_quantile: float = SATURATED_Q,
                       memory_windows: Mapping[str, MetricWindow] | None = None,
                       prior_capacity: Mapping[str, CapacityEstimate] | None = None,
                       best_effort: bool = False, reserve_max_tokens: bool = False) -> Recommendation:
    """Full recommendation with per-type diagnostics.

    ``windows`` maps GPU type to a per-replica trace recorded on that type.
    ``request_history`` is a :class:`CommunityModel` or ``None`` (keep the
    current ``max_tokens``, else the default).  When ``current`` is given and
    a type has a standing queue while running well below its
    ``max_num_seqs``, the bottleneck is KV memory rather than compute: the
    memory grows to the safety cap on the current devices and the capacity
    estimate is scaled by the concurrency gained.

    ``memory_windows`` (default: ``windows``) feed the memory regression, so
    a short recent window can drive capacity while a longer one sizes memory.
    ``prior_capacity`` holds saturated estimates from an earlier load probe;
    an unsaturated window only bounds capacity from below, so the larger of
    the two is used.  With ``best_effort`` a demand beyond what the devices
    can serve is planned at the maximum achievable capacity instead of
    raising :class:`InfeasiblePlacement`.  ``reserve_max_tokens`` is for
    servers that reserve KV space for the full ``max_tokens`` at admission:
    memory is then floored at ``max_num_seqs`` such reservations, because a
    fit of observed usage would under-size it.
    """
    devs = dict(devices) if isinstance(devices, Mapping) else {d.gpu_type_id: d for d in devices}
    if not windows:
        raise ValueError("no traces given")
    obs_ps = dict(observed_parallel_size or {})
    if current is not None:
        for g in windows:
            obs_ps.setdefault(g, current.for_type(g)[0])
    notes: list[str] = []
    if demand is None:
        demand = estimate_demand(windows)
    if not demand > 0:
        raise ValueError("demand must be > 0")
    seq = seq_length if seq_length is not None else 0.0
    if isinstance(request_history, CommunityModel):
        max_tokens = determine_max_tokens(request_history, coverage_q)
    elif current is not None:
        max_tokens = dict(current.max_tokens)
    else:
        max_tokens = determine_max_tokens(None, coverage_q)
    if reserve_max_tokens:
        # admission holds prompt + cap for every running sequence
        seq += max(max_tokens.values())
    per_type: dict[str, TypeDetail] = {}
    for g in sorted(windows):
        if g not in devs:
            raise ValueError(f"trace given for unknown GPU type {g!r}")
        dev = devs[g]
        w = windows[g]
        mw = (memory_windows or {}).get(g, w)
        mns0 = current.for_type(g)[2] if current is not None and current.replicas.get(g, 0) > 0 else None
        bound = mns0 is not None and _memory_bound(w, mns0)
        try:
            cap = estimate_capacity(w, quantile=quantile, saturated_quantile=saturated_quantile,
                                    saturated=True if bound else None)
            mem = fit_memory_model(mw)
        except ValueError as exc:
            raise type(exc)(f"{g}: {exc}") from None
        prior = (prior_capacity or {}).get(g)
        if prior is not None and not cap.saturated and prior.n_limit > cap.n_limit:
            cap = CapacityEstimate(prior.n_limit, cap.t_r_limit, False, cap.quantile, cap.fit)
            notes.append(f"{g}: unsaturated window; using probed capacity {prior.n_limit:.3f} req/s")
        mns = determine_max_num_seqs(cap)
        if bound:
            ps0 = current.for_type(g)[0]
            c0 = float(np.median(w.column("n_r")))
            live = {h: r for h, r in current.replicas.items() if r > 0}
            share = current.weights.get(g, 1.0) / sum(current.weights.get(h, 1.0) * r for h, r in live.items())
            c_star = math.ceil(demand * share * cap.t_r_limit - 1e-9)
            pool_cap = safety_cap * dev.memory_total * max(ps0, 1)
            # the replica already holds its devices, so grow KV up to the cap;
            # demand only decides whether more replicas are needed on top
            c_fit = (pool_cap / (dev.memory_total * obs_ps.get(g, 1)) - mem.intercept) / mem.slope \
                if mem.slope > 0 else float(c_star)
            c_new = max(c_fit, c0)
            cap = CapacityEstimate(cap.n_limit * c_new / c0, cap.t_r_limit, True, cap.quantile, cap.fit)
            mns = max(mns0, math.ceil(c_new - 1e-9))
            notes.append(f"{g}: memory-bound at {c0:.1f} running of {mns0}; sizing memory for {c_new:.1f}")
        need = kv_memory(profile, mns, seq) if seq_length is not None or reserve_max_tokens else 0.0
        gpu_mem, ps = determine_gpu_memory(mem, mns if not bound else c_new, dev, safety_cap=safety_cap,
                                           observed_parallel_size=obs_ps.get(g, 1), min_bytes=need)
        if need > gpu_mem * ps:
            raise ValueError(f"{g}: max_num_seqs={mns} cannot fit in {ps} device(s) at {safety_cap:.0%}")
        req = max(required_bytes(mem, mns, dev, obs_ps.get(g, 1)), need)
        score = abs(req - ps * dev.memory_total) / dev.memory_total
        per_type[g] = TypeDetail(cap, mem, mns, gpu_mem, ps, score, bound)

    types = tuple(sorted(per_type))
    problem = PlacementProblem(
        types,
        tuple(per_type[g].score for g in types),
        tuple(per_type[g].capacity.n_limit for g in types),
        tuple(per_type[g].parallel_size for g in types),
        tuple(devs[g].device_count_N for g in types),
        demand,
    )
    try:
        plan = solve_placement(problem)
    except InfeasiblePlacement as exc:
        if not best_effort or exc.max_capacity <= 0:
            raise
        notes.append(f"demand {demand:.3f} req/s exceeds the reachable {exc.max_capacity:.3f}; planning at the maximum")
        plan = solve_placement(replace(problem, demand=exc.max_capacity))

    lead = max((g for g in types if plan.replicas[g] > 0), key=lambda g: (plan.replicas[g], g))
    d0 = per_type[lead]
    per_type_cfg = {
        g: {"parallel_size": d.parallel_size, "gpu_memory": d.gpu_memory, "max_num_seqs": d.max_num_seqs}
        for g, d in per_type.items() if g != lead
    }
    config = ServiceConfig(
        parallel_size=d0.parallel_size,
        gpu_memory=d0.gpu_memory,
        max_num_seqs=d0.max_num_seqs,
        max_tokens=max_tokens,
        replicas=dict(plan.replicas),
        weights=dict(plan.weights),
        per_type=per_type_cfg,
    )
    if seq_length is not None:
        check_feasible(config, devs, profile, seq_length)
    return Recommendation(config, plan, float(demand), per_type, max_tokens, notes)


def recommend(windows: Mapping[str, MetricWindow], request_history, devices, profile: ModelProfile,
              demand: float | None = None, **kw) -> ServiceConfig:
    """Recommend a complete configuration; see :func:`recommend_detailed`."""
    return recommend_detailed(windows, request_history, devices, profile, demand, **kw).config
