from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from servescale.core import GpuDeviceSpec, ModelProfile, RequestRecord, ServiceConfig
from servescale.orchestrator import sustained_admitted_rate
from servescale.simulator import (InfeasibleConfig, LengthDist, Scenario, WorkloadSpec, apply_config,
                                  generate_workload, init_state, kv_memory, load_scenario, result_of, run,
                                  save_scenario, step)
from servescale.stats import ols_fit

PROFILE = ModelProfile(params_bytes=14e9, dtype_bytes=2, token_mem=524288, overhead_others=1e9)
GPU = GpuDeviceSpec("a100", 80e9, 8, 1000.0)


def config(mns=8, mem=60e9, replicas=None, weights=None, max_tokens=None):
    replicas = replicas or {"a100": 1}
    return ServiceConfig(parallel_size=1, gpu_memory=mem, max_num_seqs=mns, max_tokens=max_tokens or {"*": 4096},
                         replicas=replicas, weights=weights or {g: 1.0 for g in replicas})


def workload(rate=1.0, duration=600.0, seed=0, out=LengthDist("fixed", 200)):
    return WorkloadSpec(rate, LengthDist("fixed", 100), out, duration, seed)


def test_kv_memory_cases(oracle):
    assert kv_memory(PROFILE, 0, 2048) == 14e9 + 1e9
    assert kv_memory(PROFILE, 8, 2048) == pytest.approx(oracle["kv_memory_7b"], rel=1e-12)
    middle = kv_memory(PROFILE, 8, 2048) - kv_memory(PROFILE, 0, 2048)
    assert kv_memory(PROFILE, 16, 2048) - kv_memory(PROFILE, 0, 2048) == pytest.approx(2 * middle)


def test_zero_rate_workload_is_empty():
    assert generate_workload(workload(rate=0.0)) == []


def test_poisson_counts(oracle):
    o = oracle["poisson_600s_at_6"]
    for seed in range(20):
        n = len(generate_workload(workload(rate=6.0, seed=seed)))
        assert abs(n - o["mean"]) <= 3 * o["sd"]


def test_workload_deterministic():
    assert generate_workload(workload(rate=3.0, seed=7)) == generate_workload(workload(rate=3.0, seed=7))


def test_bad_community_mix():
    with pytest.raises(ValueError):
        WorkloadSpec(1.0, LengthDist(), LengthDist(), 10.0, community_mix={"a": 0.5})


def test_idle_step_reports_zero_load():
    st = init_state([], config(), [GPU], PROFILE)
    _, out = step(st, 1.0)
    agg = out[0]
    assert (agg.n_f, agg.n_r, agg.n_a, agg.n_p, agg.g_u) == (0, 0, 0, 0, 0)
    assert agg.m_u == pytest.approx(PROFILE.static_bytes / GPU.memory_total)


def test_cap_semantics():
    reqs = [RequestRecord(i, 0.0, "x", 100, 500) for i in range(10)]
    st = init_state(reqs, config(mns=8), [GPU], PROFILE)
    step(st, 0.5)
    rep = st.replicas[0]
    assert len(rep.running) == 8
    assert len(rep.pending) == 2


def test_light_load_closed_form():
    # one request at a time gets the whole device
    fast = GpuDeviceSpec("a100", 80e9, 1, 1000.0)
    res = run(workload(rate=0.05, duration=4000, seed=1), config(), [fast], PROFILE)
    assert res.latency == pytest.approx(1 / 1000.0, rel=0.05)
    assert res.throughput == pytest.approx(0.05 * 200 / 1, rel=0.1)


def test_infeasible_config_rejected():
    with pytest.raises(InfeasibleConfig):
        run(workload(), config(replicas={"a100": 9}), [GPU], PROFILE)
    with pytest.raises(InfeasibleConfig):
        run(workload(), config(mem=90e9), [GPU], PROFILE)


def test_invariants_and_conservation():
    sc = Scenario(workload(rate=7.0, duration=300, out=LengthDist("uniform", 100, 300)), (GPU,), PROFILE,
                  config(mns=16, mem=30e9, replicas={"a100": 2}))
    st = init_state(generate_workload(sc.workload), sc.config, sc.device_map(), PROFILE)
    for _ in range(300):
        step(st, 1.0)
        for r in st.replicas:
            assert len(r.running) <= r.max_num_seqs
            assert r.reserved_tokens * r.token_mem <= r.kv_budget * (1 + 1e-9) or len(r.running) == 1
            assert r.kv_bytes_used <= r.kv_budget * (1 + 1e-9)
        pending = sum(len(r.pending) for r in st.replicas)
        running = sum(len(r.running) for r in st.replicas)
        assert st.arrived == len(st.completed) + pending + running


def test_determinism(data_dir):
    sc = load_scenario(data_dir / "two_gpu.json")
    a, b = sc.run(), sc.run()
    assert a.samples == b.samples
    assert a.replica_samples == b.replica_samples
    assert a.throughput == b.throughput


def test_fig1_bounded_vs_growing(data_dir):
    sc = load_scenario(data_dir / "fig1.json")
    low, high = sc.with_rate(6.0).run(), sc.with_rate(7.0).run()
    assert low.column("n_p").max() <= 2 * sc.config.max_num_seqs
    assert ols_fit(high.column("ts"), high.column("n_p")).slope == pytest.approx(1.0, rel=0.3)


def test_littles_law_below_saturation(data_dir):
    sc = load_scenario(data_dir / "fig1.json").with_rate(3.0)
    res = sc.run()
    keep = res.column("ts") > 120
    n_r = res.column("n_r")[keep].mean()
    assert n_r == pytest.approx(3.0 * res.column("t_r")[keep].mean(), rel=0.15)


def test_throughput_plateau_and_latency(data_dir):
    sc = load_scenario(data_dir / "fig4.json")
    res = [sc.with_rate(r).run() for r in (2.0, 4.0, 6.0, 9.0, 12.0)]
    tp = [r.throughput for r in res]
    assert all(a <= b * (1 + 1e-9) for a, b in zip(tp, tp[1:]))
    assert res[-1].latency > 10 * res[0].latency
    # beyond saturation the queue keeps growing
    assert ols_fit(res[-1].column("ts"), res[-1].column("n_p")).slope > 0


def test_max_num_seqs_sweep_peaks(data_dir):
    sc = load_scenario(data_dir / "fig6.json")
    rows = []
    for m in (4, 8, 16, 24, 48, 96):
        r = replace(sc, config=replace(sc.config, max_num_seqs=m)).run()
        rows.append((len(r.completed) / sc.workload.duration, r.column("m_u").mean()))
    fin = [a for a, _ in rows]
    mem = [b for _, b in rows]
    peak = int(np.argmax(fin))
    assert 0 < peak < len(fin) - 1
    assert fin[-1] < fin[peak]
    assert all(a < b for a, b in zip(mem, mem[1:]))


def test_apply_identical_config_is_noop():
    st = init_state(generate_workload(workload(rate=2.0, duration=100)), config(), [GPU], PROFILE)
    for _ in range(20):
        step(st, 1.0)
    before = [id(r) for r in st.replicas]
    apply_config(st, config())
    assert [id(r) for r in st.replicas] == before
    assert all(r.restarting_until is None for r in st.replicas)


def test_added_replica_serves_after_restart_delay():
    st = init_state(generate_workload(workload(rate=4.0, duration=400)), config(), [GPU], PROFILE)
    for _ in range(50):
        step(st, 1.0)
    apply_config(st, config(replicas={"a100": 2}), restart_delay=60)
    new = max(st.replicas, key=lambda r: r.replica_id)
    for _ in range(59):
        step(st, 1.0)
        assert not new.running and not new.pending
    for _ in range(30):
        step(st, 1.0)
    assert st.replica_samples[new.replica_id][-1].n_r > 0


def test_memory_raise_lifts_admission_rate(data_dir):
    sc = load_scenario(data_dir / "fig5.json")
    st = init_state(generate_workload(sc.workload), sc.config, sc.device_map(), sc.profile,
                    seed=sc.workload.rng_seed, optimistic_admission=True)
    for _ in range(960):
        step(st, 1.0)
    dev = sc.devices[0]
    apply_config(st, replace(sc.config, gpu_memory=0.95 * dev.memory_total), restart_delay=60)
    for _ in range(400):
        step(st, 1.0)
    res = result_of(st)
    pre = sustained_admitted_rate(res, 900, 960)
    post = sustained_admitted_rate(res, 1020, 1320)
    assert post >= 1.5 * pre


def test_scenario_file_round_trip(tmp_path, data_dir):
    sc = load_scenario(data_dir / "fig5.json")
    save_scenario(sc, tmp_path / "s.json")
    assert load_scenario(tmp_path / "s.json") == sc


@settings(max_examples=15, deadline=None)
@given(st.floats(0.5, 12.0), st.integers(1, 64), st.integers(0, 1000))
def test_running_never_exceeds_cap(rate, mns, seed):
    res = run(workload(rate=rate, duration=60, seed=seed, out=LengthDist("uniform", 20, 400)),
              config(mns=mns, mem=40e9), [GPU], PROFILE)
    assert max(s.n_r for s in res.samples) <= mns + 1e-9
    assert res.arrived == len(res.completed) + res.in_system
