from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from servescale.core import (InsufficientHistory, MetricSample, MetricWindow, ServiceConfig, TraceError,
                             dumps_trace, read_labeled_trace, read_trace, window, write_trace)
from servescale.simulator import load_scenario


def sample(t, **kw):
    base = dict(n_f=1.0, n_r=2.0, n_a=1.5, n_p=0.0, t_r=3.0, m_u=0.4, g_u=0.5)
    base.update(kw)
    return MetricSample(float(t), **base)


def test_empty_trace_is_empty_file(tmp_path):
    p = tmp_path / "t.csv"
    write_trace([], p)
    assert p.read_text() == ""
    assert read_trace(p) == []


def test_single_sample_round_trip(tmp_path):
    p = tmp_path / "t.csv"
    s = sample(1.25, n_f=0.1 + 0.2)
    write_trace([s], p)
    lines = p.read_text().splitlines()
    assert lines[0] == "ts,n_f,n_r,n_a,n_p,t_r,m_u,g_u"
    assert len(lines) == 2
    assert read_trace(p) == [s]


def test_simulator_trace_byte_stable(tmp_path, data_dir):
    sc = load_scenario(data_dir / "fig1.json").with_rate(6.0)
    res = sc.run()
    first = res.samples[:600]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trace(first, a)
    write_trace(first, b)
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 600 + 1  # header + one line per sample
    assert read_trace(a) == first


def test_out_of_range_utilization_rejected():
    text = "ts,n_f,n_r,n_a,n_p,t_r,m_u,g_u\n1.0,1,1,1,0,1,1.3,0.5\n"
    with pytest.raises(TraceError, match="line 2"):
        read_trace(io.StringIO(text))


def test_shuffled_timestamps_rejected():
    text = dumps_trace([sample(1), sample(2), sample(3)]).splitlines()
    shuffled = "\n".join([text[0], text[2], text[1], text[3]]) + "\n"
    with pytest.raises(TraceError, match="timestamp"):
        read_trace(io.StringIO(shuffled))


def test_malformed_line_names_line_number():
    text = "ts,n_f,n_r,n_a,n_p,t_r,m_u,g_u\n1.0,1,1,1,0,1,0.5,0.5\n2.0,oops,1,1,0,1,0.5,0.5\n"
    with pytest.raises(TraceError, match="line 3"):
        read_trace(io.StringIO(text))


def test_wrong_header_rejected():
    with pytest.raises(TraceError, match="header"):
        read_trace(io.StringIO("t,a\n1,2\n"))


def test_labeled_round_trip(tmp_path):
    p = tmp_path / "l.csv"
    write_trace([sample(1), sample(2)], p, labels=[1, -1])
    samples, labels = read_labeled_trace(p)
    assert labels == [1, -1]
    assert len(samples) == 2


def test_negative_count_invalid():
    with pytest.raises(TraceError):
        sample(0, n_p=-1.0)


def test_window_cases():
    xs = [sample(i) for i in range(10)]
    w1 = window(xs, 1, 4)
    assert w1.samples == (xs[4],)
    assert window(xs, 10, 9).samples == tuple(xs)
    with pytest.raises(InsufficientHistory):
        window(xs[:3], 5)
    assert window(xs, 4) == window(xs, 4)


def test_window_column():
    w = MetricWindow(tuple(sample(i, n_r=float(i)) for i in range(5)))
    assert np.array_equal(w.column("n_r"), np.arange(5.0))
    assert np.array_equal(w.column("ts"), np.arange(5.0))


def test_service_config_round_trip_and_weights():
    cfg = ServiceConfig(parallel_size=1, gpu_memory=7e10, max_num_seqs=24, max_tokens={"*": 414, "code": 956},
                        replicas={"a100": 1, "rtx4090": 1}, weights={"a100": 1.0, "rtx4090": 0.89},
                        per_type={"rtx4090": {"max_num_seqs": 16}})
    assert ServiceConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.for_type("rtx4090")[2] == 16
    assert cfg.for_type("a100")[2] == 24
    assert cfg.max_tokens_for("code") == 956
    assert cfg.max_tokens_for("other") == 414


def test_service_config_weight_max_must_be_one():
    with pytest.raises(ValueError):
        ServiceConfig(parallel_size=1, gpu_memory=1e9, max_num_seqs=4, max_tokens={"*": 10},
                      replicas={"a": 1}, weights={"a": 0.5})


finite = st.floats(0, 1e6, allow_nan=False, allow_infinity=False)
frac = st.floats(0, 1, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, finite, finite, frac, frac), max_size=30),
       st.floats(-1e6, 1e6, allow_nan=False), st.lists(st.floats(0.001, 100), min_size=30, max_size=30))
def test_round_trip_property(rows, t0, gaps):
    t = t0
    samples = []
    for row, g in zip(rows, gaps):
        t += g
        samples.append(MetricSample(t, *row))
    assert read_trace(io.StringIO(dumps_trace(samples))) == samples
