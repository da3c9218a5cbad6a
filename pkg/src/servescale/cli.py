"""Command-line interface: ``servescale <subcommand> [--seed N] [--out DIR] [--force]``.

Subcommands
-----------
simulate   run a scenario and write core-format traces plus a summary
recommend  turn per-type traces (and an optional request corpus) into a config
detect     train or load a detector, score a test trace, report P/R/F1
autoscale  run a scenario under the closed control loop and write the audit log
sweep      throughput/latency table over a range of arrival rates
plot       render traces, sweeps, max_num_seqs sweeps or request communities

Every run writes ``manifest.json`` next to its outputs.  An output directory
that already holds files is refused unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .core import (METRIC_NAMES, GpuDeviceSpec, MetricSample, MetricWindow, ModelProfile, ServiceConfig,
                   TraceError, read_labeled_trace, read_trace, write_trace)
from .detector import (LabeledDataset, VaeConfig, calibrate_threshold, detect_many,
                       evaluate_point_adjusted, load_detector, save_detector, score_many, synthetic_benchmark,
                       train)
from .orchestrator import (ControlLoopConfig, fit_loop_detector, probe_capacity, run_loop, scenario_inputs,
                           sustained_admitted_rate)
from .recommender import InfeasiblePlacement, recommend_detailed
from .simulator import Scenario, SimResult, device_from_dict, load_scenario
from .taskcluster import EmbeddingError, CommunityModel, HashedNgramEmbedder, corpus_model, read_corpus

log = logging.getLogger("servescale")

BUNDLED = ("fig1", "fig4", "fig5", "fig6", "saturation", "two_gpu", "underload")
REPLICA_FILE = re.compile(r"replica-(\d+)-(.+)\.csv$")


class CliError(Exception):
    pass


# -- inputs ------------------------------------------------------------------


def bundled_path(name: str):
    return resources.files("servescale").joinpath("data", name)


def resolve_scenario(spec: str) -> Scenario:
    """A scenario file path, or the name of a bundled scenario (``fig1`` ...)."""
    p = Path(spec)
    if p.exists():
        source = p
    elif spec in BUNDLED:
        source = bundled_path(f"{spec}.json")
    else:
        raise CliError(f"scenario file not found: {spec} (bundled: {', '.join(BUNDLED)})")
    try:
        with resources.as_file(source) as f:
            return load_scenario(f)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid scenario {spec}: {exc}") from None


def _load_json(path: str, what: str):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(f"{what} file {path} is not valid JSON: {exc}") from None


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file not found: {path}")
    return p


def load_devices(path: str) -> tuple[dict[str, GpuDeviceSpec], ModelProfile, Scenario | None]:
    """Devices file: ``{"devices": [...], "profile": {...}}``; scenario files also qualify.

    Returns the device map, the model profile and the scenario when the file
    is one.
    """
    d = _load_json(path, "devices")
    try:
        devs = {x["gpu_type_id"]: device_from_dict(x) for x in d["devices"]}
        profile = ModelProfile(**{k: float(v) for k, v in d["profile"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid devices file {path}: {exc}") from None
    sc = None
    if "workload" in d:
        try:
            sc = Scenario.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"invalid scenario in devices file {path}: {exc}") from None
    return devs, profile, sc


def load_config(path: str) -> ServiceConfig:
    try:
        return ServiceConfig.from_dict(_load_json(path, "config"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid config file {path}: {exc}") from None


def load_corpus_model(path: str | None) -> CommunityModel | None:
    if path is None:
        return None
    records = read_corpus(_need_file(path, "corpus"))
    if not records:
        return None
    return corpus_model(records, HashedNgramEmbedder())


def read_labels(path: str) -> np.ndarray:
    """One label per line: ``1`` normal, ``-1`` anomalous (the trace label convention)."""
    text = _need_file(path, "labels").read_text(encoding="utf-8")
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            v = int(float(line))
        except ValueError:
            raise CliError(f"{path}:{lineno}: not a label: {line!r}") from None
        if v not in (1, -1):
            raise CliError(f"{path}:{lineno}: label must be 1 or -1, got {v}")
        out.append(v)
    return np.array(out, dtype=int)


def _read_trace(path: str, reader=read_trace):
    p = _need_file(path, "trace")
    try:
        return reader(p)
    except TraceError as exc:
        raise CliError(f"{path}: {exc}") from None


def read_any_trace(path: str) -> tuple[list[MetricSample], np.ndarray | None]:
    """A labeled trace if it has a label column, else a plain one."""
    p = _need_file(path, "trace")
    header = p.read_text(encoding="utf-8").split("\n", 1)[0]
    if header.strip().endswith(",label"):
        samples, labels = _read_trace(path, read_labeled_trace)
        return samples, np.array(labels, dtype=float)
    return _read_trace(path), None


def parse_rates(spec: str) -> list[float]:
    """``"1:12"`` (step 1), ``"1:12:0.5"`` or ``"1,2,4"``."""
    try:
        if ":" in spec:
            parts = [float(x) for x in spec.split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1.0
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        return [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad rate list {spec!r}; use a:b[:step] or a,b,c") from None


# -- outputs -----------------------------------------------------------------


class OutputDir:
    """Collects outputs of one run and refuses to clobber earlier results."""

    def __init__(self, path: str, force: bool):
        self.path = Path(path)
        self.written: list[str] = []
        if self.path.exists() and any(self.path.iterdir()):
            if not force:
                raise CliError(f"output directory {self.path} is not empty; pass --force to overwrite")
            self._remove_previous()
        self.path.mkdir(parents=True, exist_ok=True)

    def _remove_previous(self) -> None:
        manifest = self.path / "manifest.json"
        if not manifest.exists():
            return
        try:
            old = json.loads(manifest.read_text(encoding="utf-8")).get("outputs", [])
        except ValueError:
            return
        for name in old:
            f = self.path / name
            if f.is_file() and f.parent == self.path:
                f.unlink()

    def file(self, name: str) -> Path:
        self.written.append(name)
        return self.path / name

    def text(self, name: str, text: str) -> None:
        self.file(name).write_text(text, encoding="utf-8")

    def json(self, name: str, obj, seed: int) -> None:
        self.text(name, json.dumps({**obj, "seed": seed}, indent=2, sort_keys=True) + "\n")

    def manifest(self, args: argparse.Namespace, inputs: dict, overrides: dict) -> None:
        doc = {
            "subcommand": args.command,
            "inputs": inputs,
            "overrides": overrides,
            "seed": args.seed,
            "out": str(args.out),
            "outputs": sorted(set(self.written)),
            "version": __version__,
        }
        (self.path / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                                 encoding="utf-8")


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(_need_file(path, "table").read_text(encoding="utf-8").splitlines()))
    if not rows:
        raise CliError(f"empty table: {path}")
    return rows[0], rows[1:]


def _savefig(fig, path: Path) -> None:
    # no software/version stamp so repeated runs give identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})


def _seeded(scenario: Scenario, seed: int, rate: float | None = None, duration: float | None = None) -> Scenario:
    w = replace(scenario.workload, rng_seed=seed)
    if rate is not None:
        w = replace(w, arrival_rate=rate, rate_schedule=())
    if duration is not None:
        w = replace(w, duration=duration)
    return replace(scenario, workload=w)


def _write_result(out: OutputDir, res: SimResult) -> None:
    write_trace(res.samples, out.file("trace.csv"))
    for rid in sorted(res.replica_samples):
        write_trace(res.replica_samples[rid], out.file(f"replica-{rid}-{res.replica_types[rid]}.csv"))


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> None:
    sc = resolve_scenario(args.scenario)
    if args.config:
        sc = replace(sc, config=load_config(args.config))
    sc = _seeded(sc, args.seed, args.rate, args.duration)
    out = OutputDir(args.out, args.force)
    res = sc.run()
    _write_result(out, res)
    n_p = res.column("n_p")
    summary = {**res.summary(), "scenario": sc.name, "arrival_rate": sc.workload.arrival_rate,
               "max_n_p": float(n_p.max()) if n_p.size else 0.0,
               "completed_per_s": len(res.completed) / sc.workload.duration}
    out.json("summary.json", summary, args.seed)
    out.text("scenario.json", json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")
    out.manifest(args, {"scenario": args.scenario, "config": args.config},
                 {"rate": args.rate, "duration": args.duration})


def _trace_arguments(specs: Sequence[str], devices: dict) -> dict[str, MetricWindow]:
    windows: dict[str, MetricWindow] = {}
    for spec in specs:
        if "=" in spec:
            g, path = spec.split("=", 1)
        else:
            path = spec
            m = REPLICA_FILE.search(Path(spec).name)
            if m:
                g = m.group(2)
            elif len(devices) == 1:
                g = next(iter(devices))
            else:
                raise CliError(f"cannot tell the GPU type of {spec}; pass TYPE=PATH")
        if g in windows:
            raise CliError(f"more than one trace given for GPU type {g!r}")
        samples = _read_trace(path)
        if not samples:
            raise CliError(f"trace {path} is empty")
        windows[g] = MetricWindow(tuple(samples))
    return windows


def cmd_recommend(args) -> None:
    devices, profile, sc = load_devices(args.devices)
    seq = args.seq_length if args.seq_length is not None else (sc.workload.mean_input_length() if sc else None)
    if args.admission:
        reserve = args.admission == "reserve"
    else:
        reserve = sc is not None and not sc.optimistic_admission
    if not devices or all(d.device_count_N == 0 for d in devices.values()):
        raise InfeasiblePlacement(f"devices file {args.devices} lists no devices", 0.0)
    windows = _trace_arguments(args.trace, devices)
    if args.window:
        windows = {g: MetricWindow(w.samples[-args.window:]) for g, w in windows.items()}
    memory = _trace_arguments(args.memory_trace, devices) if args.memory_trace else None
    history = load_corpus_model(args.corpus)
    current = load_config(args.current) if args.current else None
    rec = recommend_detailed(windows, history, devices, profile, args.demand, current=current,
                             memory_windows=memory, seq_length=seq, best_effort=args.best_effort,
                             reserve_max_tokens=reserve)
    out = OutputDir(args.out, args.force)
    out.json("config.json", rec.config.to_dict(), args.seed)
    detail = {
        "demand": rec.demand,
        "plan": {"replicas": rec.plan.replicas, "weights": rec.plan.weights,
                 "objective": rec.plan.objective, "capacity": rec.plan.capacity},
        "per_type": {g: {"n_limit": d.capacity.n_limit, "t_r_limit": d.capacity.t_r_limit,
                         "saturated": d.capacity.saturated, "memory_slope": d.memory.slope,
                         "memory_intercept": d.memory.intercept, "max_num_seqs": d.max_num_seqs,
                         "gpu_memory": d.gpu_memory, "parallel_size": d.parallel_size, "score": d.score,
                         "memory_bound": d.memory_bound}
                     for g, d in rec.per_type.items()},
        "max_tokens": rec.max_tokens,
        "notes": rec.notes,
    }
    out.json("recommendation.json", detail, args.seed)
    out.text("recommendation.txt", rec.describe() + "\n")
    print(rec.describe())
    out.manifest(args, {"trace": list(args.trace), "memory_trace": list(args.memory_trace),
                        "devices": args.devices, "corpus": args.corpus, "current": args.current},
                 {"demand": args.demand, "seq_length": args.seq_length, "window": args.window,
                  "best_effort": args.best_effort, "admission": args.admission})


def _rows(samples: Sequence[MetricSample]) -> np.ndarray:
    return np.array([s.as_vector() for s in samples], dtype=float).reshape(len(samples), len(METRIC_NAMES))


def _as_samples(rows: np.ndarray) -> list[MetricSample]:
    """Benchmark rows as valid trace samples: counts clipped at 0, utilizations to [0, 1]."""
    r = np.array(rows, dtype=float)
    r[:, :5] = np.maximum(r[:, :5], 0.0)
    r[:, 5:] = np.clip(r[:, 5:], 0.0, 1.0)
    return [MetricSample(float(i + 1), *map(float, row)) for i, row in enumerate(r)]


def _write_synthetic(out: OutputDir, seed: int) -> dict[str, str]:
    b = synthetic_benchmark(seed=seed)
    paths = {"train": "train.csv", "calib": "calib.csv", "test": "test.csv", "labels": "labels.txt",
             "clean": "clean.csv"}
    write_trace(_as_samples(b.train_rows), out.file(paths["train"]), labels=b.train_labels.astype(int).tolist())
    write_trace(_as_samples(b.calib_rows), out.file(paths["calib"]))
    write_trace(_as_samples(b.test_rows), out.file(paths["test"]))
    write_trace(_as_samples(b.clean_rows), out.file(paths["clean"]))
    out.text(paths["labels"], "".join("-1\n" if t else "1\n" for t in b.test_truth))
    return {k: str(out.path / v) for k, v in paths.items()}


def cmd_detect(args) -> None:
    out = OutputDir(args.out, args.force)
    inputs = {"train": args.train, "test": args.test, "labels": args.labels, "calib": args.calib,
              "clean": args.clean, "detector": args.detector}
    if args.synthetic:
        inputs.update(_write_synthetic(out, args.seed))
    for key in ("test", "labels"):
        if not inputs[key]:
            raise CliError(f"--{key} is required (or use --synthetic)")
    test, _ = read_any_trace(inputs["test"])
    truth_labels = read_labels(inputs["labels"])
    if truth_labels.size != len(test):
        raise CliError(f"labels file {inputs['labels']} has {truth_labels.size} entries "
                       f"but test trace {inputs['test']} has {len(test)} samples")
    truth = truth_labels < 0
    if inputs["detector"]:
        det = load_detector(_need_file(inputs["detector"], "detector"))
        det = replace(det, smooth=args.smooth) if args.smooth else det
    else:
        if not inputs["train"]:
            raise CliError("--train or --detector is required")
        train_samples, train_labels = read_any_trace(inputs["train"])
        rows = _rows(train_samples)
        labels = train_labels if train_labels is not None else np.ones(len(rows))
        if inputs["calib"]:
            calib = _rows(read_any_trace(inputs["calib"])[0])
        else:
            # hold out the tail of the training trace; only its normal rows calibrate
            cut = int(len(rows) * 0.75)
            calib = rows[cut:][labels[cut:] > 0]
            rows, labels = rows[:cut], labels[:cut]
        cfg = VaeConfig(epochs=args.epochs, seed=args.seed, log_counts=args.log_counts)
        det = replace(train(LabeledDataset(rows, labels), cfg), smooth=args.smooth or 1)
        det = calibrate_threshold(det, score_many(det, calib), risk_q=args.risk_q)
        save_detector(det, out.file("detector.npz"))
    verdicts = detect_many(det, _rows(test))
    pred = np.array([v.is_anomaly for v in verdicts])
    p, r, f1 = evaluate_point_adjusted(truth, pred)
    report = {"precision": p, "recall": r, "f1": f1, "threshold": det.threshold,
              "test_samples": len(test), "anomalous_samples": int(truth.sum()),
              "flagged_samples": int(pred.sum())}
    if inputs["clean"]:
        clean = _rows(read_any_trace(inputs["clean"])[0])
        report["clean_false_positive_rate"] = float(np.mean([v.is_anomaly for v in detect_many(det, clean)]))
    out.text("verdicts.csv", _csv_text(
        ["ts", "score", "is_anomaly", "direction", "md"],
        [(s.timestamp, v.score, int(v.is_anomaly), v.direction, v.md) for s, v in zip(test, verdicts)]))
    out.json("report.json", report, args.seed)
    print(f"precision={p:.4f} recall={r:.4f} f1={f1:.4f}")
    out.manifest(args, inputs, {"epochs": args.epochs, "smooth": args.smooth, "risk_q": args.risk_q,
                                "log_counts": args.log_counts, "synthetic": args.synthetic})


def _loop_config(path: str | None) -> ControlLoopConfig:
    if not path:
        return ControlLoopConfig()
    d = _load_json(path, "loop config")
    known = {f.name for f in fields(ControlLoopConfig)}
    unknown = sorted(set(d) - known - {"seed"})
    if unknown:
        raise CliError(f"unknown loop settings in {path}: {', '.join(unknown)}")
    try:
        return ControlLoopConfig(**{k: v for k, v in d.items() if k in known})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid loop config {path}: {exc}") from None


def cmd_autoscale(args) -> None:
    sc = _seeded(resolve_scenario(args.scenario), args.seed)
    loop = _loop_config(args.loop)
    out = OutputDir(args.out, args.force)
    if args.detector:
        det = load_detector(_need_file(args.detector, "detector"))
    else:
        r0 = sc.workload.arrival_rate
        rates = parse_rates(args.normal_rates) if args.normal_rates else [0.75 * r0, 0.875 * r0, r0]
        det = fit_loop_detector(sc, rates, config=VaeConfig(epochs=60, log_counts=True, seed=args.seed))
        save_detector(det, out.file("detector.npz"))
    prior = probe_capacity(sc, args.probe_rate) if args.probe_rate else None
    inputs = scenario_inputs(sc, prior, load_corpus_model(args.corpus))
    lr = run_loop(sc, det, loop, inputs)
    lr.audit.write_jsonl(out.file("audit.jsonl"))
    _write_result(out, lr.result)
    changes = [t for t, _, _ in sc.workload.segments()[1:]]
    summary = {
        "actions": len(lr.audit.actions),
        "action_times": [a.timestamp for a in lr.audit.actions],
        "skipped": len(lr.audit.skipped),
        "first_detection_after_change": {repr(t): lr.first_detection_after(t) for t in changes},
        "final_config": (lr.audit.actions[-1].new if lr.audit.actions else sc.config).to_dict(),
        "threshold": det.threshold,
    }
    if lr.audit.actions:
        ta = lr.audit.actions[0].timestamp
        t0 = changes[0] if changes else 0.0
        pre = sustained_admitted_rate(lr.result, t0, ta)
        post = sustained_admitted_rate(lr.result, ta + loop.restart_delay, ta + loop.restart_delay + 300)
        summary.update(pre_action_admitted_rate=pre, post_action_admitted_rate=post)
    out.json("summary.json", summary, args.seed)
    print(f"{len(lr.audit.actions)} action(s); audit log in {out.path / 'audit.jsonl'}")
    out.manifest(args, {"scenario": args.scenario, "loop": args.loop, "detector": args.detector,
                        "corpus": args.corpus},
                 {"normal_rates": args.normal_rates, "probe_rate": args.probe_rate})


def sweep_rates(scenario: Scenario, rates: Sequence[float], seed: int, workers: int = 4,
                duration: float | None = None) -> list[dict]:
    """One stationary run per rate, in worker threads; rows come back in rate order."""

    def one(rate: float) -> dict:
        res = _seeded(scenario, seed, rate, duration).run()
        n_p = res.column("n_p")
        dur = duration or scenario.workload.duration
        return {"rate": rate, "throughput": res.throughput, "latency": res.latency,
                "completed_per_s": len(res.completed) / dur, "mean_n_p": float(n_p.mean()),
                "max_n_p": float(n_p.max()), "mean_m_u": float(res.column("m_u").mean())}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, rates))


SWEEP_COLUMNS = ("rate", "throughput", "latency", "completed_per_s", "mean_n_p", "max_n_p", "mean_m_u")


def cmd_sweep(args) -> None:
    sc = resolve_scenario(args.scenario)
    rates = parse_rates(args.rates)
    out = OutputDir(args.out, args.force)
    rows = sweep_rates(sc, rates, args.seed, args.workers, args.duration)
    out.text("sweep.csv", _csv_text(SWEEP_COLUMNS, [[float(r[c]) for c in SWEEP_COLUMNS] for r in rows]))
    out.json("sweep.json", {"rows": rows, "scenario": sc.name}, args.seed)
    for r in rows:
        print(f"rate={r['rate']:g} throughput={r['throughput']:.1f} latency={r['latency']:.4f}")
    out.manifest(args, {"scenario": args.scenario}, {"rates": args.rates, "duration": args.duration})


def mns_sweep(scenario: Scenario, values: Sequence[int], seed: int) -> list[dict]:
    rows = []
    for m in values:
        sc = _seeded(replace(scenario, config=replace(scenario.config, max_num_seqs=int(m))), seed)
        res = sc.run()
        rows.append({"max_num_seqs": int(m), "finished_per_s": len(res.completed) / sc.workload.duration,
                     "mean_m_u": float(res.column("m_u").mean()), "latency": res.latency})
    return rows


def _pca2(x: np.ndarray) -> np.ndarray:
    c = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    proj = c @ vt[:2].T
    # fix the sign of each axis so the picture does not flip between platforms
    signs = np.sign(proj[np.argmax(np.abs(proj), axis=0), [0, 1]])
    return proj * np.where(signs == 0, 1.0, signs)


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = OutputDir(args.out, args.force)
    overrides: dict = {}
    if args.kind == "trace":
        samples = _read_trace(args.input)
        t = np.array([s.timestamp for s in samples])
        fig, ax = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
        for name in ("n_r", "n_a", "n_p"):
            ax[0].plot(t, [getattr(s, name) for s in samples], label=name, lw=0.8)
        ax[0].legend()
        ax[0].set_ylabel("requests")
        ax[1].plot(t, [s.m_u for s in samples], label="m_u", lw=0.8)
        ax[1].plot(t, [s.g_u for s in samples], label="g_u", lw=0.8)
        ax[1].legend()
        ax[1].set_xlabel("time (s)")
        _savefig(fig, out.file("trace.png"))
    elif args.kind == "sweep":
        header, rows = _read_csv(args.input)
        col = {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}
        fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
        ax[0].plot(col["rate"], col["throughput"], "o-")
        ax[0].set_xlabel("arrival rate (req/s)")
        ax[0].set_ylabel("tokens / GPU / s")
        ax[1].semilogy(col["rate"], col["latency"], "o-")
        ax[1].set_xlabel("arrival rate (req/s)")
        ax[1].set_ylabel("latency (s / token)")
        fig.tight_layout()
        _savefig(fig, out.file("sweep.png"))
    elif args.kind == "mns":
        values = [int(v) for v in parse_rates(args.values)]
        overrides["values"] = args.values
        rows = mns_sweep(resolve_scenario(args.input), values, args.seed)
        cols = ("max_num_seqs", "finished_per_s", "mean_m_u", "latency")
        out.text("mns.csv", _csv_text(cols, [[r[c] for c in cols] for r in rows]))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = [r["max_num_seqs"] for r in rows]
        ax.plot(x, [r["finished_per_s"] for r in rows], "o-", label="finished req/s")
        ax.set_xlabel("max_num_seqs")
        ax.set_ylabel("finished req/s")
        ax2 = ax.twinx()
        ax2.plot(x, [r["mean_m_u"] for r in rows], "s--", color="tab:red", label="memory")
        ax2.set_ylabel("memory fraction")
        fig.tight_layout()
        _savefig(fig, out.file("mns.png"))
    elif args.kind == "communities":
        records = read_corpus(_need_file(args.input, "corpus"))
        if not records:
            raise CliError(f"corpus {args.input} is empty")
        vecs = HashedNgramEmbedder().embed_many([r.text for r in records])
        model = corpus_model(records)
        xy = _pca2(vecs)
        names = [model.communities[k].community_id for k in model.labels]
        out.text("communities.csv", _csv_text(
            ["x", "y", "community", "task", "output_length"],
            [(float(a), float(b), c, r.task or "", r.output_length) for (a, b), c, r in zip(xy, names, records)]))
        fig, ax = plt.subplots(figsize=(6, 5))
        for cid in model.ids:
            m = np.array([n == cid for n in names])
            ax.scatter(xy[m, 0], xy[m, 1], s=8, label=cid)
        ax.legend(fontsize=6, markerscale=2)
        ax.set_title(f"{len(model)} communities, Q={model.modularity:.3f}")
        _savefig(fig, out.file("communities.png"))
    plt.close("all")
    out.manifest(args, {"input": args.input, "kind": args.kind}, overrides)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="overwrite an existing output directory")

    ap = argparse.ArgumentParser(prog="servescale", description="Autoscaling toolkit for LLM serving.")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out")
    ap.add_argument("--force", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run a scenario")
    p.add_argument("scenario", help="scenario file or bundled name (" + ", ".join(BUNDLED) + ")")
    p.add_argument("--rate", type=float, help="constant arrival rate (drops any rate schedule)")
    p.add_argument("--duration", type=float)
    p.add_argument("--config", help="service config JSON to run instead of the scenario's")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recommend", parents=[common], help="recommend a service config")
    p.add_argument("--trace", action="append", required=True, metavar="[TYPE=]PATH",
                   help="per-replica trace of one GPU type; repeat per type")
    p.add_argument("--memory-trace", action="append", default=[], metavar="[TYPE=]PATH",
                   help="trace under varying load for the memory fit (default: --trace)")
    p.add_argument("--devices", required=True, help="devices JSON (a scenario file also works)")
    p.add_argument("--corpus", help="request corpus JSONL for max_tokens")
    p.add_argument("--current", help="currently deployed config JSON")
    p.add_argument("--demand", type=float, help="demand in req/s (default: estimated from traces)")
    p.add_argument("--seq-length", type=float, help="mean input length for the feasibility check")
    p.add_argument("--window", type=int, help="use only the newest N samples of each trace")
    p.add_argument("--best-effort", action="store_true", help="plan at max capacity if demand is out of reach")
    p.add_argument("--admission", choices=("reserve", "optimistic"),
                   help="KV admission policy of the server (default: the scenario's, else optimistic)")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("detect", parents=[common], help="train/score the anomaly detector")
    p.add_argument("--train", help="training trace (optional label column: 1 normal, -1 anomalous)")
    p.add_argument("--test", help="test trace")
    p.add_argument("--labels", help="test labels, one per line (1 normal, -1 anomalous)")
    p.add_argument("--calib", help="normal trace for the threshold (default: tail of --train)")
    p.add_argument("--clean", help="held-out normal trace for a false-positive rate")
    p.add_argument("--detector", help="load this checkpoint instead of training")
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic benchmark as inputs")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--smooth", type=int, default=0, help="trailing mean width (default 1, or the checkpoint's)")
    p.add_argument("--risk-q", type=float, default=1e-3)
    p.add_argument("--log-counts", action="store_true", help="log1p the count and time metrics")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("autoscale", parents=[common], help="closed-loop run of a scenario")
    p.add_argument("scenario")
    p.add_argument("--loop", help="control-loop settings JSON")
    p.add_argument("--detector", help="detector checkpoint (default: train on stationary runs)")
    p.add_argument("--normal-rates", help="rates for detector training (default: 0.75, 0.875, 1 x initial)")
    p.add_argument("--probe-rate", type=float, help="saturating probe rate for a prior capacity estimate")
    p.add_argument("--corpus", help="request corpus JSONL for max_tokens")
    p.set_defaults(func=cmd_autoscale)

    p = sub.add_parser("sweep", parents=[common], help="throughput/latency over arrival rates")
    p.add_argument("scenario")
    p.add_argument("--rates", default="1:12")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", parents=[common], help="render figures from outputs")
    p.add_argument("kind", choices=("trace", "sweep", "mns", "communities"))
    p.add_argument("input", help="trace CSV, sweep CSV, scenario, or corpus JSONL")
    p.add_argument("--values", default="2,4,8,16,24,32,48,64,96,128", help="max_num_seqs values for 'mns'")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, TraceError, InfeasiblePlacement, EmbeddingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
