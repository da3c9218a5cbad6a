"""Semi-supervised VAE performance-anomaly detector.

A small variational autoencoder is trained on metric vectors with labels
``+1`` (normal or unlabeled) and ``-1`` (known anomaly).  Normal rows are
fitted with the usual evidence lower bound; labeled anomalies push the
reconstruction away instead and carry no KL term.  A sample is scored by the
KL divergence of its approximate posterior from the prior, thresholded by a
peaks-over-threshold fit, and the sign of the mean reconstruction residual
says whether the service is over- or under-loaded.

Everything is plain numpy with hand-written gradients (float64).
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import METRIC_NAMES, MetricSample
from .stats import fit_tail_pot

log = logging.getLogger(__name__)

N_METRICS = len(METRIC_NAMES)
STD_FLOOR = 1e-6
_LOG2PI = math.log(2 * math.pi)


class NotTrained(RuntimeError):
    pass


class NotCalibrated(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# -- data --------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: tuple[int, ...] = ()

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def normalize(rows) -> tuple[np.ndarray, NormStats]:
    """Z-score each column with population statistics; flags constant columns."""
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("normalize needs a 2-D array with at least two rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    const = tuple(int(i) for i in np.nonzero(std < STD_FLOOR)[0])
    if const:
        log.warning("constant metric columns %s; std floored at %g", const, STD_FLOOR)
    std = np.maximum(std, STD_FLOOR)
    stats = NormStats(mean, std, const)
    return stats.apply(x), stats


@dataclass(frozen=True)
class LabeledDataset:
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=float)
        lab = np.asarray(self.labels, dtype=float)
        if r.ndim != 2 or lab.shape != (r.shape[0],):
            raise ValueError("rows must be (n, d) with one label per row")
        if not np.all(np.isin(lab, (-1.0, 1.0))):
            raise ValueError("labels must be +1 or -1")
        object.__setattr__(self, "rows", r)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def from_samples(cls, samples: Sequence[MetricSample], labels: Sequence[int]) -> "LabeledDataset":
        return cls(np.array([s.as_vector() for s in samples]), np.asarray(labels))


# -- network -----------------------------------------------------------------


@dataclass(frozen=True)
class VaeConfig:
    hidden: int = 32
    latent: int = 4
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    anomaly_cap: float = 10.0
    kl_setpoint: float | None = None  # default 0.5 nats per latent dimension
    kp: float = 0.01
    ki: float = 0.001
    beta_max: float = 1.0
    seed: int = 0
    # log1p on the non-negative count and time metrics (n_f .. t_r) before scaling
    log_counts: bool = False

    @property
    def setpoint(self) -> float:
        return 0.5 * self.latent if self.kl_setpoint is None else self.kl_setpoint


PARAM_NAMES = ("W1", "b1", "Wm", "bm", "Wv", "bv", "W3", "b3", "W4", "b4")


COUNT_DIMS = 5


def transform_rows(rows, log_counts: bool) -> np.ndarray:
    x = np.array(rows, dtype=float, ndmin=2)
    if log_counts:
        x[:, :COUNT_DIMS] = np.log1p(np.maximum(x[:, :COUNT_DIMS], 0.0))
    return x


def init_params(d: int, hidden: int, latent: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def glorot(n_in, n_out):
        lim = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_out, n_in))

    return {
        "W1": glorot(d, hidden), "b1": np.zeros(hidden),
        "Wm": glorot(hidden, latent), "bm": np.zeros(latent),
        "Wv": glorot(hidden, latent) * 0.1, "bv": np.zeros(latent),
        "W3": glorot(latent, hidden), "b3": np.zeros(hidden),
        "W4": glorot(hidden, d), "b4": np.zeros(d),
    }


def encode(p, x):
    h = np.tanh(x @ p["W1"].T + p["b1"])
    return h, h @ p["Wm"].T + p["bm"], h @ p["Wv"].T + p["bv"]


def decode(p, z):
    h2 = np.tanh(z @ p["W3"].T + p["b3"])
    return h2, h2 @ p["W4"].T + p["b4"]


def kl_gaussian(mu, logvar) -> np.ndarray:
    """Row-wise KL(N(mu, diag exp(logvar)) || N(0, I))."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)


def loss_and_grads(p, x, labels, beta: float, eps, anomaly_cap: float = 10.0, need_grads: bool = True,
                   parts: dict | None = None):
    """Negative label-weighted ELBO averaged over rows, and its gradients.

    Per row the maximized quantity is ``l * E[log p(x|z)] - beta * (1+l)/2 * KL``.
    For ``l = -1`` the reconstruction term becomes the squared error, capped at
    ``anomaly_cap`` nats, so anomalies cannot drive the decoder to infinity.
    ``eps`` is the standard-normal noise of the reparameterization.  When a
    ``parts`` dict is given it receives the per-row squared error and KL.
    """
    n, d = x.shape
    lab = np.asarray(labels, dtype=float)
    h, mu, lv = encode(p, x)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    h2, xr = decode(p, z)
    r = x - xr
    sq = 0.5 * np.sum(r * r, axis=1)
    kl = kl_gaussian(mu, lv)
    normal = lab > 0
    w_kl = (1.0 + lab) / 2.0
    # per-row loss: normals -log p = sq + c; anomalies -(min(sq, cap) + c)
    c = 0.5 * d * _LOG2PI
    capped = (~normal) & (sq >= anomaly_cap)
    rec = np.where(normal, sq + c, -(np.minimum(sq, anomaly_cap) + c))
    per_row = rec + beta * w_kl * kl
    if parts is not None:
        parts.update(sq=sq, kl=kl, const=c)
    loss = float(per_row.mean())
    if not need_grads:
        return loss, None
    # d loss / d xr per row: normals -r, live anomalies +r, capped anomalies 0
    coef = np.where(normal, 1.0, np.where(capped, 0.0, -1.0)) / n
    g_xr = -r * coef[:, None]
    g = {}
    g["W4"] = g_xr.T @ h2
    g["b4"] = g_xr.sum(axis=0)
    g_a2 = (g_xr @ p["W4"]) * (1.0 - h2 * h2)
    g["W3"] = g_a2.T @ z
    g["b3"] = g_a2.sum(axis=0)
    g_z = g_a2 @ p["W3"]
    wk = (beta * w_kl / n)[:, None]
    g_mu = g_z + wk * mu
    g_lv = g_z * eps * 0.5 * std + wk * 0.5 * (np.exp(lv) - 1.0)
    g["Wm"] = g_mu.T @ h
    g["bm"] = g_mu.sum(axis=0)
    g["Wv"] = g_lv.T @ h
    g["bv"] = g_lv.sum(axis=0)
    g_a1 = (g_mu @ p["Wm"] + g_lv @ p["Wv"]) * (1.0 - h * h)
    g["W1"] = g_a1.T @ x
    g["b1"] = g_a1.sum(axis=0)
    return loss, g


@dataclass
class BetaController:
    """PI controller steering the KL term toward a setpoint (in nats)."""

    setpoint: float
    kp: float = 0.01
    ki: float = 0.001
    beta_max: float = 1.0
    beta: float = 0.0
    integral: float = 0.0

    def update(self, kl: float) -> float:
        err = kl - self.setpoint
        raw = self.kp * err + self.integral + self.ki * err
        # anti-windup: no integration that would push a pinned output further out
        if not ((raw > self.beta_max and err > 0) or (raw < 0 and err < 0)):
            self.integral += self.ki * err
        self.beta = min(max(self.kp * err + self.integral, 0.0), self.beta_max)
        return self.beta


# -- detector ----------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    score: float
    is_anomaly: bool
    direction: str
    md: float


@dataclass(frozen=True)
class VaeDetector:
    params: dict
    stats: NormStats
    config: VaeConfig
    threshold: float | None = None
    # per-step plain ELBO of the normal rows in each training batch
    history: tuple[float, ...] = field(default=(), compare=False)
    smooth: int = 1

    @property
    def trained(self) -> bool:
        return bool(self.params)

    @property
    def latent_dim(self) -> int:
        return self.config.latent

    def prepare(self, rows) -> np.ndarray:
        """Raw metric rows to the network's normalized input space."""
        return self.stats.apply(transform_rows(rows, self.config.log_counts))


def _adam(params, grads, state, lr, t, b1=0.9, b2=0.999, eps=1e-8):
    for k in PARAM_NAMES:
        m, v = state[k]
        m = b1 * m + (1 - b1) * grads[k]
        v = b2 * v + (1 - b2) * grads[k] ** 2
        state[k] = (m, v)
        params[k] = params[k] - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)


def train(dataset: LabeledDataset, config: VaeConfig = VaeConfig()) -> VaeDetector:
    """Fit the detector by minibatch Adam on the label-weighted ELBO."""
    if not np.any(dataset.labels > 0):
        raise ValueError("training needs at least one normal row")
    lab = dataset.labels
    rows = transform_rows(dataset.rows, config.log_counts)
    # scaling comes from normal rows only, so injected extremes cannot stretch it
    _, stats = normalize(rows[lab > 0] if np.sum(lab > 0) >= 2 else rows)
    x = stats.apply(rows)
    rng = np.random.default_rng(config.seed)
    n, d = x.shape
    p = init_params(d, config.hidden, config.latent, rng)
    adam = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in p.items()}
    ctl = BetaController(config.setpoint, config.kp, config.ki, config.beta_max)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            eps = rng.standard_normal((idx.size, config.latent))
            parts: dict = {}
            loss, g = loss_and_grads(p, x[idx], lab[idx], ctl.beta, eps, config.anomaly_cap, parts=parts)
            step += 1
            if not math.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in g.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            _adam(p, g, adam, config.lr, step)
            norm = lab[idx] > 0
            if norm.any():
                kl_n = parts["kl"][norm]
                # plain ELBO of the batch's normal rows, before this step's update
                history.append(-float(np.mean(parts["sq"][norm] + parts["const"] + kl_n)))
                ctl.update(float(kl_n.mean()))
    return VaeDetector(p, stats, config, None, tuple(history))


def normal_elbo(det: VaeDetector, rows, eps) -> float:
    """Mean plain ELBO (beta = 1) of raw rows under the trained model."""
    x = det.prepare(rows)
    loss, _ = loss_and_grads(det.params, x, np.ones(len(x)), 1.0, eps, need_grads=False)
    return -loss


def _require(det: VaeDetector):
    if not det.trained:
        raise NotTrained("detector is not trained")


def smooth_rows(rows, width: int) -> np.ndarray:
    """Trailing mean over ``width`` rows (shorter at the start)."""
    x = np.asarray(rows, dtype=float)
    if width <= 1:
        return x
    c = np.cumsum(np.vstack([np.zeros((1, x.shape[1])), x]), axis=0)
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(i - width, 0)
    return (c[i] - c[lo]) / (i - lo)[:, None]


def score_normalized(det: VaeDetector, x) -> np.ndarray:
    _require(det)
    _, mu, lv = encode(det.params, np.atleast_2d(x))
    return kl_gaussian(mu, lv)


def score_many(det: VaeDetector, rows) -> np.ndarray:
    """KL scores of raw metric rows, with the detector's trailing smoother applied."""
    _require(det)
    return score_normalized(det, det.prepare(smooth_rows(rows, det.smooth)))


def score(det: VaeDetector, m) -> float:
    """KL score of one raw metric vector (no smoothing)."""
    _require(det)
    return float(score_normalized(det, det.prepare(np.atleast_2d(m)))[0])


def calibrate_threshold(det: VaeDetector, calibration_scores, *, initial_quantile: float = 0.98,
                        risk_q: float = 1e-3) -> VaeDetector:
    """Return a copy of ``det`` with a POT threshold fitted on normal scores."""
    _require(det)
    _, z = fit_tail_pot(calibration_scores, initial_quantile, risk_q)
    return replace(det, threshold=float(z))


def mean_difference(det: VaeDetector, x_norm) -> np.ndarray:
    _, mu, _ = encode(det.params, np.atleast_2d(x_norm))
    _, xr = decode(det.params, mu)
    return np.mean(np.atleast_2d(x_norm) - xr, axis=1)


def _verdicts(det: VaeDetector, x_norm) -> list[Verdict]:
    if det.threshold is None:
        raise NotCalibrated("detector has no threshold; call calibrate_threshold first")
    s = score_normalized(det, x_norm)
    md = mean_difference(det, x_norm)
    out = []
    for si, mi in zip(s, md):
        hit = bool(si > det.threshold)
        # a zero residual on an anomaly counts as overload so the loop never shrinks on it
        direction = "none" if not hit else ("underload" if mi < 0 else "overload")
        out.append(Verdict(float(si), hit, direction, float(mi)))
    return out


def detect(det: VaeDetector, m) -> Verdict:
    """Verdict for one raw metric vector (no smoothing)."""
    _require(det)
    return _verdicts(det, det.prepare(np.atleast_2d(m)))[0]


def detect_many(det: VaeDetector, rows) -> list[Verdict]:
    """Verdicts for a sequence of raw rows, using the trailing smoother."""
    _require(det)
    return _verdicts(det, det.prepare(smooth_rows(rows, det.smooth)))


# -- evaluation --------------------------------------------------------------


def segments(truth) -> list[tuple[int, int]]:
    """Contiguous runs of ``True`` as half-open (start, stop) index pairs."""
    t = np.asarray(truth, dtype=bool).astype(int)
    edges = np.diff(np.concatenate([[0], t, [0]]))
    return list(zip(np.nonzero(edges == 1)[0].tolist(), np.nonzero(edges == -1)[0].tolist()))


def point_adjust(truth, pred) -> np.ndarray:
    t = np.asarray(truth, dtype=bool)
    p = np.asarray(pred, dtype=bool).copy()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} labels vs {p.size} predictions")
    for a, b in segments(t):
        if p[a:b].any():
            p[a:b] = True
    return p


def evaluate_point_adjusted(truth, pred) -> tuple[float, float, float]:
    """Precision, recall and F1 after crediting whole detected anomaly segments."""
    t = np.asarray(truth, dtype=bool)
    p = point_adjust(t, pred)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


# -- synthetic benchmark -----------------------------------------------------

# load-carrying metrics shifted by injected anomalies: n_r, n_a, n_p, t_r
LOAD_DIMS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Benchmark:
    train_rows: np.ndarray
    train_labels: np.ndarray  # +1 normal or unlabeled, -1 labeled anomaly
    calib_rows: np.ndarray
    test_rows: np.ndarray
    test_truth: np.ndarray  # True where anomalous
    clean_rows: np.ndarray  # held-out normal-only series


def _correlated_normals(rng, n, scale, mean, chol):
    return mean + (rng.standard_normal((n, N_METRICS)) @ chol.T) * scale


def _inject(rng, rows, rate, shift, seg_len=(10, 30)):
    n = len(rows)
    truth = np.zeros(n, dtype=bool)
    target = int(round(rate * n))
    while truth.sum() < target:
        length = int(rng.integers(seg_len[0], seg_len[1] + 1))
        start = int(rng.integers(0, n - length))
        if truth[max(start - 5, 0) : start + length + 5].any():
            continue
        sign = 1.0 if rng.random() < 0.5 else -1.0
        truth[start : start + length] = True
        rows[start : start + length, list(LOAD_DIMS)] += sign * shift
    return truth


def synthetic_benchmark(seed: int = 0, n_train: int = 20000, n_test: int = 20000, n_calib: int = 20000,
                        contamination: float = 0.01, label_fraction: float = 0.5,
                        shift_sigma: float = 5.0) -> Benchmark:
    """Correlated 7-metric Gaussian series with injected level-shift anomalies.

    Anomalies are contiguous segments (10 to 30 points) where the load
    metrics move by ``shift_sigma`` standard deviations up or down.  In the
    training series ``label_fraction`` of the anomalous segments are labeled
    ``-1``; the rest stay unlabeled (``+1``).
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((N_METRICS, N_METRICS))
    cov = a @ a.T + N_METRICS * np.eye(N_METRICS)
    d = np.sqrt(np.diag(cov))
    chol = np.linalg.cholesky(cov / np.outer(d, d))
    mean = np.array([6.0, 24.0, 6.5, 2.0, 4.0, 0.6, 0.5])
    scale = np.array([0.5, 2.0, 0.5, 0.5, 0.3, 0.03, 0.05])

    def shifted(n):
        rows = _correlated_normals(rng, n, scale, mean, chol)
        truth = _inject(rng, rows, contamination, shift_sigma * scale[list(LOAD_DIMS)])
        return rows, truth

    train_rows, train_truth = shifted(n_train)
    labels = np.ones(n_train)
    for a_, b_ in segments(train_truth):
        if rng.random() < label_fraction:
            labels[a_:b_] = -1.0
    calib = _correlated_normals(rng, n_calib, scale, mean, chol)
    test_rows, test_truth = shifted(n_test)
    clean = _correlated_normals(rng, n_test, scale, mean, chol)
    return Benchmark(train_rows, labels, calib, test_rows, test_truth, clean)


# -- checkpoints -------------------------------------------------------------


def save_detector(det: VaeDetector, path) -> None:
    """Write parameters, normalization stats, threshold and config to ``.npz``."""
    _require(det)
    meta = {
        "config": {k: getattr(det.config, k) for k in det.config.__dataclass_fields__},
        "threshold": det.threshold,
        "smooth": det.smooth,
        "constant": list(det.stats.constant),
    }
    arrays = {
        "mean": det.stats.mean,
        "std": det.stats.std,
        "history": np.asarray(det.history, dtype=float),
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
    }
    arrays.update({f"param_{k}": v for k, v in det.params.items()})
    # np.savez stamps the wall-clock time into each member; fixed dates keep files reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_detector(path) -> VaeDetector:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"detector checkpoint not found: {p}")
    with np.load(p, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        params = {k[len("param_"):]: z[k].copy() for k in z.files if k.startswith("param_")}
        stats = NormStats(z["mean"].copy(), z["std"].copy(), tuple(meta["constant"]))
        history = tuple(float(v) for v in z["history"])
    return VaeDetector(params, stats, VaeConfig(**meta["config"]), meta["threshold"], history, int(meta["smooth"]))
