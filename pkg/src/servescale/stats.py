"""Small statistical kernels: simple OLS, 1-D Gaussian KDE, and POT tail fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special
from scipy import stats as _st

ALPHA = 0.05
BLOCK_SIZE = 60
MIN_BANDWIDTH = 1e-6
MIN_EXCEEDANCES = 10


class DegenerateInput(ValueError):
    pass


class TooFewExceedances(ValueError):
    pass


# -- OLS ---------------------------------------------------------------------


@dataclass(frozen=True)
class OlsFit:
    slope: float
    intercept: float
    slope_stderr: float
    t_statistic: float
    p_value: float
    r_squared: float
    n: int

    def significant(self, alpha: float = ALPHA) -> bool:
        return self.p_value < alpha

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)


def ols_fit(x, y) -> OlsFit:
    """Fit ``y = intercept + slope * x`` and t-test the slope against zero.

    A fit with zero residual variance reports ``p_value = 0``.  With fewer
    than three points the test has no degrees of freedom and ``p_value`` is
    reported as 1 (no evidence of a relationship).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D sequences of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two points")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx <= 1e-12 * max(1.0, float(np.abs(x).max()) ** 2) * n:
        raise DegenerateInput("x has no variation; cannot fit a slope")
    slope = float(dx @ (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    sse = float(resid @ resid)
    syy = float((y - ym) @ (y - ym))
    r2 = 1.0 - sse / syy if syy > 0 else 1.0
    if n < 3:
        return OlsFit(slope, intercept, math.nan, math.nan, 1.0, r2, n)
    df = n - 2
    # residual variance below round-off of y is an exact fit
    if sse <= 1e-24 * max(1.0, syy, float(y @ y)):
        return OlsFit(slope, intercept, 0.0, math.inf if slope != 0 else 0.0, 0.0 if slope != 0 else 1.0, r2, n)
    stderr = math.sqrt(sse / df / sxx)
    t = slope / stderr
    p = float(2.0 * _st.t.sf(abs(t), df))
    return OlsFit(slope, intercept, stderr, t, min(max(p, 0.0), 1.0), r2, n)


# -- KDE ---------------------------------------------------------------------


@dataclass(frozen=True)
class KdeModel:
    support: np.ndarray
    bandwidth: float

    @property
    def n(self) -> int:
        return int(self.support.size)

    def pdf(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        z = (x[:, None] - self.support[None, :]) / self.bandwidth
        return np.exp(-0.5 * z * z).sum(axis=1) / (self.n * self.bandwidth * math.sqrt(2 * math.pi))

    def cdf(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        z = (x[:, None] - self.support[None, :]) / self.bandwidth
        return special.ndtr(z).mean(axis=1)


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        return MIN_BANDWIDTH
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.349
    spread = min(sd, iqr) if iqr > 0 else sd
    return max(0.9 * spread * n ** (-0.2), MIN_BANDWIDTH)


def kde_fit(samples) -> KdeModel:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("kde_fit needs at least one sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    return KdeModel(np.sort(x), silverman_bandwidth(x))


def kde_quantile(model: KdeModel, q: float) -> float:
    """Invert the KDE's CDF numerically."""
    if not (0.0 < q < 1.0):
        raise ValueError("q must lie in (0, 1)")
    h = model.bandwidth
    # Gaussian tails beyond 40 bandwidths are below double precision
    lo = float(model.support[0]) - 40 * h
    hi = float(model.support[-1]) + 40 * h
    return float(optimize.brentq(lambda v: model.cdf(v)[0] - q, lo, hi, xtol=1e-12 * max(1.0, abs(hi)) + 1e-14))


# -- extreme values ----------------------------------------------------------


def block_maxima(samples, block_size: int = BLOCK_SIZE) -> np.ndarray:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    x = np.asarray(samples, dtype=float)
    return np.array([x[i : i + block_size].max() for i in range(0, x.size, block_size)])


@dataclass(frozen=True)
class TailModel:
    threshold_u: float
    shape: float
    scale: float
    exceedances: int
    n: int
    method: str = "mle"


def _gpd_moments(y: np.ndarray) -> tuple[float, float]:
    m, v = float(y.mean()), float(y.var(ddof=1))
    if v <= 0:
        return 0.0, max(m, 1e-12)
    r = m * m / v
    return 0.5 * (1 - r), 0.5 * m * (1 + r)


def _gpd_nll(params, y):
    xi, log_sigma = params
    sigma = math.exp(log_sigma)
    if abs(xi) < 1e-9:
        return y.size * log_sigma + y.sum() / sigma
    arg = 1.0 + xi * y / sigma
    if np.any(arg <= 0):
        return math.inf
    return y.size * log_sigma + (1.0 + 1.0 / xi) * np.log(arg).sum()


def fit_gpd(excesses) -> tuple[float, float, str]:
    """Maximum-likelihood GPD (shape, scale) with a moments fallback."""
    y = np.asarray(excesses, dtype=float)
    xi0, s0 = _gpd_moments(y)
    start = [min(max(xi0, -0.45), 0.9), math.log(max(s0, 1e-12))]
    res = optimize.minimize(_gpd_nll, start, args=(y,), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    if res.success and math.isfinite(res.fun) and res.x[0] > -1.0:
        return float(res.x[0]), float(math.exp(res.x[1])), "mle"
    return xi0, s0, "moments"


def pot_quantile(tail: TailModel, risk_q: float) -> float:
    ratio = risk_q * tail.n / tail.exceedances
    if abs(tail.shape) < 1e-9:
        return tail.threshold_u - tail.scale * math.log(ratio)
    return tail.threshold_u + tail.scale / tail.shape * (ratio ** (-tail.shape) - 1.0)


def fit_tail_pot(scores, initial_quantile: float = 0.98, risk_q: float = 1e-3,
                 min_exceedances: int = MIN_EXCEEDANCES) -> tuple[TailModel, float]:
    """Fit a generalized Pareto tail above an initial threshold.

    Returns the tail model and the score ``z`` with ``P(score > z) ~= risk_q``.

    Raises
    ------
    TooFewExceedances
        If fewer than ``min_exceedances`` scores exceed the initial threshold.
    ValueError
        If ``risk_q`` is not rarer than the exceedance rate, since the
        extrapolated threshold would then fall below the initial one.
    """
    s = np.asarray(scores, dtype=float)
    if not (0.0 < initial_quantile < 1.0) or not (0.0 < risk_q < 1.0):
        raise ValueError("initial_quantile and risk_q must lie in (0, 1)")
    u = float(np.quantile(s, initial_quantile)) if s.size else math.nan
    excess = s[s > u] - u
    if excess.size < min_exceedances:
        raise TooFewExceedances(
            f"only {excess.size} scores exceed the initial threshold; "
            f"need {min_exceedances} (use a larger calibration set)")
    if risk_q >= excess.size / s.size:
        raise ValueError(f"risk_q={risk_q} is not below the exceedance rate {excess.size / s.size:.4g}")
    xi, sigma, how = fit_gpd(excess)
    tail = TailModel(u, xi, sigma, int(excess.size), int(s.size), how)
    return tail, max(pot_quantile(tail, risk_q), u)
