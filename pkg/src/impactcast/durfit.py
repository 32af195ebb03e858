"""Accident-duration binning (Doane) and ranking of candidate distributions by SSE."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

log = logging.getLogger(__name__)

CANDIDATES = ("log-normal", "log-logistic", "gamma", "weibull")
QUAD_POINTS = 64
NEWTON_ITERS = 100
NEWTON_TOL = 1e-10


class DurfitError(ValueError):
    pass


def skewness(x) -> float:
    """Sample third-moment skewness g1 = m3 / m2**1.5 (biased moments)."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0:
        raise DurfitError("zero variance")
    return float(np.mean(d ** 3) / m2 ** 1.5)


def sigma_g1(n: int) -> float:
    return math.sqrt(6.0 * (n - 2) / ((n + 1) * (n + 3)))


def doane_k(durations) -> int:
    """Bin count ceil(log2 n + log2(1 + |g1| / sigma_g1))."""
    d = np.asarray(durations, dtype=float)
    n = d.size
    if n < 3:
        raise DurfitError("Doane's rule needs at least 3 observations")
    if np.any(d <= 0):
        raise DurfitError("durations must be positive")
    g1 = skewness(d)
    return max(1, math.ceil(math.log2(n) + math.log2(1.0 + abs(g1) / sigma_g1(n))))


@dataclass
class DoaneBinning:
    K: int
    edges: np.ndarray
    frequencies: np.ndarray
    counts: np.ndarray


def bin_durations(durations, K: int) -> DoaneBinning:
    """Equal-width classes between min and max; the last class is closed."""
    if K < 1:
        raise DurfitError("K must be at least 1")
    d = np.asarray(durations, dtype=float)
    lo, hi = float(d.min()), float(d.max())
    if hi <= lo:
        raise DurfitError("durations have zero range")
    width = (hi - lo) / K
    edges = np.array([lo + i * width for i in range(K)] + [hi])
    idx = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, K - 1)
    counts = np.bincount(idx, minlength=K)
    return DoaneBinning(K, edges, counts / d.size, counts)


# --------------------------------------------------------------------------
# candidate laws
# --------------------------------------------------------------------------

def lognormal_pdf(x, mu, sigma):
    x = np.asarray(x, float)
    return np.exp(-((np.log(x) - mu) ** 2) / (2 * sigma ** 2)) / (x * sigma * math.sqrt(2 * math.pi))


def loglogistic_pdf(x, alpha, beta):
    """Scale ``alpha``, shape ``beta``."""
    x = np.asarray(x, float)
    z = (x / alpha) ** beta
    return (beta / alpha) * (x / alpha) ** (beta - 1) / (1 + z) ** 2


def gamma_pdf(x, k, theta):
    x = np.asarray(x, float)
    return np.exp((k - 1) * np.log(x) - x / theta - special.gammaln(k) - k * math.log(theta))


def weibull_pdf(x, k, lam):
    x = np.asarray(x, float)
    return (k / lam) * (x / lam) ** (k - 1) * np.exp(-((x / lam) ** k))


PDFS = {"log-normal": lognormal_pdf, "log-logistic": loglogistic_pdf, "gamma": gamma_pdf, "weibull": weibull_pdf}


@dataclass
class Fit:
    name: str
    params: dict[str, float]
    converged: bool = True

    def pdf(self, x):
        return PDFS[self.name](x, *self.params.values())


def fit_lognormal(x) -> Fit:
    lx = np.log(x)
    return Fit("log-normal", {"mu": float(lx.mean()), "sigma": float(lx.std())})


def fit_loglogistic(x) -> Fit:
    """Quantile matching on log-durations: median -> log-scale, IQR -> shape."""
    lx = np.log(x)
    q1, med, q3 = np.quantile(lx, [0.25, 0.5, 0.75])
    s = (q3 - q1) / (2 * math.log(3.0))
    return Fit("log-logistic", {"alpha": float(math.exp(med)), "beta": float(1.0 / s)})


def _safeguarded_newton(f, df, lo, hi, x0):
    """Newton iteration that falls back to bisection when it leaves the bracket."""
    x, converged = x0, False
    flo = f(lo)
    for _ in range(NEWTON_ITERS):
        fx = f(x)
        if abs(fx) < NEWTON_TOL:
            converged = True
            break
        if (fx > 0) == (flo > 0):
            lo, flo = x, fx
        else:
            hi = x
        step = fx / df(x)
        nxt = x - step
        if not (lo < nxt < hi) or not np.isfinite(nxt):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) < NEWTON_TOL * max(1.0, abs(x)):
            x, converged = nxt, True
            break
        x = nxt
    return x, converged


def fit_gamma_mle(x) -> Fit:
    """Shape solves log k - digamma(k) = log(mean) - mean(log); scale = mean / k."""
    mean = float(np.mean(x))
    s = math.log(mean) - float(np.mean(np.log(x)))
    f = lambda k: math.log(k) - special.digamma(k) - s  # noqa: E731
    df = lambda k: 1.0 / k - special.polygamma(1, k)  # noqa: E731
    k0 = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
    lo, hi = 1e-8, max(10 * k0, 1e3)
    k, ok = _safeguarded_newton(f, df, lo, hi, k0)
    return Fit("gamma", {"k": float(k), "theta": mean / k}, ok)


def fit_weibull_mle(x) -> Fit:
    """Shape solves 1/k + mean(log x) - sum(x^k log x)/sum(x^k) = 0."""
    lx = np.log(x)
    # rescale for numerical range; the shape is scale-free
    c = float(np.exp(lx.mean()))
    ly = lx - math.log(c)
    mean_ly = float(ly.mean())

    def parts(k):
        yk = np.exp(k * ly)
        s0, s1, s2 = yk.sum(), (yk * ly).sum(), (yk * ly * ly).sum()
        return s0, s1, s2

    def f(k):
        s0, s1, _ = parts(k)
        return 1.0 / k + mean_ly - s1 / s0

    def df(k):
        s0, s1, s2 = parts(k)
        return -1.0 / k ** 2 - (s2 * s0 - s1 * s1) / s0 ** 2

    sd = float(ly.std())
    k0 = 1.2825 / sd if sd > 0 else 1.0
    k, ok = _safeguarded_newton(f, df, 1e-6, max(100 * k0, 1e3), k0)
    lam = c * float(np.mean(np.exp(k * ly))) ** (1.0 / k)
    return Fit("weibull", {"k": float(k), "lam": lam}, ok)


FITTERS = {"log-normal": fit_lognormal, "log-logistic": fit_loglogistic,
           "gamma": fit_gamma_mle, "weibull": fit_weibull_mle}


def bin_mass(fit_or_pdf, edges, points: int = QUAD_POINTS) -> np.ndarray:
    """Probability in each bin by composite midpoint quadrature."""
    pdf = fit_or_pdf.pdf if isinstance(fit_or_pdf, Fit) else fit_or_pdf
    lo, hi = edges[:-1], edges[1:]
    h = (hi - lo) / points
    mids = lo[:, None] + (np.arange(points)[None, :] + 0.5) * h[:, None]
    return pdf(mids).sum(axis=1) * h


def sse(binning: DoaneBinning, fit_or_pdf) -> float:
    return float(np.sum((binning.frequencies - bin_mass(fit_or_pdf, binning.edges)) ** 2))


@dataclass
class CandidateResult:
    name: str
    params: dict[str, float]
    sse: float
    converged: bool = True


@dataclass
class FitReport:
    binning: DoaneBinning
    candidates: list[CandidateResult] = field(default_factory=list)

    @property
    def best(self) -> CandidateResult:
        return self.candidates[0]


def fit_and_rank(durations, candidates=CANDIDATES) -> FitReport:
    """Fit every candidate and sort ascending by SSE against the Doane histogram."""
    d = np.asarray(durations, dtype=float)
    if d.size < 50:
        raise DurfitError("need at least 50 durations")
    if np.any(d <= 0):
        raise DurfitError("durations must be positive")
    binning = bin_durations(d, doane_k(d))
    results = []
    for name in candidates:
        fit = FITTERS[name](d)
        if not fit.converged:
            log.warning("%s fit did not converge", name)
        val = sse(binning, fit)
        if not np.isfinite(val):
            fit.converged = False
            val = float("inf")
        results.append(CandidateResult(name, fit.params, val, fit.converged))
    results.sort(key=lambda r: (r.sse, r.name))
    return FitReport(binning, results)
