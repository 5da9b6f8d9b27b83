"""Chain diagnostics: holdout deviation quantiles, autocorrelation, IACT,
a trace-stationarity heuristic and singular-value summaries.

Quantiles everywhere use linear interpolation between order statistics
(Hyndman-Fan type 7, numpy's default ``method="linear"``).
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

MAD_LEVELS = (0.01, 0.5, 0.99)
ESTIMATORS = ("posterior-mean", "posterior-median", "per-sample")


@dataclass
class PredictionSummary:
    deviations: np.ndarray
    quantiles: np.ndarray
    estimator: str
    levels: tuple = MAD_LEVELS


def mad_quantiles(predictions, holdout_values, estimator="posterior-mean", levels=MAD_LEVELS):
    """Absolute holdout deviations of a posterior-predictive point estimate.

    ``predictions`` has shape ``(n_samples, n_holdout)``.  The estimator is
    the posterior mean (default) or median of the per-sample predictions; with
    ``"per-sample"`` every sample contributes its own deviations.
    """
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    y = np.asarray(holdout_values, dtype=float).ravel()
    if P.shape[0] == 0 or y.size == 0:
        raise ValueError("need at least one kept sample and one holdout entry")
    if P.shape[1] != y.size:
        raise ValueError(f"{P.shape[1]} predictions per sample for {y.size} holdout entries")
    if estimator == "posterior-mean":
        dev = np.abs(P.mean(axis=0) - y)
    elif estimator == "posterior-median":
        dev = np.abs(np.median(P, axis=0) - y)
    elif estimator == "per-sample":
        dev = np.abs(P - y).ravel()
    else:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    return PredictionSummary(dev, np.quantile(dev, levels), estimator, tuple(levels))


def deviation_histogram(deviations, bins=50):
    counts, edges = np.histogram(deviations, bins=bins)
    return counts, edges


@dataclass
class AcfSummary:
    """Autocorrelation of one or more scalar traces.

    ``acf`` has one row per parameter; ``mean_acf``/``std_acf`` average over
    the non-degenerate rows.  ``degenerate`` flags constant traces.
    """

    lags: np.ndarray
    acf: np.ndarray
    iact: np.ndarray
    degenerate: np.ndarray
    mean_acf: np.ndarray
    std_acf: np.ndarray
    mean_iact: float


def _acf_1d(x, max_lag):
    n = len(x)
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    c = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    return c / c[0]


def _iact(rho):
    # initial-positive-sequence truncation: stop at the first negative lag
    neg = np.flatnonzero(rho[1:] < 0)
    stop = neg[0] + 1 if neg.size else len(rho)
    return 1.0 + 2.0 * float(np.sum(rho[1:stop]))


def autocorrelation(series, max_lag=50):
    """Biased autocorrelation estimate and integrated autocorrelation time.

    ``series`` is a 1-D trace or an ``(N, P)`` array of ``P`` traces.
    """
    X = np.asarray(series, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two samples")
    if n < 2 * max_lag:
        warnings.warn(f"series of length {n} is shorter than 2*max_lag; using max_lag={n // 2}")
        max_lag = max(1, n // 2)
    acf = np.full((p, max_lag + 1), np.nan)
    iact = np.full(p, np.nan)
    degenerate = np.zeros(p, dtype=bool)
    for k in range(p):
        x = X[:, k]
        if np.ptp(x) == 0 or not np.all(np.isfinite(x)):
            degenerate[k] = True
            continue
        acf[k] = _acf_1d(x, max_lag)
        iact[k] = _iact(acf[k])
    good = acf[~degenerate]
    if len(good):
        mean_acf, std_acf = good.mean(axis=0), good.std(axis=0)
        mean_iact = float(np.mean(iact[~degenerate]))
    else:
        mean_acf = std_acf = np.full(max_lag + 1, np.nan)
        mean_iact = float("nan")
    return AcfSummary(np.arange(max_lag + 1), acf, iact, degenerate, mean_acf, std_acf, mean_iact)


def stationarity_heuristic(trace, window_fraction=0.25):
    """``"plateau"`` if the means of the last two windows differ by at most one
    pooled standard deviation, else ``"drifting"``.

    With the default fraction the windows are the third and fourth quarters.
    """
    x = np.asarray(trace, dtype=float)
    w = int(len(x) * window_fraction)
    if w < 1:
        raise ValueError("trace too short for the requested window")
    a, b = x[-2 * w:-w], x[-w:]
    pooled = np.sqrt(0.5 * (a.var() + b.var()))
    return "plateau" if abs(b.mean() - a.mean()) <= pooled else "drifting"


def singular_value_summary(samples, levels=(0.1, 0.5, 0.9)):
    """Per-index quantiles of singular values, each sample sorted descending.

    ``samples`` is a sequence of ``s`` vectors or objects with an ``s``
    attribute.  Returns an array of shape ``(len(levels), r)``.
    """
    S = np.array([np.asarray(getattr(x, "s", x), dtype=float) for x in samples])
    if S.ndim != 2 or len(S) == 0:
        raise ValueError("need at least one singular-value vector")
    S = -np.sort(-S, axis=1)
    return np.quantile(S, levels, axis=0)


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_acf_csv(path, summary):
    _write_rows(path, ["lag", "mean_acf", "std_acf"],
                ([int(l), repr(float(m)), repr(float(s))]
                 for l, m, s in zip(summary.lags, summary.mean_acf, summary.std_acf)))


def write_histogram_csv(path, deviations, bins=50):
    counts, edges = deviation_histogram(deviations, bins)
    _write_rows(path, ["bin_left", "bin_right", "count"],
                ([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)] for i, c in enumerate(counts)))


def write_sv_quantiles_csv(path, quantiles, levels=(0.1, 0.5, 0.9)):
    header = ["index"] + [f"q{int(round(100 * q)):02d}" for q in levels]
    _write_rows(path, header,
                ([i + 1] + [repr(float(v)) for v in quantiles[:, i]] for i in range(quantiles.shape[1])))


def write_prediction_csv(path, summary):
    header = [f"{summary.estimator}_q{100 * q:g}" for q in summary.levels] + ["n_deviations"]
    _write_rows(path, header, [[repr(float(q)) for q in summary.quantiles] + [len(summary.deviations)]])
