"""Signal-quality, classification, spectral and paired-test metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sp_signal
from scipy import stats

from .errors import ValidationError

SNR_INF = math.inf


def _arr(x):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.size == 0:
        raise ValidationError("empty signal")
    return x


def rms(x):
    """Root mean square over every entry."""
    x = _arr(x)
    return float(np.sqrt(np.mean(x * x)))


def mse(xhat, xref):
    a, b = _arr(xhat), _arr(xref)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def snr_db(xhat, xref):
    """``20 log10(rms(xref) / rms(xhat - xref))``; ``inf`` for a perfect match."""
    a, b = _arr(xhat), _arr(xref)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    ref = rms(b)
    if ref == 0:
        raise ValidationError("reference signal has zero RMS")
    err = rms(a - b)
    if err < 1e-300:
        return SNR_INF
    return float(20.0 * math.log10(ref / err))


@dataclass(frozen=True)
class SignalQuality:
    mse: float
    snr_db: float

    @classmethod
    def of(cls, xhat, xref):
        return cls(mse(xhat, xref), snr_db(xhat, xref))

    def to_dict(self):
        return {"mse": self.mse, "snr_db": None if math.isinf(self.snr_db) else self.snr_db}


@dataclass(frozen=True)
class ClassReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    support: np.ndarray
    undefined_precision: tuple = field(default=())
    undefined_recall: tuple = field(default=())

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
            "support": self.support.tolist(),
            "undefined_precision": list(self.undefined_precision),
            "undefined_recall": list(self.undefined_recall),
        }


def class_report(pred, truth, num_classes) -> ClassReport:
    """Accuracy and macro-averaged precision/recall/F1.

    A class never predicted (or never present) scores 0 for precision (or
    recall) and is listed in ``undefined_precision`` (``undefined_recall``).
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    k = int(num_classes)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise ValidationError("pred and truth must be equal-length non-empty vectors")
    if min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= k:
        raise ValidationError(f"labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    prec = np.divide(tp, predicted, out=np.zeros(k), where=predicted > 0)
    rec = np.divide(tp, support, out=np.zeros(k), where=support > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(k), where=denom > 0)
    return ClassReport(
        accuracy=float(tp.sum() / cm.sum()),
        precision=float(prec.mean()),
        recall=float(rec.mean()),
        f1=float(f1.mean()),
        confusion=cm,
        per_class_precision=prec,
        per_class_recall=rec,
        per_class_f1=f1,
        support=support,
        undefined_precision=tuple(int(j) for j in np.flatnonzero(predicted == 0)),
        undefined_recall=tuple(int(j) for j in np.flatnonzero(support == 0)),
    )


def welch_psd(x, fs, nperseg=256, overlap=0.5):
    """Welch PSD with a Hann window; returns ``(freqs, density)``.

    Segments longer than the signal are shortened to the signal length.
    Multichannel input is handled along the last axis.
    """
    x = _arr(x)
    n = x.shape[-1]
    seg = min(int(nperseg), n)
    freqs, pxx = sp_signal.welch(
        x, fs=fs, window="hann", nperseg=seg, noverlap=int(seg * overlap), detrend="constant", scaling="density", axis=-1
    )
    return freqs, pxx


def _band_sum(freqs, pxx, lo, hi):
    m = (freqs >= lo) & (freqs < hi)
    return pxx[..., m].sum(axis=-1)


def band_power_ratio(x, fs, band_a=(8.0, 12.0), band_b=(12.0, 30.0), window_s=1.0, hop_s=0.125):
    """Sliding-window ratio of band-a to band-b power.

    Each window is a Hann-tapered periodogram; multichannel windows average
    power across channels. Returns ``(window_centres_s, ratios)``.
    """
    x = _arr(x)
    if x.ndim == 1:
        x = x[None]
    win = int(round(window_s * fs))
    hop = max(1, int(round(hop_s * fs)))
    n = x.shape[-1]
    if win > n:
        raise ValidationError(f"window of {win} samples exceeds signal length {n}")
    starts = np.arange(0, n - win + 1, hop)
    segs = np.lib.stride_tricks.sliding_window_view(x, win, axis=-1)[:, starts]
    freqs, pxx = sp_signal.periodogram(segs, fs=fs, window="hann", detrend="constant", axis=-1)
    pxx = pxx.mean(axis=0)
    pa = _band_sum(freqs, pxx, *band_a)
    pb = _band_sum(freqs, pxx, *band_b)
    ratio = pa / np.maximum(pb, 1e-300)
    centres = (starts + win / 2.0) / fs
    return centres, ratio


def fundamental_power_ratio(x, fs, f0, half_width=0.25, span=(5.0, 45.0)):
    """Share of ``span`` power lying within ``f0 +/- half_width``.

    Uses a single Hann segment spanning the whole trial, so the frequency
    resolution is ``fs / T``.
    """
    x = _arr(x)
    freqs, pxx = welch_psd(x, fs, nperseg=x.shape[-1])
    if pxx.ndim > 1:
        pxx = pxx.reshape(-1, pxx.shape[-1]).mean(axis=0)
    inside = (freqs >= span[0]) & (freqs <= span[1])
    total = pxx[inside].sum()
    if total <= 0:
        return 0.0
    near = inside & (np.abs(freqs - f0) <= half_width + 1e-9)
    return float(pxx[near].sum() / total)


# --- Wilcoxon signed-rank --------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str
    w_plus: float = 0.0

    def to_dict(self):
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n_effective": self.n_effective,
            "method": self.method,
            "w_plus": self.w_plus,
        }


EXACT_MAX_N = 25


def exact_signed_rank_counts(doubled_ranks):
    """Number of sign assignments reaching each doubled ``W+`` value.

    ``doubled_ranks`` are twice the (possibly half-integer) ranks, so all
    sums are integers.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b=None, exact_max_n=EXACT_MAX_N):
    """Two-sided paired Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes share average ranks.
    The exact null distribution is used for up to ``exact_max_n`` non-zero
    differences; beyond that a normal approximation with tie and continuity
    corrections.
    """
    d = np.asarray(a, dtype=np.float64)
    if b is not None:
        bb = np.asarray(b, dtype=np.float64)
        if bb.shape != d.shape:
            raise ValidationError("paired samples must have equal length")
        d = d - bb
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValidationError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = exact_signed_rank_counts(doubled)
        total = 2**n
        k = int(round(2 * w_plus))
        lower = int(sum(counts[: k + 1]))
        upper = int(sum(counts[k:]))
        p = min(1.0, 2.0 * min(lower, upper) / total)
        return TestResult(stat, float(p), n, "exact", w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, 2.0 * stats.norm.sf(z))
    return TestResult(stat, float(p), n, "normal_approx", w_plus)
