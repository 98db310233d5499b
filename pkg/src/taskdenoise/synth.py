"""Synthetic labeled datasets, artifact templates and SNR-exact mixing.

Generated datasets come in two layers sharing labels: ``clean`` holds only
the task-related sources, ``raw`` adds ongoing 1/f background activity (the
inherent noise of a recording). Artifacts are mixed into ``raw``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sp_signal

from .errors import ValidationError
from .metrics import rms
from .signal import Trial, TrialSet, make_rng

SSVEP_GRID = tuple(9.25 + 0.5 * i for i in range(12))
BLINK_WIDTH_S = 0.3
ALPHA_SPINDLE_DEPTH = 0.8


class Paradigm(str, enum.Enum):
    SSVEP = "ssvep"
    ERD = "erd"


class NoiseKind(str, enum.Enum):
    NONE = "none"
    EOG = "eog"
    EMG = "emg"


def default_stimulus_freqs(k):
    """``k`` frequencies spread evenly over the 9.25-14.75 Hz grid (endpoints kept)."""
    if k > len(SSVEP_GRID):
        raise ValidationError(f"at most {len(SSVEP_GRID)} default stimulus frequencies")
    idx = np.round(np.linspace(0, len(SSVEP_GRID) - 1, k)).astype(int)
    return tuple(SSVEP_GRID[i] for i in idx)


@dataclass(frozen=True)
class SynthConfig:
    paradigm: Paradigm = Paradigm.SSVEP
    n_channels: int = 8
    n_samples: int = 512
    fs: float = 128.0
    num_classes: int = 2
    trials_per_class: int = 40
    stimulus_freqs: tuple | None = None
    background_pink_noise_amp: float = 1.0
    signal_amp: float = 1.0
    background_modulation: float = 1.0
    background_sources: int | None = None
    sensor_noise_amp: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "paradigm", Paradigm(str(getattr(self.paradigm, "value", self.paradigm)).lower()))
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.n_channels < 1 or self.n_samples < 2 or self.fs <= 0 or self.trials_per_class < 0:
            raise ValidationError("invalid dataset dimensions")
        if self.background_pink_noise_amp < 0 or self.signal_amp < 0 or self.sensor_noise_amp < 0:
            raise ValidationError("amplitudes must be non-negative")
        if self.background_sources is not None and self.background_sources < 1:
            raise ValidationError("background_sources must be >= 1")
        if self.paradigm is Paradigm.SSVEP:
            freqs = self.stimulus_freqs
            if freqs is None:
                freqs = default_stimulus_freqs(self.num_classes)
            freqs = tuple(float(f) for f in freqs)
            if len(freqs) != self.num_classes:
                raise ValidationError(f"need {self.num_classes} stimulus frequencies, got {len(freqs)}")
            if any(f <= 0 or f >= self.fs / 2 for f in freqs):
                raise ValidationError("every stimulus frequency must lie in (0, fs/2)")
            object.__setattr__(self, "stimulus_freqs", freqs)
        else:
            if self.num_classes > 3:
                raise ValidationError("the ERD paradigm supports 2 or 3 classes")
            if self.n_channels < 2:
                raise ValidationError("the ERD paradigm needs at least 2 channels")
            if self.fs <= 24:
                raise ValidationError("the ERD paradigm needs fs > 24 Hz")

    @property
    def n_background_sources(self):
        # leave room for the task sources and one artifact so per-trial ICA is well posed
        if self.background_sources is not None:
            return int(self.background_sources)
        return max(1, self.n_channels - 3)

    def to_dict(self):
        return {
            "paradigm": self.paradigm.value,
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "fs": self.fs,
            "num_classes": self.num_classes,
            "trials_per_class": self.trials_per_class,
            "stimulus_freqs": list(self.stimulus_freqs) if self.stimulus_freqs else None,
            "background_pink_noise_amp": self.background_pink_noise_amp,
            "signal_amp": self.signal_amp,
            "background_modulation": self.background_modulation,
            "background_sources": self.n_background_sources,
            "sensor_noise_amp": self.sensor_noise_amp,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class NoiseSpec:
    """Artifact kind and contamination SNR (fixed dB value or uniform range)."""

    kind: NoiseKind = NoiseKind.EOG
    snr_db: float | tuple = (-5.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(str(getattr(self.kind, "value", self.kind)).lower()))
        s = self.snr_db
        if isinstance(s, (list, tuple)):
            lo, hi = (float(v) for v in s)
            if lo > hi:
                raise ValidationError(f"SNR range lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, "snr_db", (lo, hi))
        else:
            object.__setattr__(self, "snr_db", float(s))

    def draw(self, rng):
        if isinstance(self.snr_db, tuple):
            return float(rng.uniform(*self.snr_db))
        return self.snr_db

    def to_dict(self):
        s = self.snr_db
        return {"kind": self.kind.value, "snr_db": list(s) if isinstance(s, tuple) else s}


def group_size(c):
    return int(math.ceil(c / 3))


def pink_noise(rng, shape, fs):
    """Unit-RMS 1/f noise along the last axis."""
    n = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    f[0] = np.inf
    x = np.fft.irfft(spec / np.sqrt(np.maximum(f, fs / n)), n=n, axis=-1)
    return x / np.maximum(x.std(axis=-1, keepdims=True), 1e-300)


def slow_envelope(rng, shape, fs, cutoff=1.0):
    """Unit-variance Gaussian process band-limited below ``cutoff`` Hz."""
    n = shape[-1]
    slow = rng.standard_normal(shape)
    spec = np.fft.rfft(slow, axis=-1)
    spec[..., np.fft.rfftfreq(n, d=1.0 / fs) > cutoff] = 0.0
    slow = np.fft.irfft(spec, n=n, axis=-1)
    return slow / np.maximum(slow.std(axis=-1, keepdims=True), 1e-300)


def bursty_pink_noise(rng, shape, fs, depth=1.0):
    """1/f noise with a slow log-normal amplitude envelope (super-Gaussian)."""
    x = pink_noise(rng, shape, fs)
    if depth > 0:
        x = x * np.exp(depth * slow_envelope(rng, shape, fs))
    return x / np.maximum(np.sqrt(np.mean(x * x, axis=-1, keepdims=True)), 1e-300)


def bandpass(x, lo, hi, fs, order=4):
    nyq = fs / 2.0
    sos = sp_signal.butter(order, [lo / nyq, min(hi / nyq, 0.999)], btype="bandpass", output="sos")
    return sp_signal.sosfiltfilt(sos, x, axis=-1)


def occipital_gains(c):
    """Smooth spatial profile equal to 1 on the last ceil(C/3) channels."""
    g = group_size(c)
    start = c - g
    idx = np.arange(c)
    dist = np.maximum(start - idx, 0).astype(float)
    width = max(1.0, c / 4.0)
    return 0.1 + 0.9 * np.exp(-((dist / width) ** 2))


def frontal_gains(c):
    """1.0 on the first ceil(C/3) channels, then linear decay to 0.1."""
    g = group_size(c)
    out = np.ones(c)
    rest = c - g
    if rest > 0:
        out[g:] = np.linspace(1.0, 0.1, rest + 1)[1:]
    return out


def _group_pattern(c, members, spread=0.15):
    p = np.full(c, spread)
    p[members] = 1.0
    return p


def _ssvep_trial(cfg, k, rng):
    t = np.arange(cfg.n_samples) / cfg.fs
    f = cfg.stimulus_freqs[k]
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    wave = np.sin(2 * np.pi * f * t + ph1) + 0.4 * np.sin(2 * np.pi * 2 * f * t + ph2)
    return cfg.signal_amp * np.outer(occipital_gains(cfg.n_channels), wave)


def _erd_trial(cfg, k, rng):
    c, n = cfg.n_channels, cfg.n_samples
    g = group_size(c)
    left = np.arange(0, min(g, c))
    right = np.arange(min(g, c), min(2 * g, c))
    if right.size == 0:
        right = np.array([c - 1])
    pad = int(cfg.fs)
    alpha = bandpass(rng.standard_normal((2, n + 2 * pad)), 8.0, 12.0, cfg.fs)[:, pad:-pad]
    # waxing and waning spindles
    alpha *= np.exp(ALPHA_SPINDLE_DEPTH * slow_envelope(rng, (2, n), cfg.fs))
    alpha /= np.sqrt(np.mean(alpha * alpha, axis=-1, keepdims=True))
    env = np.ones((2, n))
    lo, hi = n // 4, (3 * n) // 4
    # class 0 attenuates the right group, class 1 the left group
    if k == 0:
        env[1, lo:hi] = 0.4
    elif k == 1:
        env[0, lo:hi] = 0.4
    sources = alpha * env
    mix = np.stack([_group_pattern(c, left), _group_pattern(c, right)], axis=1)
    return cfg.signal_amp * mix @ sources


def background_mixing(cfg: SynthConfig):
    """Fixed per-dataset spatial mixing ``(C, K_b)`` of the background sources.

    Columns are unit-norm; rows are rescaled so every channel receives unit
    background power on average.
    """
    rng = make_rng(cfg.seed, 0xB6)
    a = rng.standard_normal((cfg.n_channels, cfg.n_background_sources))
    a /= np.linalg.norm(a, axis=0, keepdims=True)
    a /= np.sqrt(np.sum(a * a, axis=1, keepdims=True))
    return a


def gen_dataset(cfg: SynthConfig):
    """Return ``(clean, raw)`` trial sets with identical labels.

    Trial order is class-major; every trial draws from its own generator
    derived from ``(seed, trial index)``.
    """
    labels = np.repeat(np.arange(cfg.num_classes), cfg.trials_per_class)
    n = labels.size
    clean = np.zeros((n, cfg.n_channels, cfg.n_samples))
    raw = np.zeros_like(clean)
    make = _ssvep_trial if cfg.paradigm is Paradigm.SSVEP else _erd_trial
    mixing = background_mixing(cfg)
    for j, k in enumerate(labels):
        rng = make_rng(cfg.seed, 0x5E7, j)
        clean[j] = make(cfg, int(k), rng)
        src = bursty_pink_noise(rng, (mixing.shape[1], cfg.n_samples), cfg.fs, cfg.background_modulation)
        sensor = rng.standard_normal((cfg.n_channels, cfg.n_samples))
        raw[j] = clean[j] + cfg.background_pink_noise_amp * (mixing @ src) + cfg.sensor_noise_amp * sensor
    sid = f"synth-{cfg.paradigm.value}-{cfg.seed}"
    return (
        TrialSet(clean, labels, cfg.fs, cfg.num_classes, sid),
        TrialSet(raw, labels, cfg.fs, cfg.num_classes, sid),
    )


def gen_artifact(kind, n_channels, n_samples, fs, seed) -> Trial:
    """Artifact template of shape ``(C, T)``, unit RMS on its strongest channel."""
    kind = NoiseKind(str(getattr(kind, "value", kind)).lower())
    rng = make_rng(seed, 0xA27)
    c, n = int(n_channels), int(n_samples)
    if kind is NoiseKind.NONE:
        raise ValidationError("no template for noise kind 'none'")
    if kind is NoiseKind.EOG:
        width = int(round(BLINK_WIDTH_S * fs))
        if n < width or width < 2:
            raise ValidationError(f"T={n} samples is too short for a {BLINK_WIDTH_S} s blink at fs={fs}")
        pad = int(2 * fs)
        walk = np.cumsum(rng.standard_normal(n + 2 * pad))
        walk = bandpass(walk, 0.1, 3.0, fs, order=2)[pad:-pad]
        walk /= max(np.sqrt(np.mean(walk * walk)), 1e-300)
        blinks = np.zeros(n)
        pulse = np.sin(np.pi * np.arange(width) / (width - 1))
        for _ in range(int(rng.integers(1, 4))):
            start = int(rng.integers(0, n - width + 1))
            blinks[start : start + width] += rng.uniform(2.0, 4.0) * pulse
        wave = walk + blinks
        gains = frontal_gains(c)
    else:
        if fs <= 90:
            raise ValidationError(f"EMG template needs fs > 90 Hz, got {fs}")
        pad = int(fs)
        burst = bandpass(rng.standard_normal(n + 2 * pad), 20.0, 45.0, fs)[pad:-pad]
        env = np.full(n, 0.05)
        for _ in range(int(rng.integers(2, 6))):
            w = max(4, int(round(rng.uniform(0.2, 0.8) * fs)))
            w = min(w, n)
            start = int(rng.integers(0, n - w + 1))
            env[start : start + w] += np.hanning(w)
        wave = burst * np.minimum(env, 1.0)
        gains = rng.uniform(0.3, 1.0, size=c)
    wave = wave / max(np.sqrt(np.mean(wave * wave)), 1e-300)
    return Trial(np.outer(gains, wave), fs)


def mix_noise(x, n, snr_db):
    """Scale ``n`` so that ``x + lam * n`` sits exactly ``snr_db`` below ``x``.

    Returns ``(noisy, lam)``.
    """
    fs = getattr(x, "fs", 1.0)
    xd = np.asarray(getattr(x, "data", x), dtype=np.float64)
    nd = np.asarray(getattr(n, "data", n), dtype=np.float64)
    if xd.shape != nd.shape:
        raise ValidationError(f"signal shape {xd.shape} differs from noise shape {nd.shape}")
    rx, rn = rms(xd), rms(nd)
    if rx == 0 or rn == 0:
        raise ValidationError("signal and noise must both have non-zero RMS")
    lam = rx / (rn * 10.0 ** (snr_db / 20.0))
    return Trial(xd + lam * nd, fs), float(lam)


@dataclass
class Contamination:
    noisy: TrialSet
    snr_db: np.ndarray
    lam: np.ndarray
    artifacts: np.ndarray = field(repr=False)


def contaminate(ts: TrialSet, spec: NoiseSpec, seed) -> Contamination:
    """Add one freshly drawn artifact per trial at a per-trial SNR."""
    n = len(ts)
    if spec.kind is NoiseKind.NONE:
        return Contamination(ts, np.full(n, np.inf), np.zeros(n), np.zeros_like(ts.data))
    out = np.empty_like(ts.data)
    arts = np.empty_like(ts.data)
    snrs = np.empty(n)
    lams = np.empty(n)
    for j in range(n):
        rng = make_rng(seed, 0xC0, j)
        art = gen_artifact(spec.kind, ts.n_channels, ts.n_samples, ts.fs, int(rng.integers(0, 2**63)))
        snrs[j] = spec.draw(rng)
        noisy, lams[j] = mix_noise(ts[j], art, snrs[j])
        out[j] = noisy.data
        arts[j] = lams[j] * art.data
    return Contamination(ts.with_data(out), snrs, lams, arts)
