"""Signal containers, seeded RNG helpers and trial-set file I/O.

Binary layout of a trial-set file (all little-endian)::

    bytes 0..7    magic b"TDNSIG01"
    u32 x 5       version (=1), n_trials, C, T, K
    f32           sampling rate in Hz
    per trial     u32 label, then C*T f32 samples, channel-major

The header is 32 bytes; every trial adds ``4 + 4*C*T`` bytes.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, IoError, ValidationError

MAGIC = b"TDNSIG01"
VERSION = 1
_HEADER = struct.Struct("<8s5If")
HEADER_SIZE = _HEADER.size


def make_rng(seed, *keys):
    """Return a numpy Generator derived from ``seed`` and integer ``keys``.

    Distinct key tuples give statistically independent streams, so per-trial
    or per-fold generators never depend on iteration order.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([seed, *map(int, keys)]))


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Trial:
    """One multichannel recording of shape ``(C, T)`` sampled at ``fs`` Hz."""

    data: np.ndarray
    fs: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"trial data must be 2-D (C, T), got shape {data.shape}")
        c, t = data.shape
        if c < 1 or t < 2:
            raise ValidationError(f"trial needs C >= 1 and T >= 2, got C={c}, T={t}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("trial contains non-finite samples")
        fs = float(self.fs)
        if not (np.isfinite(fs) and fs > 0):
            raise ValidationError(f"sampling rate must be positive, got {self.fs}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "fs", fs)

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class TrialSet:
    """Labeled trials sharing one shape and sampling rate.

    ``data`` holds every trial stacked as ``(n_trials, C, T)``.
    """

    data: np.ndarray
    labels: np.ndarray
    fs: float
    num_classes: int
    subject_id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValidationError(f"trial-set data must be 3-D (n, C, T), got {data.shape}")
        n, c, t = data.shape
        if c < 1 or t < 2:
            raise ValidationError(f"trials need C >= 1 and T >= 2, got C={c}, T={t}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("trial set contains non-finite samples")
        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise ValidationError(f"expected {n} labels, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
        k = int(self.num_classes)
        if k < 2:
            raise ValidationError(f"num_classes must be >= 2, got {k}")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValidationError(f"labels must lie in [0, {k})")
        fs = float(self.fs)
        if not (np.isfinite(fs) and fs > 0):
            raise ValidationError(f"sampling rate must be positive, got {self.fs}")
        labels.setflags(write=False)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "fs", fs)
        object.__setattr__(self, "num_classes", k)
        object.__setattr__(self, "subject_id", str(self.subject_id))

    @classmethod
    def from_trials(cls, trials: Sequence[Trial], labels, num_classes, subject_id="", shape=None, fs=None):
        """Build a set from individual :class:`Trial` objects.

        ``shape`` and ``fs`` are only needed for an empty set.
        """
        trials = list(trials)
        if trials:
            fs0 = trials[0].fs
            shape0 = trials[0].data.shape
            for i, tr in enumerate(trials):
                if tr.data.shape != shape0 or tr.fs != fs0:
                    raise ValidationError(f"trial {i} disagrees with trial 0 in shape or fs")
            data = np.stack([tr.data for tr in trials])
        else:
            if shape is None or fs is None:
                raise ValidationError("empty trial set needs explicit shape and fs")
            data = np.zeros((0, *shape))
            fs0 = fs
        return cls(data, np.asarray(labels, dtype=np.int64), fs0, num_classes, subject_id)

    def __len__(self):
        return self.data.shape[0]

    def __iter__(self) -> Iterator[Trial]:
        return iter(self.trials)

    def __getitem__(self, i) -> Trial:
        return Trial(self.data[i], self.fs)

    @property
    def trials(self):
        return [Trial(x, self.fs) for x in self.data]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_samples(self):
        return self.data.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.data[idx], self.labels[idx], self.fs, self.num_classes, self.subject_id)

    def with_data(self, data):
        """Same labels and metadata, new samples."""
        return TrialSet(data, self.labels, self.fs, self.num_classes, self.subject_id)


def save_trialset(ts: TrialSet, path):
    """Write ``ts`` in the binary trial-set format."""
    if not isinstance(ts, TrialSet):
        raise ValidationError("save_trialset expects a TrialSet")
    n, c, t = ts.data.shape
    samples = ts.data.astype("<f4")
    if not np.all(np.isfinite(samples)):
        raise ValidationError("samples overflow float32")
    labels = ts.labels.astype("<u4")
    rec = np.empty(n, dtype=[("label", "<u4"), ("x", "<f4", (c * t,))])
    rec["label"] = labels
    rec["x"] = samples.reshape(n, c * t)
    header = _HEADER.pack(MAGIC, VERSION, n, c, t, ts.num_classes, ts.fs)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_trialset(path) -> TrialSet:
    """Read a file written by :func:`save_trialset`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for header: expected {HEADER_SIZE} bytes, got {len(raw)}")
    magic, version, n, c, t, k, fs = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = HEADER_SIZE + n * (4 + 4 * c * t)
    if len(raw) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=[("label", "<u4"), ("x", "<f4", (c * t,))], count=n, offset=HEADER_SIZE)
    data = rec["x"].astype(np.float64).reshape(n, c, t)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path} contains non-finite samples")
    labels = rec["label"].astype(np.int64)
    if c < 1 or t < 2:
        raise FormatError(f"invalid dimensions C={c}, T={t}")
    return TrialSet(data, labels, float(fs), int(k), subject_id=os.path.basename(str(path)))


def export_csv(ts: TrialSet, directory):
    """One ``trial_NNNN.csv`` per trial (rows = channels) plus ``labels.csv``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(ts.data):
            np.savetxt(directory / f"trial_{i:04d}.csv", x, fmt="%.9g", delimiter=",")
        with open(directory / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label"])
            for i, y in enumerate(ts.labels):
                w.writerow([i, int(y)])
        with open(directory / "meta.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fs", "num_classes", "subject_id"])
            w.writerow([repr(ts.fs), ts.num_classes, ts.subject_id])
    except OSError as exc:
        raise IoError(f"cannot write CSV export to {directory}: {exc}") from exc


def import_csv(directory) -> TrialSet:
    """Inverse of :func:`export_csv`."""
    directory = Path(directory)
    try:
        with open(directory / "labels.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(directory / "meta.csv", newline="") as fh:
            meta = next(csv.DictReader(fh))
        trials = [np.loadtxt(directory / f"trial_{int(r['index']):04d}.csv", delimiter=",", ndmin=2) for r in rows]
    except OSError as exc:
        raise IoError(f"cannot read CSV export from {directory}: {exc}") from exc
    labels = [int(r["label"]) for r in rows]
    data = np.stack(trials) if trials else np.zeros((0, 1, 2))
    return TrialSet(data, labels, float(meta["fs"]), int(meta["num_classes"]), meta["subject_id"])
