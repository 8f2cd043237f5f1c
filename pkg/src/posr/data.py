"""EEG-like epoch batches: synthesis, binary I/O, downsampling and LOSO splits."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagicError, ConfigError, FileFormatError, TruncatedFileError, UnsupportedVersionError
from .rng import make_rng

EPOCH_MAGIC = b"EEGB"
EPOCH_VERSION = 1
_HEADER = struct.Struct("<4sHIHIf")

# amplitude gain on the channel half a class does not favour
OFF_SIDE_GAIN = 0.25


@dataclass
class EpochBatch:
    """Trials ``data[n_trials, n_channels, n_samples]`` with per-trial labels."""

    data: np.ndarray
    class_labels: np.ndarray
    subject_ids: np.ndarray
    session_ids: np.ndarray
    fs_hz: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.session_ids = np.asarray(self.session_ids, dtype=np.int64)
        self.fs_hz = float(self.fs_hz)
        if self.data.ndim != 3:
            raise ValueError(f"data must be [trials, channels, samples], got shape {self.data.shape}")
        n = self.data.shape[0]
        for name in ("class_labels", "subject_ids", "session_ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if not self.fs_hz > 0:
            raise ValueError(f"fs_hz must be positive, got {self.fs_hz}")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def __len__(self) -> int:
        return self.n_trials

    def subset(self, idx) -> EpochBatch:
        idx = np.asarray(idx, dtype=np.int64)
        return EpochBatch(
            self.data[idx], self.class_labels[idx], self.subject_ids[idx], self.session_ids[idx], self.fs_hz
        )

    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject_ids))

    def equals(self, other: EpochBatch) -> bool:
        """Bit-level equality of all fields."""
        return (
            self.fs_hz == other.fs_hz
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.class_labels, other.class_labels)
            and np.array_equal(self.subject_ids, other.subject_ids)
            and np.array_equal(self.session_ids, other.session_ids)
        )


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthSpec:
    n_subjects: int = 6
    n_classes: int = 2
    n_channels: int = 8
    n_samples: int = 200
    fs_hz: float = 250.0
    trials_per_subject_per_session: int = 100
    n_sessions: int = 4
    class_freq_hz: tuple[float, ...] = (10.0, 22.0)
    class_amp: float = 1.0
    subject_offset_sigma: float = 0.5
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.class_freq_hz = tuple(float(f) for f in self.class_freq_hz)
        if self.n_classes < 2:
            raise ConfigError(f"synth.n_classes must be >= 2, got {self.n_classes}")
        if self.n_sessions < 2:
            raise ConfigError(f"synth.n_sessions must be >= 2 (one is held out for evaluation), got {self.n_sessions}")
        if self.n_subjects < 1 or self.n_channels < 1 or self.n_samples < 1 or self.trials_per_subject_per_session < 1:
            raise ConfigError("synth counts must be positive")
        if len(self.class_freq_hz) != self.n_classes:
            raise ConfigError(f"synth.class_freq_hz needs {self.n_classes} entries, got {len(self.class_freq_hz)}")
        if not self.fs_hz > 0:
            raise ConfigError(f"synth.fs_hz must be positive, got {self.fs_hz}")
        if self.subject_offset_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("synth noise levels must be non-negative")


def class_gains(n_classes: int, n_channels: int) -> np.ndarray:
    """[n_classes, n_channels] lateralised gains: even classes favour the first half of the montage."""
    gains = np.full((n_classes, n_channels), OFF_SIDE_GAIN)
    half = max(1, n_channels // 2)
    for c in range(n_classes):
        if c % 2 == 0:
            gains[c, :half] = 1.0
        else:
            gains[c, half:] = 1.0
    return gains


def generate_synthetic(spec: SynthSpec) -> EpochBatch:
    """Sinusoidal class signals with lateralised gain, per-subject DC offsets and white noise.

    Trials are ordered by subject, then session; classes are balanced within
    each session and shuffled. Samples are rounded to float32 precision so the
    batch survives a round trip through the epoch file unchanged.
    """
    gains = class_gains(spec.n_classes, spec.n_channels)
    t = np.arange(spec.n_samples) / spec.fs_hz
    per = spec.trials_per_subject_per_session
    parts, labels, subjects, sessions = [], [], [], []
    for s in range(spec.n_subjects):
        offset = make_rng(spec.seed, "subject-offset", s).normal(0.0, 1.0, spec.n_channels) * spec.subject_offset_sigma
        for sess in range(spec.n_sessions):
            rng = make_rng(spec.seed, "trials", s, sess)
            y = rng.permutation(np.arange(per) % spec.n_classes)
            phase = rng.uniform(0.0, 2.0 * math.pi, per)
            noise = rng.normal(0.0, 1.0, (per, spec.n_channels, spec.n_samples)) * spec.noise_sigma
            freq = np.asarray(spec.class_freq_hz)[y]
            wave = np.sin(2.0 * math.pi * freq[:, None] * t[None, :] + phase[:, None])
            x = spec.class_amp * gains[y][:, :, None] * wave[:, None, :] + offset[None, :, None] + noise
            parts.append(x)
            labels.append(y)
            subjects.append(np.full(per, s))
            sessions.append(np.full(per, sess))
    data = np.concatenate(parts).astype(np.float32).astype(np.float64)
    return EpochBatch(data, np.concatenate(labels), np.concatenate(subjects), np.concatenate(sessions), spec.fs_hz)


# ---------------------------------------------------------------- epoch files


def _trial_dtype(n_channels: int, n_samples: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("subject", "<u2"), ("session", "<u2"), ("data", "<f4", (n_channels, n_samples))])


def write_epochs(batch: EpochBatch, path) -> None:
    """Write ``batch`` in the little-endian EEGB format (samples stored as float32)."""
    for name in ("class_labels", "subject_ids", "session_ids"):
        v = getattr(batch, name)
        if v.size and (v.min() < 0 or v.max() > 0xFFFF):
            raise ValueError(f"{name} must fit in 16 bits unsigned")
    if batch.n_channels > 0xFFFF:
        raise ValueError("too many channels for the epoch format")
    header = _HEADER.pack(EPOCH_MAGIC, EPOCH_VERSION, batch.n_trials, batch.n_channels, batch.n_samples, batch.fs_hz)
    records = np.empty(batch.n_trials, dtype=_trial_dtype(batch.n_channels, batch.n_samples))
    records["label"] = batch.class_labels
    records["subject"] = batch.subject_ids
    records["session"] = batch.session_ids
    records["data"] = batch.data
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_epochs(path) -> EpochBatch:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is too short for an epoch file")
    if buf[:4] != EPOCH_MAGIC:
        raise BadMagicError(f"{path}: expected magic {EPOCH_MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, n_trials, n_channels, n_samples, fs_hz = _HEADER.unpack_from(buf)
    if version != EPOCH_VERSION:
        raise UnsupportedVersionError(f"{path}: epoch format version {version} is not supported (expected {EPOCH_VERSION})")
    dtype = _trial_dtype(n_channels, n_samples)
    expected = _HEADER.size + n_trials * dtype.itemsize
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: header promises {n_trials} trials ({expected} bytes), file has {len(buf)}")
    if len(buf) > expected:
        raise FileFormatError(f"{path}: {len(buf) - expected} unexpected trailing bytes")
    records = np.frombuffer(buf, dtype=dtype, count=n_trials, offset=_HEADER.size)
    return EpochBatch(
        records["data"].astype(np.float64),
        records["label"].astype(np.int64),
        records["subject"].astype(np.int64),
        records["session"].astype(np.int64),
        float(fs_hz),
    )


def downsample(batch: EpochBatch, factor: int) -> EpochBatch:
    """Boxcar-average ``factor`` consecutive samples, then decimate."""
    if factor < 1 or batch.n_samples % factor:
        raise ValueError(f"downsample factor {factor} must be >= 1 and divide {batch.n_samples} samples")
    if factor == 1:
        return batch.subset(np.arange(batch.n_trials))
    data = batch.data.reshape(batch.n_trials, batch.n_channels, batch.n_samples // factor, factor).mean(axis=-1)
    return EpochBatch(data, batch.class_labels, batch.subject_ids, batch.session_ids, batch.fs_hz / factor)


# ---------------------------------------------------------------- LOSO


@dataclass(frozen=True)
class Fold:
    index: int
    target: int
    sources: tuple[int, ...]
    eval_session: int


@dataclass
class LOSOPlan:
    run_id: str
    subject_pool: tuple[int, ...]
    folds: list[Fold]
    eval_session: int
    train_fraction: float = 0.8
    seed: int = 0


def make_loso_plan(
    subject_pool: Sequence[int],
    eval_session: int,
    seed: int = 0,
    run_id: str = "run0",
    train_fraction: float = 0.8,
) -> LOSOPlan:
    """One fold per pool member, in pool order; the rest of the pool are sources."""
    pool = tuple(int(s) for s in subject_pool)
    if len(pool) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, got {len(pool)}")
    if len(set(pool)) != len(pool):
        dupes = sorted({s for s in pool if pool.count(s) > 1})
        raise ValueError(f"duplicate subjects in pool: {dupes}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    folds = [Fold(i, s, tuple(o for o in pool if o != s), int(eval_session)) for i, s in enumerate(pool)]
    return LOSOPlan(str(run_id), pool, folds, int(eval_session), float(train_fraction), int(seed))


@dataclass
class FoldSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    source_index: dict[int, int] = field(default_factory=dict)


def split_indices(batch: EpochBatch, fold: Fold, train_fraction: float = 0.8, seed: int = 0) -> FoldSplit:
    """Trial indices for train/val (sources, 8:2 per subject and class) and test (target, eval session)."""
    present = set(batch.subjects())
    missing = [s for s in (fold.target, *fold.sources) if s not in present]
    if missing:
        raise ValueError(f"fold {fold.index}: subjects {missing} have no trials in the batch")
    train, val = [], []
    for s in fold.sources:
        for c in np.unique(batch.class_labels[batch.subject_ids == s]):
            idx = np.flatnonzero((batch.subject_ids == s) & (batch.class_labels == c))
            idx = make_rng(seed, "split", s, int(c)).permutation(idx)
            n_train = int(math.floor(train_fraction * idx.size + 0.5))
            train.append(idx[:n_train])
            val.append(idx[n_train:])
    test = np.flatnonzero((batch.subject_ids == fold.target) & (batch.session_ids == fold.eval_session))
    if test.size == 0:
        raise ValueError(f"fold {fold.index}: target subject {fold.target} has no trials in session {fold.eval_session}")
    return FoldSplit(
        np.sort(np.concatenate(train)),
        np.sort(np.concatenate(val)),
        test,
        {s: i for i, s in enumerate(fold.sources)},
    )


def split_train_val(
    batch: EpochBatch, fold: Fold, train_fraction: float = 0.8, seed: int = 0
) -> tuple[EpochBatch, EpochBatch, EpochBatch]:
    s = split_indices(batch, fold, train_fraction, seed)
    return batch.subset(s.train), batch.subset(s.val), batch.subset(s.test)
