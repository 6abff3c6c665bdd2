"""Class-conditioned synthetic EEG and the BCIE dataset file.

Each class except rest carries a sinusoidal signature on a block of
channels on top of a pink/white noise background.  Trial ``i`` draws from
its own generator seeded by ``(seed, i)``, so any trial can be
regenerated in isolation.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("Clock", "Toilet", "Water", "Resting state")
REST_CLASS = 3

MAGIC = b"BCIE"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHIII")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Signature:
    freq_hz: float
    ch_lo: int
    ch_hi: int  # exclusive
    amplitude: float = 1.0


DEFAULT_AMPLITUDE = 4.0


def default_signatures(amplitude: float = DEFAULT_AMPLITUDE) -> tuple[tuple[Signature, ...], ...]:
    return (
        (Signature(10.0, 0, 16, amplitude),),
        (Signature(22.0, 16, 32, amplitude),),
        (Signature(35.0, 32, 48, amplitude),),
        (),
    )


@dataclass
class SynthConfig:
    channels: int = 64
    fs: float = 500.0
    baseline_s: float = 0.2
    window_s: float = 2.0
    n_classes: int = 4
    trials_per_class: int = 100
    signatures: tuple[tuple[Signature, ...], ...] = field(default_factory=default_signatures)
    snr: float = 1.0
    pink_fraction: float = 0.5
    noise_scale: float = 1.0
    seed: int = 42

    def __post_init__(self) -> None:
        if len(self.signatures) != self.n_classes:
            raise ValueError("need one signature list per class")
        if self.n_classes > REST_CLASS and self.signatures[REST_CLASS]:
            raise ValueError("the resting class must not carry a signature")
        for sigs in self.signatures:
            for s in sigs:
                if not 0 < s.freq_hz < self.fs / 2:
                    raise ValueError(f"signature frequency {s.freq_hz} Hz outside (0, Nyquist)")
                if not 0 <= s.ch_lo < s.ch_hi <= self.channels:
                    raise ValueError(f"signature channels [{s.ch_lo}, {s.ch_hi}) outside montage")
        if not 0.0 <= self.pink_fraction <= 1.0:
            raise ValueError("pink_fraction must be in [0, 1]")
        if self.noise_scale < 0 or self.snr < 0:
            raise ValueError("noise_scale and snr must be >= 0")
        if self.trials_per_class < 1:
            raise ValueError("trials_per_class must be >= 1")

    @property
    def baseline_samples(self) -> int:
        return int(round(self.baseline_s * self.fs))

    @property
    def samples_per_trial(self) -> int:
        return self.baseline_samples + int(round(self.window_s * self.fs))


@dataclass
class Dataset:
    data: np.ndarray  # (trials, channels, samples) float32
    labels: np.ndarray  # (trials,) int64
    fs: float
    baseline_samples: int
    n_classes: int

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def samples_per_trial(self) -> int:
        return self.data.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.data[idx], self.labels[idx], self.fs, self.baseline_samples, self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def pink_noise(n: int, rng: np.random.Generator, rows: int | None = None) -> np.ndarray:
    """Unit-variance 1/f noise by spectral shaping of white Gaussian noise.

    The white spectrum is scaled by ``1/sqrt(f)`` (power ~ 1/f) with the DC
    bin zeroed, then each row is normalized to unit sample variance.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = (n,) if rows is None else (rows, n)
    white = rng.standard_normal(shape)
    if n < 3:
        return white
    spec = np.fft.rfft(white, axis=-1)
    f = np.arange(spec.shape[-1], dtype=np.float64)
    f[0] = np.inf
    spec *= 1.0 / np.sqrt(f)
    out = np.fft.irfft(spec, n=n, axis=-1)
    out -= out.mean(axis=-1, keepdims=True)
    out /= out.std(axis=-1, keepdims=True)
    return out


def generate_trial(k: int, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """One raw (channels, baseline + window) trial of class ``k``."""
    if not 0 <= k < config.n_classes:
        raise ValueError(f"class {k} outside [0, {config.n_classes})")
    n = config.samples_per_trial
    c = config.channels
    noise = config.noise_scale * (np.sqrt(config.pink_fraction) * pink_noise(n, rng, rows=c)
                                  + np.sqrt(1.0 - config.pink_fraction) * rng.standard_normal((c, n)))
    t = np.arange(n) / config.fs
    for sig in config.signatures[k]:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        noise[sig.ch_lo: sig.ch_hi] += config.snr * sig.amplitude * np.sin(2 * np.pi * sig.freq_hz * t + phase)
    return noise


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(config: SynthConfig, path: str | Path | None = None) -> Dataset:
    k = config.n_classes
    labels = np.repeat(np.arange(k), config.trials_per_class)
    labels = np.random.default_rng(config.seed).permutation(labels).astype(np.int64)
    data = np.empty((labels.size, config.channels, config.samples_per_trial), dtype=np.float32)
    for i, lab in enumerate(labels):
        data[i] = generate_trial(int(lab), config, trial_rng(config.seed, i))
    ds = Dataset(data, labels, config.fs, config.baseline_samples, k)
    if path is not None:
        write_dataset(ds, path)
    return ds


def dataset_bytes(ds: Dataset) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, int(round(ds.fs * 1000)), ds.channels, ds.n_classes,
                          len(ds), ds.samples_per_trial, ds.baseline_samples)
    parts = [header]
    for lab, trial in zip(ds.labels, ds.data):
        parts.append(struct.pack("<B", int(lab)))
        parts.append(np.ascontiguousarray(trial, dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file too short for a BCIE header")
    magic, version, fs_mhz, channels, n_classes, n_trials, samples, baseline = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported BCIE version {version}")
    per_trial = 1 + 4 * channels * samples
    if len(raw) != _HEADER.size + n_trials * per_trial:
        raise DatasetFormatError("payload size does not match header")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n_trials, per_trial)
    labels = body[:, 0].astype(np.int64)
    if np.any(labels >= n_classes):
        raise DatasetFormatError("label outside declared class count")
    data = np.ascontiguousarray(body[:, 1:]).view("<f4").reshape(n_trials, channels, samples)
    return Dataset(data.astype(np.float32), labels, fs_mhz / 1000.0, baseline, n_classes)


def fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# separability oracle
# ---------------------------------------------------------------------------

def bandpower_features(windows: np.ndarray, fs: float, freqs, half_width_hz: float = 1.0) -> np.ndarray:
    """Log band power per channel around each frequency -> (N, C * len(freqs))."""
    n = windows.shape[-1]
    spec = np.abs(np.fft.rfft(windows, axis=-1)) ** 2
    bins = np.fft.rfftfreq(n, 1.0 / fs)
    feats = []
    for f in freqs:
        band = np.abs(bins - f) <= half_width_hz
        feats.append(np.log(spec[..., band].mean(axis=-1) + 1e-12))
    return np.concatenate(feats, axis=-1).reshape(windows.shape[0], -1)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y, n_classes: int) -> float:
    centroids = np.stack([train_x[train_y == k].mean(axis=0) for k in range(n_classes)])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(d, axis=1) == test_y))
