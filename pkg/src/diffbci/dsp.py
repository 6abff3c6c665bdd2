"""EEG preprocessing: Butterworth low-pass, mains notch, baseline, CAR, epoching.

Filters are realized as cascades of second-order sections evaluated in
direct form II transposed.  A :class:`BiquadCascade` owns its per-channel
delay registers, so feeding a record in arbitrary chunks gives the same
bits as filtering it in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

DEFAULT_FS = 500.0
LOWPASS_ORDER = 5
LOWPASS_CUTOFF_HZ = 120.0
NOTCH_HZ = 60.0
NOTCH_Q = 30.0
BASELINE_S = 0.2
WINDOW_S = 2.0


class InsufficientHistoryError(ValueError):
    """The requested epoch reaches outside the available samples."""


@dataclass
class BiquadCascade:
    """Second-order sections as rows ``(b0, b1, b2, a1, a2)`` with ``a0 == 1``."""

    sos: np.ndarray
    channels: int = 0
    state: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.sos = np.atleast_2d(np.asarray(self.sos, dtype=np.float64))
        if self.sos.shape[1] != 5:
            raise ValueError("sections must have 5 coefficients (b0, b1, b2, a1, a2)")
        self.reset(self.channels)

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def reset(self, channels: int | None = None) -> None:
        if channels is not None:
            self.channels = channels
        self.state = np.zeros((self.n_sections, 2, self.channels))

    def poles(self) -> np.ndarray:
        out = []
        for _, _, _, a1, a2 in self.sos:
            out.extend(np.roots([1.0, a1, a2]) if a2 != 0.0 else ([-a1] if a1 != 0.0 else []))
        return np.asarray(out, dtype=complex)

    def is_stable(self, margin: float = 1e-9) -> bool:
        p = self.poles()
        return bool(np.all(np.abs(p) < 1.0 - margin)) if p.size else True

    def then(self, other: "BiquadCascade") -> "BiquadCascade":
        """Cascade ``self`` followed by ``other``, with fresh state."""
        return BiquadCascade(np.vstack([self.sos, other.sos]), self.channels)

    def copy(self) -> "BiquadCascade":
        c = replace(self, sos=self.sos.copy())
        c.state = self.state.copy()
        return c

    def coefficient_table(self) -> str:
        lines = ["section,b0,b1,b2,a1,a2"]
        for i, row in enumerate(self.sos):
            lines.append(f"{i}," + ",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


def identity_cascade(channels: int = 0) -> BiquadCascade:
    return BiquadCascade(np.array([[1.0, 0.0, 0.0, 0.0, 0.0]]), channels)


def _check_band(freq: float, fs: float, what: str) -> None:
    if not 0.0 < freq < fs / 2.0:
        raise ValueError(f"{what} {freq} Hz must lie in (0, {fs / 2.0}) Hz")


def design_butterworth_lowpass(order: int = LOWPASS_ORDER, cutoff_hz: float = LOWPASS_CUTOFF_HZ,
                               fs: float = DEFAULT_FS) -> BiquadCascade:
    """Digital Butterworth low-pass by bilinear transform with pre-warping.

    Conjugate analog pole pairs become biquads; an odd order leaves one real
    pole, realized as a first-order section with ``b2 = a2 = 0``.  Each
    section is scaled to unit DC gain.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    _check_band(cutoff_hz, fs, "cutoff")
    k = math.tan(math.pi * cutoff_hz / fs)
    k2 = k * k
    rows = []
    for i in range(order // 2):
        # s^2 + a s + 1 for the i-th conjugate pair of the normalized prototype
        a = 2.0 * math.sin(math.pi * (2 * i + 1) / (2 * order))
        d = 1.0 + a * k + k2
        b = np.array([k2, 2.0 * k2, k2]) / d
        a1 = 2.0 * (k2 - 1.0) / d
        a2 = (1.0 - a * k + k2) / d
        rows.append([*b, a1, a2])
    if order % 2:
        d = 1.0 + k
        rows.append([k / d, k / d, 0.0, (k - 1.0) / d, 0.0])
    sos = np.array(rows)
    for row in sos:
        dc = (row[0] + row[1] + row[2]) / (1.0 + row[3] + row[4])
        row[:3] /= dc
    return BiquadCascade(sos)


def design_notch(freq_hz: float = NOTCH_HZ, q: float = NOTCH_Q, fs: float = DEFAULT_FS) -> BiquadCascade:
    """Second-order notch with zeros on the unit circle at ``freq_hz``."""
    _check_band(freq_hz, fs, "notch frequency")
    if q <= 0:
        raise ValueError("q must be positive")
    w0 = 2.0 * math.pi * freq_hz / fs
    alpha = math.sin(w0) / (2.0 * q)
    c = math.cos(w0)
    a0 = 1.0 + alpha
    return BiquadCascade(np.array([[1.0 / a0, -2.0 * c / a0, 1.0 / a0, -2.0 * c / a0, (1.0 - alpha) / a0]]))


def default_chain(channels: int, fs: float = DEFAULT_FS) -> BiquadCascade:
    """Low-pass followed by the mains notch, ready for ``channels`` streams."""
    chain = design_butterworth_lowpass(fs=fs).then(design_notch(fs=fs))
    chain.reset(channels)
    return chain


def frequency_response(cascade: BiquadCascade, f_hz, fs: float = DEFAULT_FS, floor_db: float = -400.0):
    """Magnitude of the cascade in dB at ``f_hz`` (scalar or array)."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0) or np.any(f >= fs / 2.0):
        raise ValueError(f"frequency must lie in [0, {fs / 2.0}) Hz")
    z1 = np.exp(-2j * np.pi * f / fs)  # z^-1
    z2 = z1 * z1
    h = np.ones_like(z1)
    for b0, b1, b2, a1, a2 in cascade.sos:
        h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
    mag = np.maximum(np.abs(h), 10.0 ** (floor_db / 20.0))
    db = 20.0 * np.log10(mag)
    return float(db) if db.ndim == 0 else db


def filter_apply(cascade: BiquadCascade, chunk: np.ndarray) -> np.ndarray:
    """Filter a (channels, n) chunk, carrying the cascade's state forward."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 2:
        raise ValueError("chunk must be (channels, n)")
    if chunk.shape[0] != cascade.channels:
        raise ValueError(f"chunk has {chunk.shape[0]} channels, filter state has {cascade.channels}")
    return kernels.sos_filter(cascade.sos, chunk, cascade.state)


def common_average_reference(frame: np.ndarray) -> np.ndarray:
    frame = np.ascontiguousarray(frame, dtype=np.float64)
    return frame - frame.mean(axis=0, keepdims=True)


@dataclass
class EegEpoch:
    data: np.ndarray  # (channels, samples)
    fs: float = DEFAULT_FS
    label: int | None = None
    onset_index: int = 0
    start_index: int = 0  # absolute index of data[:, 0]

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("epoch data must be (channels, samples)")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    @property
    def pre_samples(self) -> int:
        return self.onset_index - self.start_index


def seconds_to_samples(seconds: float, fs: float) -> int:
    return int(round(seconds * fs))


def baseline_correct(epoch: EegEpoch, baseline_pre_samples: int) -> EegEpoch:
    """Subtract each channel's mean over the samples just before onset."""
    pre = epoch.pre_samples
    if baseline_pre_samples < 1 or pre < baseline_pre_samples:
        raise InsufficientHistoryError(
            f"baseline needs {baseline_pre_samples} pre-onset samples, epoch has {pre}")
    # contiguous copy: reduction order (and so the last bit) depends on memory layout
    data = np.array(epoch.data, dtype=np.float64, order="C")
    base = np.ascontiguousarray(data[:, pre - baseline_pre_samples: pre]).mean(axis=1, keepdims=True)
    return replace(epoch, data=data - base)


def epoch_extract(buffer: np.ndarray, onset_index: int, pre_s: float = BASELINE_S,
                  len_s: float = WINDOW_S, fs: float = DEFAULT_FS, buffer_start: int = 0,
                  label: int | None = None) -> EegEpoch:
    """Cut ``[onset - pre, onset + len)`` from a continuous record and baseline-correct it.

    ``buffer_start`` is the absolute sample index of ``buffer[:, 0]``.
    """
    pre = seconds_to_samples(pre_s, fs)
    n = seconds_to_samples(len_s, fs)
    lo = onset_index - pre - buffer_start
    hi = onset_index + n - buffer_start
    if lo < 0:
        raise InsufficientHistoryError("insufficient history before onset")
    if hi > buffer.shape[1]:
        raise InsufficientHistoryError("insufficient samples after onset")
    ep = EegEpoch(np.array(buffer[:, lo:hi], dtype=np.float64), fs, label, onset_index, onset_index - pre)
    return baseline_correct(ep, pre)


def imagery_window(epoch: EegEpoch) -> np.ndarray:
    """Re-reference a baseline-corrected epoch and return the post-onset part."""
    return common_average_reference(epoch.data[:, epoch.pre_samples:])


def preprocess_epoch(raw: np.ndarray, baseline_samples: int) -> np.ndarray:
    """Baseline + CAR on an already-filtered (channels, baseline + window) block."""
    ep = EegEpoch(raw, onset_index=baseline_samples)
    return imagery_window(baseline_correct(ep, baseline_samples))
