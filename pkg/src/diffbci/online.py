"""Closed-loop session: stream ingestion, trial state machine, decoding, report.

Samples arrive as frames (see ``encode_data`` / ``encode_marker`` for the
wire format), are filtered on ingest and written to a ring buffer.  A cue
marker opens a trial; once the buffer holds the whole imagery window the
trial is decoded and feedback is emitted.  In replay the session clock is
the sample counter, so a replayed file always yields the same report.
"""
from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterator

import numpy as np

from . import dsp
from .diffusion import ModelParams, NoiseSchedule, infer_window, rank_classes
from .synth import CLASS_NAMES, Dataset, SynthConfig, generate_trial, trial_rng
from .timeline import TrialTiming, layout
from .training import class_metrics

log = logging.getLogger(__name__)

PHASES = ("cue", "imagery", "decode", "feedback", "rest")


class WindowEvictedError(LookupError):
    pass


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ring buffer
# ---------------------------------------------------------------------------

class RingBuffer:
    """Circular (channels, capacity) store addressed by absolute sample index."""

    def __init__(self, channels: int, capacity: int):
        if channels < 1 or capacity < 1:
            raise ValueError("channels and capacity must be >= 1")
        self.storage = np.zeros((channels, capacity))
        self.write_index = 0

    @property
    def channels(self) -> int:
        return self.storage.shape[0]

    @property
    def capacity(self) -> int:
        return self.storage.shape[1]

    @property
    def oldest(self) -> int:
        return max(0, self.write_index - self.capacity)

    def push(self, chunk: np.ndarray) -> int:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[0] != self.channels:
            raise ValueError(f"chunk has shape {chunk.shape}, buffer holds {self.channels} channels")
        n = chunk.shape[1]
        keep = chunk[:, -self.capacity:] if n > self.capacity else chunk
        start = (self.write_index + n - keep.shape[1]) % self.capacity
        first = min(keep.shape[1], self.capacity - start)
        self.storage[:, start: start + first] = keep[:, :first]
        self.storage[:, : keep.shape[1] - first] = keep[:, first:]
        self.write_index += n
        return self.write_index

    def read(self, start: int, stop: int) -> np.ndarray:
        """Copy of samples ``[start, stop)``."""
        if stop < start:
            raise ValueError("stop before start")
        if start < self.oldest:
            raise WindowEvictedError(f"window evicted: sample {start} is older than {self.oldest}")
        if stop > self.write_index:
            raise dsp.InsufficientHistoryError(
                f"insufficient buffered data: need up to {stop}, have {self.write_index}")
        idx = np.arange(start, stop) % self.capacity
        return self.storage[:, idx]


def ring_push(buffer: RingBuffer, chunk: np.ndarray) -> int:
    return buffer.push(chunk)


# ---------------------------------------------------------------------------
# wire protocol
# ---------------------------------------------------------------------------

DATA = 0
MARKER = 1
_FRAME = struct.Struct("<BQ")
_DATA_HEAD = struct.Struct("<HH")
_MARKER_BODY = struct.Struct("<B")


@dataclass
class Frame:
    kind: int
    index: int  # absolute sample index of the first sample, or of the cue onset
    data: np.ndarray | None = None
    label: int | None = None


def encode_data(first_index: int, chunk: np.ndarray) -> bytes:
    chunk = np.asarray(chunk)
    c, n = chunk.shape
    return (_FRAME.pack(DATA, first_index) + _DATA_HEAD.pack(c, n)
            + np.ascontiguousarray(chunk, dtype="<f4").tobytes())


def encode_marker(index: int, label: int) -> bytes:
    return _FRAME.pack(MARKER, index) + _MARKER_BODY.pack(label)


def encode_frame(frame: Frame) -> bytes:
    if frame.kind == DATA:
        return encode_data(frame.index, frame.data)
    return encode_marker(frame.index, frame.label)


def _read_exact(stream: BinaryIO, n: int, allow_eof: bool = False) -> bytes | None:
    buf = b""
    while len(buf) < n:
        part = stream.read(n - len(buf))
        if not part:
            if allow_eof and not buf:
                return None
            raise ProtocolError(f"stream ended inside a frame ({len(buf)} of {n} bytes)")
        buf += part
    return buf


def read_frames(stream: BinaryIO) -> Iterator[Frame]:
    """Decode frames until a clean end of stream."""
    while True:
        head = _read_exact(stream, _FRAME.size, allow_eof=True)
        if head is None:
            return
        kind, index = _FRAME.unpack(head)
        if kind == DATA:
            c, n = _DATA_HEAD.unpack(_read_exact(stream, _DATA_HEAD.size))
            body = _read_exact(stream, 4 * c * n)
            data = np.frombuffer(body, dtype="<f4").reshape(c, n).astype(np.float32)
            yield Frame(DATA, index, data=data)
        elif kind == MARKER:
            (label,) = _MARKER_BODY.unpack(_read_exact(stream, 1))
            yield Frame(MARKER, index, label=label)
        else:
            raise ProtocolError(f"unknown frame type {kind}")


class FrameValidator:
    """Data frames must be contiguous from sample 0; marker indices must not go back."""

    def __init__(self, channels: int | None = None):
        self.channels = channels
        self.next_sample = 0
        self.last_marker = -1

    def check(self, frame: Frame) -> None:
        if frame.kind == DATA:
            if frame.index != self.next_sample:
                raise ProtocolError(f"data frame starts at {frame.index}, expected {self.next_sample}")
            if self.channels is not None and frame.data.shape[0] != self.channels:
                raise ProtocolError(f"data frame has {frame.data.shape[0]} channels, expected {self.channels}")
            self.next_sample += frame.data.shape[1]
        elif frame.kind == MARKER:
            if frame.index < self.last_marker:
                raise ProtocolError(f"marker at {frame.index} precedes previous marker {self.last_marker}")
            self.last_marker = frame.index
        else:
            raise ProtocolError(f"unknown frame type {frame.kind}")


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

TIMEOUT = object()  # yielded by live sources when nothing arrived in time


def dataset_frames(dataset: Dataset, timing: TrialTiming = TrialTiming(), chunk: int = 50,
                   n_trials: int | None = None) -> Iterator[Frame]:
    """A recorded dataset laid out on the session clock, as a frame stream."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    for seg in layout(dataset, timing):
        if n_trials is not None and seg.trial_index >= n_trials:
            return
        yield Frame(MARKER, seg.start, label=seg.label)
        for lo in range(0, seg.data.shape[1], chunk):
            block = seg.data[:, lo: lo + chunk].astype(np.float32)
            yield Frame(DATA, seg.start + lo, data=block)


class ReplaySource:
    """Plays a dataset through the session timeline; ``realtime`` paces it at ``fs``."""

    def __init__(self, dataset: Dataset, timing: TrialTiming = TrialTiming(), chunk: int = 50,
                 realtime: bool = False):
        self.dataset = dataset
        self.timing = timing
        self.chunk = chunk
        self.realtime = realtime
        self.fs = dataset.fs
        self.channels = dataset.channels

    def frames(self, n_trials: int | None = None) -> Iterator[Frame]:
        t0 = time.perf_counter()
        for frame in dataset_frames(self.dataset, self.timing, self.chunk, n_trials):
            if self.realtime and frame.kind == DATA:
                delay = frame.index / self.fs - (time.perf_counter() - t0)
                if delay > 0:
                    time.sleep(delay)
            yield frame


def synthetic_dataset(config: SynthConfig, n_trials: int, seed: int) -> Dataset:
    """Cue classes drawn uniformly from ``seed``; trial ``i`` from stream (seed, i)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, config.n_classes, size=n_trials).astype(np.int64)
    data = np.empty((n_trials, config.channels, config.samples_per_trial), dtype=np.float32)
    for i, lab in enumerate(labels):
        data[i] = generate_trial(int(lab), config, trial_rng(seed, i))
    return Dataset(data, labels, config.fs, config.baseline_samples, config.n_classes)


class StreamSource:
    """Frames read from a byte stream (file or socket) on a reader thread.

    The reader thread is the producer; ``frames`` drains its queue and yields
    ``TIMEOUT`` whenever nothing arrived within ``poll_s`` seconds.
    """

    def __init__(self, stream: BinaryIO, fs: float, channels: int, poll_s: float = 2.0,
                 closer: Callable[[], None] | None = None):
        self.fs = fs
        self.channels = channels
        self.poll_s = poll_s
        self._stream = stream
        self._closer = closer
        self._queue: queue.Queue = queue.Queue(maxsize=4096)
        self._done = object()
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def _pump(self) -> None:
        try:
            for frame in read_frames(self._stream):
                self._queue.put(frame)
        except (ProtocolError, OSError) as exc:
            self._queue.put(exc)
        finally:
            self._queue.put(self._done)

    def frames(self, n_trials: int | None = None) -> Iterator[Frame]:
        try:
            while True:
                try:
                    item = self._queue.get(timeout=self.poll_s)
                except queue.Empty:
                    yield TIMEOUT
                    continue
                if item is self._done:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        if self._closer is not None:
            self._closer()
            self._closer = None


def connect_tcp(host: str, port: int, fs: float, channels: int, timeout: float = 5.0,
                poll_s: float = 2.0) -> StreamSource:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectionError(f"source unreachable: {host}:{port} ({exc})") from exc
    sock.settimeout(None)
    f = sock.makefile("rb")

    def closer() -> None:
        f.close()
        sock.close()

    return StreamSource(f, fs, channels, poll_s, closer)


def serve_frames(frames, host: str = "127.0.0.1", port: int = 0) -> tuple[threading.Thread, int]:
    """Send ``frames`` to the first client that connects; returns (thread, bound port)."""
    srv = socket.create_server((host, port))
    bound = srv.getsockname()[1]

    def run() -> None:
        with srv:
            conn, _ = srv.accept()
            with conn:
                for frame in frames:
                    conn.sendall(encode_frame(frame))

    th = threading.Thread(target=run, daemon=True)
    th.start()
    return th, bound


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class Decoder:
    params: ModelParams
    schedule: NoiseSchedule
    fs: float = dsp.DEFAULT_FS
    tau: float = 0.5
    baseline_s: float = dsp.BASELINE_S
    window_s: float = dsp.WINDOW_S

    @property
    def channels(self) -> int:
        return self.params.config.channels_in

    @property
    def n_classes(self) -> int:
        return self.params.config.n_classes


@dataclass
class Prediction:
    probabilities: np.ndarray
    ranked: np.ndarray
    top1: int
    confidence: float
    feedback_intensity: float
    decode_latency_ms: float


def feedback_intensity(probs) -> float:
    """Linear map of the top probability from chance (0) to certainty (1)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2 or np.any(p < -1e-12) or np.any(p > 1 + 1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("feedback_intensity needs a probability vector")
    k = p.size
    return float(min(max((p.max() - 1.0 / k) / (1.0 - 1.0 / k), 0.0), 1.0))


def decode_latest(buffer: RingBuffer, onset_index: int, decoder: Decoder) -> Prediction:
    """Decode the window starting at ``onset_index`` from already-filtered samples."""
    t0 = time.perf_counter()
    pre = dsp.seconds_to_samples(decoder.baseline_s, decoder.fs)
    n = dsp.seconds_to_samples(decoder.window_s, decoder.fs)
    start = onset_index - pre
    if start < 0:
        raise dsp.InsufficientHistoryError("insufficient history before onset")
    block = buffer.read(start, onset_index + n)
    epoch = dsp.epoch_extract(block, onset_index, decoder.baseline_s, decoder.window_s, decoder.fs,
                              buffer_start=start)
    probs = infer_window(dsp.imagery_window(epoch), decoder.params, decoder.schedule, decoder.tau)
    ranked = rank_classes(probs)
    latency = (time.perf_counter() - t0) * 1e3
    return Prediction(probs, ranked, int(ranked[0]), float(probs.max()), feedback_intensity(probs), latency)


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------

@dataclass
class TrialEvent:
    trial_index: int
    phase: str
    onset: int
    duration_s: float
    label: int | None = None  # cued class for cue, decoded class for feedback
    intensity: float | None = None


@dataclass
class SessionConfig:
    n_trials: int = 20
    timing: TrialTiming = field(default_factory=TrialTiming)
    buffer_s: float = 30.0

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise ValueError("a session needs at least one trial")


@dataclass
class TrialRow:
    trial_index: int
    cued: int
    prediction: Prediction | None
    dropped: str = ""  # reason, empty when decoded

    @property
    def correct1(self) -> bool:
        return self.prediction is not None and self.prediction.top1 == self.cued

    @property
    def correct2(self) -> bool:
        return self.prediction is not None and self.cued in self.prediction.ranked[:2]

    @property
    def latency_ms(self) -> float:
        return self.prediction.decode_latency_ms if self.prediction is not None else float("nan")


@dataclass
class SessionReport:
    rows: list[TrialRow]
    n_classes: int
    events: list[TrialEvent] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.aggregates:
            self.aggregates = aggregate(self.rows, self.n_classes)

    def check_consistency(self) -> None:
        """Recompute the aggregates from the rows and compare."""
        fresh = aggregate(self.rows, self.n_classes)
        for key, val in fresh.items():
            if not np.array_equal(np.asarray(val), np.asarray(self.aggregates[key]), equal_nan=True):
                raise AssertionError(f"aggregate {key} disagrees with its rows")
        cm = np.asarray(self.aggregates["confusion"])
        decoded = [r.cued for r in self.rows if r.prediction is not None]
        if not np.array_equal(cm.sum(axis=1), np.bincount(decoded, minlength=self.n_classes)):
            raise AssertionError("confusion row sums differ from decoded cue counts")

    def to_text(self, include_latency: bool = True, class_names=CLASS_NAMES) -> str:
        k = self.n_classes
        head = ("trial,cued,top1,top2," + ",".join(f"p{j}" for j in range(k))
                + ",intensity,correct1,correct2,latency_ms,dropped")
        lines = [head]
        for r in self.rows:
            p = r.prediction
            if p is None:
                cells = ["", ""] + [""] * k + [""]
            else:
                cells = ([str(p.top1), str(int(p.ranked[1]))] + [f"{v:.17g}" for v in p.probabilities]
                         + [f"{p.feedback_intensity:.17g}"])
            lat = f"{r.latency_ms:.3f}" if include_latency and p is not None else ""
            lines.append(",".join([str(r.trial_index), str(r.cued), *cells, str(int(r.correct1)),
                                   str(int(r.correct2)), lat, r.dropped]))
        a = self.aggregates
        lines.append("")
        lines.append("metric,value")
        lines.append(f"trials,{a['trials']}")
        lines.append(f"dropped,{a['dropped']}")
        lines.append(f"top1,{a['top1']:.6f}")
        lines.append(f"top2,{a['top2']:.6f}")
        names = list(class_names[:k]) + [str(j) for j in range(len(class_names), k)]
        for j in range(k):
            lines.append(f"top1[{names[j]}],{a['per_class_top1'][j]:.6f}")
        for j in range(k):
            lines.append(f"confusion[{j}]," + " ".join(str(int(v)) for v in a["confusion"][j]))
        if include_latency:
            lines.append(f"latency_mean_ms,{a['latency_mean_ms']:.3f}")
            lines.append(f"latency_p95_ms,{a['latency_p95_ms']:.3f}")
        return "\n".join(lines) + "\n"


def aggregate(rows: list[TrialRow], n_classes: int) -> dict:
    """Session metrics; dropped trials count as misses, the confusion matrix holds decoded trials only."""
    n = len(rows)
    decoded = [r for r in rows if r.prediction is not None]
    per = np.zeros(n_classes)
    for c in range(n_classes):
        mine = [r for r in rows if r.cued == c]
        per[c] = np.mean([r.correct1 for r in mine]) if mine else 0.0
    if decoded:
        m = class_metrics(np.array([r.prediction.ranked for r in decoded]), [r.cued for r in decoded],
                          n_classes, ks=(1,))
        cm = m.confusion
        lat = np.array([r.latency_ms for r in decoded])
        lat_mean, lat_p95 = float(lat.mean()), float(np.percentile(lat, 95))
    else:
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        lat_mean = lat_p95 = float("nan")
    return {
        "trials": n,
        "dropped": n - len(decoded),
        "top1": float(np.mean([r.correct1 for r in rows])) if rows else 0.0,
        "top2": float(np.mean([r.correct2 for r in rows])) if rows else 0.0,
        "per_class_top1": per,
        "confusion": cm,
        "latency_mean_ms": lat_mean,
        "latency_p95_ms": lat_p95,
    }


def run_session(config: SessionConfig, decoder: Decoder, source,
                sink: Callable[[TrialEvent], None] | None = None) -> SessionReport:
    """Run ``config.n_trials`` cue-imagery-decode-feedback trials off ``source``.

    A trial whose window never fully arrives (stream ended, or a live source
    went quiet for longer than the decode budget) or whose decode overruns
    the budget is recorded as dropped; the session carries on.
    """
    if getattr(source, "fs", decoder.fs) != decoder.fs:
        raise ValueError(f"config mismatch: source runs at {source.fs} Hz, decoder at {decoder.fs} Hz")
    if getattr(source, "channels", decoder.channels) != decoder.channels:
        raise ValueError(f"config mismatch: source has {source.channels} channels, decoder {decoder.channels}")
    timing = config.timing
    fs = decoder.fs
    s = timing.samples(fs)
    n_win = dsp.seconds_to_samples(decoder.window_s, fs)
    if n_win > s["imagery"]:
        raise ValueError("decode window is longer than the imagery phase")
    budget_ms = timing.decode_s * 1e3
    chain = dsp.default_chain(decoder.channels, fs)
    ring = RingBuffer(decoder.channels, dsp.seconds_to_samples(config.buffer_s, fs))
    validator = FrameValidator(decoder.channels)
    events: list[TrialEvent] = []
    rows: list[TrialRow] = []
    pending: list[tuple[int, int, int]] = []  # (trial, cue index, label)
    n_started = 0

    def emit(ev: TrialEvent) -> None:
        events.append(ev)
        if sink is not None:
            sink(ev)

    def finish(trial: int, cue: int, label: int, pred: Prediction | None, reason: str = "") -> None:
        imagery_end = cue + s["cue"] + s["imagery"]
        emit(TrialEvent(trial, "decode", imagery_end, timing.decode_s))
        emit(TrialEvent(trial, "feedback", imagery_end + s["decode"], timing.feedback_s,
                        label=None if pred is None else pred.top1,
                        intensity=None if pred is None else pred.feedback_intensity))
        if timing.has_rest_after(trial):
            emit(TrialEvent(trial, "rest", cue + timing.trial_samples(fs), timing.rest_s))
        rows.append(TrialRow(trial, label, pred, reason))
        if reason:
            log.warning("trial %d dropped: %s", trial, reason)

    for frame in source.frames(config.n_trials):
        if frame is TIMEOUT:
            if pending:
                finish(*pending.pop(0), None, "source underrun")
            continue
        validator.check(frame)
        if frame.kind == MARKER:
            if n_started < config.n_trials:
                if not 0 <= frame.label < decoder.n_classes:
                    raise ProtocolError(f"cue label {frame.label} outside [0, {decoder.n_classes})")
                pending.append((n_started, frame.index, frame.label))
                emit(TrialEvent(n_started, "cue", frame.index, timing.cue_s, label=frame.label))
                emit(TrialEvent(n_started, "imagery", frame.index + s["cue"], timing.imagery_s))
                n_started += 1
        else:
            ring.push(dsp.filter_apply(chain, frame.data.astype(np.float64)))
        while pending and ring.write_index >= pending[0][1] + s["cue"] + n_win:
            trial, cue, label = pending.pop(0)
            try:
                pred = decode_latest(ring, cue + s["cue"], decoder)
            except (WindowEvictedError, dsp.InsufficientHistoryError) as exc:
                finish(trial, cue, label, None, f"window unavailable: {exc}")
                continue
            if pred.decode_latency_ms > budget_ms:
                finish(trial, cue, label, None, f"decode overran {budget_ms:.0f} ms budget")
            else:
                finish(trial, cue, label, pred)
        if len(rows) >= config.n_trials:
            break
    for trial, cue, label in pending:
        finish(trial, cue, label, None, "source underrun")
    return SessionReport(rows, decoder.n_classes, events)


def validate_events(events: list[TrialEvent], timing: TrialTiming, fs: float, n_trials: int | None = None) -> None:
    """Check the event log against the session grammar; raises ``ValueError``.

    Per trial: cue, imagery, decode, feedback with onsets spaced by the phase
    durations, then rest exactly after every ``rest_every``-th trial.
    Trials are numbered from 0 without gaps.
    """
    s = timing.samples(fs)
    i = 0
    trial = 0
    while i < len(events):
        seq = ["cue", "imagery", "decode", "feedback"] + (["rest"] if timing.has_rest_after(trial) else [])
        got = events[i: i + len(seq)]
        if [e.phase for e in got] != seq or any(e.trial_index != trial for e in got):
            raise ValueError(f"trial {trial}: expected phases {seq}, got {[(e.trial_index, e.phase) for e in got]}")
        cue = got[0].onset
        want = [cue, cue + s["cue"], cue + s["cue"] + s["imagery"], cue + s["cue"] + s["imagery"] + s["decode"]]
        if seq[-1] == "rest":
            want.append(cue + timing.trial_samples(fs))
        for e, w in zip(got, want):
            if e.onset != w:
                raise ValueError(f"trial {trial} {e.phase} starts at {e.onset}, expected {w}")
            if e.duration_s != getattr(timing, f"{e.phase}_s"):
                raise ValueError(f"trial {trial} {e.phase} lasts {e.duration_s} s")
        if i and cue < events[i - 1].onset:
            raise ValueError(f"trial {trial} starts before the previous phase")
        i += len(seq)
        trial += 1
    if n_trials is not None and trial != n_trials:
        raise ValueError(f"{trial} trials in the log, expected {n_trials}")


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

@dataclass
class LatencyStats:
    n: int
    cold_ms: float
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float

    def to_text(self) -> str:
        return ("metric,ms\n" + f"cold,{self.cold_ms:.3f}\nmean,{self.mean_ms:.3f}\n"
                f"p50,{self.p50_ms:.3f}\np95,{self.p95_ms:.3f}\nmax,{self.max_ms:.3f}\n")


def latency_benchmark(decoder: Decoder, n: int = 100, seed: int = 0) -> LatencyStats:
    """Time ``decode_latest`` on random buffered windows; the first call is reported apart."""
    if n < 1:
        raise ValueError("latency_benchmark needs n >= 1")
    rng = np.random.default_rng(seed)
    pre = dsp.seconds_to_samples(decoder.baseline_s, decoder.fs)
    win = dsp.seconds_to_samples(decoder.window_s, decoder.fs)
    ring = RingBuffer(decoder.channels, 4 * (pre + win))
    times = []
    for _ in range(n + 1):
        ring.push(rng.standard_normal((decoder.channels, pre + win)))
        pred = decode_latest(ring, ring.write_index - win, decoder)
        times.append(pred.decode_latency_ms)
    warm = np.array(times[1:])
    return LatencyStats(n, times[0], float(warm.mean()), float(np.percentile(warm, 50)),
                        float(np.percentile(warm, 95)), float(warm.max()))
