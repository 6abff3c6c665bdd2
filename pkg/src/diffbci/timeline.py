"""Trial timing and the continuous record a session plays out.

A recorded dataset holds only the ``baseline + window`` part of each trial.
To filter it the way a live stream would be filtered, trials are laid out
on the session clock (cue, imagery, decode, feedback, rest every
``rest_every`` trials) with silence in between.  Offline preprocessing and
online replay both walk this same layout, which is what makes their
windows bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import dsp
from .synth import Dataset


@dataclass(frozen=True)
class TrialTiming:
    cue_s: float = 2.0
    imagery_s: float = 2.0
    decode_s: float = 2.0
    feedback_s: float = 3.0
    rest_every: int = 20
    rest_s: float = 10.0

    def samples(self, fs: float) -> dict[str, int]:
        return {name: dsp.seconds_to_samples(getattr(self, f"{name}_s"), fs)
                for name in ("cue", "imagery", "decode", "feedback", "rest")}

    def trial_samples(self, fs: float) -> int:
        s = self.samples(fs)
        return s["cue"] + s["imagery"] + s["decode"] + s["feedback"]

    def has_rest_after(self, trial_index: int) -> bool:
        return self.rest_every > 0 and (trial_index + 1) % self.rest_every == 0


@dataclass
class Segment:
    """One trial's stretch of the continuous record (including any rest after it)."""

    trial_index: int
    label: int
    start: int  # absolute sample index of data[:, 0]
    onset: int  # imagery onset
    data: np.ndarray  # (channels, n) float64


def layout(dataset: Dataset, timing: TrialTiming = TrialTiming()) -> Iterator[Segment]:
    fs = dataset.fs
    s = timing.samples(fs)
    base = dataset.baseline_samples
    window = dataset.samples_per_trial - base
    if base > s["cue"]:
        raise ValueError("baseline is longer than the cue phase")
    if window > s["imagery"]:
        raise ValueError("trial window is longer than the imagery phase")
    period = timing.trial_samples(fs)
    start = 0
    for i in range(len(dataset)):
        n = period + (s["rest"] if timing.has_rest_after(i) else 0)
        seg = np.zeros((dataset.channels, n))
        onset_rel = s["cue"]
        seg[:, onset_rel - base: onset_rel + window] = dataset.data[i]
        yield Segment(i, int(dataset.labels[i]), start, start + onset_rel, seg)
        start += n


def preprocess_dataset(dataset: Dataset, timing: TrialTiming = TrialTiming()) -> np.ndarray:
    """Filter the laid-out record continuously and cut one decoder window per trial.

    Returns float64 windows of shape (trials, channels, window samples).
    """
    base = dataset.baseline_samples
    window = dataset.samples_per_trial - base
    chain = dsp.default_chain(dataset.channels, dataset.fs)
    out = np.empty((len(dataset), dataset.channels, window))
    for seg in layout(dataset, timing):
        filtered = dsp.filter_apply(chain, seg.data)
        lo = seg.onset - seg.start - base
        out[seg.trial_index] = dsp.preprocess_epoch(filtered[:, lo: lo + base + window], base)
    return out
