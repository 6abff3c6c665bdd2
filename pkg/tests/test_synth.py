import struct

import numpy as np
import pytest
from scipy import signal

from diffbci import synth


@pytest.fixture(scope="module")
def small():
    return synth.generate_dataset(synth.SynthConfig(trials_per_class=3, seed=7))


def test_config_validation():
    with pytest.raises(ValueError):
        synth.SynthConfig(fs=60.0)  # 35 Hz signature above Nyquist
    with pytest.raises(ValueError):
        synth.SynthConfig(channels=32)  # 35 Hz block sits on channels 32-47
    with pytest.raises(ValueError):
        synth.SynthConfig(trials_per_class=0)
    sigs = list(synth.default_signatures())
    sigs[3] = (synth.Signature(5.0, 0, 2),)
    with pytest.raises(ValueError):
        synth.SynthConfig(signatures=tuple(sigs))


def test_dataset_shape_and_balance(small):
    assert small.data.shape == (12, 64, 1100)
    assert small.data.dtype == np.float32
    assert list(small.class_counts()) == [3, 3, 3, 3]


def test_trial_regenerates_in_isolation(small):
    cfg = synth.SynthConfig(trials_per_class=3, seed=7)
    i = 5
    again = synth.generate_trial(int(small.labels[i]), cfg, synth.trial_rng(7, i)).astype(np.float32)
    assert np.array_equal(again, small.data[i])


def test_signature_periodogram_peak_noise_free():
    cfg = synth.SynthConfig(noise_scale=0.0)
    x = synth.generate_trial(0, cfg, np.random.default_rng(0))
    f, pxx = signal.periodogram(x[0], fs=cfg.fs)
    assert abs(f[np.argmax(pxx)] - 10.0) <= 0.5
    assert np.all(x[16:] == 0)


def test_rest_class_has_no_peaks():
    cfg = synth.SynthConfig()
    rng = np.random.default_rng(1)
    spec = np.mean([np.abs(np.fft.rfft(synth.generate_trial(3, cfg, rng), axis=-1)) ** 2 for _ in range(20)],
                   axis=(0, 1))
    freqs = np.fft.rfftfreq(cfg.samples_per_trial, 1 / cfg.fs)
    for f0 in (10.0, 22.0, 35.0):
        i = int(np.argmin(np.abs(freqs - f0)))
        neighbours = np.r_[spec[i - 6: i - 2], spec[i + 3: i + 7]].mean()
        assert 10 * np.log10(spec[i] / neighbours) < 3.0


def test_pink_noise_unit_variance_and_slope():
    rng = np.random.default_rng(2)
    x = synth.pink_noise(4096, rng, rows=64)
    np.testing.assert_allclose(x.std(axis=1), 1.0, atol=1e-12)
    spec = np.mean(np.abs(np.fft.rfft(x, axis=1)) ** 2, axis=0)
    f = np.arange(spec.size)
    band = (f >= 4) & (f <= 1000)
    slope = np.polyfit(np.log(f[band]), np.log(spec[band]), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.1)


def test_zero_snr_classes_share_distribution():
    cfg = synth.SynthConfig(snr=0.0)
    a = synth.generate_trial(0, cfg, synth.trial_rng(1, 0))
    b = synth.generate_trial(3, cfg, synth.trial_rng(1, 0))
    assert np.array_equal(a, b)


def test_header_layout(small):
    raw = synth.dataset_bytes(small)
    magic, version, fs_mhz, ch, k, n, samples, base = struct.unpack_from("<4sHIHHIII", raw)
    assert (magic, version, fs_mhz, ch, k, n, samples, base) == (b"BCIE", 1, 500_000, 64, 4, 12, 1100, 100)
    assert len(raw) == 26 + 12 * (1 + 4 * 64 * 1100)
    assert raw[26] == small.labels[0]
    first = np.frombuffer(raw, "<f4", count=3, offset=27)
    assert np.array_equal(first, small.data[0, 0, :3])


def test_round_trip(tmp_path, small):
    path = tmp_path / "d.bcie"
    synth.write_dataset(small, path)
    back = synth.read_dataset(path)
    assert np.array_equal(back.data, small.data)
    assert np.array_equal(back.labels, small.labels)
    assert (back.fs, back.baseline_samples, back.n_classes) == (500.0, 100, 4)
    assert synth.dataset_bytes(back) == path.read_bytes()


@pytest.mark.parametrize("patch,match", [((0, b"XXXX"), "magic"), ((4, b"\x02\x00"), "version")])
def test_reader_rejects_bad_header(tmp_path, small, patch, match):
    raw = bytearray(synth.dataset_bytes(small))
    off, val = patch
    raw[off: off + len(val)] = val
    path = tmp_path / "bad.bcie"
    path.write_bytes(bytes(raw))
    with pytest.raises(synth.DatasetFormatError, match=match):
        synth.read_dataset(path)


def test_reader_rejects_truncation(tmp_path, small):
    path = tmp_path / "cut.bcie"
    path.write_bytes(synth.dataset_bytes(small)[:-1])
    with pytest.raises(synth.DatasetFormatError):
        synth.read_dataset(path)


def test_same_seed_same_bytes(tmp_path):
    cfg = synth.SynthConfig(trials_per_class=2, seed=3)
    synth.generate_dataset(cfg, tmp_path / "a")
    synth.generate_dataset(cfg, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert synth.fingerprint(tmp_path / "a") == synth.fingerprint(tmp_path / "b")


def test_nearest_centroid_on_toy_features():
    x = np.array([[0.0], [0.1], [5.0], [5.1]])
    y = np.array([0, 0, 1, 1])
    assert synth.nearest_centroid_accuracy(x, y, np.array([[0.2], [4.9]]), np.array([0, 1]), 2) == 1.0
