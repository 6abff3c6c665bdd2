import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from diffbci import dsp, kernels
from diffbci._accel import HAS_NUMBA

FS = 500.0


@pytest.fixture(scope="module")
def lowpass():
    return dsp.design_butterworth_lowpass()


@pytest.fixture(scope="module")
def notch():
    return dsp.design_notch()


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------

def test_lowpass_structure(lowpass):
    assert lowpass.n_sections == 3
    assert lowpass.sos[-1, 2] == 0.0 and lowpass.sos[-1, 4] == 0.0


def test_lowpass_dc_and_cutoff(lowpass):
    assert abs(dsp.frequency_response(lowpass, 0.0)) < 20 * np.log10(1 + 1e-9)
    assert dsp.frequency_response(lowpass, 120.0) == pytest.approx(-3.0103, abs=0.1)


def test_lowpass_matches_scipy_design(lowpass):
    # independent oracle: scipy's zpk-based Butterworth
    f = np.linspace(0, 249, 500)
    ref_sos = signal.butter(5, 120, fs=FS, output="sos")
    _, h = signal.sosfreqz(ref_sos, worN=f, fs=FS)
    ref = 20 * np.log10(np.maximum(np.abs(h), 1e-20))
    got = dsp.frequency_response(lowpass, f)
    mask = ref > -200
    np.testing.assert_allclose(got[mask], ref[mask], atol=1e-8)


def test_lowpass_monotone(lowpass):
    mag = dsp.frequency_response(lowpass, np.arange(0.0, 250.0, 1.0))
    assert np.all(np.diff(mag) <= 1e-12)


def test_notch_endpoints_and_depth(notch):
    assert abs(dsp.frequency_response(notch, 0.0)) < 20 * np.log10(1 + 1e-6)
    assert abs(dsp.frequency_response(notch, 250.0 - 1e-6)) < 20 * np.log10(1 + 1e-3)
    assert dsp.frequency_response(notch, 60.0) <= -40.0


def test_notch_global_minimum_at_60(notch):
    f = np.arange(0.0, 250.0, 0.1)
    mag = dsp.frequency_response(notch, f)
    assert f[np.argmin(mag)] == pytest.approx(60.0)


def test_notch_time_domain_attenuation(notch):
    t = np.arange(int(10 * FS)) / FS
    x = np.sin(2 * np.pi * 60 * t)[None]
    c = notch.copy()
    c.reset(1)
    y = dsp.filter_apply(c, x)[0, int(FS):]
    rms_in = np.sqrt(np.mean(x[0, int(FS):] ** 2))
    assert 20 * np.log10(np.sqrt(np.mean(y ** 2)) / rms_in) <= -40.0


@pytest.mark.parametrize("cascade", [dsp.design_butterworth_lowpass(), dsp.design_notch(), dsp.default_chain(1),
                                     dsp.design_butterworth_lowpass(4, 30.0), dsp.design_notch(50.0, 10.0)])
def test_designs_are_stable(cascade):
    assert cascade.is_stable(margin=1e-9)


@pytest.mark.parametrize("f", [250.0, 300.0, 0.0])
def test_design_rejects_bad_frequency(f):
    with pytest.raises(ValueError):
        dsp.design_butterworth_lowpass(cutoff_hz=f)
    with pytest.raises(ValueError):
        dsp.design_notch(freq_hz=f)


def test_frequency_response_rejects_nyquist(lowpass):
    with pytest.raises(ValueError):
        dsp.frequency_response(lowpass, 250.0)


def test_identity_cascade_is_zero_db_and_bitwise():
    ident = dsp.identity_cascade(3)
    assert np.all(dsp.frequency_response(ident, np.linspace(0, 249, 11)) == 0.0)
    x = np.random.default_rng(0).standard_normal((3, 100))
    assert np.array_equal(dsp.filter_apply(ident, x), x)


def test_coefficient_table_round_trips(lowpass):
    lines = lowpass.coefficient_table().splitlines()
    assert lines[0] == "section,b0,b1,b2,a1,a2"
    back = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
    assert np.array_equal(back, lowpass.sos)


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def test_filter_matches_scipy_sosfilt():
    x = np.random.default_rng(1).standard_normal((4, 3000))
    chain = dsp.default_chain(4)
    y = dsp.filter_apply(chain, x)
    ref = signal.sosfilt(np.hstack([chain.sos[:, :3], np.ones((chain.n_sections, 1)), chain.sos[:, 3:]]), x)
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_filter_channel_mismatch():
    with pytest.raises(ValueError):
        dsp.filter_apply(dsp.default_chain(3), np.zeros((2, 10)))


def test_dc_step_settles(lowpass):
    c = lowpass.copy()
    c.reset(1)
    y = dsp.filter_apply(c, np.full((1, 2000), 7.0))
    assert abs(y[0, -1] - 7.0) < 1e-6


def _chunked(x, sizes):
    chain = dsp.default_chain(x.shape[1 - 1])
    out, pos, i = [], 0, 0
    while pos < x.shape[1]:
        n = sizes[i % len(sizes)]
        out.append(dsp.filter_apply(chain, x[:, pos: pos + n]))
        pos += n
        i += 1
    return np.concatenate(out, axis=1)


@pytest.mark.parametrize("size", [1, 7, 500])
def test_streaming_equals_batch(size):
    x = np.random.default_rng(2).standard_normal((2, 5000))
    whole = dsp.filter_apply(dsp.default_chain(2), x)
    assert np.array_equal(_chunked(x, [size]), whole)


@given(st.lists(st.integers(1, 400), min_size=1, max_size=12))
def test_streaming_equals_batch_any_chunking(sizes):
    x = np.random.default_rng(3).standard_normal((3, 1500))
    whole = dsp.filter_apply(dsp.default_chain(3), x)
    assert np.array_equal(_chunked(x, sizes), whole)


def test_subnormal_state_is_flushed():
    chain = dsp.default_chain(1)
    dsp.filter_apply(chain, np.ones((1, 10)))
    dsp.filter_apply(chain, np.zeros((1, 200_000)))
    st_abs = np.abs(chain.state)
    assert np.all((st_abs == 0.0) | (st_abs >= np.finfo(np.float64).tiny))
    assert st_abs.max() < 1e-240


@pytest.mark.skipif(not HAS_NUMBA, reason="numba not available")
def test_numba_and_numpy_kernels_agree_bitwise():
    sos = dsp.default_chain(1).sos
    x = np.random.default_rng(4).standard_normal((5, 4000))
    x[:, 1000:3000] = 0.0
    s1 = np.zeros((sos.shape[0], 2, 5))
    s2 = s1.copy()
    assert np.array_equal(kernels.sos_filter_numpy(sos, x, s1), kernels.sos_filter_numba(sos, x, s2))
    assert np.array_equal(s1, s2)


def test_numpy_fallback_via_env_flag():
    code = ("import numpy as np; from diffbci import backend, dsp; "
            "x = np.random.default_rng(4).standard_normal((2, 700)); "
            "y = dsp.filter_apply(dsp.default_chain(2), x); "
            "print(backend()); np.save(__import__('sys').argv[1], y)")
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "y.npy")
        env = {**os.environ, "DIFFBCI_DISABLE_NUMBA": "1"}
        out = subprocess.run([sys.executable, "-c", code, path], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numpy"
        x = np.random.default_rng(4).standard_normal((2, 700))
        assert np.array_equal(np.load(path), dsp.filter_apply(dsp.default_chain(2), x))


# ---------------------------------------------------------------------------
# referencing, baseline, epoching
# ---------------------------------------------------------------------------

def test_car_single_channel_is_zero():
    assert np.all(dsp.common_average_reference(np.random.default_rng(0).standard_normal((1, 9))) == 0)


@given(st.integers(1, 9), st.floats(-1e3, 1e3))
def test_car_zero_mean_and_shift_invariant(channels, c):
    x = np.random.default_rng(channels).standard_normal((channels, 50)) * 30
    y = dsp.common_average_reference(x)
    assert np.max(np.abs(y.mean(axis=0))) < 1e-12
    assert np.max(np.abs(dsp.common_average_reference(x + c) - y)) < 1e-12


def test_baseline_samples_at_500hz():
    assert dsp.seconds_to_samples(0.2, 500) == 100


def test_baseline_constant_epoch_is_zero():
    ep = dsp.EegEpoch(np.full((3, 300), 4.2), onset_index=100)
    assert np.all(dsp.baseline_correct(ep, 100).data == 0)


def test_baseline_window_mean_is_zero():
    ep = dsp.EegEpoch(np.random.default_rng(0).standard_normal((4, 1100)) + 50, onset_index=100)
    out = dsp.baseline_correct(ep, 100).data
    assert np.max(np.abs(out[:, :100].mean(axis=1))) < 1e-12


def test_baseline_needs_history():
    with pytest.raises(dsp.InsufficientHistoryError):
        dsp.baseline_correct(dsp.EegEpoch(np.zeros((2, 50)), onset_index=20), 100)


def test_epoch_extract_sizes_and_determinism():
    buf = np.random.default_rng(0).standard_normal((8, 3000))
    a = dsp.epoch_extract(buf, 1500, fs=FS)
    b = dsp.epoch_extract(buf, 1500, fs=FS)
    assert a.data.shape == (8, 1100) and a.pre_samples == 100
    assert dsp.imagery_window(a).shape == (8, 1000)
    assert np.array_equal(a.data, b.data)


def test_epoch_extract_at_buffer_start():
    with pytest.raises(dsp.InsufficientHistoryError, match="insufficient history"):
        dsp.epoch_extract(np.zeros((2, 2000)), 0, fs=FS)


def test_epoch_extract_past_end():
    with pytest.raises(dsp.InsufficientHistoryError):
        dsp.epoch_extract(np.zeros((2, 1000)), 500, fs=FS)


def test_reference_and_baseline_are_idempotent():
    raw = np.random.default_rng(5).standard_normal((6, 1100)) * 20
    once = dsp.baseline_correct(dsp.EegEpoch(raw, onset_index=100), 100)
    twice = dsp.baseline_correct(once, 100)
    assert np.max(np.abs(twice.data - once.data)) < 1e-9
    car = dsp.common_average_reference(once.data)
    assert np.max(np.abs(dsp.common_average_reference(car) - car)) < 1e-9


def test_preprocess_epoch_matches_extract_path():
    buf = np.random.default_rng(6).standard_normal((4, 2000))
    via_extract = dsp.imagery_window(dsp.epoch_extract(buf, 600, fs=FS))
    direct = dsp.preprocess_epoch(buf[:, 500:1600], 100)
    assert np.array_equal(via_extract, direct)


def test_preprocess_independent_of_memory_layout():
    big = np.random.default_rng(7).standard_normal((8, 3000)) * 40
    view = big[:, 700:1800]
    assert np.array_equal(dsp.preprocess_epoch(view, 100), dsp.preprocess_epoch(view.copy(), 100))
    assert np.array_equal(dsp.common_average_reference(view), dsp.common_average_reference(view.copy()))
