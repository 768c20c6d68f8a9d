import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sozpipe import dsp
from sozpipe.errors import FormatError


def tone(freq_hz, rate_hz, dur_s, amp=1.0, n_ch=1, phase=0.0):
    t = np.arange(int(dur_s * rate_hz)) / rate_hz
    x = amp * np.sin(2 * np.pi * freq_hz * t + phase)
    return dsp.Recording(np.tile(x, (n_ch, 1)), rate_hz)


def central_rms(x, frac=0.6):
    n = x.shape[-1]
    lo = int(n * (1 - frac) / 2)
    return float(np.sqrt(np.mean(x[..., lo:n - lo] ** 2)))


# ---------------------------------------------------------------------------
# recording basics

def test_recording_rejects_nan():
    with pytest.raises(ValueError):
        dsp.Recording(np.array([[0.0, np.nan]]), 100.0)


def test_recording_rejects_1d():
    with pytest.raises(ValueError):
        dsp.Recording(np.zeros(10), 100.0)


def test_band_order_is_canonical():
    assert dsp.BAND_NAMES == ("delta", "theta", "alpha", "beta",
                              "low_gamma", "high_gamma")
    lo = [b.lo_hz for b in dsp.BANDS]
    hi = [b.hi_hz for b in dsp.BANDS]
    assert lo == sorted(lo) and hi == sorted(hi)


# ---------------------------------------------------------------------------
# notch

def test_notch_kills_mains_tone():
    rec = tone(50.0, 10_000.0, 4.0)
    out = dsp.notch_filter(rec, 50.0)
    assert central_rms(out.samples) < 0.1 * central_rms(rec.samples)


def test_notch_preserves_dc():
    rec = dsp.Recording(np.full((2, 5000), 3.7), 10_000.0)
    out = dsp.notch_filter(rec, 50.0)
    np.testing.assert_allclose(out.samples, 3.7, rtol=1e-6)


def test_notch_rejects_out_of_range():
    with pytest.raises(ValueError):
        dsp.notch_filter(tone(10, 100.0, 2.0), 60.0)  # above Nyquist


# ---------------------------------------------------------------------------
# lowpass

def test_lowpass_passband_flat():
    rec = tone(100.0, 10_000.0, 4.0)
    out = dsp.lowpass_filter(rec, 800.0)
    ratio = central_rms(out.samples) / central_rms(rec.samples)
    assert 0.95 < ratio < 1.05


def test_lowpass_20db_at_twice_cutoff():
    rec = tone(1600.0, 10_000.0, 4.0)
    out = dsp.lowpass_filter(rec, 800.0)
    assert central_rms(out.samples) / central_rms(rec.samples) < 0.1


# ---------------------------------------------------------------------------
# bandpass

def test_bandpass_in_band_tone_survives():
    rec = tone(6.0, 1000.0, 30.0)
    out = dsp.bandpass(rec, dsp.band_by_name("theta"))
    ratio = central_rms(out.samples) / central_rms(rec.samples)
    assert 0.9 < ratio < 1.1


def test_bandpass_out_of_band_tone_attenuated():
    rec = tone(6.0, 1000.0, 30.0)
    out = dsp.bandpass(rec, dsp.band_by_name("beta"))
    assert central_rms(out.samples) < 0.1 * central_rms(rec.samples)


def test_bandpass_rejects_band_beyond_nyquist():
    rec = tone(6.0, 200.0, 5.0)
    with pytest.raises(ValueError):
        dsp.bandpass(rec, dsp.band_by_name("high_gamma"))  # 150 >= 100


def test_zero_phase_impulse_peak_fixed():
    x = np.zeros((1, 4001))
    x[0, 2000] = 1.0
    rec = dsp.Recording(x, 1000.0)
    for out in (dsp.lowpass_filter(rec, 100.0),
                dsp.bandpass(rec, dsp.band_by_name("beta"))):
        assert np.argmax(np.abs(out.samples[0])) == 2000


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_filter_linearity(a, b):
    r = np.random.default_rng(5)
    x = r.normal(size=(1, 2000))
    y = r.normal(size=(1, 2000))
    rec = lambda s: dsp.Recording(s, 1000.0)
    f = lambda s: dsp.lowpass_filter(rec(s), 120.0).samples
    lhs = f(a * x + b * y)
    rhs = a * f(x) + b * f(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-6 * (abs(a) + abs(b) + 1.0)


# ---------------------------------------------------------------------------
# downsample

def test_downsample_length_and_rate():
    rec = dsp.Recording(np.random.default_rng(0).normal(size=(2, 10_007)), 10_000.0)
    out = dsp.downsample(rec, 1000.0)
    assert out.rate_hz == 1000.0
    assert out.n_samples == 10_007 // 10


def test_downsample_tone_preserved():
    rec = tone(10.0, 10_000.0, 4.0)
    out = dsp.downsample(rec, 1000.0)
    ratio = central_rms(out.samples) / central_rms(rec.samples)
    assert 0.95 < ratio < 1.05


def test_downsample_non_divisor_rejected():
    rec = tone(10.0, 10_000.0, 1.0)
    with pytest.raises(ValueError):
        dsp.downsample(rec, 3000.0)


def test_downsample_factor_one_is_identity():
    rec = tone(10.0, 5000.0, 1.0)
    out = dsp.downsample(rec, 5000.0)
    np.testing.assert_array_equal(out.samples, rec.samples)


# ---------------------------------------------------------------------------
# morlet features

def test_morlet_tone_is_stationary():
    band = dsp.band_by_name("delta")
    rec = tone(2.5, 1000.0, 20.0)
    feat = dsp.morlet_power(rec, band, out_len=128)
    interior = feat[0, 4:-4]
    cv = interior.std() / interior.mean()
    assert cv < 0.1


def test_morlet_amplitude_homogeneity():
    band = dsp.band_by_name("theta")
    base = tone(6.0, 1000.0, 10.0)
    double = tone(6.0, 1000.0, 10.0, amp=2.0)
    f1 = dsp.morlet_power(base, band, out_len=64)
    f2 = dsp.morlet_power(double, band, out_len=64)
    np.testing.assert_allclose(f2, 2.0 * f1, rtol=1e-6)


def test_morlet_rejects_short_signal():
    band = dsp.band_by_name("delta")  # support ~5.7 s at 1 kHz
    rec = tone(2.5, 1000.0, 3.0)
    with pytest.raises(ValueError):
        dsp.morlet_power(rec, band, out_len=64)


def test_morlet_out_of_band_tone_is_faint():
    band = dsp.band_by_name("theta")
    in_band = dsp.bandpass(tone(6.0, 1000.0, 30.0), band)
    out_band = dsp.bandpass(tone(25.0, 1000.0, 30.0), band)
    f_in = dsp.morlet_power(in_band, band, out_len=64)
    f_out = dsp.morlet_power(out_band, band, out_len=64)
    assert f_out.mean() < 0.05 * f_in.mean()


def test_morlet_nonnegative_and_shape():
    r = np.random.default_rng(3)
    rec = dsp.Recording(r.normal(size=(3, 9000)), 1000.0)
    band = dsp.band_by_name("alpha")
    feat = dsp.morlet_power(dsp.bandpass(rec, band), band, out_len=128)
    assert feat.shape == (3, 128)
    assert np.all(feat >= 0)


def test_feature_vector_rejects_negative():
    with pytest.raises(ValueError):
        dsp.FeatureVector(np.array([0.5, -0.1]), site=0, band="delta")


# ---------------------------------------------------------------------------
# baseline construction

def test_build_baseline_averages_ten_subsegments():
    rate = 10.0
    n = int(60 * rate)
    x = np.arange(n, dtype=float)[None, :]
    rec = dsp.Recording(x, rate, state="interictal")
    base = dsp.build_baseline(rec)
    seg = n // 10
    expect = np.mean([x[0, i * seg:(i + 1) * seg] for i in range(10)], axis=0)
    assert base.n_samples == seg
    np.testing.assert_allclose(base.samples[0], expect, atol=1e-12)


def test_build_baseline_needs_60s():
    rec = dsp.Recording(np.zeros((1, 100)), 10.0)  # 10 s
    with pytest.raises(ValueError):
        dsp.build_baseline(rec)


def test_build_baseline_constant_signal():
    rec = dsp.Recording(np.full((2, 600), 1.5), 10.0)
    base = dsp.build_baseline(rec)
    np.testing.assert_array_equal(base.samples, np.full((2, 60), 1.5))


# ---------------------------------------------------------------------------
# z-scoring

def test_zscore_sites_normalizes():
    r = np.random.default_rng(9)
    feat = r.normal(3.0, 2.0, size=(16, 2, 3, 5))
    z = dsp.zscore_sites(feat)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


def test_zscore_sites_zero_variance_stays_zero():
    feat = np.ones((8, 1, 1, 4))
    z = dsp.zscore_sites(feat)
    np.testing.assert_array_equal(z, 0.0)


# ---------------------------------------------------------------------------
# state pipeline and store

def test_state_band_features_shape_and_sign():
    r = np.random.default_rng(1)
    raw = dsp.Recording(r.normal(size=(4, 8 * 10_000)), 10_000.0, state="wake")
    feat = dsp.state_band_features(raw, feat_len=32)
    assert feat.shape == (4, 6, 32)
    assert np.all(feat >= 0)


def test_feature_store_roundtrip(tmp_path):
    r = np.random.default_rng(2)
    data = {"p000": r.random((4, 3, 6, 16)).astype(np.float32).astype(float),
            "p001": r.random((4, 3, 6, 16)).astype(np.float32).astype(float)}
    meta = {"kind": "features", "feat_len": 16}
    dsp.save_feature_store(str(tmp_path / "feat"), data, meta)
    loaded, meta2 = dsp.load_feature_store(str(tmp_path / "feat"))
    assert meta2 == meta
    assert set(loaded) == {"p000", "p001"}
    for pid in data:
        np.testing.assert_allclose(loaded[pid], data[pid], atol=0)


def test_feature_store_size_mismatch(tmp_path):
    data = {"p000": np.zeros((2, 1, 1, 8))}
    dsp.save_feature_store(str(tmp_path / "feat"), data, {"kind": "features"})
    raw = tmp_path / "feat" / "p000.f32"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError):
        dsp.load_feature_store(str(tmp_path / "feat"))
