"""Signal conditioning and wavelet band-power features.

The behavioral-state path mirrors a clinical recording chain: mains notch,
wide lowpass, decimation to 1 kHz, then per-band zero-phase bandpass and a
Morlet magnitude feature pooled to a fixed length per site. The evoked
(CCEP) path only decimates to 5 kHz; the recording-side filters are treated
as already applied by the acquisition hardware, which also keeps the
significance testing downstream calibrated against white segment noise.

All filters are IIR applied forward-backward, so they are zero phase and
linear. Filtering always happens in float64 on the last axis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ConfigError, FormatError, VersionError

FEATURE_STORE_MAGIC = "SOZFEAT"
FEATURE_STORE_VERSION = 1

DEFAULT_FEATURE_LEN = 128
BEHAVIOR_RATE_HZ = 1000.0
CCEP_RATE_HZ = 5000.0
NOTCH_HZ = 50.0
LOWPASS_HZ = 800.0


@dataclass(frozen=True)
class BandDef:
    """A closed frequency band in Hz, 0 < lo < hi."""

    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not (0.0 < self.lo_hz < self.hi_hz):
            raise ValueError(f"band {self.name}: need 0 < lo < hi, "
                             f"got ({self.lo_hz}, {self.hi_hz})")


#: Canonical analysis bands, in the fixed order used by every feature tensor.
BANDS = (
    BandDef("delta", 1.0, 4.0),
    BandDef("theta", 4.0, 8.0),
    BandDef("alpha", 8.0, 14.0),
    BandDef("beta", 14.0, 30.0),
    BandDef("low_gamma", 30.0, 80.0),
    BandDef("high_gamma", 80.0, 150.0),
)

BAND_NAMES = tuple(b.name for b in BANDS)


def band_by_name(name: str) -> BandDef:
    for b in BANDS:
        if b.name == name:
            return b
    raise ValueError(f"unknown band {name!r}, expected one of {BAND_NAMES}")


@dataclass
class Recording:
    """A multichannel segment: samples (channels x time), uniform rate."""

    samples: np.ndarray
    rate_hz: float
    state: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-d, got shape {self.samples.shape}")
        if self.rate_hz <= 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("recording contains NaN or Inf")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.rate_hz

    def replace(self, samples: np.ndarray, rate_hz: float | None = None) -> "Recording":
        return Recording(samples, self.rate_hz if rate_hz is None else rate_hz, self.state)


@dataclass(frozen=True)
class FeatureVector:
    """One site's pooled band-power trace. Values are wavelet magnitudes,
    so they are nonnegative by construction."""

    values: np.ndarray
    site: int
    band: str
    state: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("feature vector must be 1-d")
        if np.any(v < 0):
            raise ValueError("wavelet magnitude features cannot be negative")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# filters

def notch_filter(rec: Recording, freq_hz: float = NOTCH_HZ, q: float = 30.0) -> Recording:
    """Zero-phase IIR notch at freq_hz. DC and frequencies away from the
    notch pass unchanged within numerical tolerance."""
    nyq = rec.rate_hz / 2.0
    if not (0.0 < freq_hz < nyq):
        raise ValueError(f"notch frequency {freq_hz} outside (0, {nyq})")
    b, a = signal.iirnotch(freq_hz, q, fs=rec.rate_hz)
    return rec.replace(signal.filtfilt(b, a, rec.samples, axis=-1))


def lowpass_filter(rec: Recording, cutoff_hz: float = LOWPASS_HZ, order: int = 4) -> Recording:
    nyq = rec.rate_hz / 2.0
    if not (0.0 < cutoff_hz < nyq):
        raise ValueError(f"lowpass cutoff {cutoff_hz} outside (0, {nyq})")
    sos = signal.butter(order, cutoff_hz, btype="low", fs=rec.rate_hz, output="sos")
    return rec.replace(signal.sosfiltfilt(sos, rec.samples, axis=-1))


def bandpass(rec: Recording, band: BandDef, order: int = 4) -> Recording:
    nyq = rec.rate_hz / 2.0
    if band.hi_hz >= nyq:
        raise ValueError(f"band {band.name} upper edge {band.hi_hz} >= Nyquist {nyq}")
    sos = signal.butter(order, (band.lo_hz, band.hi_hz), btype="bandpass",
                        fs=rec.rate_hz, output="sos")
    return rec.replace(signal.sosfiltfilt(sos, rec.samples, axis=-1))


def downsample(rec: Recording, target_rate_hz: float) -> Recording:
    """Integer-factor decimation with an anti-alias lowpass at 0.4x the
    target rate. Output length is floor(T / factor). A factor of 1 is the
    identity (no filtering)."""
    ratio = rec.rate_hz / target_rate_hz
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(
            f"target rate {target_rate_hz} must divide source rate {rec.rate_hz}")
    if factor == 1:
        return rec.replace(rec.samples.copy())
    sos = signal.butter(4, 0.4 * target_rate_hz, btype="low",
                        fs=rec.rate_hz, output="sos")
    smooth = signal.sosfiltfilt(sos, rec.samples, axis=-1)
    keep = rec.n_samples - (rec.n_samples % factor)
    return rec.replace(np.ascontiguousarray(smooth[:, :keep:factor]), target_rate_hz)


# ---------------------------------------------------------------------------
# wavelet features

def morlet_kernel(fc_hz: float, rate_hz: float, n_cycles: float) -> np.ndarray:
    """Complex Morlet wavelet at center frequency fc, unit energy, support
    clipped at 3 temporal standard deviations."""
    sigma_t = n_cycles / (2.0 * math.pi * fc_hz)
    hw = int(math.ceil(3.0 * sigma_t * rate_hz))
    t = np.arange(-hw, hw + 1) / rate_hz
    w = np.exp(-(t * t) / (2.0 * sigma_t * sigma_t)) * np.exp(2j * math.pi * fc_hz * t)
    return w / np.sqrt(np.sum(np.abs(w) ** 2))


def morlet_power(rec_band: Recording, band: BandDef, n_cycles: float = 6.0,
                 out_len: int = DEFAULT_FEATURE_LEN, n_freqs: int = 8) -> np.ndarray:
    """Mean wavelet magnitude per site, pooled to out_len time bins.

    Uses n_freqs log-spaced center frequencies spanning the band. The
    magnitude traces of the individual frequencies are averaged, then
    mean-pooled into out_len equal time bins. Edges are reflect-padded so
    the output covers the whole segment.

    Returns an array of shape (channels, out_len).
    """
    x = rec_band.samples
    t_len = x.shape[1]
    if t_len < out_len:
        raise ValueError(f"signal length {t_len} shorter than out_len {out_len}")
    freqs = np.geomspace(band.lo_hz, band.hi_hz, n_freqs)
    # the lowest frequency has the widest support; reject signals it cannot fit
    widest = morlet_kernel(freqs[0], rec_band.rate_hz, n_cycles)
    if widest.size > t_len:
        raise ValueError(
            f"signal length {t_len} shorter than wavelet support {widest.size} "
            f"at {freqs[0]:.3g} Hz")
    acc = np.zeros_like(x)
    for fc in freqs:
        k = morlet_kernel(fc, rec_band.rate_hz, n_cycles)
        hw = (k.size - 1) // 2
        padded = np.pad(x, ((0, 0), (hw, hw)), mode="reflect")
        acc += np.abs(signal.fftconvolve(padded, k[None, :], mode="valid", axes=1))
    acc /= n_freqs
    # mean-pool into out_len bins; bin k covers [k*T//out_len, (k+1)*T//out_len)
    bounds = (np.arange(out_len + 1) * t_len) // out_len
    pooled = np.add.reduceat(acc, bounds[:-1], axis=1) / np.diff(bounds)
    return pooled


# ---------------------------------------------------------------------------
# evoked-response support

def build_baseline(interictal: Recording) -> Recording:
    """Average the first 60 s of a stationary interictal recording over ten
    equal contiguous subsegments. The result is one tenth of the window and
    serves as the per-site reference signal for evoked-response testing."""
    need = int(round(60.0 * interictal.rate_hz))
    if interictal.n_samples < need:
        raise ValueError(
            f"baseline construction needs 60 s, recording has "
            f"{interictal.duration_s:.3g} s")
    seg = need // 10
    window = interictal.samples[:, :need]
    stacked = window.reshape(interictal.n_channels, 10, seg)
    return Recording(stacked.mean(axis=1), interictal.rate_hz, interictal.state)


def prepare_ccep(raw: Recording, rate_hz: float = CCEP_RATE_HZ) -> Recording:
    """Evoked segments are only decimated; see the module docstring."""
    return downsample(raw, rate_hz)


def prepare_baseline(interictal_raw: Recording, rate_hz: float = CCEP_RATE_HZ) -> Recording:
    return build_baseline(downsample(interictal_raw, rate_hz))


# ---------------------------------------------------------------------------
# per-state pipeline

def state_band_features(raw: Recording, feat_len: int = DEFAULT_FEATURE_LEN,
                        bands: tuple[BandDef, ...] = BANDS,
                        work_rate_hz: float = BEHAVIOR_RATE_HZ,
                        notch_hz: float = NOTCH_HZ,
                        lowpass_hz: float = LOWPASS_HZ) -> np.ndarray:
    """Full behavioral-state chain: notch, lowpass, decimate, then per band
    a zero-phase bandpass and Morlet magnitude features.

    Returns (channels, len(bands), feat_len), nonnegative.
    """
    rec = notch_filter(raw, notch_hz)
    rec = lowpass_filter(rec, lowpass_hz)
    rec = downsample(rec, work_rate_hz)
    out = np.empty((rec.n_channels, len(bands), feat_len))
    for bi, band in enumerate(bands):
        out[:, bi, :] = morlet_power(bandpass(rec, band), band, out_len=feat_len)
    return out


def zscore_sites(features: np.ndarray) -> np.ndarray:
    """Standardize over the site axis (axis 0), independently for every
    remaining index, so each (state, band, element) has mean 0 and unit
    variance across sites. Zero-variance entries stay zero rather than NaN."""
    mu = features.mean(axis=0, keepdims=True)
    sd = features.std(axis=0, keepdims=True)
    safe = np.where(sd == 0.0, 1.0, sd)
    out = (features - mu) / safe
    return np.where(sd == 0.0, 0.0, out)


# ---------------------------------------------------------------------------
# feature / latent store

def save_feature_store(path: str, per_patient: dict[str, np.ndarray],
                       meta: dict,
                       axes: tuple[str, ...] = ("site", "state", "band", "feature")) -> None:
    """Persist one tensor per patient as little-endian float32 with a JSON
    sidecar naming the axes. The same layout stores latent tensors, with
    `axes` renamed accordingly."""
    os.makedirs(path, exist_ok=True)
    index = {
        "format": FEATURE_STORE_MAGIC,
        "version": FEATURE_STORE_VERSION,
        "patients": sorted(per_patient),
        "meta": meta,
    }
    with open(os.path.join(path, "store.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    for pid in sorted(per_patient):
        arr = np.ascontiguousarray(per_patient[pid], dtype="<f4")
        if arr.ndim != len(axes):
            raise ConfigError(f"{pid}: tensor rank {arr.ndim} does not match "
                              f"axes {axes}")
        arr.tofile(os.path.join(path, f"{pid}.f32"))
        sidecar = {
            "patient": pid,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "axes": list(axes),
        }
        with open(os.path.join(path, f"{pid}.json"), "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_feature_store(path: str):
    """Returns (dict patient -> float64 tensor, meta dict)."""
    index_path = os.path.join(path, "store.json")
    if not os.path.exists(index_path):
        raise FormatError(f"missing store index {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("format") != FEATURE_STORE_MAGIC:
        raise FormatError(f"{index_path}: not a feature store")
    if index.get("version") != FEATURE_STORE_VERSION:
        raise VersionError(f"{index_path}: unsupported version {index.get('version')}")
    out = {}
    for pid in index["patients"]:
        with open(os.path.join(path, f"{pid}.json")) as fh:
            sidecar = json.load(fh)
        shape = tuple(sidecar["shape"])
        raw_path = os.path.join(path, f"{pid}.f32")
        expected = int(np.prod(shape)) * 4
        actual = os.path.getsize(raw_path)
        if actual != expected:
            raise FormatError(
                f"{raw_path}: expected {expected} bytes for shape {shape}, "
                f"found {actual}")
        arr = np.fromfile(raw_path, dtype="<f4").reshape(shape)
        out[pid] = arr.astype(np.float64)
    return out, index["meta"]
