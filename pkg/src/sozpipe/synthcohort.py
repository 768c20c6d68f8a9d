"""Synthetic multi-patient sEEG cohorts with planted seizure onset zones.

Nothing here claims clinical fidelity. The generator exists so the rest of
the pipeline has data whose ground truth is known exactly, with effect
sizes the significance tests and classifiers can actually detect:

* Behavioral-state recordings are 1/f-shaped background noise plus
  narrowband oscillations in each canonical analysis band, with a
  state-dependent amplitude profile. Sites inside the planted onset zone
  additionally carry high gamma bursts and sharp biphasic spikes during
  the seizure state, and attenuated bursts during sleep. Per-site burst
  gains are jittered so some onset sites are only weakly expressed.
* Evoked (CCEP) segments are white Gaussian noise; sites sharing a
  community with the stimulated site also receive a damped 20 Hz
  sinusoid (50 ms decay) starting 10 ms after each stimulus pulse,
  repeated once per second for the whole segment. The shared waveform is
  what makes coupled sites correlate. White noise keeps the paired
  significance test downstream calibrated: with coupling 0 its p-values
  are uniform.
* The stationary interictal recording used for baselines is white noise
  and always 60 s long.
* Sites are partitioned into four near-equal contiguous communities and
  the onset zone fills communities from the first one up, so community
  structure and labels agree. Stimulation cycles through communities.

coupling_strength in [0, 1] scales the evoked amplitude, and with it the
cross-site correlation. Everything is reproducible: each patient draws
from its own generator seeded with (cohort seed XOR patient index).

Raw signals are synthesized at raw_rate_hz (10 kHz by default) and are
meant to pass through the dsp module exactly as recorded data would.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .dsp import Recording, BANDS
from .errors import ConfigError, FormatError, VersionError

COHORT_MAGIC = "SOZCOHORT"
COHORT_VERSION = 1

#: Canonical behavioral states, in the fixed order used by feature tensors.
STATES = ("wake", "sleep", "seizure")

NUM_COMMUNITIES = 4
INTERICTAL_DURATION_S = 60.0

# evoked response template (fixed by design, scaled by coupling_strength)
CCEP_AMP = 10.0
CCEP_FREQ_HZ = 20.0
CCEP_DECAY_S = 0.050
CCEP_ONSET_S = 0.010
CCEP_PULSE_PERIOD_S = 1.0
CCEP_SITE_JITTER = (0.8, 1.2)

# per-state variance of the narrowband oscillation in each canonical band,
# relative to the unit-variance 1/f background
_OSC_VAR = {
    "wake":    (0.30, 0.30, 0.70, 0.40, 0.20, 0.08),
    "sleep":   (0.90, 0.50, 0.25, 0.25, 0.15, 0.08),
    "seizure": (0.50, 0.70, 0.45, 0.55, 0.30, 0.12),
}

# onset-zone burst and spike parameters
_BURST_CENTER_HZ = 115.0
_BURST_WIDTH_HZ = 12.0
_BURST_VAR_SEIZURE = 1.3
_BURST_SLEEP_FACTOR = 0.3
_BURST_ENV_SIGMA_S = 0.12
_BURST_PERIOD_S = 1.5
_SPIKE_AMP = 4.0
_SPIKE_PERIOD_S = 0.8
_SPIKE_SIGMA_S = 0.009
_SITE_GAIN_RANGE = (0.55, 1.45)


@dataclass(frozen=True)
class CohortSpec:
    """Parameters of a synthetic cohort. Defaults reproduce the reference
    configuration used by the experiment harness."""

    num_patients: int
    num_sites: int = 64
    soz_fraction: float = 0.25
    seed: int = 0
    duration_state_s: float = 60.0
    num_ccep_segments: int = 8
    ccep_duration_s: float = 6.0
    raw_rate_hz: float = 10_000.0
    coupling_strength: float = 0.8

    def __post_init__(self):
        if self.num_patients < 0:
            raise ConfigError("num_patients must be nonnegative")
        if self.num_sites < NUM_COMMUNITIES:
            raise ConfigError(f"num_sites must be at least {NUM_COMMUNITIES}")
        if not (0.0 < self.soz_fraction <= 1.0):
            raise ConfigError("soz_fraction must lie in (0, 1]")
        if round(self.soz_fraction * self.num_sites) < 1:
            raise ConfigError("soz_fraction * num_sites must round to >= 1")
        if not (0.0 <= self.coupling_strength <= 1.0):
            raise ConfigError("coupling_strength must lie in [0, 1]")
        if self.duration_state_s <= 0 or self.ccep_duration_s <= 0:
            raise ConfigError("durations must be positive")
        if self.num_ccep_segments < 1:
            raise ConfigError("need at least one evoked segment")
        for target in (1000.0, 5000.0):
            ratio = self.raw_rate_hz / target
            if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
                raise ConfigError(
                    f"raw_rate_hz {self.raw_rate_hz} must be an integer "
                    f"multiple of {target} for the downstream pipeline")

    @property
    def num_soz(self) -> int:
        return int(round(self.soz_fraction * self.num_sites))


@dataclass
class SyntheticPatient:
    patient_id: str
    seed: int
    labels: np.ndarray          # (C,) int, 1 = onset zone
    communities: np.ndarray     # (C,) int in [0, NUM_COMMUNITIES)
    states: dict[str, Recording] = field(default_factory=dict)
    ccep: list[Recording] = field(default_factory=list)
    interictal: Recording | None = None
    stim_sites: list[int] = field(default_factory=list)

    @property
    def num_sites(self) -> int:
        return int(self.labels.size)


def community_assignment(num_sites: int) -> np.ndarray:
    """Contiguous near-equal blocks, community id per site."""
    out = np.empty(num_sites, dtype=np.int64)
    for cid, chunk in enumerate(np.array_split(np.arange(num_sites), NUM_COMMUNITIES)):
        out[chunk] = cid
    return out


def soz_labels(num_sites: int, soz_fraction: float) -> np.ndarray:
    """The onset zone fills sites from the start, so it is concentrated in
    the first community and spills into the next only if it must."""
    n = int(round(soz_fraction * num_sites))
    labels = np.zeros(num_sites, dtype=np.int64)
    labels[:n] = 1
    return labels


def stimulated_site(segment_index: int, communities: np.ndarray) -> int:
    """Deterministic stimulation schedule: cycle through communities, and
    within a community cycle through its members."""
    cid = segment_index % NUM_COMMUNITIES
    members = np.flatnonzero(communities == cid)
    return int(members[(segment_index // NUM_COMMUNITIES) % members.size])


# ---------------------------------------------------------------------------
# spectral synthesis helpers

def _spectral_noise(rng: np.random.Generator, n_ch: int, n_samp: int,
                    profile: np.ndarray, var: float) -> np.ndarray:
    """Real noise with the given one-sided spectral amplitude profile and
    per-channel variance `var` in expectation."""
    energy = float(np.sum(profile ** 2))
    if energy == 0.0 or var == 0.0:
        return np.zeros((n_ch, n_samp))
    scale = n_samp * np.sqrt(var / (2.0 * energy))
    shape = (n_ch, profile.size)
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    return np.fft.irfft(z * (scale * profile)[None, :], n=n_samp, axis=1)


def _pink_profile(freqs: np.ndarray) -> np.ndarray:
    prof = np.zeros_like(freqs)
    nz = freqs > 0
    prof[nz] = np.maximum(freqs[nz], 1.0) ** -0.5
    return prof


def _bump_profile(freqs: np.ndarray, center_hz: float, width_hz: float) -> np.ndarray:
    return np.exp(-((freqs - center_hz) ** 2) / (2.0 * width_hz ** 2))


def _burst_envelope(rng: np.random.Generator, n_samp: int, rate_hz: float) -> np.ndarray:
    """Sum of Gaussian windows at jittered times, normalized to unit mean
    square so the carrier variance is interpretable."""
    t = np.arange(n_samp) / rate_hz
    dur = n_samp / rate_hz
    env = np.zeros(n_samp)
    pos = float(rng.uniform(0.3, 1.0))
    while pos < dur:
        env += np.exp(-((t - pos) ** 2) / (2.0 * _BURST_ENV_SIGMA_S ** 2))
        pos += _BURST_PERIOD_S * float(rng.uniform(0.7, 1.3))
    ms = float(np.mean(env ** 2))
    return env / np.sqrt(ms) if ms > 0 else env


def _spike_train(rng: np.random.Generator, n_samp: int, rate_hz: float,
                 amp: float) -> np.ndarray:
    """Biphasic sharp transients (derivative of a Gaussian), unit peak."""
    hw = int(round(4 * _SPIKE_SIGMA_S * rate_hz))
    tt = np.arange(-hw, hw + 1) / rate_hz
    shape = -(tt / _SPIKE_SIGMA_S) * np.exp(-(tt ** 2) / (2 * _SPIKE_SIGMA_S ** 2))
    shape = shape / np.max(np.abs(shape)) * amp
    out = np.zeros(n_samp)
    dur = n_samp / rate_hz
    pos = float(rng.uniform(0.2, 0.9))
    while pos < dur:
        i = int(pos * rate_hz)
        j = min(i + shape.size, n_samp)
        out[i:j] += shape[: j - i]
        pos += _SPIKE_PERIOD_S * float(rng.uniform(0.7, 1.3))
    return out


def evoked_template(n_samp: int, rate_hz: float) -> np.ndarray:
    """Damped sinusoid following each stimulus pulse: 20 Hz carrier, 50 ms
    exponential decay, onset 10 ms post-pulse, one pulse per second."""
    support = int(round(5 * CCEP_DECAY_S * rate_hz))
    tt = np.arange(support) / rate_hz
    shape = np.exp(-tt / CCEP_DECAY_S) * np.sin(2 * np.pi * CCEP_FREQ_HZ * tt)
    out = np.zeros(n_samp)
    pos = CCEP_ONSET_S
    while True:
        i = int(round(pos * rate_hz))
        if i >= n_samp:
            break
        j = min(i + support, n_samp)
        out[i:j] += shape[: j - i]
        pos += CCEP_PULSE_PERIOD_S
    return out


# ---------------------------------------------------------------------------
# generation

def _behavior_state(rng: np.random.Generator, spec: CohortSpec, state: str,
                    labels: np.ndarray, site_gain: np.ndarray) -> Recording:
    c = spec.num_sites
    n = int(round(spec.duration_state_s * spec.raw_rate_hz))
    rate = spec.raw_rate_hz
    freqs = np.fft.rfftfreq(n, 1.0 / rate)

    # background plus per-band oscillations, synthesized in one pass:
    # independent components sum, so their profiles combine in quadrature
    profiles = [(_pink_profile(freqs), 1.0)]
    for band, var in zip(BANDS, _OSC_VAR[state]):
        fc = np.sqrt(band.lo_hz * band.hi_hz)
        width = (band.hi_hz - band.lo_hz) / 6.0
        prof = _bump_profile(freqs, fc, width)
        energy = np.sum(prof ** 2)
        if energy > 0:
            profiles.append((prof, var))
    combined = np.sqrt(sum(
        (p ** 2) * (var * n * n / (2.0 * np.sum(p ** 2))) for p, var in profiles))
    z = (rng.standard_normal((c, freqs.size))
         + 1j * rng.standard_normal((c, freqs.size))) / np.sqrt(2.0)
    x = np.fft.irfft(z * combined[None, :], n=n, axis=1)

    if state in ("sleep", "seizure"):
        burst_var = _BURST_VAR_SEIZURE * (1.0 if state == "seizure" else _BURST_SLEEP_FACTOR)
        carrier_prof = _bump_profile(freqs, _BURST_CENTER_HZ, _BURST_WIDTH_HZ)
        for site in np.flatnonzero(labels == 1):
            carrier = _spectral_noise(rng, 1, n, carrier_prof,
                                      burst_var * site_gain[site])[0]
            x[site] += carrier * _burst_envelope(rng, n, rate)
            if state == "seizure":
                x[site] += _spike_train(rng, n, rate, _SPIKE_AMP * site_gain[site])
    return Recording(x, rate, state=state)


def _ccep_segment(rng: np.random.Generator, spec: CohortSpec,
                  communities: np.ndarray, segment_index: int) -> tuple[Recording, int]:
    c = spec.num_sites
    n = int(round(spec.ccep_duration_s * spec.raw_rate_hz))
    x = rng.standard_normal((c, n))
    stim = stimulated_site(segment_index, communities)
    if spec.coupling_strength > 0.0:
        tpl = evoked_template(n, spec.raw_rate_hz)
        coupled = np.flatnonzero(communities == communities[stim])
        amps = (spec.coupling_strength * CCEP_AMP
                * rng.uniform(*CCEP_SITE_JITTER, size=coupled.size))
        x[coupled] += amps[:, None] * tpl[None, :]
    return Recording(x, spec.raw_rate_hz, state="ccep"), stim


def generate_patient(spec: CohortSpec, index: int) -> SyntheticPatient:
    """Generate one patient from the cohort spec. Deterministic: the
    patient's generator is seeded with spec.seed XOR index."""
    sub_seed = spec.seed ^ index
    rng = np.random.default_rng(sub_seed)
    labels = soz_labels(spec.num_sites, spec.soz_fraction)
    communities = community_assignment(spec.num_sites)
    site_gain = rng.uniform(*_SITE_GAIN_RANGE, size=spec.num_sites)

    patient = SyntheticPatient(
        patient_id=f"p{index:03d}", seed=sub_seed,
        labels=labels, communities=communities)
    for state in STATES:
        patient.states[state] = _behavior_state(rng, spec, state, labels, site_gain)

    n_inter = int(round(INTERICTAL_DURATION_S * spec.raw_rate_hz))
    patient.interictal = Recording(
        rng.standard_normal((spec.num_sites, n_inter)),
        spec.raw_rate_hz, state="interictal")

    for q in range(spec.num_ccep_segments):
        seg, stim = _ccep_segment(rng, spec, communities, q)
        patient.ccep.append(seg)
        patient.stim_sites.append(stim)
    return patient


def generate_cohort(spec: CohortSpec) -> list[SyntheticPatient]:
    """All patients in memory. For default-sized cohorts prefer
    iter_patients plus save_cohort, which streams one patient at a time."""
    return [generate_patient(spec, i) for i in range(spec.num_patients)]


def iter_patients(spec: CohortSpec):
    for i in range(spec.num_patients):
        yield generate_patient(spec, i)


# ---------------------------------------------------------------------------
# persistence

def _write_rec(rec: Recording, path: str) -> dict:
    arr = np.ascontiguousarray(rec.samples, dtype="<f4")
    arr.tofile(path)
    return {"file": os.path.basename(path), "shape": list(arr.shape),
            "rate_hz": rec.rate_hz, "state": rec.state, "dtype": "<f4"}


def _read_rec(dirpath: str, entry: dict) -> Recording:
    path = os.path.join(dirpath, entry["file"])
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"{path}: expected {expected} bytes for shape "
                          f"{shape}, found {actual} (truncated at byte {actual})")
    arr = np.fromfile(path, dtype="<f4").reshape(shape)
    return Recording(arr.astype(np.float64), entry["rate_hz"], entry.get("state"))


def save_cohort(patients, path: str, spec: CohortSpec | None = None) -> None:
    """Write the cohort directory: cohort.json plus one subdirectory per
    patient holding float32 little-endian binaries and a JSON sidecar.
    `patients` may be any iterable, including the iter_patients generator."""
    os.makedirs(path, exist_ok=True)
    ids = []
    for p in patients:
        pdir = os.path.join(path, p.patient_id)
        os.makedirs(pdir, exist_ok=True)
        meta = {
            "patient": p.patient_id,
            "seed": p.seed,
            "num_sites": p.num_sites,
            "labels": p.labels.tolist(),
            "communities": p.communities.tolist(),
            "stim_sites": list(p.stim_sites),
            "recordings": {
                state: _write_rec(rec, os.path.join(pdir, f"{state}.f32"))
                for state, rec in p.states.items()
            },
        }
        meta["recordings"]["interictal"] = _write_rec(
            p.interictal, os.path.join(pdir, "interictal.f32"))
        meta["ccep"] = [
            _write_rec(rec, os.path.join(pdir, f"ccep_{q:02d}.f32"))
            for q, rec in enumerate(p.ccep)
        ]
        with open(os.path.join(pdir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        ids.append(p.patient_id)
    index = {
        "format": COHORT_MAGIC,
        "version": COHORT_VERSION,
        "spec": asdict(spec) if spec is not None else None,
        "patients": ids,
    }
    with open(os.path.join(path, "cohort.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def read_cohort_index(path: str) -> dict:
    index_path = os.path.join(path, "cohort.json")
    if not os.path.exists(index_path):
        raise FormatError(f"missing cohort index {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("format") != COHORT_MAGIC:
        raise FormatError(f"{index_path}: bad magic "
                          f"{index.get('format')!r}, expected {COHORT_MAGIC!r}")
    if index.get("version") != COHORT_VERSION:
        raise VersionError(f"{index_path}: unsupported version "
                           f"{index.get('version')}")
    return index


def load_patient_meta(path: str, patient_id: str) -> dict:
    meta_path = os.path.join(path, patient_id, "meta.json")
    if not os.path.exists(meta_path):
        raise FormatError(f"missing patient sidecar {meta_path}")
    with open(meta_path) as fh:
        return json.load(fh)


def load_patient(path: str, patient_id: str) -> SyntheticPatient:
    meta = load_patient_meta(path, patient_id)
    pdir = os.path.join(path, patient_id)
    p = SyntheticPatient(
        patient_id=meta["patient"], seed=meta["seed"],
        labels=np.asarray(meta["labels"], dtype=np.int64),
        communities=np.asarray(meta["communities"], dtype=np.int64),
        stim_sites=list(meta.get("stim_sites", [])))
    for state, entry in meta["recordings"].items():
        rec = _read_rec(pdir, entry)
        if state == "interictal":
            p.interictal = rec
        else:
            p.states[state] = rec
    p.ccep = [_read_rec(pdir, entry) for entry in meta["ccep"]]
    return p


def load_cohort(path: str):
    """Load every patient eagerly. Returns (patients, spec_dict_or_None).
    Default-sized cohorts are multi-GB; iterate patient ids and use
    load_patient when memory matters."""
    index = read_cohort_index(path)
    patients = [load_patient(path, pid) for pid in index["patients"]]
    return patients, index["spec"]
