"""Recording ingest, segmentation, manifests, and synthetic corpus generation.

A corpus is a set of labeled multichannel recordings plus a manifest that
assigns each (subject, session) to the train/validation/test split. Splits
are chronological per subject: the first 60% of sessions (rounded half-up)
train, the remainder validate/test.
"""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ValidationError
from .fileio import check_magic, read_array, read_str, write_array, write_str

RECORDING_MAGIC = b"MCSR1"

TRAIN, VALIDATION, TEST = "train", "validation", "test"


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class Recording:
    """One continuous multichannel recording with subject/session/task labels."""

    subject_id: str
    session_id: str
    task_id: str
    sample_rate_hz: float
    samples: np.ndarray  # (C, T), channel-major

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise ValidationError("recording needs a (channels, samples) matrix")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError(
                f"recording {self.subject_id}/{self.session_id}/{self.task_id} "
                "contains non-finite samples"
            )

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class Segment:
    """A fixed-length slice of a recording; the unit fed to feature extraction."""

    subject_id: str
    session_id: str
    task_id: str
    sample_rate_hz: float
    samples: np.ndarray  # (C, L)
    duration_s: float
    start_sample: int = 0

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.task_id, self.start_sample)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


def segment_recording(rec: Recording, duration_s: float) -> list[Segment]:
    """Cut a recording into consecutive non-overlapping segments.

    The trailing remainder shorter than one segment is discarded, never
    padded. A recording shorter than one segment yields an empty list.
    """
    if duration_s <= 0:
        raise ValidationError("segment duration must be positive")
    seg_len = round_half_up(duration_s * rec.sample_rate_hz)
    n_whole = rec.n_samples // seg_len
    out = []
    for i in range(n_whole):
        sl = rec.samples[:, i * seg_len : (i + 1) * seg_len].copy()
        out.append(
            Segment(
                subject_id=rec.subject_id,
                session_id=rec.session_id,
                task_id=rec.task_id,
                sample_rate_hz=rec.sample_rate_hz,
                samples=sl,
                duration_s=duration_s,
                start_sample=i * seg_len,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestRow:
    subject_id: str
    session_id: str
    task_id: str
    path: str


@dataclass
class Manifest:
    """Recording inventory plus the chronological per-subject session split.

    Sessions are listed in chronological order per subject; the split puts
    the first ``round_half_up(0.6 * n_sessions)`` sessions in train. Of the
    held-out sessions, 20% (rounded half-up, capped so at least one test
    session survives) become validation sessions; the rest are test. For
    subjects left without a validation session the downstream corpus builder
    carves validation segments out of the held-out data by segment count.
    """

    rows: list[ManifestRow]
    split: dict = field(default_factory=dict)  # (subject, session) -> split name

    def __post_init__(self):
        seen = set()
        sessions_of: dict[str, list[str]] = {}
        for row in self.rows:
            triple = (row.subject_id, row.session_id, row.path)
            if triple in seen:
                raise ValidationError(
                    f"duplicate manifest entry {row.subject_id}/{row.session_id} -> {row.path}"
                )
            seen.add(triple)
            sess = sessions_of.setdefault(row.subject_id, [])
            if row.session_id not in sess:
                sess.append(row.session_id)
        for subject, sessions in sessions_of.items():
            if len(sessions) < 2:
                raise ValidationError(
                    f"subject {subject!r} has a single session; at least 2 required"
                )
        if not self.split:
            self.split = {}
            for subject, sessions in sessions_of.items():
                n = len(sessions)
                n_train = round_half_up(0.6 * n)
                heldout = sessions[n_train:]
                n_val = min(round_half_up(0.2 * len(heldout)), len(heldout) - 1)
                for s in sessions[:n_train]:
                    self.split[(subject, s)] = TRAIN
                for s in heldout[:n_val]:
                    self.split[(subject, s)] = VALIDATION
                for s in heldout[n_val:]:
                    self.split[(subject, s)] = TEST

    @property
    def subjects(self) -> list[str]:
        out = []
        for row in self.rows:
            if row.subject_id not in out:
                out.append(row.subject_id)
        return out

    def sessions_of(self, subject: str) -> list[str]:
        out = []
        for row in self.rows:
            if row.subject_id == subject and row.session_id not in out:
                out.append(row.session_id)
        return out

    def split_of(self, subject: str, session: str) -> str:
        return self.split[(subject, session)]


MANIFEST_HEADER = ["subject_id", "session_id", "task_id", "path"]


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValidationError(
                f"{path}: expected header {','.join(MANIFEST_HEADER)!r}, got {header!r}"
            )
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != 4 or any(not v.strip() for v in fields):
                raise ValidationError(f"{path}: malformed manifest row at line {lineno}")
            rows.append(ManifestRow(*[v.strip() for v in fields]))
    return Manifest(rows)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for row in manifest.rows:
            writer.writerow([row.subject_id, row.session_id, row.task_id, row.path])


# ---------------------------------------------------------------------------
# Recording files: magic "MCSR1", u32 C, u64 T, f64 sample_rate,
# three length-prefixed UTF-8 labels, payload f32 (C, T) channel-major.


def write_recording(rec: Recording, path) -> None:
    with open(path, "wb") as f:
        f.write(RECORDING_MAGIC)
        f.write(struct.pack("<IQd", rec.n_channels, rec.n_samples, rec.sample_rate_hz))
        write_str(f, rec.subject_id)
        write_str(f, rec.session_id)
        write_str(f, rec.task_id)
        write_array(f, rec.samples, "f4")


def read_recording(path) -> Recording:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"recording not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, RECORDING_MAGIC, str(path))
        c, t, rate = struct.unpack("<IQd", f.read(20))
        subject, session, task = read_str(f), read_str(f), read_str(f)
        samples = read_array(f, (c, t), "f4")
    return Recording(subject, session, task, rate, samples)


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class SynthSpec:
    """Knobs for the synthetic corpus generator.

    Each subject gets a persistent spectral signature (per-channel gains and
    a few boosted oscillators with jittered center frequencies), each session
    a broadband gain and spectral tilt, each task a band gain shared across
    subjects, all on top of a 1/f noise floor. Setting ``subject_sd`` to zero
    removes the identity signal entirely.
    """

    n_subjects: int = 10
    n_sessions: int = 3
    n_tasks: int = 2
    duration_s: float = 240.0  # per (subject, session, task) recording
    n_channels: int = 9
    sample_rate_hz: float = 250.0
    subject_sd: float = 1.0
    session_sd: float = 0.25
    task_sd: float = 0.25
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.n_subjects < 2 or self.n_sessions < 2 or self.n_tasks < 1:
            raise ValidationError("need n_subjects >= 2, n_sessions >= 2, n_tasks >= 1")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0 or self.n_channels < 1:
            raise ValidationError("duration, sample rate and channel count must be positive")
        for name in ("subject_sd", "session_sd", "task_sd", "noise_sd"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


# Base oscillator grid shared by all subjects; subject effects perturb it.
_BASE_FREQS_HZ = np.array([7.0, 12.0, 18.0, 24.0])
_BASE_AMPS = np.array([1.0, 0.85, 0.7, 0.6])
_BAND_LOW, _BAND_HIGH = 4.0, 28.0


def _pink_noise(rng, n_channels, n_samples, tilt, rate):
    """1/f-shaped noise per channel with an optional session log-tilt."""
    white = rng.standard_normal((n_channels, n_samples))
    spec = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / rate)
    shape = 1.0 / np.sqrt(np.maximum(freqs, 0.5))
    shape *= np.exp(tilt * _tilt_coord(freqs))
    shape[0] = 0.0
    out = np.fft.irfft(spec * shape, n=n_samples, axis=1)
    # normalize so unit noise_sd is comparable to unit oscillator amplitude
    out /= max(np.sqrt(np.mean(out**2)), 1e-12)
    return out


def _tilt_coord(freq_hz):
    mid = 0.5 * (_BAND_LOW + _BAND_HIGH)
    half = 0.5 * (_BAND_HIGH - _BAND_LOW)
    return (freq_hz - mid) / half


def _slow_envelope(rng, n_samples, rate, cutoff_hz=0.5):
    """Positive slowly-varying amplitude envelope with unit mean."""
    white = rng.standard_normal(n_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / rate)
    spec[freqs > cutoff_hz] = 0.0
    slow = np.fft.irfft(spec, n=n_samples)
    sd = np.std(slow)
    if sd > 0:
        slow = slow / sd
    return np.exp(0.35 * slow - 0.5 * 0.35**2)


def generate_synthetic_corpus(spec: SynthSpec, seed: int):
    """Generate a labeled multichannel corpus with controllable structure.

    Returns (recordings, manifest). Deterministic: identical (spec, seed)
    yield bit-identical sample matrices. Draw order is fixed, so the same
    subject signature is produced regardless of later knobs.
    """
    rng = np.random.default_rng(seed)
    n_samples = round_half_up(spec.duration_s * spec.sample_rate_hz)
    n_osc = len(_BASE_FREQS_HZ)
    c = spec.n_channels

    # task band perturbations, shared across subjects
    task_bands, task_gains = [], []
    for _ in range(spec.n_tasks):
        center = rng.uniform(_BAND_LOW + 2.0, _BAND_HIGH - 2.0)
        halfwidth = rng.uniform(2.0, 6.0)
        task_bands.append((center - halfwidth, center + halfwidth))
        task_gains.append(rng.normal(0.0, spec.task_sd))

    # Per-subject signatures. The strong component is channel-topographic:
    # per-channel amplitude profiles normalized to unit mean power across
    # channels, so the channel-pooled spectrum stays nearly subject-neutral
    # and identity lives in where energy sits. A weaker per-oscillator shape
    # term and a small frequency jitter remain visible to pooled models.
    def _power_normalized(log_gains):
        profile = np.exp(log_gains)
        return profile / np.sqrt(np.mean(profile**2, axis=-1, keepdims=True))

    chan_profile = np.ones((spec.n_subjects, c))
    osc_profile = np.ones((spec.n_subjects, n_osc, c))
    shape_gain = np.zeros((spec.n_subjects, n_osc))
    freq_offset = np.zeros((spec.n_subjects, n_osc))
    for s in range(spec.n_subjects):
        chan_profile[s] = _power_normalized(rng.normal(0.0, spec.subject_sd, size=c))
        n_boost = int(rng.integers(2, n_osc + 1))
        boosted = rng.choice(n_osc, size=n_boost, replace=False)
        osc_profile[s, boosted] = _power_normalized(
            rng.normal(0.0, spec.subject_sd, size=(n_boost, c))
        )
        shape_gain[s, boosted] = rng.normal(0.0, 0.25 * spec.subject_sd, size=n_boost)
        freq_offset[s, boosted] = np.clip(
            rng.normal(0.0, 0.12 * spec.subject_sd, size=n_boost), -1.0, 1.0
        )

    # per-(subject, session) broadband gain and tilt
    sess_gain = rng.normal(0.0, spec.session_sd, size=(spec.n_subjects, spec.n_sessions))
    sess_tilt = rng.normal(0.0, spec.session_sd, size=(spec.n_subjects, spec.n_sessions))

    t_grid = np.arange(n_samples) / spec.sample_rate_hz
    recordings, rows = [], []
    for s in range(spec.n_subjects):
        subject = f"s{s + 1:02d}"
        for sess in range(spec.n_sessions):
            session = f"sess{sess + 1}"
            for task in range(spec.n_tasks):
                task_id = f"task{task + 1:02d}"
                x = spec.noise_sd * np.exp(sess_gain[s, sess]) * _pink_noise(
                    rng, c, n_samples, sess_tilt[s, sess], spec.sample_rate_hz
                )
                for j in range(n_osc):
                    f_j = _BASE_FREQS_HZ[j] + freq_offset[s, j]
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    env = _slow_envelope(rng, n_samples, spec.sample_rate_hz)
                    carrier = env * np.sin(2.0 * np.pi * f_j * t_grid + phase)
                    in_band = task_bands[task][0] <= f_j <= task_bands[task][1]
                    log_amp = (
                        shape_gain[s, j]
                        + sess_gain[s, sess]
                        + sess_tilt[s, sess] * _tilt_coord(f_j)
                        + (task_gains[task] if in_band else 0.0)
                    )
                    amp = _BASE_AMPS[j] * chan_profile[s] * osc_profile[s, j] * np.exp(log_amp)
                    x += np.outer(amp, carrier)
                rec = Recording(subject, session, task_id, spec.sample_rate_hz, x)
                recordings.append(rec)
                rows.append(
                    ManifestRow(subject, session, task_id, f"{subject}_{session}_{task_id}.mcsr")
                )
    return recordings, Manifest(rows)
