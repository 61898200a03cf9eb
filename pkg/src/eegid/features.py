"""Per-channel PSD spectrogram features.

Raw periodograms on short rectangular windows with no overlap and no log
compression. Frames are one-sided power spectra (interior bins doubled)
normalized so that a full-band frame sums to energy/L; only bins whose
center frequency falls inside the requested band are kept.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Segment, round_half_up
from .errors import ArtifactError, ValidationError
from .fileio import check_magic, read_array, read_str, write_array, write_str

FEATURE_MAGIC = b"MCFT1"


@dataclass
class FeatureSegment:
    """PSD spectrogram of one segment: (channels, frames, bins)."""

    subject_id: str
    session_id: str
    task_id: str
    features: np.ndarray  # (C, N, d)
    frame_len_ms: float
    band_hz: tuple
    start_sample: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValidationError("features must be a (channels, frames, bins) tensor")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.task_id, self.start_sample)

    @property
    def n_channels(self) -> int:
        return self.features.shape[0]

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]

    @property
    def n_bins(self) -> int:
        return self.features.shape[2]

    def frames_matrix(self) -> np.ndarray:
        """All frames pooled across channels, shape (C*N, d)."""
        c, n, d = self.features.shape
        return self.features.reshape(c * n, d)


def band_bin_freqs(frame_samples: int, sample_rate_hz: float, band_hz) -> np.ndarray:
    """Center frequencies of the DFT bins kept for a given band (inclusive)."""
    freqs = np.fft.rfftfreq(frame_samples, d=1.0 / sample_rate_hz)
    low, high = band_hz
    return freqs[(freqs >= low) & (freqs <= high)]


def compute_psd(seg: Segment, frame_len_ms: float, band_hz) -> FeatureSegment:
    """Raw PSD spectrogram of a segment.

    Rectangular window, no overlap; N = floor(L_segment / L_frame) frames.
    Bin values are |DFT|^2 scaled so that summing a full band recovers the
    frame energy divided by the frame length; interior bins carry the
    negative-frequency mirror (factor 2).
    """
    low, high = float(band_hz[0]), float(band_hz[1])
    nyquist = seg.sample_rate_hz / 2.0
    if not (0.0 < low < high <= nyquist):
        raise ValidationError(f"band ({low}, {high}) must satisfy 0 < low < high <= Nyquist")
    frame_samples = round_half_up(frame_len_ms / 1000.0 * seg.sample_rate_hz)
    if frame_samples < 2:
        raise ValidationError("frame length must cover at least 2 samples")
    if not np.all(np.isfinite(seg.samples)):
        raise ValidationError("segment contains non-finite samples")

    freqs = np.fft.rfftfreq(frame_samples, d=1.0 / seg.sample_rate_hz)
    mask = (freqs >= low) & (freqs <= high)
    if not np.any(mask):
        raise ValidationError(
            f"band ({low}, {high}) Hz contains no DFT bins at frame length {frame_samples}"
        )

    c, total = seg.samples.shape
    n_frames = total // frame_samples
    frames = seg.samples[:, : n_frames * frame_samples].reshape(c, n_frames, frame_samples)
    spectrum = np.fft.rfft(frames, axis=2)
    power = (spectrum.real**2 + spectrum.imag**2) / frame_samples**2
    scale = np.full(freqs.shape, 2.0)
    scale[0] = 1.0
    if frame_samples % 2 == 0:
        scale[-1] = 1.0
    power *= scale
    return FeatureSegment(
        subject_id=seg.subject_id,
        session_id=seg.session_id,
        task_id=seg.task_id,
        features=power[:, :, mask],
        frame_len_ms=frame_len_ms,
        band_hz=(low, high),
        start_sample=seg.start_sample,
    )


# ---------------------------------------------------------------------------
# Feature files: magic "MCFT1", u32 C/N/d, f64 frame_len_ms/band_low/band_high,
# labels (subject, session, task, u64 start sample), payload f32 (C, N, d).


def write_features(feat: FeatureSegment, path) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        c, n, d = feat.features.shape
        f.write(struct.pack("<IIIddd", c, n, d, feat.frame_len_ms, *feat.band_hz))
        write_str(f, feat.subject_id)
        write_str(f, feat.session_id)
        write_str(f, feat.task_id)
        f.write(struct.pack("<Q", feat.start_sample))
        write_array(f, feat.features, "f4")


def read_features(path) -> FeatureSegment:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"feature file not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, FEATURE_MAGIC, str(path))
        c, n, d, frame_ms, low, high = struct.unpack("<IIIddd", f.read(36))
        subject, session, task = read_str(f), read_str(f), read_str(f)
        (start,) = struct.unpack("<Q", f.read(8))
        values = read_array(f, (c, n, d), "f4")
    return FeatureSegment(subject, session, task, values, frame_ms, (low, high), start)


def standardize_features(feats, mean: np.ndarray, scale: np.ndarray):
    """Optional per-bin z-normalization, disabled by default in configs."""
    out = []
    for feat in feats:
        values = (feat.features - mean) / scale
        out.append(
            FeatureSegment(
                feat.subject_id,
                feat.session_id,
                feat.task_id,
                values,
                feat.frame_len_ms,
                feat.band_hz,
                feat.start_sample,
            )
        )
    return out


def fit_standardizer(feats):
    """Per-bin mean/scale over all frames of the given segments."""
    frames = np.concatenate([f.frames_matrix() for f in feats], axis=0)
    mean = frames.mean(axis=0)
    scale = frames.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale
