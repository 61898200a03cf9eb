"""Total-variability subspace modeling over UBM statistics.

Two statistics modes: "baseline" pools frame posteriors over all channels
(supervector length K*d); "modified" keeps one statistics block per
(mixture, channel) pair (length K*C*d), so channel topography survives into
the subspace. Also provides the early-concatenation and score-fusion
comparison variants for channel handling.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ArtifactError, ValidationError
from .features import FeatureSegment
from .gmm import Ubm, posteriors_matrix
from .fileio import (
    check_magic,
    read_array,
    read_provenance,
    read_str,
    write_array,
    write_provenance,
    write_str,
)

log = logging.getLogger(__name__)

TV_MAGIC = b"TVMX1"

BASELINE, MODIFIED = "baseline", "modified"


@dataclass
class SuffStats:
    """Zeroth/first-order UBM alignment statistics for one segment.

    ``zeroth`` has length K (baseline) or K*C (modified, mixture-major);
    ``first`` is the centered supervector of length K*d or K*C*d with the
    d-sized block for (k, c) at offset (k*C + c)*d.
    """

    mode: str
    zeroth: np.ndarray
    first: np.ndarray
    n_mixtures: int
    n_channels: int  # channels represented in the stats (1 for baseline)
    dim: int
    subject_id: str = ""
    session_id: str = ""
    task_id: str = ""
    start_sample: int = 0

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.task_id, self.start_sample)


def accumulate_stats(ubm: Ubm, feat: FeatureSegment, mode: str = MODIFIED) -> SuffStats:
    """Accumulate Baum-Welch statistics for a segment against the UBM."""
    if mode not in (BASELINE, MODIFIED):
        raise ValidationError(f"unknown statistics mode {mode!r}")
    if feat.n_bins != ubm.dim:
        raise ArtifactError(
            f"feature dimension {feat.n_bins} does not match UBM dimension {ubm.dim}"
        )
    c, n, d = feat.features.shape
    resp = posteriors_matrix(ubm, feat.frames_matrix()).reshape(c, n, ubm.n_mixtures)
    if mode == BASELINE:
        zeroth = resp.sum(axis=(0, 1))  # (K,)
        first = np.einsum("cnk,cnd->kd", resp, feat.features)
        first -= zeroth[:, None] * ubm.means
        n_channels = 1
    else:
        zeroth = resp.sum(axis=1).T.copy()  # (K, C)
        first = np.einsum("cnk,cnd->kcd", resp, feat.features)
        first -= zeroth[:, :, None] * ubm.means[:, None, :]
        zeroth = zeroth.ravel()
        n_channels = c
    return SuffStats(
        mode=mode,
        zeroth=zeroth,
        first=first.ravel(),
        n_mixtures=ubm.n_mixtures,
        n_channels=n_channels,
        dim=d,
        subject_id=feat.subject_id,
        session_id=feat.session_id,
        task_id=feat.task_id,
        start_sample=feat.start_sample,
    )


def merge_stats(stats_list) -> SuffStats:
    """Sum statistics over segments (e.g. pooled enrollment)."""
    stats_list = list(stats_list)
    head = stats_list[0]
    zeroth = head.zeroth.copy()
    first = head.first.copy()
    for s in stats_list[1:]:
        if s.mode != head.mode or s.zeroth.shape != head.zeroth.shape:
            raise ValidationError("cannot merge statistics of mismatched modes/shapes")
        zeroth += s.zeroth
        first += s.first
    return SuffStats(
        mode=head.mode,
        zeroth=zeroth,
        first=first,
        n_mixtures=head.n_mixtures,
        n_channels=head.n_channels,
        dim=head.dim,
        subject_id=head.subject_id,
    )


@dataclass
class TotalVariability:
    """Low-rank subspace mapping latent vectors to supervector offsets."""

    mode: str
    matrix: np.ndarray  # (D, R)
    sigma: np.ndarray  # (D,) UBM variances block-replicated over channels
    n_mixtures: int
    n_channels: int
    dim: int
    ubm_fingerprint: str = ""
    seed: int = 0
    objective: list = field(default_factory=list)  # mean per-segment E-step objective

    @property
    def rank(self) -> int:
        return self.matrix.shape[1]

    @property
    def supervector_dim(self) -> int:
        return self.matrix.shape[0]

    def block_grams(self) -> np.ndarray:
        """Per-block R x R Grams of the variance-normalized subspace.

        The posterior precision of any segment is I + sum_b zeroth_b G_b,
        so caching these makes extraction cheap. The model is immutable
        after training, which keeps the cache valid.
        """
        if not hasattr(self, "_grams") or self._grams is None:
            self._grams = _block_grams(self.matrix, self.sigma, self.dim)
        return self._grams


def _block_grams(matrix, sigma, dim) -> np.ndarray:
    u = matrix / np.sqrt(sigma)[:, None]
    blocks = u.reshape(-1, dim, matrix.shape[1])
    return blocks.transpose(0, 2, 1) @ blocks  # (B, R, R)


@dataclass
class IVector:
    w: np.ndarray  # (R,)
    subject_id: str = ""
    session_id: str = ""
    task_id: str = ""
    start_sample: int = 0

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.task_id, self.start_sample)


def replicate_sigma(ubm: Ubm, mode: str, n_channels: int) -> np.ndarray:
    """Supervector-space variances: UBM variances repeated per channel block."""
    if mode == BASELINE:
        return ubm.variances.ravel().copy()
    return np.repeat(ubm.variances, n_channels, axis=0).ravel()


def extract_ivector(tv: TotalVariability, stats: SuffStats) -> IVector:
    """Posterior-mean latent vector for one segment's statistics.

    Solves (I + T' S^-1 N T) w = T' S^-1 F through an R x R symmetric
    positive-definite system; the supervector-sized matrices are never
    formed.
    """
    if stats.mode != tv.mode:
        raise ValidationError(f"statistics mode {stats.mode!r} does not match subspace {tv.mode!r}")
    if stats.first.shape[0] != tv.supervector_dim:
        raise ArtifactError(
            f"statistics length {stats.first.shape[0]} does not match subspace {tv.supervector_dim}"
        )
    a = np.eye(tv.rank) + np.tensordot(stats.zeroth, tv.block_grams(), axes=1)
    b = tv.matrix.T @ (stats.first / tv.sigma)
    try:
        w = cho_solve(cho_factor(a, lower=True, check_finite=False), b, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"posterior precision is not positive definite: {exc}") from exc
    return IVector(
        w=w,
        subject_id=stats.subject_id,
        session_id=stats.session_id,
        task_id=stats.task_id,
        start_sample=stats.start_sample,
    )


def train_tmatrix(
    ubm: Ubm,
    stats_list,
    rank: int,
    n_iters: int = 10,
    seed: int = 0,
) -> TotalVariability:
    """EM estimation of the total-variability matrix from per-segment stats.

    E-step: per segment, posterior precision L = I + T' S^-1 N T, posterior
    mean E[w] = L^-1 T' S^-1 F and second moment E[ww'] = L^-1 + E[w]E[w]'.
    M-step: each d-sized row block (one per mixture or mixture-channel) is
    solved independently from the accumulated moments.
    """
    stats_list = list(stats_list)
    if not stats_list:
        raise ValidationError("no statistics provided for subspace training")
    if n_iters < 1:
        raise ValidationError("need at least one EM iteration")
    mode = stats_list[0].mode
    n_channels = stats_list[0].n_channels
    sigma = replicate_sigma(ubm, mode, n_channels)
    d_super = sigma.shape[0]
    if rank < 1:
        raise ValidationError("subspace rank must be at least 1")
    if len(stats_list) < rank:
        log.warning(
            "training a rank-%d subspace from only %d segments", rank, len(stats_list)
        )
    n_blocks = stats_list[0].zeroth.shape[0]
    dim = stats_list[0].dim

    rng = np.random.default_rng(seed)
    t = rng.standard_normal((d_super, rank)) * (0.01 * np.sqrt(sigma))[:, None]

    firsts = np.stack([s.first for s in stats_list])  # (S, D)
    zeroths = np.stack([s.zeroth for s in stats_list])  # (S, B)
    firsts_over_sigma = firsts / sigma

    objective = []
    eye = np.eye(rank)
    for _ in range(n_iters):
        grams = _block_grams(t, sigma, dim)  # (B, R, R)
        precisions = eye + np.tensordot(zeroths, grams, axes=1)  # (S, R, R)
        b_all = firsts_over_sigma @ t  # T' S^-1 F for every segment, (S, R)
        try:
            chol = np.linalg.cholesky(precisions)
        except np.linalg.LinAlgError as exc:
            raise ValidationError(f"posterior precision is not positive definite: {exc}") from exc
        mean_w = np.linalg.solve(precisions, b_all[:, :, None])[:, :, 0]  # (S, R)
        cov_w = np.linalg.inv(precisions)
        moments = cov_w + mean_w[:, :, None] * mean_w[:, None, :]  # (S, R, R)
        logdets = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        objective.append(float(np.mean(0.5 * (np.sum(mean_w * b_all, axis=1) - logdets))))

        acc_cross = firsts.T @ mean_w  # (D, R)
        acc_moment = np.tensordot(zeroths.T, moments, axes=1)  # (B, R, R)
        rhs = acc_cross.reshape(n_blocks, dim, rank).transpose(0, 2, 1)  # (B, R, d)
        try:
            solved = np.linalg.solve(acc_moment, rhs)  # (B, R, d)
        except np.linalg.LinAlgError:
            log.warning("singular M-step system, regularizing with 1e-8 I")
            solved = np.linalg.solve(acc_moment + 1e-8 * eye, rhs)
        t = solved.transpose(0, 2, 1).reshape(d_super, rank)

    return TotalVariability(
        mode=mode,
        matrix=t,
        sigma=sigma,
        n_mixtures=ubm.n_mixtures,
        n_channels=n_channels,
        dim=dim,
        ubm_fingerprint=ubm.fingerprint(),
        seed=seed,
        objective=objective,
    )


# ---------------------------------------------------------------------------
# Channel-handling comparison variants


def variant_feature_concat(feat: FeatureSegment) -> FeatureSegment:
    """Early fusion: stack the per-channel frame vectors into one channel."""
    c, n, d = feat.features.shape
    merged = feat.features.transpose(1, 0, 2).reshape(1, n, c * d)
    return FeatureSegment(
        subject_id=feat.subject_id,
        session_id=feat.session_id,
        task_id=feat.task_id,
        features=merged,
        frame_len_ms=feat.frame_len_ms,
        band_hz=feat.band_hz,
        start_sample=feat.start_sample,
    )


def variant_score_fusion(per_channel_scores) -> np.ndarray:
    """Late fusion: unweighted mean of per-channel score vectors."""
    scores = np.atleast_2d(np.asarray(per_channel_scores, dtype=np.float64))
    if not np.all(np.isfinite(scores)):
        raise ValidationError("per-channel scores contain non-finite values")
    return scores.mean(axis=0)


# ---------------------------------------------------------------------------
# Model file: "TVMX1", mode flag, u32 K/C/d/R, f64 T row-major, f64 sigma,
# UBM fingerprint hash.


def write_tmatrix(tv: TotalVariability, path, config_hash: str = "") -> None:
    with open(path, "wb") as f:
        f.write(TV_MAGIC)
        f.write(struct.pack("<B", 1 if tv.mode == MODIFIED else 0))
        f.write(struct.pack("<IIII", tv.n_mixtures, tv.n_channels, tv.dim, tv.rank))
        write_array(f, tv.matrix, "f8")
        write_array(f, tv.sigma, "f8")
        write_str(f, tv.ubm_fingerprint)
        write_provenance(f, "TVMX1", seed=tv.seed, config_hash=config_hash)


def read_tmatrix(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"total-variability model not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, TV_MAGIC, str(path))
        (mode_flag,) = struct.unpack("<B", f.read(1))
        k, c, d, r = struct.unpack("<IIII", f.read(16))
        d_super = k * c * d if mode_flag else k * d
        matrix = read_array(f, (d_super, r), "f8")
        sigma = read_array(f, (d_super,), "f8")
        fingerprint = read_str(f)
        prov = read_provenance(f)
    tv = TotalVariability(
        mode=MODIFIED if mode_flag else BASELINE,
        matrix=matrix,
        sigma=sigma,
        n_mixtures=k,
        n_channels=c,
        dim=d,
        ubm_fingerprint=fingerprint,
        seed=prov.get("seed", 0),
    )
    return tv, prov


def check_tmatrix_ubm(tv: TotalVariability, ubm: Ubm) -> None:
    if tv.ubm_fingerprint and tv.ubm_fingerprint != ubm.fingerprint():
        raise ArtifactError(
            "total-variability model was trained on a different UBM (fingerprint mismatch)"
        )
