"""Diagonal-covariance GMM machinery.

Universal background model (UBM) training with k-means++ initialization and
EM, MAP mean adaptation to person-specific models, and per-frame
log-likelihood-ratio scoring against the UBM.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ValidationError
from .features import FeatureSegment
from .fileio import (
    array_fingerprint,
    check_magic,
    read_array,
    read_provenance,
    read_str,
    write_array,
    write_provenance,
    write_str,
)

log = logging.getLogger(__name__)

GMM_MAGIC = b"GMMM1"
ADAPTED_MAGIC = b"GMMA1"

VARIANCE_FLOOR_FACTOR = 1e-4  # times the global per-dimension variance


@dataclass
class Ubm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    variance_floor: np.ndarray = None  # (d,)
    seed: int = 0
    n_iters_run: int = 0
    n_reseeded: int = 0
    log_likelihoods: list = field(default_factory=list)  # per-frame LL per iteration

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.variance_floor is None:
            self.variance_floor = np.full(self.means.shape[1], 1e-12)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValidationError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValidationError("variances must be positive")

    @property
    def n_mixtures(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def fingerprint(self) -> str:
        return array_fingerprint(self.weights, self.means, self.variances)


@dataclass
class AdaptedModel:
    """UBM with means shifted toward one subject's data."""

    ubm: Ubm
    means: np.ndarray  # (K, d)
    subject_id: str = ""

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.shape != self.ubm.means.shape:
            raise ValidationError("adapted means must match the UBM shape")


def log_densities(means, variances, weights, frames) -> np.ndarray:
    """log(w_k N(x; m_k, diag v_k)) for all frames, shape (n, K).

    Uses the quadratic expansion so memory stays O(n*K) rather than O(n*K*d).
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    inv = 1.0 / variances  # (K, d)
    const = (
        np.log(weights)
        - 0.5 * (np.log(2.0 * np.pi) * means.shape[1] + np.sum(np.log(variances), axis=1))
        - 0.5 * np.sum(means**2 * inv, axis=1)
    )  # (K,)
    quad = frames**2 @ inv.T  # (n, K)
    cross = frames @ (means * inv).T  # (n, K)
    return const + cross - 0.5 * quad


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def posteriors_matrix(ubm: Ubm, frames) -> np.ndarray:
    """Mixture responsibilities P(k | x) for each frame, shape (n, K)."""
    logd = log_densities(ubm.means, ubm.variances, ubm.weights, frames)
    return np.exp(logd - _logsumexp(logd, axis=1)[:, None])


def posteriors(ubm: Ubm, frame) -> np.ndarray:
    return posteriors_matrix(ubm, np.atleast_2d(frame))[0]


def frame_log_likelihoods(ubm_like, frames) -> np.ndarray:
    """Per-frame total log-likelihood under a UBM or adapted model."""
    if isinstance(ubm_like, AdaptedModel):
        means, variances, weights = ubm_like.means, ubm_like.ubm.variances, ubm_like.ubm.weights
    else:
        means, variances, weights = ubm_like.means, ubm_like.variances, ubm_like.weights
    return _logsumexp(log_densities(means, variances, weights, frames), axis=1)


def _kmeans_plus_plus(frames, k, rng):
    n = frames.shape[0]
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[rng.integers(n)]
    d2 = np.sum((frames - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[i] = frames[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((frames - centers[i]) ** 2, axis=1))
    return centers


def _assign(frames, centers):
    # argmin over squared distances without materializing (n, K, d)
    d2 = (
        np.sum(frames**2, axis=1)[:, None]
        - 2.0 * frames @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def train_ubm(frames, n_mixtures: int, max_iters: int = 50, tol: float = 1e-4, seed: int = 0) -> Ubm:
    """Train a diagonal-covariance UBM by k-means++ initialization and EM.

    Stops when the per-frame log-likelihood improves by less than ``tol``
    or after ``max_iters`` EM iterations. Mixtures that empty out are
    re-seeded from the highest-variance mixture and counted.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n, d = frames.shape
    if n_mixtures < 1:
        raise ValidationError("need at least one mixture")
    if n < 10 * n_mixtures:
        raise ValidationError(
            f"need at least {10 * n_mixtures} frames for {n_mixtures} mixtures, got {n}"
        )
    rng = np.random.default_rng(seed)
    floor = VARIANCE_FLOOR_FACTOR * np.maximum(frames.var(axis=0), 1e-300)

    centers = _kmeans_plus_plus(frames, n_mixtures, rng)
    for _ in range(10):
        labels = _assign(frames, centers)
        for k in range(n_mixtures):
            sel = labels == k
            if np.any(sel):
                centers[k] = frames[sel].mean(axis=0)

    labels = _assign(frames, centers)
    weights = np.empty(n_mixtures)
    variances = np.empty((n_mixtures, d))
    for k in range(n_mixtures):
        sel = labels == k
        weights[k] = max(sel.sum(), 1.0)
        variances[k] = frames[sel].var(axis=0) if sel.sum() > 1 else frames.var(axis=0)
    weights /= weights.sum()
    variances = np.maximum(variances, floor)
    means = centers

    ll_history = []
    n_reseeded = 0
    iters_run = 0
    for iteration in range(max_iters):
        logd = log_densities(means, variances, weights, frames)
        log_norm = _logsumexp(logd, axis=1)
        ll = float(np.mean(log_norm))
        resp = np.exp(logd - log_norm[:, None])  # (n, K)

        counts = resp.sum(axis=0)  # (K,)
        empty = np.flatnonzero(counts < 1e-8)
        for k in empty:
            donor = int(np.argmax(variances.sum(axis=1)))
            means[k] = means[donor] + rng.standard_normal(d) * np.sqrt(variances[donor])
            variances[k] = variances[donor]
            weights[[k, donor]] = weights[donor] / 2.0
            counts[k] = 1e-8
            n_reseeded += 1
        if len(empty):
            log.warning("re-seeded %d empty mixture(s) at iteration %d", len(empty), iteration)

        means = (resp.T @ frames) / counts[:, None]
        sq = (resp.T @ frames**2) / counts[:, None]
        variances = np.maximum(sq - means**2, floor)
        weights = counts / counts.sum()

        ll_history.append(ll)
        iters_run = iteration + 1
        if iteration > 0 and ll - ll_history[-2] < tol:
            break

    return Ubm(
        weights=weights,
        means=means,
        variances=variances,
        variance_floor=floor,
        seed=seed,
        n_iters_run=iters_run,
        n_reseeded=n_reseeded,
        log_likelihoods=ll_history,
    )


def map_adapt(ubm: Ubm, frames, relevance: float = 16.0, subject_id: str = "") -> AdaptedModel:
    """Means-only MAP adaptation with a relevance factor.

    m_hat_k = (n_k x_bar_k + r m_k) / (n_k + r), n_k the soft count and
    x_bar_k the posterior-weighted frame mean.
    """
    if relevance < 0:
        raise ValidationError("relevance factor must be non-negative")
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    resp = posteriors_matrix(ubm, frames)
    counts = resp.sum(axis=0)  # (K,)
    weighted = resp.T @ frames  # (K, d)
    denom = counts + relevance
    adapted = ubm.means.copy()
    ok = denom > 0
    adapted[ok] = (weighted[ok] + relevance * ubm.means[ok]) / denom[ok, None]
    return AdaptedModel(ubm=ubm, means=adapted, subject_id=subject_id)


def llr_score(adapted: AdaptedModel, feat: FeatureSegment) -> float:
    """Mean per-frame log-likelihood ratio of adapted model vs its UBM."""
    if feat.n_bins != adapted.ubm.dim:
        raise ArtifactError(
            f"feature dimension {feat.n_bins} does not match model dimension {adapted.ubm.dim}"
        )
    frames = feat.frames_matrix()
    return float(np.mean(frame_log_likelihoods(adapted, frames) - frame_log_likelihoods(adapted.ubm, frames)))


# ---------------------------------------------------------------------------
# Model files


def write_ubm(ubm: Ubm, path, config_hash: str = "") -> None:
    with open(path, "wb") as f:
        f.write(GMM_MAGIC)
        f.write(struct.pack("<II", ubm.n_mixtures, ubm.dim))
        write_array(f, ubm.weights, "f8")
        write_array(f, ubm.means, "f8")
        write_array(f, ubm.variances, "f8")
        write_provenance(
            f,
            "GMMM1",
            seed=ubm.seed,
            iters=ubm.n_iters_run,
            floor=list(ubm.variance_floor),
            config_hash=config_hash,
        )


def read_ubm(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"UBM model not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, GMM_MAGIC, str(path))
        k, d = struct.unpack("<II", f.read(8))
        weights = read_array(f, (k,), "f8")
        means = read_array(f, (k, d), "f8")
        variances = read_array(f, (k, d), "f8")
        prov = read_provenance(f)
    ubm = Ubm(
        weights=weights,
        means=means,
        variances=variances,
        variance_floor=np.asarray(prov.get("floor", [1e-12] * d)),
        seed=prov.get("seed", 0),
        n_iters_run=prov.get("iters", 0),
    )
    return ubm, prov


def write_adapted_models(models, path, config_hash: str = "") -> None:
    models = list(models)
    if not models:
        raise ValidationError("no adapted models to write")
    ubm = models[0].ubm
    with open(path, "wb") as f:
        f.write(ADAPTED_MAGIC)
        f.write(struct.pack("<III", len(models), ubm.n_mixtures, ubm.dim))
        for model in models:
            write_str(f, model.subject_id)
            write_array(f, model.means, "f8")
        write_provenance(f, "GMMA1", ubm_fingerprint=ubm.fingerprint(), config_hash=config_hash)


def read_adapted_models(path, ubm: Ubm):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"adapted models not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, ADAPTED_MAGIC, str(path))
        n_models, k, d = struct.unpack("<III", f.read(12))
        if (k, d) != (ubm.n_mixtures, ubm.dim):
            raise ArtifactError("adapted models were trained on a different UBM shape")
        models = []
        for _ in range(n_models):
            subject = read_str(f)
            means = read_array(f, (k, d), "f8")
            models.append(AdaptedModel(ubm=ubm, means=means, subject_id=subject))
        prov = read_provenance(f)
    if prov.get("ubm_fingerprint") not in ("", None, ubm.fingerprint()):
        raise ArtifactError("adapted models do not match the supplied UBM (fingerprint mismatch)")
    return models, prov
