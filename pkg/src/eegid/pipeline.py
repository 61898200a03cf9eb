"""End-to-end system assembly: feature corpora, trainable recognition
systems, enrollment, and score-table construction.

Systems
-------
ubm-gmm             MAP-adapted GMMs scored by log-likelihood ratio
ivector-baseline    channel-pooled statistics subspace
ivector-modified    per-channel statistics subspace
ivector-concat      early fusion: frame vectors concatenated across channels
ivector-fusion      late fusion: one subspace per channel, scores averaged
xvector-baseline    pooled statistics-pooling network
xvector-modified    per-channel statistics-pooling network
ixvector            concatenated modified i-vector and x-vector embeddings
"""

from dataclasses import dataclass

import numpy as np

from . import backend, gmm, ivector, xvector
from .backend import Embedding
from .config import PipelineConfig
from .dataio import Manifest, Recording, TEST, TRAIN, VALIDATION, round_half_up, segment_recording
from .errors import ValidationError
from .evaluation import ScoreTable
from .features import FeatureSegment, compute_psd, fit_standardizer, standardize_features

SYSTEM_NAMES = (
    "ubm-gmm",
    "ivector-baseline",
    "ivector-modified",
    "ivector-concat",
    "ivector-fusion",
    "xvector-baseline",
    "xvector-modified",
    "ixvector",
)

SYSTEM_ALIASES = {
    "ubm": "ubm-gmm",
    "iv": "ivector-modified",
    "xv": "xvector-modified",
    "ix": "ixvector",
}


def canonical_system(name: str) -> str:
    name = SYSTEM_ALIASES.get(name, name)
    if name not in SYSTEM_NAMES:
        raise ValidationError(f"unknown system {name!r}; choose from {', '.join(SYSTEM_NAMES)}")
    return name


@dataclass
class Corpus:
    """Raw recordings plus their manifest."""

    recordings: list
    manifest: Manifest


@dataclass
class FeatureCorpus:
    """Feature segments with their train/validation/test assignment."""

    segments: list
    split_map: dict  # segment key -> split name
    subjects: list
    tasks: list

    def of_split(self, split, subject=None, task=None, exclude_task=None):
        out = []
        for seg in self.segments:
            if self.split_map[seg.key] != split:
                continue
            if subject is not None and seg.subject_id != subject:
                continue
            if task is not None and seg.task_id != task:
                continue
            if exclude_task is not None and seg.task_id == exclude_task:
                continue
            out.append(seg)
        return out

    @property
    def train(self):
        return self.of_split(TRAIN)

    @property
    def validation(self):
        return self.of_split(VALIDATION)

    @property
    def test(self):
        return self.of_split(TEST)


def slice_channels(feat: FeatureSegment, channels) -> FeatureSegment:
    return FeatureSegment(
        subject_id=feat.subject_id,
        session_id=feat.session_id,
        task_id=feat.task_id,
        features=feat.features[list(channels)],
        frame_len_ms=feat.frame_len_ms,
        band_hz=feat.band_hz,
        start_sample=feat.start_sample,
    )


def build_feature_corpus(
    corpus: Corpus,
    cfg: PipelineConfig,
    duration_s: float | None = None,
    channels=None,
) -> FeatureCorpus:
    """Segment, extract PSD features, and assign splits.

    Splits follow the manifest's session assignment. Subjects whose manifest
    gives them no validation session get the first 20% (by segment count at
    the configured training duration) of each held-out recording carved out
    as validation. The carve boundary is fixed at the training duration, so
    re-cutting the test data at other lengths keeps test material
    sample-disjoint from everything used in training: re-cut segments that
    straddle the boundary are dropped.
    """
    duration = duration_s if duration_s is not None else cfg.segment_duration_s
    channels = channels if channels is not None else cfg.channels
    manifest = corpus.manifest

    by_key: dict = {}
    for rec in corpus.recordings:
        by_key.setdefault((rec.subject_id, rec.session_id, rec.task_id), []).append(rec)

    carve_needed = {
        subject: not any(
            manifest.split_of(subject, s) == VALIDATION for s in manifest.sessions_of(subject)
        )
        for subject in manifest.subjects
    }

    segments, split_map, tasks = [], {}, []
    for row in manifest.rows:
        queue = by_key.get((row.subject_id, row.session_id, row.task_id))
        if not queue:
            raise ValidationError(
                f"manifest row {row.subject_id}/{row.session_id}/{row.task_id} has no recording"
            )
        rec = queue.pop(0)
        if channels is not None:
            bad = [c for c in channels if c < 0 or c >= rec.n_channels]
            if bad:
                raise ValidationError(
                    f"channel indices {bad} out of range for {rec.n_channels}-channel recording"
                )
            rec = Recording(
                rec.subject_id, rec.session_id, rec.task_id, rec.sample_rate_hz,
                rec.samples[list(channels)],
            )
        split = manifest.split_of(row.subject_id, row.session_id)
        if row.task_id not in tasks:
            tasks.append(row.task_id)

        boundary = 0
        if split == TEST and carve_needed[row.subject_id]:
            carve_len = round_half_up(cfg.segment_duration_s * rec.sample_rate_hz)
            n_at_carve = rec.n_samples // carve_len
            boundary = round_half_up(0.2 * n_at_carve) * carve_len

        for seg in segment_recording(rec, duration):
            start, end = seg.start_sample, seg.start_sample + seg.samples.shape[1]
            if boundary and end <= boundary:
                seg_split = VALIDATION
            elif boundary and start < boundary:
                continue  # straddles the carve boundary at a re-cut length
            else:
                seg_split = split
            feat = compute_psd(seg, cfg.frame_len_ms, (cfg.band_low_hz, cfg.band_high_hz))
            segments.append(feat)
            split_map[feat.key] = seg_split

    if cfg.normalize_features:
        train = [s for s in segments if split_map[s.key] == TRAIN]
        mean, scale = fit_standardizer(train)
        segments = standardize_features(segments, mean, scale)
        split_map = {s.key: split_map[s.key] for s in segments}

    subjects = sorted({s.subject_id for s in segments})
    return FeatureCorpus(segments, split_map, subjects, sorted(tasks))


def pooled_frames(feats) -> np.ndarray:
    return np.concatenate([f.frames_matrix() for f in feats], axis=0)


def _group_by_subject(feats) -> dict:
    groups: dict = {}
    for f in feats:
        groups.setdefault(f.subject_id, []).append(f)
    return groups


def _cosine_table(refs: dict, embeddings) -> ScoreTable:
    subjects = sorted(refs)
    scores = np.empty((len(embeddings), len(subjects)))
    for i, emb in enumerate(embeddings):
        for j, subject in enumerate(subjects):
            scores[i, j] = backend.cosine_score(refs[subject], emb)
    return ScoreTable(
        subjects=subjects,
        scores=scores,
        true_labels=[e.subject_id for e in embeddings],
        row_keys=[e.key for e in embeddings],
    )


class UbmGmmSystem:
    """Pooled-frame GMM baseline with MAP-adapted per-subject models."""

    name = "ubm-gmm"

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.ubm = None
        self.models = {}
        self.training_keys = set()

    def fit(self, train_feats, val_feats=None, seed: int = 0):
        self.training_keys = {f.key for f in train_feats}
        self.ubm = gmm.train_ubm(
            pooled_frames(train_feats),
            self.cfg.ubm_gmm_mixtures,
            max_iters=self.cfg.ubm_max_iters,
            tol=self.cfg.ubm_tol,
            seed=seed + 11,
        )
        return self

    def enroll_subjects(self, enroll_feats):
        self.models = {}
        for subject, feats in sorted(_group_by_subject(enroll_feats).items()):
            self.models[subject] = gmm.map_adapt(
                self.ubm, pooled_frames(feats), self.cfg.relevance_factor, subject_id=subject
            )

    def score_table(self, test_feats) -> ScoreTable:
        subjects = sorted(self.models)
        scores = np.empty((len(test_feats), len(subjects)))
        for i, feat in enumerate(test_feats):
            for j, subject in enumerate(subjects):
                scores[i, j] = gmm.llr_score(self.models[subject], feat)
        return ScoreTable(
            subjects=subjects,
            scores=scores,
            true_labels=[f.subject_id for f in test_feats],
            row_keys=[f.key for f in test_feats],
        )


class IvectorSystem:
    """Total-variability subspace system with an LDA/cosine back-end."""

    def __init__(self, cfg: PipelineConfig, stats_mode: str = ivector.MODIFIED, concat: bool = False):
        self.cfg = cfg
        self.stats_mode = stats_mode
        self.concat = concat
        self.name = (
            "ivector-concat" if concat
            else ("ivector-modified" if stats_mode == ivector.MODIFIED else "ivector-baseline")
        )
        self.ubm = None
        self.tv = None
        self.lda = None
        self.refs = {}
        self.training_keys = set()

    def _mixtures(self) -> int:
        if self.concat:
            return self.cfg.concat_ivector_mixtures
        if self.stats_mode == ivector.MODIFIED:
            return self.cfg.modified_ivector_mixtures
        return self.cfg.baseline_ivector_mixtures

    def _prepare(self, feat):
        return ivector.variant_feature_concat(feat) if self.concat else feat

    def fit(self, train_feats, val_feats=None, seed: int = 0):
        self.training_keys = {f.key for f in train_feats}
        prepared = [self._prepare(f) for f in train_feats]
        self.ubm = gmm.train_ubm(
            pooled_frames(prepared),
            self._mixtures(),
            max_iters=self.cfg.ubm_max_iters,
            tol=self.cfg.ubm_tol,
            seed=seed + 11,
        )
        stats = [ivector.accumulate_stats(self.ubm, f, self.stats_mode) for f in prepared]
        self.tv = ivector.train_tmatrix(
            self.ubm, stats, self.cfg.ivector_rank, self.cfg.tmatrix_iters, seed=seed + 23
        )
        raw = [self._raw_embedding(f) for f in train_feats]
        n_subjects = len({e.subject_id for e in raw})
        self.lda = backend.fit_lda(raw, self._lda_dim(len(raw[0].v), n_subjects))
        return self

    def _lda_dim(self, dim, n_subjects):
        if self.cfg.lda_dim is not None:
            return min(self.cfg.lda_dim, n_subjects - 1)
        return min(dim, n_subjects - 1)

    def _raw_embedding(self, feat) -> Embedding:
        stats = ivector.accumulate_stats(self.ubm, self._prepare(feat), self.stats_mode)
        iv = ivector.extract_ivector(self.tv, stats)
        return Embedding(
            kind=backend.IVECTOR,
            v=iv.w,
            subject_id=feat.subject_id,
            session_id=feat.session_id,
            task_id=feat.task_id,
            start_sample=feat.start_sample,
        )

    def embed(self, feat) -> Embedding:
        raw = self._raw_embedding(feat)
        return raw.with_vector(self.lda.project(raw.v))

    def enroll_subjects(self, enroll_feats):
        self.refs = {}
        for subject, feats in sorted(_group_by_subject(enroll_feats).items()):
            if self.cfg.enroll_mode == "pooled":
                merged = ivector.merge_stats(
                    [ivector.accumulate_stats(self.ubm, self._prepare(f), self.stats_mode) for f in feats]
                )
                iv = ivector.extract_ivector(self.tv, merged)
                self.refs[subject] = Embedding(
                    kind=backend.IVECTOR, v=self.lda.project(iv.w), subject_id=subject
                )
            else:
                self.refs[subject] = backend.enroll([self.embed(f) for f in feats])

    def score_table(self, test_feats) -> ScoreTable:
        return _cosine_table(self.refs, [self.embed(f) for f in test_feats])


class XvectorSystem:
    """Statistics-pooling network system with an LDA/cosine back-end."""

    def __init__(self, cfg: PipelineConfig, mode: str = xvector.MODIFIED):
        self.cfg = cfg
        self.mode = mode
        self.name = "xvector-modified" if mode == xvector.MODIFIED else "xvector-baseline"
        self.net = None
        self.lda = None
        self.refs = {}
        self.training_keys = set()

    def fit(self, train_feats, val_feats=None, seed: int = 0):
        val_feats = list(val_feats or [])
        self.training_keys = {f.key for f in train_feats} | {f.key for f in val_feats}
        subjects = sorted({f.subject_id for f in train_feats})
        net = xvector.init_net(
            self.mode,
            train_feats[0].n_bins,
            self.cfg.xvector_hidden1,
            self.cfg.xvector_hidden2,
            self.cfg.embedding_dim,
            subjects,
            train_feats[0].n_channels,
            seed=seed + 37,
        )
        train_cfg = xvector.TrainConfig(
            learning_rate=self.cfg.learning_rate,
            beta1=self.cfg.adam_beta1,
            beta2=self.cfg.adam_beta2,
            epsilon=self.cfg.adam_epsilon,
            batch_size=self.cfg.batch_size,
            epochs=self.cfg.epochs,
            patience=self.cfg.early_stop_patience,
            seed=seed + 41,
        )
        self.net = xvector.train(net, train_feats, val_feats, train_cfg)
        raw = [xvector.extract_xvector(self.net, f) for f in train_feats]
        self.lda = backend.fit_lda(raw, self._lda_dim(len(raw[0].v), len(subjects)))
        return self

    def _lda_dim(self, dim, n_subjects):
        if self.cfg.lda_dim is not None:
            return min(self.cfg.lda_dim, n_subjects - 1)
        return min(dim, n_subjects - 1)

    def embed(self, feat) -> Embedding:
        raw = xvector.extract_xvector(self.net, feat)
        return raw.with_vector(self.lda.project(raw.v))

    def enroll_subjects(self, enroll_feats):
        self.refs = {}
        for subject, feats in sorted(_group_by_subject(enroll_feats).items()):
            self.refs[subject] = backend.enroll([self.embed(f) for f in feats])

    def score_table(self, test_feats) -> ScoreTable:
        return _cosine_table(self.refs, [self.embed(f) for f in test_feats])


class IxvectorSystem:
    """Fusion of the modified i-vector and modified x-vector embeddings."""

    name = "ixvector"

    def __init__(self, cfg: PipelineConfig, iv: IvectorSystem = None, xv: XvectorSystem = None):
        self.cfg = cfg
        self.iv = iv or IvectorSystem(cfg, ivector.MODIFIED)
        self.xv = xv or XvectorSystem(cfg, xvector.MODIFIED)
        self.refs = {}

    @property
    def training_keys(self):
        return self.iv.training_keys | self.xv.training_keys

    def fit(self, train_feats, val_feats=None, seed: int = 0):
        if self.iv.tv is None:
            self.iv.fit(train_feats, val_feats, seed)
        if self.xv.net is None:
            self.xv.fit(train_feats, val_feats, seed)
        return self

    def embed(self, feat) -> Embedding:
        return backend.fuse_ix(self.iv.embed(feat), self.xv.embed(feat))

    def enroll_subjects(self, enroll_feats):
        self.refs = {}
        for subject, feats in sorted(_group_by_subject(enroll_feats).items()):
            self.refs[subject] = backend.enroll([self.embed(f) for f in feats])

    def score_table(self, test_feats) -> ScoreTable:
        return _cosine_table(self.refs, [self.embed(f) for f in test_feats])


class ChannelFusionIvectorSystem:
    """One baseline i-vector system per channel; scores fused by averaging."""

    name = "ivector-fusion"

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.per_channel = []
        self.training_keys = set()

    def fit(self, train_feats, val_feats=None, seed: int = 0):
        self.training_keys = {f.key for f in train_feats}
        n_channels = train_feats[0].n_channels
        self.per_channel = []
        for c in range(n_channels):
            sub = IvectorSystem(self.cfg, ivector.BASELINE)
            sub.fit([slice_channels(f, [c]) for f in train_feats], seed=seed + 100 * (c + 1))
            self.per_channel.append(sub)
        return self

    def enroll_subjects(self, enroll_feats):
        for c, sub in enumerate(self.per_channel):
            sub.enroll_subjects([slice_channels(f, [c]) for f in enroll_feats])

    def score_table(self, test_feats) -> ScoreTable:
        tables = [
            sub.score_table([slice_channels(f, [c]) for f in test_feats])
            for c, sub in enumerate(self.per_channel)
        ]
        stacked = np.stack([t.scores for t in tables])  # (C, n, S)
        fused = np.stack(
            [ivector.variant_score_fusion(stacked[:, i, :]) for i in range(stacked.shape[1])]
        )
        head = tables[0]
        return ScoreTable(head.subjects, fused, head.true_labels, head.row_keys)


def make_system(name: str, cfg: PipelineConfig):
    name = canonical_system(name)
    if name == "ubm-gmm":
        return UbmGmmSystem(cfg)
    if name == "ivector-baseline":
        return IvectorSystem(cfg, ivector.BASELINE)
    if name == "ivector-modified":
        return IvectorSystem(cfg, ivector.MODIFIED)
    if name == "ivector-concat":
        return IvectorSystem(cfg, ivector.BASELINE, concat=True)
    if name == "ivector-fusion":
        return ChannelFusionIvectorSystem(cfg)
    if name == "xvector-baseline":
        return XvectorSystem(cfg, xvector.BASELINE)
    if name == "xvector-modified":
        return XvectorSystem(cfg, xvector.MODIFIED)
    return IxvectorSystem(cfg)
