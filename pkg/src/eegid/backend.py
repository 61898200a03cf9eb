"""Scoring back-end: LDA projection, enrollment references, cosine scores,
and fusion of i-vector/x-vector embeddings into ix-vectors."""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh

from .errors import ArtifactError, ValidationError
from .fileio import check_magic, read_array, read_provenance, write_array, write_provenance

LDA_MAGIC = b"LDAX1"

IVECTOR, XVECTOR, IXVECTOR = "ivector", "xvector", "ixvector"


@dataclass
class Embedding:
    """Fixed-length vector representation of one segment (or a reference)."""

    kind: str
    v: np.ndarray
    subject_id: str = ""
    session_id: str = ""
    task_id: str = ""
    start_sample: int = 0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.v)):
            raise ValidationError("embedding contains non-finite values")

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.task_id, self.start_sample)

    def with_vector(self, v) -> "Embedding":
        return Embedding(self.kind, v, self.subject_id, self.session_id, self.task_id, self.start_sample)


@dataclass
class LdaModel:
    projection: np.ndarray  # (p, q), columns sorted by decreasing eigenvalue
    eigenvalues: np.ndarray
    class_means: np.ndarray  # (S, p), fitting provenance
    classes: list

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def project(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.in_dim:
            raise ArtifactError(
                f"vector dimension {v.shape[-1]} does not match LDA input {self.in_dim}"
            )
        return v @ self.projection


def fit_lda(embeddings, n_components: int | None = None) -> LdaModel:
    """Fisher discriminant directions from labeled embeddings.

    Solves the generalized eigenproblem of between-class vs within-class
    scatter; the within-class scatter is ridge-regularized. At most S-1
    informative directions exist for S classes.
    """
    vectors = np.stack([e.v for e in embeddings])
    labels = [e.subject_id for e in embeddings]
    classes = sorted(set(labels))
    n, p = vectors.shape
    s = len(classes)
    if s < 2:
        raise ValidationError("LDA needs at least 2 classes")
    if n_components is None:
        n_components = min(p, s - 1)
    if n_components > s - 1:
        raise ValidationError(
            f"requested {n_components} LDA directions but only {s - 1} are meaningful for {s} classes"
        )
    if n_components < 1:
        raise ValidationError("need at least one LDA direction")

    overall = vectors.mean(axis=0)
    sw = np.zeros((p, p))
    sb = np.zeros((p, p))
    class_means = np.zeros((s, p))
    for i, cls in enumerate(classes):
        rows = vectors[[j for j, lab in enumerate(labels) if lab == cls]]
        mu = rows.mean(axis=0)
        class_means[i] = mu
        centered = rows - mu
        sw += centered.T @ centered
        diff = mu - overall
        sb += len(rows) * np.outer(diff, diff)
    sw += (1e-6 * np.trace(sw) / p) * np.eye(p)

    eigvals, eigvecs = eigh(sb, sw)
    order = np.argsort(eigvals)[::-1][:n_components]
    # C-contiguous copy so in-memory and deserialized projections take the
    # same BLAS path (bit-exact scores after a round trip)
    return LdaModel(
        projection=np.ascontiguousarray(eigvecs[:, order]),
        eigenvalues=eigvals[order].copy(),
        class_means=class_means,
        classes=classes,
    )


def enroll(embeddings) -> Embedding:
    """Reference embedding for one subject: mean of its per-segment vectors."""
    embeddings = list(embeddings)
    if not embeddings:
        raise ValidationError("cannot enroll from zero embeddings")
    subjects = {e.subject_id for e in embeddings}
    if len(subjects) != 1:
        raise ValidationError(f"enrollment mixes subjects: {sorted(subjects)}")
    mean = np.mean(np.stack([e.v for e in embeddings]), axis=0)
    return Embedding(kind=embeddings[0].kind, v=mean, subject_id=embeddings[0].subject_id)


def cosine_score(reference: Embedding, test: Embedding) -> float:
    """Cosine similarity in [-1, 1]; rejects zero-norm vectors."""
    a, b = reference.v, test.v
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine score undefined for zero-norm vectors")
    return float(a @ b / (na * nb))


def fuse_ix(iv: Embedding, xv: Embedding) -> Embedding:
    """Concatenate i-vector and x-vector parts, each length-normalized.

    Without per-part normalization one part's norm would dominate the
    cosine; a zero-norm part is passed through unscaled (scoring will
    reject it later).
    """
    if iv.key != xv.key:
        raise ValidationError(f"cannot fuse embeddings with different labels: {iv.key} vs {xv.key}")

    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    return Embedding(
        kind=IXVECTOR,
        v=np.concatenate([unit(iv.v), unit(xv.v)]),
        subject_id=iv.subject_id,
        session_id=iv.session_id,
        task_id=iv.task_id,
        start_sample=iv.start_sample,
    )


# ---------------------------------------------------------------------------
# Persistence


def write_lda(lda: LdaModel, path, config_hash: str = "") -> None:
    with open(path, "wb") as f:
        f.write(LDA_MAGIC)
        f.write(struct.pack("<II", lda.in_dim, lda.out_dim))
        write_array(f, lda.projection, "f8")
        write_array(f, lda.eigenvalues, "f8")
        f.write(struct.pack("<I", len(lda.classes)))
        write_array(f, lda.class_means, "f8")
        names = "\n".join(lda.classes).encode("utf-8")
        f.write(struct.pack("<I", len(names)))
        f.write(names)
        write_provenance(f, "LDAX1", config_hash=config_hash)


def read_lda(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"LDA model not found: {path}")
    with open(path, "rb") as f:
        check_magic(f, LDA_MAGIC, str(path))
        p, q = struct.unpack("<II", f.read(8))
        projection = read_array(f, (p, q), "f8")
        eigenvalues = read_array(f, (q,), "f8")
        (s,) = struct.unpack("<I", f.read(4))
        class_means = read_array(f, (s, p), "f8")
        (nbytes,) = struct.unpack("<I", f.read(4))
        classes = f.read(nbytes).decode("utf-8").split("\n")
        prov = read_provenance(f)
    return LdaModel(projection, eigenvalues, class_means, classes), prov


EMBEDDING_HEADER = ["kind", "subject_id", "session_id", "task_id", "start_sample"]


def write_embeddings_csv(embeddings, path) -> None:
    embeddings = list(embeddings)
    if not embeddings:
        raise ValidationError("no embeddings to write")
    width = len(embeddings[0].v)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EMBEDDING_HEADER + [f"v{i}" for i in range(width)])
        for e in embeddings:
            writer.writerow(
                [e.kind, e.subject_id, e.session_id, e.task_id, e.start_sample]
                + [repr(float(x)) for x in e.v]
            )


def read_embeddings_csv(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"embeddings file not found: {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[: len(EMBEDDING_HEADER)] != EMBEDDING_HEADER:
            raise ValidationError(f"{path}: not an embeddings CSV")
        for fields in reader:
            kind, subject, session, task, start = fields[:5]
            v = np.array([float(x) for x in fields[5:]])
            out.append(Embedding(kind, v, subject, session, task, int(start)))
    return out
