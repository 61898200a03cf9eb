import numpy as np
import pytest
from scipy.linalg import eigh, qr

from eegid.backend import (
    Embedding,
    IVECTOR,
    IXVECTOR,
    XVECTOR,
    cosine_score,
    enroll,
    fit_lda,
    fuse_ix,
    read_embeddings_csv,
    read_lda,
    write_embeddings_csv,
    write_lda,
)
from eegid.errors import ValidationError


def emb(v, subject="s01", kind=IVECTOR, session="sess1", task="task01", start=0):
    return Embedding(kind, np.asarray(v, float), subject, session, task, start)


def labeled_cloud(rng, n_classes=4, per_class=30, dim=6, spread=4.0):
    out = []
    for i in range(n_classes):
        center = rng.standard_normal(dim) * spread
        for _ in range(per_class):
            out.append(emb(center + rng.standard_normal(dim), subject=f"s{i:02d}"))
    return out


class TestFitLda:
    def test_two_classes_on_a_line(self, rng):
        # both clusters scatter along the same line; the Fisher direction
        # must recover that line
        direction = np.array([1.0, 2.0, -1.0])
        direction /= np.linalg.norm(direction)
        points = []
        for sign, subject in ((1.0, "a"), (-1.0, "b")):
            for _ in range(100):
                offset = sign * 3 + 0.3 * rng.standard_normal()
                points.append(emb(offset * direction, subject=subject))
        lda = fit_lda(points, 1)
        got = lda.projection[:, 0] / np.linalg.norm(lda.projection[:, 0])
        assert abs(got @ direction) > 0.999

    def test_rank_bound_enforced(self, rng):
        cloud = labeled_cloud(rng, n_classes=3)
        with pytest.raises(ValidationError, match="meaningful"):
            fit_lda(cloud, 3)
        assert fit_lda(cloud, 2).out_dim == 2

    def test_matches_dense_eigensolver_oracle(self, rng):
        cloud = labeled_cloud(rng, n_classes=4, per_class=25, dim=5)
        lda = fit_lda(cloud, 3)

        vectors = np.stack([e.v for e in cloud])
        labels = [e.subject_id for e in cloud]
        overall = vectors.mean(axis=0)
        p = vectors.shape[1]
        sw = np.zeros((p, p))
        sb = np.zeros((p, p))
        for cls in sorted(set(labels)):
            rows = vectors[[i for i, l in enumerate(labels) if l == cls]]
            mu = rows.mean(axis=0)
            sw += (rows - mu).T @ (rows - mu)
            sb += len(rows) * np.outer(mu - overall, mu - overall)
        sw += 1e-6 * np.trace(sw) / p * np.eye(p)
        vals, vecs = eigh(sb, sw)
        expected = vecs[:, np.argsort(vals)[::-1][:3]]
        for j in range(3):
            a, b = lda.projection[:, j], expected[:, j]
            sign = np.sign(a @ b) or 1.0
            np.testing.assert_allclose(a, sign * b, atol=1e-8)

    def test_single_class_rejected(self, rng):
        with pytest.raises(ValidationError):
            fit_lda([emb(rng.standard_normal(3)) for _ in range(5)], 1)

    def test_projection_shape(self, rng):
        lda = fit_lda(labeled_cloud(rng, n_classes=5, dim=8), 4)
        assert lda.projection.shape == (8, 4)
        assert lda.project(np.ones(8)).shape == (4,)


class TestEnroll:
    def test_single_segment_reference_is_that_embedding(self, rng):
        e = emb(rng.standard_normal(4))
        np.testing.assert_array_equal(enroll([e]).v, e.v)

    def test_duplicated_set_same_reference(self, rng):
        e1, e2 = emb(rng.standard_normal(4)), emb(rng.standard_normal(4))
        a = enroll([e1, e2])
        b = enroll([e1, e2, e1, e2])
        np.testing.assert_allclose(a.v, b.v, atol=1e-15)

    def test_mean_of_embeddings(self, rng):
        es = [emb(rng.standard_normal(3)) for _ in range(5)]
        np.testing.assert_allclose(enroll(es).v, np.mean([e.v for e in es], axis=0), atol=1e-15)

    def test_mixed_subject_rejected(self, rng):
        with pytest.raises(ValidationError, match="mixes"):
            enroll([emb(np.ones(2), subject="a"), emb(np.ones(2), subject="b")])

    def test_references_separate_subjects(self, rng):
        cloud = labeled_cloud(rng, n_classes=3, per_class=20, dim=5)
        refs = {}
        for subject in ("s00", "s01", "s02"):
            refs[subject] = enroll([e for e in cloud if e.subject_id == subject][:10])
        held = {s: [e for e in cloud if e.subject_id == s][10:] for s in refs}
        for subject, held_out in held.items():
            own = np.mean([cosine_score(refs[subject], e) for e in held_out])
            other = np.mean(
                [cosine_score(refs[o], e) for o in refs if o != subject for e in held_out]
            )
            assert own > other


class TestCosine:
    def test_identical_vectors(self, rng):
        v = rng.standard_normal(6)
        assert cosine_score(emb(v), emb(v)) == pytest.approx(1.0)

    def test_orthogonal_vectors(self):
        assert cosine_score(emb([1.0, 0.0]), emb([0.0, 2.0])) == pytest.approx(0.0)

    def test_scale_invariance_and_symmetry(self, rng):
        a, b = emb(rng.standard_normal(5)), emb(rng.standard_normal(5))
        s = cosine_score(a, b)
        assert cosine_score(b, a) == pytest.approx(s, abs=1e-12)
        assert cosine_score(emb(3.7 * a.v), emb(0.2 * b.v)) == pytest.approx(s, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValidationError, match="zero-norm"):
            cosine_score(emb([0.0, 0.0]), emb([1.0, 0.0]))


class TestFuseIx:
    def test_lengths_add(self, rng):
        iv = emb(rng.standard_normal(160), kind=IVECTOR)
        xv = emb(rng.standard_normal(160), kind=XVECTOR)
        fused = fuse_ix(iv, xv)
        assert fused.kind == IXVECTOR
        assert len(fused.v) == 320

    def test_parts_are_unit_normalized(self, rng):
        iv = emb(1000.0 * rng.standard_normal(4), kind=IVECTOR)
        xv = emb(0.001 * rng.standard_normal(6), kind=XVECTOR)
        fused = fuse_ix(iv, xv)
        assert np.linalg.norm(fused.v[:4]) == pytest.approx(1.0)
        assert np.linalg.norm(fused.v[4:]) == pytest.approx(1.0)

    def test_zero_part_passes_through(self, rng):
        iv = emb(rng.standard_normal(3), kind=IVECTOR)
        xv = emb(np.zeros(3), kind=XVECTOR)
        fused = fuse_ix(iv, xv)
        np.testing.assert_array_equal(fused.v[3:], 0.0)

    def test_label_mismatch_rejected(self, rng):
        iv = emb(rng.standard_normal(3), kind=IVECTOR, session="sess1")
        xv = emb(rng.standard_normal(3), kind=XVECTOR, session="sess2")
        with pytest.raises(ValidationError, match="labels"):
            fuse_ix(iv, xv)


class TestScoringInvariances:
    def test_argmax_invariant_to_test_rescaling(self, rng):
        refs = [emb(rng.standard_normal(5), subject=f"s{i}") for i in range(4)]
        test = emb(rng.standard_normal(5))
        scores = [cosine_score(r, test) for r in refs]
        scaled = [cosine_score(r, emb(17.0 * test.v)) for r in refs]
        assert np.argmax(scores) == np.argmax(scaled)
        np.testing.assert_allclose(scores, scaled, atol=1e-12)

    def test_lda_scoring_invariant_to_orthogonal_prerotation(self, rng):
        cloud = labeled_cloud(rng, n_classes=4, per_class=20, dim=6)
        q_mat, _ = qr(rng.standard_normal((6, 6)))
        rotated = [e.with_vector(e.v @ q_mat) for e in cloud]

        lda_a = fit_lda(cloud, 3)
        lda_b = fit_lda(rotated, 3)
        pa = [e.with_vector(lda_a.project(e.v)) for e in cloud[:12]]
        pb = [e.with_vector(lda_b.project(e.v)) for e in rotated[:12]]
        for i in range(12):
            for j in range(i + 1, 12):
                sa = cosine_score(pa[i], pa[j])
                sb = cosine_score(pb[i], pb[j])
                assert sa == pytest.approx(sb, abs=1e-8)


class TestPersistence:
    def test_lda_round_trip(self, tmp_path, rng):
        lda = fit_lda(labeled_cloud(rng), 3)
        write_lda(lda, tmp_path / "l.ldax", config_hash="01ab")
        back, prov = read_lda(tmp_path / "l.ldax")
        np.testing.assert_array_equal(back.projection, lda.projection)
        assert back.classes == lda.classes
        assert prov["config_hash"] == "01ab"

    def test_embeddings_csv_round_trip(self, tmp_path, rng):
        es = [
            emb(rng.standard_normal(4), subject=f"s{i}", start=i * 100, kind=XVECTOR)
            for i in range(5)
        ]
        write_embeddings_csv(es, tmp_path / "e.csv")
        back = read_embeddings_csv(tmp_path / "e.csv")
        for a, b in zip(es, back):
            assert a.key == b.key
            assert a.kind == b.kind
            np.testing.assert_array_equal(a.v, b.v)
