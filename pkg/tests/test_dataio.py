import numpy as np
import pytest

from eegid.dataio import (
    Manifest,
    ManifestRow,
    Recording,
    SynthSpec,
    generate_synthetic_corpus,
    load_manifest,
    read_recording,
    round_half_up,
    save_manifest,
    segment_recording,
    write_recording,
)
from eegid.errors import ValidationError

from conftest import small_synth_spec


def make_recording(n_samples, n_channels=2, rate=250.0, rng=None):
    rng = rng or np.random.default_rng(0)
    return Recording("s01", "sess1", "task01", rate, rng.standard_normal((n_channels, n_samples)))


class TestSegmentation:
    def test_exact_division(self):
        segs = segment_recording(make_recording(11250), 15.0)
        assert len(segs) == 3
        assert all(s.samples.shape == (2, 3750) for s in segs)

    def test_remainder_dropped(self):
        segs = segment_recording(make_recording(11300), 15.0)
        assert len(segs) == 3
        assert segs[-1].start_sample == 2 * 3750

    def test_shorter_than_one_segment_gives_empty_list(self):
        assert segment_recording(make_recording(1000), 15.0) == []

    def test_nonpositive_duration_rejected(self):
        with pytest.raises(ValidationError):
            segment_recording(make_recording(1000), 0.0)

    def test_partition_prefix_property(self):
        rec = make_recording(10007)
        segs = segment_recording(rec, 3.0)
        glued = np.concatenate([s.samples for s in segs], axis=1)
        n = (10007 // 750) * 750
        np.testing.assert_array_equal(glued, rec.samples[:, :n])

    def test_labels_inherited(self):
        seg = segment_recording(make_recording(4000), 15.0)[0]
        assert (seg.subject_id, seg.session_id, seg.task_id) == ("s01", "sess1", "task01")


class TestRecordingValidation:
    def test_nonfinite_samples_rejected(self):
        bad = np.ones((2, 10))
        bad[1, 3] = np.nan
        with pytest.raises(ValidationError):
            Recording("a", "b", "c", 250.0, bad)

    def test_zero_rate_rejected(self):
        with pytest.raises(ValidationError):
            Recording("a", "b", "c", 0.0, np.ones((1, 10)))


def manifest_rows(n_sessions, subject="s01"):
    return [
        ManifestRow(subject, f"sess{i + 1}", "task01", f"{subject}_{i + 1}.mcsr")
        for i in range(n_sessions)
    ]


class TestManifestSplit:
    def test_round_half_up(self):
        assert round_half_up(1.2) == 1
        assert round_half_up(1.5) == 2
        assert round_half_up(1.8) == 2
        assert round_half_up(3.0) == 3

    def test_two_sessions_one_train(self):
        man = Manifest(manifest_rows(2))
        assert man.split_of("s01", "sess1") == "train"
        assert man.split_of("s01", "sess2") == "test"

    def test_five_sessions(self):
        man = Manifest(manifest_rows(5))
        splits = [man.split_of("s01", f"sess{i + 1}") for i in range(5)]
        assert splits == ["train", "train", "train", "test", "test"]

    def test_many_sessions_gets_validation_session(self):
        man = Manifest(manifest_rows(10))
        splits = [man.split_of("s01", f"sess{i + 1}") for i in range(10)]
        assert splits[:6] == ["train"] * 6
        assert splits[6] == "validation"
        assert splits[7:] == ["test"] * 3

    def test_split_safety(self):
        man = Manifest(manifest_rows(7) + manifest_rows(3, "s02"))
        seen = {}
        for (subject, session), split in man.split.items():
            assert seen.setdefault((subject, session), split) == split

    def test_single_session_subject_rejected_by_name(self):
        rows = manifest_rows(2) + [ManifestRow("s99", "sess1", "task01", "x.mcsr")]
        with pytest.raises(ValidationError, match="s99"):
            Manifest(rows)

    def test_duplicate_row_rejected(self):
        rows = manifest_rows(2) + [manifest_rows(2)[0]]
        with pytest.raises(ValidationError, match="duplicate"):
            Manifest(rows)


class TestManifestFile:
    def test_round_trip(self, tmp_path):
        man = Manifest(manifest_rows(3))
        save_manifest(man, tmp_path / "m.csv")
        back = load_manifest(tmp_path / "m.csv")
        assert back.rows == man.rows
        assert back.split == man.split

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("subject_id,session_id,task_id,path\ns01,sess1,task01,a.mcsr\ns01,sess2\n")
        with pytest.raises(ValidationError, match="line 3"):
            load_manifest(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b,c,d\n")
        with pytest.raises(ValidationError, match="header"):
            load_manifest(path)


class TestRecordingFile:
    def test_round_trip_preserves_f32_payload(self, tmp_path):
        rec = make_recording(1000, n_channels=3)
        write_recording(rec, tmp_path / "r.mcsr")
        back = read_recording(tmp_path / "r.mcsr")
        assert back.subject_id == rec.subject_id
        assert back.sample_rate_hz == rec.sample_rate_hz
        np.testing.assert_array_equal(back.samples, rec.samples.astype(np.float32))

    def test_rewrite_is_byte_identical(self, tmp_path):
        rec = make_recording(500)
        write_recording(rec, tmp_path / "a.mcsr")
        write_recording(rec, tmp_path / "b.mcsr")
        assert (tmp_path / "a.mcsr").read_bytes() == (tmp_path / "b.mcsr").read_bytes()


class TestSynthCorpus:
    def test_deterministic(self):
        spec = small_synth_spec()
        recs1, man1 = generate_synthetic_corpus(spec, seed=7)
        recs2, man2 = generate_synthetic_corpus(spec, seed=7)
        assert man1.rows == man2.rows
        for a, b in zip(recs1, recs2):
            np.testing.assert_array_equal(a.samples, b.samples)

    def test_serialized_determinism(self, tmp_path):
        spec = small_synth_spec()
        for name in ("a", "b"):
            recs, _ = generate_synthetic_corpus(spec, seed=3)
            write_recording(recs[0], tmp_path / f"{name}.mcsr")
        assert (tmp_path / "a.mcsr").read_bytes() == (tmp_path / "b.mcsr").read_bytes()

    def test_seed_changes_output(self):
        spec = small_synth_spec()
        recs1, _ = generate_synthetic_corpus(spec, seed=1)
        recs2, _ = generate_synthetic_corpus(spec, seed=2)
        assert not np.array_equal(recs1[0].samples, recs2[0].samples)

    def test_zero_subject_sd_makes_subjects_interchangeable(self):
        spec = small_synth_spec(subject_sd=0.0)
        recs, _ = generate_synthetic_corpus(spec, seed=0)
        # same session/task: per-channel power should match across subjects
        # far more closely than subject_sd=1 corpora
        a = recs[0].samples.var(axis=1)
        b = recs[4].samples.var(axis=1)
        assert np.all(np.abs(np.log(a / b)) < 1.0)

    def test_counts_and_labels(self):
        spec = small_synth_spec()
        recs, man = generate_synthetic_corpus(spec, seed=0)
        assert len(recs) == spec.n_subjects * spec.n_sessions * spec.n_tasks
        assert len(man.subjects) == spec.n_subjects
        assert recs[0].n_channels == spec.n_channels

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValidationError):
            SynthSpec(n_subjects=1)
        with pytest.raises(ValidationError):
            SynthSpec(duration_s=0.0)
        with pytest.raises(ValidationError):
            SynthSpec(subject_sd=-0.1)

    def test_zero_sds_allowed(self):
        generate_synthetic_corpus(
            small_synth_spec(subject_sd=0.0, session_sd=0.0, task_sd=0.0), seed=0
        )
