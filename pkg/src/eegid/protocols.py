"""Evaluation protocols: session-disjoint identification, leave-task-out
(cases 1 and 2), leave-subject-out (cases 1 and 2), channel subsets, and
test-segment length sweeps.

Every run re-checks split hygiene: subspace training must never see the
exact segments (or, in the case-2 protocols, the tasks/subjects) reserved
for testing. Violations raise HygieneError and fail the run.
"""

import logging

import numpy as np

from .config import PipelineConfig
from .dataio import round_half_up
from .errors import HygieneError, ValidationError
from .evaluation import evaluate_table
from .pipeline import Corpus, FeatureCorpus, build_feature_corpus, canonical_system, make_system

log = logging.getLogger(__name__)

PROTOCOL_NAMES = (
    "session-disjoint",
    "leave-task-out",
    "leave-subject-out",
    "channel-subsets",
    "segment-length",
)


def assert_hygiene(system, test_feats, forbidden_tasks=(), forbidden_subjects=(), context=""):
    """Verify a fitted system never saw the test segments or forbidden data."""
    train_keys = system.training_keys
    overlap = train_keys & {f.key for f in test_feats}
    if overlap:
        raise HygieneError(f"{context}: {len(overlap)} test segment(s) leaked into training")
    for key in train_keys:
        _, _, task, _ = key
        if task in forbidden_tasks:
            raise HygieneError(f"{context}: task {task!r} leaked into subspace training")
        subject = key[0]
        if subject in forbidden_subjects:
            raise HygieneError(f"{context}: subject {subject!r} leaked into subspace training")


def _run_systems(system_names, fc: FeatureCorpus, cfg, seed, protocol_name,
                 enroll_feats=None, test_feats=None, forbidden_tasks=(), forbidden_subjects=()):
    enroll_feats = enroll_feats if enroll_feats is not None else fc.train
    test_feats = test_feats if test_feats is not None else fc.test
    if not test_feats:
        raise ValidationError(f"{protocol_name}: no test segments under this split")
    reports = []
    for name in system_names:
        system = make_system(name, cfg)
        system.fit(fc.train, fc.validation, seed=seed)
        assert_hygiene(system, test_feats, forbidden_tasks, forbidden_subjects, protocol_name)
        system.enroll_subjects(enroll_feats)
        table = system.score_table(test_feats)
        reports.append(evaluate_table(table, protocol_name, system.name, seed))
        log.info("%s / %s: acc=%.3f eer=%.3f", protocol_name, system.name, reports[-1].rank1, reports[-1].eer)
    return reports


def run_session_disjoint(systems, corpus: Corpus, cfg: PipelineConfig, seed: int = 0):
    fc = build_feature_corpus(corpus, cfg)
    return _run_systems(systems, fc, cfg, seed, "session-disjoint")


def run_leave_task_out(systems, corpus: Corpus, cfg: PipelineConfig, seed: int = 0, cases=(1, 2)):
    """Hold one task out of enrollment (case 1) or out of all subspace
    training (case 2); test only on that task's held-out segments."""
    fc = build_feature_corpus(corpus, cfg)
    if len(fc.tasks) < 2:
        raise ValidationError("leave-task-out needs at least 2 tasks")
    reports = []
    for task in fc.tasks:
        test_feats = [f for f in fc.test if f.task_id == task]
        if not test_feats:
            continue
        enroll_feats = [f for f in fc.train if f.task_id != task]
        if 1 in cases:
            for name in systems:
                system = make_system(name, cfg)
                system.fit(fc.train, fc.validation, seed=seed)
                assert_hygiene(system, test_feats, context=f"leave-task-out/case1/{task}")
                system.enroll_subjects(enroll_feats)
                table = system.score_table(test_feats)
                reports.append(
                    evaluate_table(table, f"leave-task-out/case1/{task}", system.name, seed)
                )
        if 2 in cases:
            train2 = [f for f in fc.train if f.task_id != task]
            val2 = [f for f in fc.validation if f.task_id != task]
            for name in systems:
                system = make_system(name, cfg)
                system.fit(train2, val2, seed=seed)
                assert_hygiene(
                    system, test_feats, forbidden_tasks=(task,),
                    context=f"leave-task-out/case2/{task}",
                )
                system.enroll_subjects(enroll_feats)
                table = system.score_table(test_feats)
                reports.append(
                    evaluate_table(table, f"leave-task-out/case2/{task}", system.name, seed)
                )
    if not reports:
        raise ValidationError("leave-task-out: no task had test segments")
    return reports


def run_leave_subject_out(systems, corpus: Corpus, cfg: PipelineConfig, seed: int = 0,
                          holdout_fraction: float = 0.2, cases=(1, 2)):
    """Evaluate a random 20% of subjects, with the subspace trained on all
    subjects (case 1) or only on the remaining 80% (case 2)."""
    fc = build_feature_corpus(corpus, cfg)
    rng = np.random.default_rng(seed)
    n_held = max(1, round_half_up(holdout_fraction * len(fc.subjects)))
    if n_held >= len(fc.subjects):
        raise ValidationError("leave-subject-out would hold out every subject")
    held = sorted(rng.choice(fc.subjects, size=n_held, replace=False).tolist())
    held_set = set(held)

    enroll_feats = [f for f in fc.train if f.subject_id in held_set]
    test_feats = [f for f in fc.test if f.subject_id in held_set]
    if not enroll_feats or not test_feats:
        raise ValidationError("held-out subjects have no enrollment or test segments")
    if len(held) < 2:
        raise ValidationError("need at least 2 held-out subjects for closed-set scoring")

    reports = []
    if 1 in cases:
        for name in systems:
            system = make_system(name, cfg)
            system.fit(fc.train, fc.validation, seed=seed)
            assert_hygiene(system, test_feats, context="leave-subject-out/case1")
            system.enroll_subjects(enroll_feats)
            table = system.score_table(test_feats)
            reports.append(evaluate_table(table, "leave-subject-out/case1", system.name, seed))
    if 2 in cases:
        train2 = [f for f in fc.train if f.subject_id not in held_set]
        val2 = [f for f in fc.validation if f.subject_id not in held_set]
        for name in systems:
            system = make_system(name, cfg)
            system.fit(train2, val2, seed=seed)
            assert_hygiene(
                system, test_feats, forbidden_subjects=held_set, context="leave-subject-out/case2"
            )
            system.enroll_subjects(enroll_feats)
            table = system.score_table(test_feats)
            reports.append(evaluate_table(table, "leave-subject-out/case2", system.name, seed))
    return reports


def run_channel_subsets(systems, corpus: Corpus, cfg: PipelineConfig, subsets, seed: int = 0):
    """Session-disjoint evaluation repeated over channel index subsets."""
    if not subsets:
        raise ValidationError("no channel subsets given")
    reports = []
    for subset in subsets:
        fc = build_feature_corpus(corpus, cfg, channels=tuple(subset))
        label = "channels-" + ",".join(str(c) for c in subset)
        reports.extend(_run_systems(systems, fc, cfg, seed, label))
    return reports


def run_segment_length(systems, corpus: Corpus, cfg: PipelineConfig, durations=(15.0, 30.0, 60.0),
                       seed: int = 0):
    """Train at the configured segment length, test at re-cut lengths.

    The pooling stages absorb the frame count, so models trained at one
    length score segments of any length without retraining.
    """
    fc_train = build_feature_corpus(corpus, cfg)
    fitted = []
    for name in system_order(systems):
        system = make_system(name, cfg)
        system.fit(fc_train.train, fc_train.validation, seed=seed)
        system.enroll_subjects(fc_train.train)
        fitted.append(system)
    reports = []
    for duration in durations:
        fc_test = build_feature_corpus(corpus, cfg, duration_s=duration)
        test_feats = fc_test.test
        if not test_feats:
            raise ValidationError(f"no test segments at duration {duration}s")
        for system in fitted:
            assert_hygiene(system, test_feats, context=f"segment-length/{duration:g}s")
            table = system.score_table(test_feats)
            reports.append(
                evaluate_table(table, f"segment-length/{duration:g}s", system.name, seed)
            )
    return reports


def system_order(systems):
    return [canonical_system(s) for s in systems]


def run_protocol(protocol: str, systems, corpus: Corpus, cfg: PipelineConfig, seed: int = 0, **options):
    """Dispatch to a named protocol; returns a list of EvalReports."""
    systems = system_order(systems)
    if protocol == "session-disjoint":
        return run_session_disjoint(systems, corpus, cfg, seed)
    if protocol == "leave-task-out":
        return run_leave_task_out(systems, corpus, cfg, seed, **options)
    if protocol == "leave-subject-out":
        return run_leave_subject_out(systems, corpus, cfg, seed, **options)
    if protocol == "channel-subsets":
        return run_channel_subsets(systems, corpus, cfg, options.pop("subsets"), seed, **options)
    if protocol == "segment-length":
        return run_segment_length(systems, corpus, cfg, seed=seed, **options)
    raise ValidationError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOL_NAMES)}")
