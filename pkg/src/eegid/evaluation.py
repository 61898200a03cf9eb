"""Closed-set identification metrics: rank-1 accuracy and equal error rate."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ValidationError


@dataclass
class ScoreTable:
    """Scores of test segments (rows) against enrolled subjects (columns)."""

    subjects: list  # column order
    scores: np.ndarray  # (n_rows, n_subjects)
    true_labels: list  # per row
    row_keys: list = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if self.scores.shape[0] != len(self.true_labels):
            raise ValidationError("one true label per score row required")
        if self.scores.shape[1] != len(self.subjects):
            raise ValidationError("one column per enrolled subject required")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("score table contains non-finite entries")
        known = set(self.subjects)
        for label in self.true_labels:
            if label not in known:
                raise ValidationError(f"true label {label!r} is not an enrolled subject")

    @property
    def n_rows(self) -> int:
        return self.scores.shape[0]

    def target_mask(self) -> np.ndarray:
        col = {s: j for j, s in enumerate(self.subjects)}
        mask = np.zeros_like(self.scores, dtype=bool)
        for i, label in enumerate(self.true_labels):
            mask[i, col[label]] = True
        return mask


def rank1_accuracy(table: ScoreTable) -> float:
    """Fraction of rows whose best-scoring column is the true subject.

    Ties go to the lowest column index, so a tied true label only counts
    when it happens to be the tie winner.
    """
    if table.n_rows == 0:
        raise ValidationError("empty score table")
    col = {s: j for j, s in enumerate(table.subjects)}
    winners = np.argmax(table.scores, axis=1)
    correct = sum(int(winners[i] == col[label]) for i, label in enumerate(table.true_labels))
    return correct / table.n_rows


def eer_from_scores(targets, nontargets) -> float:
    """Equal error rate with linear interpolation at the FAR/FRR crossing.

    Thresholds sweep all distinct scores (accept when score >= threshold);
    the crossing between adjacent operating points is interpolated linearly.
    """
    targets = np.asarray(targets, dtype=np.float64).ravel()
    nontargets = np.asarray(nontargets, dtype=np.float64).ravel()
    if targets.size == 0 or nontargets.size == 0:
        raise ValidationError("EER needs at least one target and one non-target score")
    all_scores = np.concatenate([targets, nontargets])
    thresholds = np.unique(all_scores)
    if thresholds.size < 2:
        raise ValidationError("degenerate score table: all scores identical")

    t_sorted = np.sort(targets)
    n_sorted = np.sort(nontargets)
    # FRR(thr) = P(target < thr), FAR(thr) = P(nontarget >= thr)
    frr = np.searchsorted(t_sorted, thresholds, side="left") / targets.size
    far = 1.0 - np.searchsorted(n_sorted, thresholds, side="left") / nontargets.size
    # sentinel above the top score: everything rejected
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)

    # at the lowest threshold FAR = 1 and FRR = 0, so the first non-positive
    # gap marks the crossing
    diff = far - frr
    i = int(np.argmax(diff <= 0.0))
    if diff[i] == 0.0:
        return float(far[i])
    d_prev, d_here = diff[i - 1], diff[i]
    t = d_prev / (d_prev - d_here)
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


def eer(table: ScoreTable) -> float:
    """Closed-set EER: the true-label entry of each row is a target, every
    other entry a non-target."""
    mask = table.target_mask()
    return eer_from_scores(table.scores[mask], table.scores[~mask])


@dataclass
class EvalReport:
    protocol: str
    system: str
    rank1: float
    eer: float
    n_trials: int
    n_subjects: int
    seed: int = 0
    table: ScoreTable = None  # kept for figures; not serialized

    def row(self):
        return [
            self.protocol,
            self.system,
            f"{self.rank1:.6f}",
            f"{self.eer:.6f}",
            str(self.n_trials),
            str(self.n_subjects),
            str(self.seed),
        ]


REPORT_HEADER = ["protocol", "system", "accuracy", "eer", "n_trials", "n_subjects", "seed"]


def evaluate_table(table: ScoreTable, protocol: str, system: str, seed: int = 0) -> EvalReport:
    return EvalReport(
        protocol=protocol,
        system=system,
        rank1=rank1_accuracy(table),
        eer=eer(table),
        n_trials=table.n_rows,
        n_subjects=len(table.subjects),
        seed=seed,
        table=table,
    )


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerow(report.row())


def read_report_csv(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"report not found: {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ValidationError(f"{path}: not a report CSV")
        for fields in reader:
            out.append(
                EvalReport(
                    protocol=fields[0],
                    system=fields[1],
                    rank1=float(fields[2]),
                    eer=float(fields[3]),
                    n_trials=int(fields[4]),
                    n_subjects=int(fields[5]),
                    seed=int(fields[6]),
                )
            )
    return out


def format_report_table(reports) -> str:
    """Human-readable fixed-width table, accuracy/EER in percent."""
    rows = [["protocol", "system", "acc(%)", "eer(%)", "trials", "subjects"]]
    for r in reports:
        rows.append(
            [r.protocol, r.system, f"{100 * r.rank1:.1f}", f"{100 * r.eer:.2f}", str(r.n_trials), str(r.n_subjects)]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
