"""Cohort labeling, exam filtering, valid-exam selection, and subject splits.

Subjects arrive as a JSON-lines manifest, one record per line. Labeling is
screening-style: a subject is positive if any exam reported a cardiovascular
abnormality, if they have CVD history, or if they died of a CVD cause
(matched on a fixed 17-root ICD-10 table). Negative requires none of those.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import MalformedCode, NoValidExam, TooFewSubjects

# 3-character roots of the CVD-related causes of death
CVD_ICD10_ROOTS = frozenset({
    "I10", "I11", "I12", "I13", "I20", "I21", "I24", "I25",
    "I63", "I64", "I65", "I66", "I67", "I70", "I71", "I72", "I73",
})

# exam usability cut-offs: spacing strictly larger than 3 mm or scan length
# strictly shorter than 200 mm excludes a volume; boundaries are kept
MAX_SLICE_SPACING_MM = 3.0
MIN_SCAN_LENGTH_MM = 200.0

_ICD10_RE = re.compile(r"^[A-Z]\d{2}(\.\w{1,4})?$")


@dataclass(frozen=True)
class VolumeRef:
    """Reference to one reconstructed CT volume of an exam."""

    volume_id: str
    slice_spacing_mm: float
    scan_length_mm: float
    path: str = ""

    def usable(self) -> bool:
        return (self.slice_spacing_mm <= MAX_SLICE_SPACING_MM
                and self.scan_length_mm >= MIN_SCAN_LENGTH_MM)


@dataclass(frozen=True)
class ExamRecord:
    exam_id: str
    volumes: tuple[VolumeRef, ...]
    cvd_abnormality_reported: bool = False
    exam_year_index: int = 0

    def __post_init__(self):
        for v in self.volumes:
            if v.slice_spacing_mm <= 0 or v.scan_length_mm <= 0:
                raise ValueError(f"exam {self.exam_id}: nonpositive spacing/length")


@dataclass(frozen=True)
class DeathRecord:
    icd10_codes: tuple[str, ...]
    days_to_death: int


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    exams: tuple[ExamRecord, ...] = ()
    cvd_history: bool = False
    death: DeathRecord | None = None
    followup_days: int = 0

    def __post_init__(self):
        if self.death is not None and self.death.days_to_death > self.followup_days:
            raise ValueError(f"{self.subject_id}: days_to_death exceeds followup_days")


@dataclass(frozen=True)
class CohortLabel:
    screening_positive: bool
    cvd_death: bool
    valid_exam_ids: tuple[str, ...] = ()
    history_only: bool = False  # positive solely due to reported CVD history


def icd10_is_cvd(code: str) -> bool:
    """True iff the code's 3-character root is in the CVD cause table."""
    code = code.strip().upper()
    if not _ICD10_RE.match(code):
        raise MalformedCode(f"not an ICD-10 code: {code!r}")
    return code[:3] in CVD_ICD10_ROOTS


def derive_label(subject: SubjectRecord) -> CohortLabel:
    """Screening label plus CVD-death flag for one subject."""
    any_abnormal = any(e.cvd_abnormality_reported for e in subject.exams)
    cvd_death = False
    if subject.death is not None:
        cvd_death = any(icd10_is_cvd(c) for c in subject.death.icd10_codes)
    positive = any_abnormal or cvd_death or subject.cvd_history
    history_only = positive and not any_abnormal and not cvd_death
    return CohortLabel(screening_positive=positive, cvd_death=cvd_death,
                       history_only=history_only)


def filter_exams(subject: SubjectRecord) -> list[ExamRecord]:
    """Drop volumes with spacing > 3 mm or scan length < 200 mm, then drop
    exams left with no volume."""
    kept = []
    for exam in subject.exams:
        volumes = tuple(v for v in exam.volumes if v.usable())
        if volumes:
            kept.append(replace(exam, volumes=volumes))
    return kept


def select_valid_exams(subject: SubjectRecord, label: CohortLabel) -> list[ExamRecord]:
    """Exams with clear CVD information for this subject.

    Negatives and positives who died of CVD keep every filtered exam; other
    positives keep only exams that reported an abnormality.
    """
    exams = filter_exams(subject)
    if not label.screening_positive or label.cvd_death:
        return exams
    return [e for e in exams if e.cvd_abnormality_reported]


def label_subject(subject: SubjectRecord) -> CohortLabel:
    """derive_label plus the valid-exam list in one step."""
    label = derive_label(subject)
    valid = select_valid_exams(subject, label)
    return replace(label, valid_exam_ids=tuple(e.exam_id for e in valid))


def split_subjects(subject_ids: list[str], seed: int) -> dict[str, str]:
    """Disjoint 70/10/20 train/val/test split, deterministic under seed.

    Sizes: train = round(0.7 n), test = round(0.2 n), val = remainder
    (round half up). Input order does not matter; ids are sorted before
    shuffling.
    """
    n = len(subject_ids)
    if n < 10:
        raise TooFewSubjects(f"need >= 10 subjects to split, got {n}")
    if len(set(subject_ids)) != n:
        raise ValueError("subject ids must be unique")
    # exact integer round-half-up; float 0.7*n can land just below .5
    n_train = (7 * n + 5) // 10
    n_test = (2 * n + 5) // 10
    rng = np.random.default_rng(seed)
    order = rng.permutation(sorted(subject_ids))
    out = {}
    for i, sid in enumerate(order):
        if i < n_train:
            out[str(sid)] = "train"
        elif i < n_train + n_test:
            out[str(sid)] = "test"
        else:
            out[str(sid)] = "val"
    return out


def _valid_volumes(subject: SubjectRecord, label: CohortLabel) -> list[VolumeRef]:
    vols = []
    for exam in select_valid_exams(subject, label):
        vols.extend(exam.volumes)
    return vols


def sample_eval_volume(subject: SubjectRecord, label: CohortLabel,
                       rng: np.random.Generator) -> VolumeRef:
    """Pick one volume uniformly from the subject's valid exams (eval rule)."""
    vols = _valid_volumes(subject, label)
    if not vols:
        raise NoValidExam(f"{subject.subject_id}: no valid exam with volumes")
    return vols[int(rng.integers(0, len(vols)))]


def enumerate_training_volumes(subject: SubjectRecord, label: CohortLabel) -> list[VolumeRef]:
    """All volumes of all valid exams, each treated as an independent case."""
    return _valid_volumes(subject, label)


# ---------------------------------------------------------------------------
# manifest / CSV I/O
# ---------------------------------------------------------------------------

def _subject_from_dict(d: dict) -> SubjectRecord:
    exams = []
    for e in d.get("exams", []):
        volumes = tuple(
            VolumeRef(v["volume_id"], float(v["slice_spacing_mm"]),
                      float(v["scan_length_mm"]), v.get("path", ""))
            for v in e.get("volumes", [])
        )
        exams.append(ExamRecord(e["exam_id"], volumes,
                                bool(e.get("cvd_abnormality_reported", False)),
                                int(e.get("exam_year_index", 0))))
    death = None
    if d.get("death"):
        death = DeathRecord(tuple(d["death"]["icd10_codes"]),
                            int(d["death"]["days_to_death"]))
    return SubjectRecord(d["subject_id"], tuple(exams),
                         bool(d.get("cvd_history", False)), death,
                         int(d.get("followup_days", 0)))


def load_manifest(path: str | Path) -> list[SubjectRecord]:
    """Read a JSON-lines manifest, one SubjectRecord per line."""
    subjects = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                subjects.append(_subject_from_dict(json.loads(line)))
    return subjects


def write_labels_csv(path: str | Path, subjects: list[SubjectRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "screening_label", "cvd_death",
                    "history_only", "valid_exam_ids"])
        for s in subjects:
            lab = label_subject(s)
            w.writerow([s.subject_id, int(lab.screening_positive),
                        int(lab.cvd_death), int(lab.history_only),
                        ";".join(lab.valid_exam_ids)])


def write_split_csv(path: str | Path, split: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "split"])
        for sid in sorted(split):
            w.writerow([sid, split[sid]])


def survival_rows(subjects: list[SubjectRecord]) -> list[tuple[str, int, int]]:
    """(subject_id, time_days, event) rows for CVD-mortality analysis.

    Event is CVD death; deaths from other causes and trial survivors are
    censored (at death time and followup_days respectively).
    """
    rows = []
    for s in subjects:
        lab = derive_label(s)
        if s.death is not None:
            rows.append((s.subject_id, s.death.days_to_death, int(lab.cvd_death)))
        else:
            rows.append((s.subject_id, s.followup_days, 0))
    return rows
