"""Longitudinal samples, cohorts, patient-level splits and the cohort CSV format.

A cohort file is UTF-8 CSV with the header

    sample_id,group_id,timestamp,view_id,split,label:<name>:<max>...,f0..f{D-1}

Missing labels and unassigned splits are empty fields. Floats are written with
17 significant digits so that a save/load round trip is exact.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
PATIENT_DELIMITER = "/"


class CohortFormatError(ValueError):
    """Malformed cohort file."""


class CohortValidationError(ValueError):
    """A sample or cohort violates an invariant."""


def patient_root(group_id: str, delimiter: str = PATIENT_DELIMITER) -> str:
    """Patient part of a hierarchical group id (``"p003/roi1"`` -> ``"p003"``)."""
    return group_id.split(delimiter, 1)[0]


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: int
    group_id: str
    timestamp: float
    features: np.ndarray
    labels: Mapping[str, Optional[int]] = field(default_factory=dict)
    view_id: int = 0

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.group_id == other.group_id
                and self.timestamp == other.timestamp and self.view_id == other.view_id
                and dict(self.labels) == dict(other.labels)
                and np.array_equal(self.features, other.features))

    @property
    def patient(self) -> str:
        return patient_root(self.group_id)


@dataclass(frozen=True)
class Cohort:
    """Immutable collection of samples plus score types and a split map.

    ``score_types`` is a tuple of ``(name, max_value)``; ``split_assignment``
    maps a patient root to one of ``SPLITS``.
    """

    samples: tuple = ()
    score_types: tuple = ()
    split_assignment: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "score_types", tuple((str(n), int(m)) for n, m in self.score_types))
        object.__setattr__(self, "split_assignment", dict(self.split_assignment))

    def __len__(self):
        return len(self.samples)

    @property
    def score_names(self) -> list[str]:
        return [name for name, _ in self.score_types]

    @property
    def score_max(self) -> dict[str, int]:
        return dict(self.score_types)

    @property
    def feature_dim(self) -> int:
        return len(self.samples[0].features) if self.samples else 0

    def patients(self) -> list[str]:
        return sorted({s.patient for s in self.samples})

    def split_of(self, sample: Sample) -> Optional[str]:
        return self.split_assignment.get(sample.patient)

    def patients_in(self, split: str) -> list[str]:
        return sorted(p for p in self.patients() if self.split_assignment.get(p) == split)

    def subset(self, split: str) -> "Cohort":
        """Samples whose patient belongs to ``split``; metadata carried over."""
        keep = [s for s in self.samples if self.split_assignment.get(s.patient) == split]
        return replace(self, samples=tuple(keep))

    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0))
        return np.stack([s.features for s in self.samples])

    def label_matrix(self) -> np.ndarray:
        """(n_samples, n_score_types) float array, NaN where missing or absent."""
        names = self.score_names
        out = np.full((len(self.samples), len(names)), np.nan)
        for i, s in enumerate(self.samples):
            for j, name in enumerate(names):
                v = s.labels.get(name)
                if v is not None:
                    out[i, j] = v
        return out

    def validate(self) -> None:
        """Raise :class:`CohortValidationError` on the first broken invariant."""
        maxima = self.score_max
        seen_ids = set()
        dim = None
        for s in self.samples:
            where = f"sample {s.sample_id} ({s.group_id})"
            if s.sample_id in seen_ids:
                raise CohortValidationError(f"{where}: duplicate sample_id")
            seen_ids.add(s.sample_id)
            if not math.isfinite(s.timestamp):
                raise CohortValidationError(f"{where}: non-finite timestamp")
            feats = np.asarray(s.features)
            if feats.ndim != 1:
                raise CohortValidationError(f"{where}: features must be a vector")
            if dim is None:
                dim = feats.shape[0]
            elif feats.shape[0] != dim:
                raise CohortValidationError(f"{where}: expected {dim} features, got {feats.shape[0]}")
            if not np.all(np.isfinite(feats)):
                raise CohortValidationError(f"{where}: non-finite features")
            for name, value in s.labels.items():
                if name not in maxima:
                    raise CohortValidationError(f"{where}: unknown score type {name!r}")
                if value is not None and not 0 <= value <= maxima[name]:
                    raise CohortValidationError(
                        f"{where}: label {name}={value} outside [0, {maxima[name]}]")
        for patient, split in self.split_assignment.items():
            if split not in SPLITS:
                raise CohortValidationError(f"patient {patient}: unknown split {split!r}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _header(score_types, dim) -> list[str]:
    return (["sample_id", "group_id", "timestamp", "view_id", "split"]
            + [f"label:{name}:{mx}" for name, mx in score_types]
            + [f"f{k}" for k in range(dim)])


def dumps_cohort(cohort: Cohort) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_header(cohort.score_types, cohort.feature_dim))
    names = cohort.score_names
    for s in cohort.samples:
        labels = ["" if s.labels.get(n) is None else str(int(s.labels[n])) for n in names]
        writer.writerow([str(s.sample_id), s.group_id, _fmt(s.timestamp), str(s.view_id),
                         cohort.split_assignment.get(s.patient, "")]
                        + labels + [_fmt(v) for v in s.features])
    return buf.getvalue()


def save_cohort(cohort: Cohort, path) -> None:
    Path(path).write_bytes(dumps_cohort(cohort).encode("utf-8"))


def _parse_header(header: list[str]):
    fixed = ["sample_id", "group_id", "timestamp", "view_id", "split"]
    if header[:5] != fixed:
        raise CohortFormatError(f"line 1: header must start with {','.join(fixed)}")
    score_types, dim = [], 0
    for col in header[5:]:
        if col.startswith("label:"):
            if dim:
                raise CohortFormatError("line 1: label columns must precede feature columns")
            try:
                name, mx = col[len("label:"):].rsplit(":", 1)
                score_types.append((name, int(mx)))
            except ValueError:
                raise CohortFormatError(f"line 1: bad label column {col!r}") from None
        elif col == f"f{dim}":
            dim += 1
        else:
            raise CohortFormatError(f"line 1: unexpected column {col!r}")
    return score_types, dim


def loads_cohort(text: str) -> Cohort:
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise CohortFormatError("line 1: missing header") from None
    score_types, dim = _parse_header(header)
    n_cols = len(header)
    names = [n for n, _ in score_types]
    samples, splits = [], {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != n_cols:
            raise CohortFormatError(f"line {lineno}: expected {n_cols} fields, got {len(row)}")
        try:
            sample_id = int(row[0])
            group_id = row[1]
            if not group_id:
                raise ValueError("empty group_id")
            if row[2] == "":
                raise ValueError("missing timestamp")
            timestamp = float(row[2])
            view_id = int(row[3])
            labels = {}
            for j, name in enumerate(names):
                cell = row[5 + j]
                labels[name] = None if cell == "" else int(cell)
            feats = np.array([float(v) for v in row[5 + len(names):]], dtype=float)
        except ValueError as exc:
            raise CohortFormatError(f"line {lineno}: {exc}") from None
        sample = Sample(sample_id, group_id, timestamp, feats, labels, view_id)
        if row[4]:
            prev = splits.setdefault(sample.patient, row[4])
            if prev != row[4]:
                raise CohortValidationError(
                    f"sample {sample_id}: patient {sample.patient} appears in splits {prev} and {row[4]}")
        samples.append(sample)
    cohort = Cohort(tuple(samples), tuple(score_types), splits)
    cohort.validate()
    return cohort


def load_cohort(path) -> Cohort:
    """Read and validate a cohort file written by :func:`save_cohort`."""
    return loads_cohort(Path(path).read_text(encoding="utf-8"))


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder allocation
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_patients(cohort: Cohort, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Cohort:
    """Assign every patient to train/val/test by a seeded shuffle."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    patients = cohort.patients()
    if len(patients) < sum(f > 0 for f in fractions):
        raise ValueError(f"{len(patients)} patients cannot fill {sum(f > 0 for f in fractions)} splits")
    counts = _split_counts(len(patients), fractions)
    for f, c in zip(fractions, counts):
        if f > 0 and c == 0:
            raise ValueError("split fractions leave a nonzero split empty")
    order = np.random.default_rng(seed).permutation(len(patients))
    assignment, start = {}, 0
    for split, count in zip(SPLITS, counts):
        for idx in order[start:start + count]:
            assignment[patients[idx]] = split
        start += count
    return replace(cohort, split_assignment=assignment)


def subsample_labeled_patients(cohort: Cohort, n_labeled: int, seed: int = 0) -> Cohort:
    """Mask labels of all but ``n_labeled`` randomly chosen training patients.

    Validation and test patients keep their labels.
    """
    if n_labeled < 0:
        raise ValueError("n_labeled must be nonnegative")
    train = cohort.patients_in("train")
    if n_labeled > len(train):
        raise ValueError(f"n_labeled={n_labeled} exceeds {len(train)} training patients")
    rng = np.random.default_rng(seed)
    keep = {train[i] for i in rng.choice(len(train), size=n_labeled, replace=False)}
    masked_patients = set(train) - keep
    samples = []
    for s in cohort.samples:
        if s.patient in masked_patients:
            s = replace(s, labels={name: None for name in s.labels})
        samples.append(s)
    return replace(cohort, samples=tuple(samples))
