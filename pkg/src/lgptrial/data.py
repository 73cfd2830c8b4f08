"""Trial data model and CSV ingestion.

Outcome files are long-format CSV with header ``arm,patient_id,week,outcome``.
Weeks are positive integers on the trial calendar; model time is
``week / time_scale`` (default scale 10, so a 35-week trial spans (0, 3.5]).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_HORIZON = 35
DEFAULT_TIME_SCALE = 10.0
CSV_HEADER = ("arm", "patient_id", "week", "outcome")


@dataclass(frozen=True)
class PatientSeries:
    """Observed binary outcomes of one patient on the weekly grid."""

    arm: int
    patient_id: str
    weeks: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        weeks = np.asarray(self.weeks, dtype=int)
        outcomes = np.asarray(self.outcomes, dtype=int)
        object.__setattr__(self, "weeks", weeks)
        object.__setattr__(self, "outcomes", outcomes)
        weeks.setflags(write=False)
        outcomes.setflags(write=False)
        if self.arm not in (1, 2):
            raise ValidationError(f"patient {self.patient_id}: arm must be 1 or 2, got {self.arm}")
        if weeks.ndim != 1 or weeks.size == 0:
            raise ValidationError(f"patient {self.patient_id}: needs at least one observation")
        if outcomes.shape != weeks.shape:
            raise ValidationError(f"patient {self.patient_id}: weeks and outcomes differ in length")
        if weeks[0] < 1 or np.any(np.diff(weeks) <= 0):
            raise ValidationError(
                f"patient {self.patient_id}: weeks must be strictly increasing positive integers"
            )
        if not np.all((outcomes == 0) | (outcomes == 1)):
            raise ValidationError(f"patient {self.patient_id}: outcomes must be 0 or 1")

    @property
    def n_obs(self) -> int:
        return int(self.weeks.size)

    @property
    def last_week(self) -> int:
        return int(self.weeks[-1])

    def truncate(self, last_week: int) -> PatientSeries | None:
        """Keep observations up to and including ``last_week``; None if nothing is left."""
        keep = self.weeks <= last_week
        if not keep.any():
            return None
        return PatientSeries(self.arm, self.patient_id, self.weeks[keep], self.outcomes[keep])


@dataclass(frozen=True)
class TrialDataset:
    """All observed patients of a trial (one or two arms)."""

    patients: tuple[PatientSeries, ...]
    horizon_weeks: int = DEFAULT_HORIZON
    time_scale: float = DEFAULT_TIME_SCALE
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        patients = tuple(self.patients)
        object.__setattr__(self, "patients", patients)
        if not patients:
            raise ValidationError("no patients")
        if self.time_scale <= 0:
            raise ValidationError("time_scale must be positive")
        index = {}
        for i, p in enumerate(patients):
            key = (p.arm, p.patient_id)
            if key in index:
                raise ValidationError(f"duplicate patient {p.patient_id} in arm {p.arm}")
            index[key] = i
            if p.last_week > self.horizon_weeks:
                raise ValidationError(
                    f"patient {p.patient_id}: week {p.last_week} beyond horizon {self.horizon_weeks}"
                )
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.patients)

    @property
    def arms(self) -> tuple[int, ...]:
        return tuple(sorted({p.arm for p in self.patients}))

    @property
    def horizon_t(self) -> float:
        return self.horizon_weeks / self.time_scale

    def arm_patients(self, arm: int) -> list[PatientSeries]:
        return [p for p in self.patients if p.arm == arm]

    def n_patients(self, arm: int) -> int:
        return sum(1 for p in self.patients if p.arm == arm)

    def find(self, arm: int, patient_id: str) -> int:
        """Position of a patient in ``patients``; raises KeyError when absent."""
        try:
            return self._index[(arm, str(patient_id))]
        except KeyError:
            raise KeyError(f"unknown patient {patient_id!r} in arm {arm}") from None

    def times(self, i: int) -> np.ndarray:
        return model_times(self.patients[i], self.time_scale)

    def truncate(self, last_week: int) -> TrialDataset:
        """Dataset as it would look at the end of calendar week ``last_week``."""
        kept = [q for q in (p.truncate(last_week) for p in self.patients) if q is not None]
        return TrialDataset(tuple(kept), self.horizon_weeks, self.time_scale)

    def relabel(self, arm_map: dict[int, int]) -> TrialDataset:
        patients = tuple(
            PatientSeries(arm_map.get(p.arm, p.arm), p.patient_id, p.weeks, p.outcomes)
            for p in self.patients
        )
        return TrialDataset(patients, self.horizon_weeks, self.time_scale)


def model_times(series: PatientSeries, scale: float = DEFAULT_TIME_SCALE) -> np.ndarray:
    """Model-time points ``week / scale`` for every observed week."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return series.weeks / float(scale)


def _parse_int(text: str, name: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{name} {text!r} is not a number", line) from None
    if not value.is_integer():
        raise ParseError(f"{name} {text!r} is not an integer", line)
    return int(value)


def read_rows(lines: Iterable[str]) -> list[tuple[int, str, int, int, int]]:
    """Parse CSV lines into ``(arm, patient_id, week, outcome, line_no)`` tuples."""
    reader = csv.reader(lines)
    rows = []
    header_seen = False
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        cells = [cell.strip() for cell in row]
        if not header_seen:
            if tuple(c.lower() for c in cells) != CSV_HEADER:
                raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {','.join(cells)}", line)
            header_seen = True
            continue
        if len(cells) != 4:
            raise ParseError(f"expected 4 fields, got {len(cells)}", line)
        arm = _parse_int(cells[0], "arm", line)
        if arm not in (1, 2):
            raise ParseError(f"arm must be 1 or 2, got {arm}", line)
        if not cells[1]:
            raise ParseError("empty patient_id", line)
        week = _parse_int(cells[2], "week", line)
        if week < 1:
            raise ParseError(f"week must be >= 1, got {week}", line)
        outcome = _parse_int(cells[3], "outcome", line)
        if outcome not in (0, 1):
            raise ValidationError(f"line {line}: outcome must be 0 or 1, got {outcome}")
        rows.append((arm, cells[1], week, outcome, line))
    return rows


def dataset_from_rows(
    rows: Sequence[tuple],
    horizon: int = DEFAULT_HORIZON,
    time_scale: float = DEFAULT_TIME_SCALE,
) -> TrialDataset:
    grouped: dict[tuple[int, str], dict[int, int]] = {}
    for arm, pid, week, outcome, *rest in rows:
        obs = grouped.setdefault((arm, pid), {})
        if week in obs:
            where = f"line {rest[0]}: " if rest else ""
            raise ValidationError(f"{where}duplicate observation for patient {pid} at week {week}")
        if week > horizon:
            where = f"line {rest[0]}: " if rest else ""
            raise ValidationError(f"{where}week {week} beyond horizon {horizon}")
        obs[week] = outcome
    if not grouped:
        raise ValidationError("no patients")
    patients = []
    for (arm, pid), obs in grouped.items():
        weeks = sorted(obs)
        patients.append(PatientSeries(arm, pid, weeks, [obs[w] for w in weeks]))
    return TrialDataset(tuple(patients), horizon, time_scale)


def load_dataset(
    path: str | Path,
    horizon: int = DEFAULT_HORIZON,
    time_scale: float = DEFAULT_TIME_SCALE,
) -> TrialDataset:
    """Read and validate an outcome CSV.

    Rows are grouped by ``(arm, patient_id)`` and sorted by week.

    Raises:
        ParseError: malformed row (message carries the line number).
        ValidationError: outcome outside {0, 1}, duplicate (patient, week),
            week beyond ``horizon``, or an empty file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = read_rows(fh)
    return dataset_from_rows(rows, horizon, time_scale)


def save_dataset(data: TrialDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for p in data.patients:
            for w, e in zip(p.weeks, p.outcomes):
                writer.writerow((p.arm, p.patient_id, int(w), int(e)))
