"""Encounter records, cohort inclusion rules and ventilation labels.

Timestamps are real-valued hours since a per-dataset epoch. All prediction
windows are half-open ``(t, t + 24]``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .schema import LAB_IDS, N_COMORBIDITIES, N_DEMOGRAPHICS, N_DYNAMIC, VITAL_IDS
from .schema import N_MEDICATIONS as N_MEDICATION_CATEGORIES

PREDICTION_START_HOURS = 4.0
MIN_STAY_HOURS = 5.0
SURGERY_BLACKOUT_HOURS = 24.0
HORIZON_HOURS = 24.0


class CxrSource(str, enum.Enum):
    ICU = "ICU"
    OTHER_DEPT = "OTHER_DEPT"


class Exclusion(str, enum.Enum):
    MIN_STAY = "MIN_STAY"
    PRE_ICU_VENTILATED = "PRE_ICU_VENTILATED"
    DNR = "DNR"
    NO_PRIOR_DATA = "NO_PRIOR_DATA"


class InvalidEncounter(ValueError):
    pass


@dataclass
class ObservationSeries:
    variable_id: int
    times: list[float]
    values: list[float]

    def validate(self) -> None:
        if not 0 <= self.variable_id < N_DYNAMIC:
            raise InvalidEncounter(f"variable_id {self.variable_id} out of range")
        if len(self.times) != len(self.values):
            raise InvalidEncounter("times/values length mismatch")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise InvalidEncounter(
                    f"variable {self.variable_id}: timestamps not strictly increasing"
                )
        if not all(math.isfinite(t) for t in self.times):
            raise InvalidEncounter("non-finite observation timestamp")
        if not all(math.isfinite(v) for v in self.values):
            raise InvalidEncounter("non-finite observation value")


@dataclass
class CxrStudy:
    study_id: str
    acquired_at: float
    source: CxrSource
    embedding_key: str


@dataclass
class VentRecord:
    peep_times: list[float] = field(default_factory=list)
    fio2_times: list[float] = field(default_factory=list)


@dataclass
class Encounter:
    encounter_id: str
    icu_admit: float
    icu_discharge: float
    demographics: list[float]
    comorbidities: list[int]
    medications: list[tuple[int, float]] = field(default_factory=list)
    dnr: bool = False
    surgeries: list[float] = field(default_factory=list)
    pre_icu_ventilated: bool = False
    observations: list[ObservationSeries] = field(default_factory=list)
    cxr_studies: list[CxrStudy] = field(default_factory=list)
    vent: VentRecord = field(default_factory=VentRecord)

    def validate(self) -> None:
        """Raise :class:`InvalidEncounter` if any structural invariant fails."""
        if not (math.isfinite(self.icu_admit) and math.isfinite(self.icu_discharge)):
            raise InvalidEncounter("non-finite ICU times")
        if not self.icu_admit < self.icu_discharge:
            raise InvalidEncounter("icu_admit must precede icu_discharge")
        if len(self.demographics) != N_DEMOGRAPHICS:
            raise InvalidEncounter("expected 6 demographic values")
        if len(self.comorbidities) != N_COMORBIDITIES:
            raise InvalidEncounter("expected 62 comorbidity flags")
        if any(c not in (0, 1) for c in self.comorbidities):
            raise InvalidEncounter("comorbidities must be binary")
        for cat, t in self.medications:
            if not 0 <= cat < N_MEDICATION_CATEGORIES:
                raise InvalidEncounter(f"medication category {cat} out of range")
            if not math.isfinite(t):
                raise InvalidEncounter("non-finite medication timestamp")
        seen = set()
        for obs in self.observations:
            obs.validate()
            if obs.variable_id in seen:
                raise InvalidEncounter(f"duplicate series for variable {obs.variable_id}")
            seen.add(obs.variable_id)

    def series(self, variable_id: int) -> Optional[ObservationSeries]:
        for obs in self.observations:
            if obs.variable_id == variable_id:
                return obs
        return None

    @property
    def t0(self) -> Optional[float]:
        return derive_t0(self.vent)


# ---------------------------------------------------------------------------
# ventilation onset and labels


def derive_t0(vent: VentRecord, tolerance_hours: float = 0.0) -> Optional[float]:
    """Earliest time at which PEEP and FiO2 are recorded together.

    Two recordings count as simultaneous when they are at most
    ``tolerance_hours`` apart; the earlier of the pair is returned.
    """
    if tolerance_hours < 0:
        raise ValueError("tolerance_hours must be non-negative")
    peep = sorted(vent.peep_times)
    fio2 = sorted(vent.fio2_times)
    j = 0
    # the first PEEP time with a partner yields the earliest pair: any later
    # pair has both members at or after this one's
    for tp in peep:
        while j < len(fio2) and fio2[j] < tp - tolerance_hours:
            j += 1
        if j < len(fio2) and fio2[j] <= tp + tolerance_hours:
            return min(tp, fio2[j])
    return None


def binary_imv_label(t: float, t0: Optional[float], horizon: float = HORIZON_HOURS) -> int:
    """1 when ventilation starts inside ``(t, t + horizon]``."""
    if t0 is None:
        return 0
    return int(t < t0 <= t + horizon)


def severity_points(
    pf: Optional[float] = None,
    sf: Optional[float] = None,
    imv_within_24h: bool = False,
    imv_beyond_24h: bool = False,
) -> int:
    """Respiratory-failure severity points (0..5) from oxygenation ratios and IMV status.

    The PaO2/FiO2 ratio is used when present; otherwise SpO2/FiO2 with its
    own cutoffs. The highest applicable point value is returned.
    """
    if pf is not None and math.isnan(pf):
        pf = None
    if sf is not None and math.isnan(sf):
        sf = None
    for name, ratio in (("pf", pf), ("sf", sf)):
        if ratio is not None and ratio < 0:
            raise ValueError(f"{name} ratio must be non-negative, got {ratio}")

    if pf is not None:
        mild, severe = 300.0, 200.0
        ratio = pf
    elif sf is not None:
        mild, severe = 221.0, 141.0
        ratio = sf
    else:
        ratio = None

    points = 0
    if ratio is not None:
        if ratio <= severe:
            points = 2
        elif ratio <= mild:
            points = 1
    if imv_within_24h:
        points = max(points, 4 if points == 2 else 3)
    if imv_beyond_24h:
        points = 5
    return points


# ---------------------------------------------------------------------------
# cohort selection


def _has_prior_data(e: Encounter, start: float, variable_ids: Iterable[int]) -> bool:
    wanted = set(variable_ids)
    return any(
        obs.variable_id in wanted and obs.times and obs.times[0] < start
        for obs in e.observations
    )


def apply_inclusion_criteria(
    e: Encounter, now: Optional[float] = None
) -> tuple[bool, list[Exclusion]]:
    """Check the cohort rules; ``now`` is the prediction start (default admit + 4 h)."""
    start = e.icu_admit + PREDICTION_START_HOURS if now is None else now
    reasons: list[Exclusion] = []
    if e.icu_discharge - e.icu_admit < MIN_STAY_HOURS:
        reasons.append(Exclusion.MIN_STAY)
    if e.pre_icu_ventilated:
        reasons.append(Exclusion.PRE_ICU_VENTILATED)
    if e.dnr:
        reasons.append(Exclusion.DNR)
    if not (_has_prior_data(e, start, VITAL_IDS) and _has_prior_data(e, start, LAB_IDS)):
        reasons.append(Exclusion.NO_PRIOR_DATA)
    return not reasons, reasons


def prediction_timestamps(e: Encounter, t0: Optional[float] = None) -> list[float]:
    """Hourly prediction grid from admit + 4 h until ventilation onset or discharge.

    Hours falling within 24 h after any surgery (inclusive) are skipped.
    ``t0`` defaults to the onset derived from the encounter's vent record.
    """
    if t0 is None:
        t0 = e.t0
    stop = e.icu_discharge if t0 is None else min(t0, e.icu_discharge)
    out = []
    k = 0
    while True:
        t = e.icu_admit + PREDICTION_START_HOURS + k
        if t >= stop:
            break
        k += 1
        if any(s <= t <= s + SURGERY_BLACKOUT_HOURS for s in e.surgeries):
            continue
        out.append(t)
    return out


# ---------------------------------------------------------------------------
# cohort file (JSON lines)


def encounter_to_dict(e: Encounter) -> dict:
    return {
        "encounter_id": e.encounter_id,
        "icu_admit": e.icu_admit,
        "icu_discharge": e.icu_discharge,
        "demographics": list(e.demographics),
        "comorbidities": list(e.comorbidities),
        "medications": [[c, t] for c, t in e.medications],
        "dnr": e.dnr,
        "surgeries": list(e.surgeries),
        "pre_icu_ventilated": e.pre_icu_ventilated,
        "observations": [
            {"variable_id": o.variable_id, "times": list(o.times), "values": list(o.values)}
            for o in e.observations
        ],
        "cxr_studies": [
            {
                "study_id": s.study_id,
                "acquired_at": s.acquired_at,
                "source": s.source.value,
                "embedding_key": s.embedding_key,
            }
            for s in e.cxr_studies
        ],
        "peep_times": list(e.vent.peep_times),
        "fio2_times": list(e.vent.fio2_times),
    }


def encounter_from_dict(d: dict) -> Encounter:
    try:
        e = Encounter(
            encounter_id=str(d["encounter_id"]),
            icu_admit=float(d["icu_admit"]),
            icu_discharge=float(d["icu_discharge"]),
            demographics=[float(v) for v in d["demographics"]],
            comorbidities=[int(v) for v in d["comorbidities"]],
            medications=[(int(c), float(t)) for c, t in d["medications"]],
            dnr=bool(d["dnr"]),
            surgeries=[float(t) for t in d["surgeries"]],
            pre_icu_ventilated=bool(d["pre_icu_ventilated"]),
            observations=[
                ObservationSeries(
                    int(o["variable_id"]),
                    [float(t) for t in o["times"]],
                    [float(v) for v in o["values"]],
                )
                for o in d["observations"]
            ],
            cxr_studies=[
                CxrStudy(
                    str(s["study_id"]),
                    float(s["acquired_at"]),
                    CxrSource(s["source"]),
                    str(s["embedding_key"]),
                )
                for s in d["cxr_studies"]
            ],
            vent=VentRecord(
                [float(t) for t in d["peep_times"]], [float(t) for t in d["fio2_times"]]
            ),
        )
    except KeyError as exc:
        raise InvalidEncounter(f"missing field {exc}") from None
    return e


def write_cohort(path: str | Path, encounters: Sequence[Encounter]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in encounters:
            fh.write(json.dumps(encounter_to_dict(e), separators=(",", ":")))
            fh.write("\n")


def iter_cohort(path: str | Path) -> Iterator[Encounter]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            e = encounter_from_dict(json.loads(line))
            try:
                e.validate()
            except InvalidEncounter as exc:
                raise InvalidEncounter(f"line {lineno}: {exc}") from None
            yield e


def read_cohort(path: str | Path) -> list[Encounter]:
    return list(iter_cohort(path))
