"""Fixed feature schema: dynamic variables, static blocks and column order."""

from __future__ import annotations

from dataclasses import dataclass

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DynamicVariable:
    name: str
    kind: str  # "vital" or "lab"
    mean: float
    sd: float
    interval: float  # typical hours between samples
    lo: float
    hi: float


# name, kind, mean, sd, interval, physiological clip range
DYNAMIC_VARIABLES: tuple[DynamicVariable, ...] = tuple(
    DynamicVariable(*row)
    for row in [
        ("heart_rate", "vital", 88.0, 14.0, 1.0, 30.0, 200.0),
        ("resp_rate", "vital", 18.0, 4.0, 1.0, 4.0, 60.0),
        ("spo2", "vital", 96.0, 2.0, 1.0, 60.0, 100.0),
        ("temperature", "vital", 37.0, 0.6, 4.0, 33.0, 42.0),
        ("sbp", "vital", 122.0, 18.0, 1.0, 50.0, 240.0),
        ("dbp", "vital", 66.0, 11.0, 1.0, 25.0, 140.0),
        ("map", "vital", 84.0, 12.0, 1.0, 35.0, 170.0),
        ("fio2", "vital", 0.30, 0.08, 2.0, 0.21, 1.0),
        ("gcs", "vital", 13.5, 1.8, 4.0, 3.0, 15.0),
        ("etco2", "vital", 36.0, 5.0, 2.0, 10.0, 80.0),
        ("pao2", "lab", 95.0, 20.0, 8.0, 30.0, 500.0),
        ("paco2", "lab", 40.0, 6.0, 8.0, 15.0, 120.0),
        ("ph", "lab", 7.40, 0.05, 8.0, 6.8, 7.8),
        ("wbc", "lab", 10.0, 4.0, 12.0, 0.1, 80.0),
        ("platelets", "lab", 210.0, 80.0, 12.0, 5.0, 900.0),
        ("bilirubin", "lab", 1.0, 0.8, 24.0, 0.1, 40.0),
        ("creatinine", "lab", 1.2, 0.7, 12.0, 0.2, 15.0),
        ("lactate", "lab", 1.6, 0.8, 8.0, 0.3, 25.0),
        ("hemoglobin", "lab", 11.0, 2.0, 12.0, 3.0, 20.0),
        ("sodium", "lab", 139.0, 4.0, 12.0, 110.0, 170.0),
        ("potassium", "lab", 4.1, 0.5, 12.0, 2.0, 8.0),
        ("chloride", "lab", 103.0, 5.0, 12.0, 80.0, 130.0),
        ("bicarbonate", "lab", 24.0, 3.5, 12.0, 5.0, 45.0),
        ("bun", "lab", 22.0, 12.0, 12.0, 2.0, 150.0),
        ("glucose", "lab", 135.0, 35.0, 6.0, 30.0, 800.0),
        ("calcium", "lab", 8.6, 0.6, 12.0, 5.0, 14.0),
        ("magnesium", "lab", 2.0, 0.3, 12.0, 0.8, 5.0),
        ("phosphate", "lab", 3.4, 0.9, 24.0, 0.5, 12.0),
        ("albumin", "lab", 3.2, 0.6, 24.0, 1.0, 5.5),
        ("alt", "lab", 40.0, 30.0, 24.0, 3.0, 3000.0),
        ("ast", "lab", 45.0, 35.0, 24.0, 3.0, 3000.0),
        ("alk_phos", "lab", 95.0, 40.0, 24.0, 10.0, 1500.0),
        ("inr", "lab", 1.2, 0.3, 24.0, 0.8, 10.0),
        ("ptt", "lab", 32.0, 6.0, 24.0, 15.0, 150.0),
        ("troponin", "lab", 0.05, 0.05, 24.0, 0.0, 50.0),
        ("bnp", "lab", 250.0, 200.0, 24.0, 5.0, 5000.0),
        ("crp", "lab", 60.0, 50.0, 24.0, 0.1, 500.0),
        ("procalcitonin", "lab", 0.8, 1.0, 24.0, 0.01, 100.0),
        ("base_excess", "lab", 0.0, 3.0, 8.0, -30.0, 30.0),
        ("hematocrit", "lab", 33.0, 6.0, 12.0, 10.0, 60.0),
        ("neutrophils", "lab", 72.0, 10.0, 24.0, 1.0, 99.0),
        ("lymphocytes", "lab", 15.0, 8.0, 24.0, 0.5, 90.0),
        ("anion_gap", "lab", 12.0, 3.0, 12.0, 2.0, 40.0),
        ("ionized_calcium", "lab", 1.15, 0.08, 12.0, 0.5, 2.0),
        ("fibrinogen", "lab", 350.0, 110.0, 24.0, 50.0, 1000.0),
        ("ldh", "lab", 280.0, 120.0, 24.0, 80.0, 5000.0),
        ("urine_output", "vital", 80.0, 40.0, 1.0, 0.0, 1000.0),
        ("cvp", "vital", 9.0, 4.0, 2.0, -5.0, 30.0),
        ("tidal_volume_spont", "vital", 450.0, 90.0, 4.0, 100.0, 1200.0),
        ("pain_score", "vital", 2.0, 2.0, 4.0, 0.0, 10.0),
    ]
)

N_DYNAMIC = len(DYNAMIC_VARIABLES)
assert N_DYNAMIC == 50

VAR_INDEX = {v.name: i for i, v in enumerate(DYNAMIC_VARIABLES)}
VITAL_IDS = tuple(i for i, v in enumerate(DYNAMIC_VARIABLES) if v.kind == "vital")
LAB_IDS = tuple(i for i, v in enumerate(DYNAMIC_VARIABLES) if v.kind == "lab")

DEMOGRAPHIC_NAMES = ("age", "male", "height_cm", "weight_kg", "bmi", "race_code")
MEDICATION_NAMES = (
    "vasopressor", "inotrope", "sedative", "opioid", "paralytic", "antibiotic",
    "corticosteroid", "diuretic", "anticoagulant", "bronchodilator", "insulin",
    "antiarrhythmic",
)
# SIRS flags, SOFA organ subscores, then the two totals
CRITERIA_NAMES = (
    "sirs_temperature", "sirs_heart_rate", "sirs_respiratory", "sirs_wbc",
    "sofa_respiration", "sofa_coagulation", "sofa_liver", "sofa_cardiovascular",
    "sofa_cns", "sofa_renal", "sirs_total", "sofa_total",
)

N_DEMOGRAPHICS = len(DEMOGRAPHIC_NAMES)
N_COMORBIDITIES = 62
N_MEDICATIONS = len(MEDICATION_NAMES)
N_CRITERIA = len(CRITERIA_NAMES)
STATIC_COUNT = N_DEMOGRAPHICS + N_COMORBIDITIES + N_MEDICATIONS + N_CRITERIA
DERIVED_KINDS = ("baseline", "trend", "tslm")


def column_names() -> list[str]:
    cols = [f"demo_{n}" for n in DEMOGRAPHIC_NAMES]
    cols += [f"comorb_{i:02d}" for i in range(N_COMORBIDITIES)]
    cols += [f"med_{n}" for n in MEDICATION_NAMES]
    cols += [f"crit_{n}" for n in CRITERIA_NAMES]
    cols += [f"dyn_{v.name}" for v in DYNAMIC_VARIABLES]
    for kind in DERIVED_KINDS:
        cols += [f"{kind}_{v.name}" for v in DYNAMIC_VARIABLES]
    return cols


COLUMNS = tuple(column_names())
N_COLUMNS = len(COLUMNS)

# column slices in the assembled matrix
STATIC = slice(0, STATIC_COUNT)
DYNAMIC = slice(STATIC_COUNT, STATIC_COUNT + N_DYNAMIC)
BASELINE = slice(DYNAMIC.stop, DYNAMIC.stop + N_DYNAMIC)
TREND = slice(BASELINE.stop, BASELINE.stop + N_DYNAMIC)
TSLM = slice(TREND.stop, TREND.stop + N_DYNAMIC)
assert TSLM.stop == N_COLUMNS == STATIC_COUNT + 4 * N_DYNAMIC
