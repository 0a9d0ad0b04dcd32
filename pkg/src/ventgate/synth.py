"""Seeded synthetic ICU cohorts with a latent pulmonary-deterioration process.

Every ventilated encounter switches from a stable to a deteriorating state
14-30 h before intubation. The deterioration is expressed through exactly one
channel: either a drift in respiratory vitals and labs that ramps up to
ventilation onset, or a fixed displacement of every chest-radiograph embedding
acquired after the switch along a hidden direction.

Exactly ``round(n_encounters * event_rate)`` encounters are ventilated, and
``context_gate_prob`` of those (rounded) show deterioration only on imaging.

Randomness comes from numpy's PCG64 generator. Each encounter draws from its
own stream spawned off ``SeedSequence([seed, 1])``, so output is
bit-reproducible per seed and independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .cohort import CxrSource, CxrStudy, Encounter, ObservationSeries, VentRecord
from .cxr import CxrEmbeddingTable
from .schema import DYNAMIC_VARIABLES, N_COMORBIDITIES, N_MEDICATIONS, VAR_INDEX

# signed drift (in units of the variable's sd) at full severity
EHR_EFFECTS = {
    "resp_rate": 2.2,
    "spo2": -2.2,
    "fio2": 2.5,
    "heart_rate": 1.6,
    "pao2": -1.8,
    "paco2": 1.2,
    "lactate": 1.2,
    "etco2": 0.8,
    "ph": -1.0,
    "map": -0.6,
}


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    n_encounters: int = 500
    event_rate: float = 0.08
    dynamic_missing_rate: float = 0.3
    embedding_dim: int = 32
    context_gate_prob: float = 0.5
    horizon_hours: int = 48
    exclusion_rate: float = 0.02
    surgery_rate: float = 0.06
    ehr_signal: float = 1.0
    image_signal: float = 3.0
    deterioration_cxr_prob: float = 0.8
    encoder_name: str = "synthetic"

    def validate(self) -> None:
        if self.n_encounters < 1:
            raise SynthConfigError("n_encounters must be positive")
        if not 0.0 < self.event_rate < 1.0:
            raise SynthConfigError("event_rate must be in (0, 1)")
        if not 0.0 <= self.dynamic_missing_rate < 1.0:
            raise SynthConfigError("dynamic_missing_rate must be in [0, 1)")
        if self.embedding_dim < 2:
            raise SynthConfigError("embedding_dim must be at least 2")
        if not 0.0 <= self.context_gate_prob <= 1.0:
            raise SynthConfigError("context_gate_prob must be in [0, 1]")
        if self.horizon_hours < 8:
            raise SynthConfigError("horizon_hours must be at least 8")
        for name in ("exclusion_rate", "surgery_rate", "deterioration_cxr_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthConfigError(f"{name} must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(f"unknown synth options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _Truth:
    ventilated: bool
    imaging_channel: bool
    onset: float  # start of deterioration (inf when never deteriorating)
    t0: float


def _severity(t, truth: _Truth):
    if not truth.ventilated:
        return np.zeros_like(np.asarray(t, dtype=float))
    span = truth.t0 - truth.onset
    return np.clip((np.asarray(t, dtype=float) - truth.onset) / span, 0.0, 1.0)


def _r(x: float) -> float:
    return float(round(x, 4))


def _sample_times(rng, start: float, stop: float, interval: float) -> np.ndarray:
    gaps = rng.uniform(0.35, 1.65, size=int((stop - start) / interval * 1.6) + 4) * interval
    t = start + np.cumsum(gaps) - gaps[0] * rng.random()
    return t[(t >= start) & (t < stop)]


class _Generator:
    def __init__(self, config: SynthConfig):
        self.cfg = config
        root = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        direction = root.normal(size=config.embedding_dim)
        self.direction = direction / np.linalg.norm(direction)
        self.comorb_rates = root.uniform(0.02, 0.3, size=N_COMORBIDITIES)
        # exact prevalence and channel mix: a seeded choice of which encounters
        # get ventilated, and which of those show deterioration only on imaging
        n_vent = int(round(config.n_encounters * config.event_rate))
        vent = root.permutation(config.n_encounters)[:n_vent]
        n_img = int(round(n_vent * config.context_gate_prob))
        self.ventilated = set(vent.tolist())
        self.imaging = set(root.permutation(vent)[:n_img].tolist())
        self.children = np.random.SeedSequence([config.seed, 1]).spawn(config.n_encounters)

    def encounter(self, i: int, table: CxrEmbeddingTable) -> tuple[Encounter, _Truth]:
        cfg = self.cfg
        rng = np.random.default_rng(self.children[i])
        eid = f"E{cfg.seed:05d}-{i:06d}"
        # quarter-hour admission times keep admit + k exact in binary floating point
        admit = float(rng.integers(0, 24 * 365 * 4)) / 4.0

        ventilated = i in self.ventilated
        imaging = i in self.imaging
        if ventilated:
            k0 = int(rng.integers(6, cfg.horizon_hours + 1))
            t0 = admit + k0
            discharge = t0 + rng.uniform(24.0, 96.0)
            onset = t0 - rng.uniform(14.0, 30.0)
        else:
            t0 = math.inf
            discharge = admit + rng.uniform(3.0, cfg.horizon_hours + 4.0)
            onset = math.inf
        truth = _Truth(ventilated, imaging, onset, t0)
        discharge = _r(discharge)
        data_stop = min(discharge, t0)

        dnr = pre_vent = False
        if rng.random() < cfg.exclusion_rate:
            if rng.random() < 0.5:
                dnr = True
            else:
                pre_vent = True
        surgeries = [_r(admit - rng.uniform(0.0, 20.0))] if rng.random() < cfg.surgery_rate else []

        age = float(np.clip(rng.normal(62, 15), 18, 95))
        male = float(rng.random() < 0.5)
        height = float(rng.normal(176 if male else 163, 8))
        weight = float(np.clip(rng.normal(82 if male else 70, 17), 35, 250))
        demographics = [_r(age), male, _r(height), _r(weight), _r(weight / (height / 100) ** 2),
                        float(rng.integers(0, 4))]
        comorbidities = [int(b) for b in rng.random(N_COMORBIDITIES) < self.comorb_rates]

        medications = []
        for cat in range(N_MEDICATIONS):
            if rng.random() < 0.3:
                for t in np.sort(rng.uniform(admit - 6.0, data_stop, size=int(rng.integers(1, 5)))):
                    medications.append((cat, _r(t)))
        medications.sort(key=lambda m: (m[1], m[0]))

        observations = []
        ehr_drift = ventilated and not imaging
        data_start = admit - rng.uniform(0.0, 8.0)
        for j, var in enumerate(DYNAMIC_VARIABLES):
            if var.kind == "lab":
                first = admit + rng.uniform(-6.0, 3.0)
                times = np.concatenate([[first], _sample_times(rng, first + 0.5, data_stop, var.interval)])
                times = times[times < data_stop]
            else:
                times = _sample_times(rng, data_start, data_stop, var.interval)
            keep = rng.random(times.size) >= cfg.dynamic_missing_rate
            times = np.round(times[keep], 4)
            times = np.unique(times)
            if times.size == 0:
                continue
            personal = rng.normal(0.0, 0.5)
            vals = var.mean + var.sd * (personal + rng.normal(0.0, 0.6, size=times.size))
            if ehr_drift and var.name in EHR_EFFECTS:
                vals = vals + cfg.ehr_signal * EHR_EFFECTS[var.name] * var.sd * _severity(times, truth)
            vals = np.clip(vals, var.lo, var.hi)
            observations.append(
                ObservationSeries(j, times.tolist(), np.round(vals, 4).tolist())
            )

        fio2_series = next((o for o in observations if o.variable_id == VAR_INDEX["fio2"]), None)
        fio2_times = list(fio2_series.times) if fio2_series else []
        peep_times: list[float] = []
        if ventilated:
            vent_hours = [_r(t0 + k) for k in range(int(min(48, discharge - t0)))]
            peep_times = vent_hours
            fio2_times = fio2_times + vent_hours
        elif fio2_times and rng.random() < 0.1:
            # non-invasive support: PEEP charted, never at the same instant as FiO2
            peep_times = [_r(t + 0.37) for t in fio2_times[:: max(1, len(fio2_times) // 3)]]
        vent = VentRecord(peep_times, fio2_times)

        studies = []
        anatomy = rng.normal(size=cfg.embedding_dim)
        acq = []
        if rng.random() < 0.85:
            t = admit + rng.uniform(0.0, 10.0)
            while t < data_stop:
                acq.append((t, CxrSource.ICU))
                t += rng.uniform(8.0, 20.0)
            if rng.random() < 0.3:
                acq.append((admit - rng.uniform(1.0, 24.0), CxrSource.OTHER_DEPT))
        else:
            acq.append((admit - rng.uniform(1.0, 60.0), CxrSource.OTHER_DEPT))
        if ventilated and rng.random() < cfg.deterioration_cxr_prob:
            # radiograph ordered in response to respiratory decline
            t = onset + rng.uniform(1.0, 6.0)
            if admit < t < data_stop:
                acq.append((t, CxrSource.ICU))
        acq.sort(key=lambda a: a[0])
        for k, (t, src) in enumerate(acq):
            sid = f"{eid}-CXR{k:02d}"
            vec = anatomy + rng.normal(0.0, 0.5, size=cfg.embedding_dim)
            if imaging:
                vec = vec + cfg.image_signal * float(t >= truth.onset) * self.direction
            table.add(sid, vec)
            studies.append(CxrStudy(sid, _r(t), src, sid))

        e = Encounter(
            encounter_id=eid,
            icu_admit=admit,
            icu_discharge=discharge,
            demographics=demographics,
            comorbidities=comorbidities,
            medications=medications,
            dnr=dnr,
            surgeries=surgeries,
            pre_icu_ventilated=pre_vent,
            observations=observations,
            cxr_studies=studies,
            vent=vent,
        )
        return e, truth


def generate_with_truth(config: SynthConfig):
    config.validate()
    gen = _Generator(config)
    table = CxrEmbeddingTable(config.embedding_dim, encoder=config.encoder_name)
    encounters, truths = [], []
    for i in range(config.n_encounters):
        e, truth = gen.encounter(i, table)
        encounters.append(e)
        truths.append(truth)
    return encounters, table, truths


def generate(config: SynthConfig) -> tuple[list[Encounter], CxrEmbeddingTable]:
    """Generate a cohort and its embedding table from ``config``."""
    encounters, table, _ = generate_with_truth(config)
    return encounters, table
