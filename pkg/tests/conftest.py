import numpy as np
import pytest

from ventgate.cohort import CxrSource, CxrStudy, Encounter, ObservationSeries, VentRecord
from ventgate.schema import LAB_IDS, VITAL_IDS


def make_encounter(
    eid="E1",
    admit=0.0,
    discharge=30.0,
    observations=None,
    studies=(),
    peep=(),
    fio2=(),
    **kw,
) -> Encounter:
    if observations is None:
        observations = [
            ObservationSeries(VITAL_IDS[0], [admit - 1.0, admit + 2.5], [80.0, 85.0]),
            ObservationSeries(LAB_IDS[0], [admit - 2.0], [1.0]),
        ]
    return Encounter(
        encounter_id=eid,
        icu_admit=admit,
        icu_discharge=discharge,
        demographics=[60.0, 1.0, 170.0, 70.0, 24.2, 0.0],
        comorbidities=[0] * 62,
        observations=list(observations),
        cxr_studies=list(studies),
        vent=VentRecord(list(peep), list(fio2)),
        **kw,
    )


def icu_study(sid, t, source=CxrSource.ICU):
    return CxrStudy(sid, t, source, sid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdicts(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.__dict__.setdefault("_acceptance_lines", [])


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
