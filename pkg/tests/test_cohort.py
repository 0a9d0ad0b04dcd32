import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_encounter
from ventgate.cohort import (
    Exclusion,
    InvalidEncounter,
    ObservationSeries,
    VentRecord,
    apply_inclusion_criteria,
    binary_imv_label,
    derive_t0,
    prediction_timestamps,
    read_cohort,
    severity_points,
    write_cohort,
)


def brute_t0(peep, fio2, tol):
    pairs = [min(a, b) for a in peep for b in fio2 if abs(a - b) <= tol]
    return min(pairs) if pairs else None


class TestDeriveT0:
    def test_first_common(self):
        assert derive_t0(VentRecord([10, 12], [12, 13])) == 12

    def test_no_peep(self):
        assert derive_t0(VentRecord([], [5])) is None

    def test_tolerance_reports_earlier_member(self):
        assert derive_t0(VentRecord([4.2], [4.6]), 0.5) == 4.2
        assert derive_t0(VentRecord([4.6], [4.2]), 0.5) == 4.2

    def test_negative_tolerance(self):
        with pytest.raises(ValueError):
            derive_t0(VentRecord([1], [1]), -1)

    @settings(max_examples=300, deadline=None)
    @given(
        st.lists(st.integers(0, 60), max_size=8),
        st.lists(st.integers(0, 60), max_size=8),
        st.integers(0, 6),
    )
    def test_matches_pairwise_oracle(self, peep, fio2, tol_quarter):
        peep = [p / 4 for p in peep]
        fio2 = [f / 4 for f in fio2]
        tol = tol_quarter / 4
        assert derive_t0(VentRecord(peep, fio2), tol) == brute_t0(peep, fio2, tol)


class TestLabel:
    @pytest.mark.parametrize("t,t0,want", [(10, 20, 1), (10, 40, 0), (10, None, 0), (10, 34, 1), (10, 10, 0), (10, 34.01, 0)])
    def test_window(self, t, t0, want):
        assert binary_imv_label(t, t0) == want

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 30))
    def test_monotone_toward_onset(self, t, t0, step):
        t2 = t + step
        if binary_imv_label(t, t0) == 1 and t2 < t0:
            assert binary_imv_label(t2, t0) == 1


def rule_table(pf, sf, within, beyond):
    """Independent evaluation: collect every applicable row, take the maximum."""
    use_pf = pf is not None and not math.isnan(pf)
    use_sf = not use_pf and sf is not None and not math.isnan(sf)
    hits = [0]
    if use_pf or use_sf:
        r, mild, severe = (pf, 300, 200) if use_pf else (sf, 221, 141)
        if severe < r <= mild:
            hits.append(1)
        if r <= severe:
            hits.append(2)
        if r <= severe and within:
            hits.append(4)
    if within:
        hits.append(3)
    if beyond:
        hits.append(5)
    return max(hits)


class TestSeverity:
    def test_examples(self):
        assert severity_points(pf=250) == 1
        assert severity_points(pf=150, imv_within_24h=True) == 4
        assert severity_points(sf=130) == 2
        assert severity_points(imv_beyond_24h=True) == 5
        assert severity_points() == 0
        assert severity_points(pf=float("nan"), sf=200) == 1

    def test_pf_takes_precedence(self):
        assert severity_points(pf=350, sf=100) == 0

    def test_negative_ratio(self):
        with pytest.raises(ValueError):
            severity_points(pf=-1)

    @settings(max_examples=500)
    @given(
        st.one_of(st.none(), st.floats(0, 600)),
        st.one_of(st.none(), st.floats(0, 600)),
        st.booleans(),
        st.booleans(),
    )
    def test_matches_rule_table(self, pf, sf, within, beyond):
        assert severity_points(pf, sf, within, beyond) == rule_table(pf, sf, within, beyond)


class TestInclusion:
    def test_short_stay(self):
        ok, why = apply_inclusion_criteria(make_encounter(discharge=3.0))
        assert not ok and Exclusion.MIN_STAY in why

    def test_dnr(self):
        ok, why = apply_inclusion_criteria(make_encounter(dnr=True))
        assert not ok and why == [Exclusion.DNR]

    def test_all_satisfied(self):
        assert apply_inclusion_criteria(make_encounter(discharge=6.0)) == (True, [])

    def test_every_violation_listed(self):
        e = make_encounter(discharge=2.0, dnr=True, pre_icu_ventilated=True, observations=[])
        ok, why = apply_inclusion_criteria(e)
        assert set(why) == set(Exclusion)

    def test_pure(self):
        e = make_encounter(dnr=True)
        assert apply_inclusion_criteria(e) == apply_inclusion_criteria(e)


class TestGrid:
    def test_until_discharge(self):
        assert prediction_timestamps(make_encounter(discharge=10.0)) == [4, 5, 6, 7, 8, 9]

    def test_stops_at_onset(self):
        assert prediction_timestamps(make_encounter(discharge=50.0, peep=[6.0], fio2=[6.0])) == [4, 5]

    def test_surgery_blackout(self):
        ts = prediction_timestamps(make_encounter(discharge=40.0, surgeries=[5.0]))
        assert ts == [4, 30, 31, 32, 33, 34, 35, 36, 37, 38, 39]

    def test_precedes_onset(self):
        e = make_encounter(discharge=80.0, peep=[20.5], fio2=[20.5])
        assert all(t < e.t0 for t in prediction_timestamps(e))


class TestCohortFile:
    def test_round_trip(self, tmp_path):
        a = make_encounter("A", medications=[(3, 1.5)], surgeries=[-2.0], peep=[7.0], fio2=[7.0])
        b = make_encounter("B", dnr=True)
        p = tmp_path / "c.jsonl"
        write_cohort(p, [a, b])
        assert read_cohort(p) == [a, b]
        first = p.read_bytes()
        write_cohort(p, read_cohort(p))
        assert p.read_bytes() == first

    def test_field_names(self, tmp_path):
        import json

        p = tmp_path / "c.jsonl"
        write_cohort(p, [make_encounter()])
        rec = json.loads(p.read_text().splitlines()[0])
        assert set(rec) == {
            "encounter_id", "icu_admit", "icu_discharge", "demographics", "comorbidities",
            "medications", "dnr", "surgeries", "pre_icu_ventilated", "observations",
            "cxr_studies", "peep_times", "fio2_times",
        }

    def test_validation(self):
        e = make_encounter(observations=[ObservationSeries(0, [2.0, 1.0], [1.0, 2.0])])
        with pytest.raises(InvalidEncounter):
            e.validate()
        with pytest.raises(InvalidEncounter):
            make_encounter(admit=5.0, discharge=5.0).validate()
