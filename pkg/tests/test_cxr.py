import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import icu_study, make_encounter
from ventgate.cohort import CxrSource
from ventgate.cxr import (
    CxrEmbeddingTable,
    EmbeddingFileError,
    UnresolvedEmbedding,
    align,
    load_embeddings,
    save_embeddings,
)

OTHER = CxrSource.OTHER_DEPT


def rows(samples):
    return {s.timestamp: (s.study_id, s.embedding_age_hours) for s in samples}


class TestAlign:
    def test_forward_fill_from_acquisition(self):
        e = make_encounter(studies=[icu_study("S1", 6.0)])
        got = rows(align(e, np.arange(4.0, 11.0)))
        assert sorted(got) == [6, 7, 8, 9, 10]
        assert [got[t][1] for t in sorted(got)] == [0, 1, 2, 3, 4]

    def test_newer_study_wins(self):
        e = make_encounter(studies=[icu_study("S1", 6.0), icu_study("S2", 9.0)])
        assert rows(align(e, [10.0]))[10.0][0] == "S2"

    def test_other_department_lookback(self):
        e = make_encounter(studies=[icu_study("O", -70.0, OTHER)])
        got = rows(align(e, [2.0, 2.0 + 1e-9, 3.0]))
        assert got == {2.0: ("O", 72.0)}

    def test_other_department_too_old(self):
        e = make_encounter(studies=[icu_study("O", -76.0, OTHER)])
        assert align(e, [4.0]) == []

    def test_icu_study_has_no_lookback(self):
        e = make_encounter(studies=[icu_study("S", 0.5)])
        assert rows(align(e, [500.0]))[500.0] == ("S", 499.5)

    def test_icu_study_takes_priority(self):
        e = make_encounter(studies=[icu_study("I", 6.0), icu_study("O", 8.0, OTHER)])
        got = rows(align(e, [7.0, 9.0]))
        assert got[7.0][0] == "I" and got[9.0][0] == "I"

    def test_tie_broken_by_study_id(self):
        e = make_encounter(studies=[icu_study("B", 5.0), icu_study("A", 5.0)])
        assert rows(align(e, [6.0]))[6.0][0] == "A"

    def test_unresolvable_key(self):
        e = make_encounter(studies=[icu_study("S1", 6.0)])
        with pytest.raises(UnresolvedEmbedding):
            align(e, [7.0], CxrEmbeddingTable(2))

    @settings(max_examples=150, deadline=None)
    @given(
        st.lists(
            st.tuples(st.integers(-400, 200), st.booleans()), max_size=6, unique_by=lambda s: s[0]
        )
    )
    def test_no_leakage_and_piecewise_constant(self, acq):
        studies = [
            icu_study(f"S{i}", t / 4, CxrSource.ICU if icu else OTHER) for i, (t, icu) in enumerate(acq)
        ]
        e = make_encounter(studies=studies)
        ts = np.arange(4.0, 60.0)
        got = align(e, ts)
        by_id = {s.study_id: s for s in studies}
        for a in got:
            s = by_id[a.study_id]
            assert s.acquired_at <= a.timestamp
            assert a.embedding_age_hours == a.timestamp - s.acquired_at
            if s.source is OTHER:
                assert a.embedding_age_hours <= 72
        # the matched study only changes at an acquisition time
        acq_times = {s.acquired_at for s in studies}
        for prev, cur in zip(got, got[1:]):
            if cur.study_id != prev.study_id and by_id[cur.study_id].source is CxrSource.ICU:
                assert any(prev.timestamp < t <= cur.timestamp for t in acq_times)


class TestEmbeddingFile:
    def table(self):
        t = CxrEmbeddingTable(3, encoder="encoder-a")
        t.add("b", [1.0, 2.0, 3.0])
        t.add("a", np.array([0.5, -1.0, 1e-3]))
        return t

    def test_round_trip(self, tmp_path):
        p = tmp_path / "e.cxre"
        t = self.table()
        save_embeddings(p, t)
        back = load_embeddings(p)
        assert back.dim == 3 and back.encoder == "encoder-a" and len(back) == 2
        for k in ("a", "b"):
            np.testing.assert_array_equal(back[k], t[k])
        first = p.read_bytes()
        save_embeddings(p, back)
        assert p.read_bytes() == first

    def test_truncated(self, tmp_path):
        p = tmp_path / "e.cxre"
        save_embeddings(p, self.table())
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(EmbeddingFileError) as exc:
            load_embeddings(p)
        assert exc.value.code == "TRUNCATED"

    def test_zero_dim(self, tmp_path):
        p = tmp_path / "e.cxre"
        p.write_bytes(b"CXRE" + (0).to_bytes(4, "little") + (0).to_bytes(4, "little"))
        with pytest.raises(EmbeddingFileError) as exc:
            load_embeddings(p)
        assert exc.value.code == "INVALID_DIM"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "e.cxre"
        p.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(EmbeddingFileError) as exc:
            load_embeddings(p)
        assert exc.value.code == "BAD_MAGIC"

    def test_dim_mismatch_on_add(self):
        with pytest.raises(ValueError):
            CxrEmbeddingTable(3).add("x", [1.0, 2.0])
