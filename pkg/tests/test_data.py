import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordgam.data import (Dataset, collapse_binary, load_csv, merge_top_categories, read_schema,
                         write_csv)
from ordgam.exceptions import SchemaError, ValidationError

REFERENCE_COUNTS = [3641, 1616, 1433, 639, 10]


def _frame(scores, n_sites=8):
    scores = np.asarray(scores)
    n = scores.size
    return pd.DataFrame({
        "patient": [f"p{i // n_sites}" for i in range(n)],
        "eval": 1,
        "site": [f"s{i % n_sites}" for i in range(n)],
        "score": scores,
        "cumdos_site": 10.0,
    })


def _counts_dataset(counts):
    scores = np.repeat(np.arange(len(counts)), counts)
    return Dataset.from_frame(_frame(scores), n_categories=len(counts))


class TestLoadCsv:
    def test_derives_site_dose(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdose,perc\n"
                     "1,1,hard,0,30,50\n1,1,soft,1,30,80\n1,2,hard,1,40,50\n1,2,soft,2,40,80\n")
        d = load_csv(p)
        assert len(d) == 4
        assert d.frame.loc[0, "cumdos_site"] == 15.0
        np.testing.assert_allclose(d.frame["cumdos_site"], [15.0, 24.0, 20.0, 32.0])

    def test_score_out_of_range_cites_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdos_site\n1,1,a,0,1\n1,1,b,7,1\n")
        with pytest.raises(ValidationError, match=r"score 7 at row 2 outside 0\.\.4"):
            load_csv(p, n_categories=5)

    def test_missing_column_named(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,score,cumdos_site\n1,1,0,1\n")
        with pytest.raises(SchemaError, match="site"):
            load_csv(p)

    def test_missing_dose_columns(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdose\n1,1,a,0,1\n")
        with pytest.raises(SchemaError, match="perc"):
            load_csv(p)

    def test_decreasing_cumdose_names_patient(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdose,perc\n"
                     "A7,1,a,0,20,50\nA7,2,a,0,10,50\n")
        with pytest.raises(ValidationError, match="A7"):
            load_csv(p)

    def test_inconsistent_site_dose(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdose,perc,cumdos_site\n1,1,a,0,20,50,10.5\n")
        with pytest.raises(ValidationError, match="cumdos_site"):
            load_csv(p)

    def test_schema_maps_headers(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("ID,visit,loc,muc,dose,pct\n3,1,x,1,10,50\n3,1,y,0,10,100\n")
        s = tmp_path / "schema.json"
        s.write_text(json.dumps({"patient": "ID", "eval": "visit", "site": "loc", "score": "muc",
                                 "cumdose": "dose", "perc": "pct", "levels": {"site": ["y", "x"]}}))
        d = load_csv(p, read_schema(s))
        assert d.site_levels == ("y", "x")
        assert list(d.frame["site"]) == ["y", "x"]
        np.testing.assert_allclose(d.frame["cumdos_site"], [10.0, 5.0])

    def test_schema_header_not_found(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdos_site\n1,1,a,0,1\n")
        with pytest.raises(SchemaError, match="nope"):
            load_csv(p, {"score": "nope"})

    def test_sorted_and_indexed(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdos_site\n"
                     "10,2,b,0,2\n2,1,a,1,1\n10,1,a,0,1\n2,1,b,0,1\n10,1,b,1,1\n")
        d = load_csv(p, {"levels": {"site": ["a", "b"]}})
        assert d.patients == ("2", "10")
        assert list(zip(d.frame["patient"], d.frame["eval"], d.frame["site"])) == [
            ("2", 1, "a"), ("2", 1, "b"), ("10", 1, "a"), ("10", 1, "b"), ("10", 2, "b")]
        assert d.patient_index == {"2": slice(0, 2), "10": slice(2, 5)}

    def test_missing_scores_dropped(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdos_site\n1,1,a,0,1\n1,1,b,,1\n")
        assert len(load_csv(p)) == 1

    def test_duplicate_observation(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdos_site\n1,1,a,0,1\n1,1,a,1,1\n")
        with pytest.raises(ValidationError, match="duplicate"):
            load_csv(p)

    def test_perc_range(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdose,perc\n1,1,a,0,10,250\n")
        with pytest.raises(ValidationError, match="perc"):
            load_csv(p)

    def test_varying_perc_warns(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("patient,eval,site,score,cumdose,perc\n1,1,a,0,10,50\n1,2,a,0,20,60\n")
        with pytest.warns(UserWarning, match="perc varies"):
            load_csv(p)

    def test_paper_sized_file(self, tmp_path):
        # 75 patients, 918 evaluations x 8 sites, 5 unscored rows -> 7339 records
        rng = np.random.default_rng(0)
        n_eval = np.full(75, 12)
        n_eval[rng.choice(75, 18, replace=False)] += 1
        assert n_eval.sum() == 918
        rows = []
        for i, ne in enumerate(n_eval):
            for j in range(1, ne + 1):
                for s in range(8):
                    rows.append((i + 1, j, f"s{s}", int(rng.integers(0, 5)), 2.0 * j, 50.0 + 5 * s))
        df = pd.DataFrame(rows, columns=["patient", "eval", "site", "score", "cumdose", "perc"])
        df["score"] = df["score"].astype("Int64")
        df.loc[rng.choice(len(df), 5, replace=False), "score"] = pd.NA
        path = tmp_path / "big.csv"
        df.to_csv(path, index=False)
        d = load_csv(path, n_categories=5)
        assert len(d) == 7339
        assert len(d.patients) == 75


class TestRoundTrip:
    def test_write_then_load(self, tmp_path, small_data):
        path = tmp_path / "rt.csv"
        write_csv(small_data, path)
        back = load_csv(path, {"levels": {k: list(v) for k, v in small_data.factor_levels.items()
                                          if k != "patient"}},
                        n_categories=small_data.n_categories)
        pd.testing.assert_frame_equal(back.frame, small_data.frame)
        assert back.factor_levels == small_data.factor_levels

    def test_finite_decimals_bit_identical(self, tmp_path):
        path = tmp_path / "dec.csv"
        path.write_text("patient,eval,site,score,cumdose,perc,age\n1,1,a,0,0.1,33.3,61.7\n")
        d = load_csv(path)
        write_csv(d, tmp_path / "out.csv")
        d2 = load_csv(tmp_path / "out.csv")
        pd.testing.assert_frame_equal(d.frame, d2.frame, check_exact=True)


class TestCollapse:
    def test_reference_counts_r1(self):
        d = collapse_binary(_counts_dataset(REFERENCE_COUNTS), 1)
        assert d.n_categories == 2
        np.testing.assert_array_equal(d.counts(), [5257, 2082])

    def test_reference_counts_r0(self):
        d = collapse_binary(_counts_dataset(REFERENCE_COUNTS), 0)
        np.testing.assert_array_equal(d.counts(), [3641, 3698])

    def test_empty_top_category(self):
        d = collapse_binary(_counts_dataset([3, 2, 0]), 1)
        np.testing.assert_array_equal(d.counts(), [5, 0])

    @pytest.mark.parametrize("r", [-1, 4])
    def test_out_of_range(self, r):
        with pytest.raises(ValueError):
            collapse_binary(_counts_dataset(REFERENCE_COUNTS), r)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=2, max_size=6))
    def test_class0_is_cumulative_count(self, counts):
        if sum(counts) == 0:
            counts[0] = 1
        d = _counts_dataset(counts)
        for r in range(len(counts) - 1):
            c = collapse_binary(d, r)
            assert len(c) == len(d)
            assert c.counts()[0] == sum(counts[: r + 1])


class TestMerge:
    def test_reference_counts_merge(self):
        d = merge_top_categories(_counts_dataset(REFERENCE_COUNTS), 3)
        assert d.n_categories == 4
        np.testing.assert_array_equal(d.counts(), [3641, 1616, 1433, 649])

    def test_merge_last_is_identity(self):
        d = _counts_dataset([4, 3, 2])
        m = merge_top_categories(d, 2)
        assert m.n_categories == 3
        np.testing.assert_array_equal(m.scores, d.scores)

    def test_arithmetic(self):
        m = merge_top_categories(_counts_dataset([5, 5, 5]), 1)
        assert m.n_categories == 2
        np.testing.assert_array_equal(m.counts(), [5, 10])

    @pytest.mark.parametrize("k", [0, 5])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            merge_top_categories(_counts_dataset(REFERENCE_COUNTS), k)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=3, max_size=6), st.data())
    def test_record_count_invariant(self, counts, data):
        counts[0] += 1
        k = data.draw(st.integers(1, len(counts) - 1))
        d = _counts_dataset(counts)
        m = merge_top_categories(d, k)
        assert len(m) == len(d)
        assert m.counts()[k] == sum(counts[k:])


class TestDataset:
    def test_subset_keeps_levels(self, small_data):
        sub = small_data.select_patients(small_data.patients[:3])
        assert sub.site_levels == small_data.site_levels
        assert sub.patients == small_data.patients[:3]
        assert set(sub.frame["patient"]) == set(small_data.patients[:3])

    def test_records(self, small_data):
        rec = next(small_data.records())
        assert rec.patient_id == small_data.frame.loc[0, "patient"]
        assert rec.eval_index == 1
