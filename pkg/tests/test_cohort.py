import numpy as np
import numpy.testing as npt
import pytest

from trajsurv.cohort import (MEASURE_BOUNDS, MEASURE_NAMES, GenConfig, NormStats,
                             SubjectTrajectory, VisitRecord, compute_norm_stats,
                             generate_cohort, generate_cohort_with_latents, load_cohort,
                             normalize, save_cohort, split_cohort, summarize_groups,
                             truncate_visits)
from trajsurv.exceptions import DataFormatError
from trajsurv.survival import CoxPH


def make_subject(sid="S1", months=(0, 6, 12), event=False, time=48.0, **kw):
    visits = [VisitRecord(sid, m, np.array([17.0, 32.0, 4.0, 4.0, 27.0]) + 0.1 * m)
              for m in months]
    defaults = dict(age=72.0, sex=1, education_years=16.0, apoe4_count=1,
                    imaging_risk=0.2, time_months=time, event=event)
    defaults.update(kw)
    return SubjectTrajectory(sid, visits, **defaults)


class TestGeneration:
    def test_cohort_size_and_determinism(self):
        cfg = GenConfig(n_subjects=822, seed=1)
        cohort = generate_cohort(cfg)
        assert len(cohort) == 822
        again = generate_cohort(cfg)
        assert all(a.subject_id == b.subject_id and a.time_months == b.time_months
                   for a, b in zip(cohort, again))
        npt.assert_array_equal(cohort[5].measure_matrix(), again[5].measure_matrix())

    def test_calibration_targets(self):
        cohort = generate_cohort(GenConfig(seed=1))
        mmse0 = np.array([s.visits[0].measure("mmse") for s in cohort])
        assert abs(mmse0.mean() - 27.3) < 1.0
        conv = np.array([s.time_months for s in cohort if s.event])
        assert abs(conv.mean() - 30.5) < 6.0
        frac = np.mean([s.event for s in cohort])
        assert abs(frac - 0.383) <= 0.04 + 1e-12

    def test_type_invariants_hold(self):
        cohort = generate_cohort(GenConfig(seed=3))
        lo = np.array([MEASURE_BOUNDS[m][0] for m in MEASURE_NAMES])
        hi = np.array([MEASURE_BOUNDS[m][1] for m in MEASURE_NAMES])
        for s in cohort:
            assert s.visits[0].visit_month == 0
            assert s.visit_months == sorted(set(s.visit_months))
            assert 1 <= len(s.visits) <= 3
            assert s.time_months >= 6.0
            assert s.time_months % 6.0 == 0.0
            assert s.time_months <= 120.0
            M = s.measure_matrix()
            assert np.all(M >= lo) and np.all(M <= hi)

    def test_times_on_visit_grid_have_ties(self):
        cohort = generate_cohort(GenConfig(seed=2))
        event_times = [s.time_months for s in cohort if s.event]
        assert len(set(event_times)) < len(event_times) / 4  # heavy tying

    def test_event_fraction_unreachable_reported(self):
        # 0.383 is not a multiple of 1/50, so a tiny tolerance can never be met
        with pytest.raises(ValueError, match="calibration"):
            generate_cohort(GenConfig(n_subjects=50, seed=0,
                                      target_event_fraction=0.383,
                                      event_fraction_tol=1e-6))

    def test_zero_slope_hazard_recovers_null_coefficient(self):
        fits = []
        for seed in range(3):
            cfg = GenConfig(n_subjects=1500, seed=seed, gamma_slope=0.0)
            cohort, lat = generate_cohort_with_latents(cfg)
            X = lat["z_slope"][:, None]
            t = np.array([s.time_months for s in cohort])
            e = np.array([s.event for s in cohort])
            fits.append(CoxPH().fit(X, t, e).coef_[0])
        assert abs(np.mean(fits)) < 0.08

    def test_true_covariates_recover_hazard_signs(self):
        ok = 0
        for seed in range(20):
            cfg = GenConfig(n_subjects=1000, seed=seed)
            cohort, lat = generate_cohort_with_latents(cfg)
            X = np.column_stack([lat["z_slope"], lat["s0"], lat["img_signal"],
                                 lat["apoe4"].astype(float)])
            t = np.array([s.time_months for s in cohort])
            e = np.array([s.event for s in cohort])
            if (CoxPH().fit(X, t, e).coef_ > 0).all():
                ok += 1
        assert ok >= 19


class TestCsvRoundTrip:
    def test_well_formed_fixture(self, tmp_path):
        cohort = [make_subject("A1"), make_subject("A2", months=(0, 12), event=True,
                                                   time=24.0),
                  make_subject("A3", months=(0,))]
        save_cohort(cohort, tmp_path / "v.csv", tmp_path / "o.csv")
        loaded, diags = load_cohort(tmp_path / "v.csv", tmp_path / "o.csv")
        assert diags == []
        assert [s.subject_id for s in loaded] == ["A1", "A2", "A3"]
        assert loaded[1].event and loaded[1].time_months == 24.0
        npt.assert_array_equal(loaded[0].measure_matrix(),
                               cohort[0].measure_matrix())

    def test_save_load_save_is_byte_identical(self, tmp_path):
        cohort = generate_cohort(GenConfig(n_subjects=30, seed=9))
        save_cohort(cohort, tmp_path / "v1.csv", tmp_path / "o1.csv")
        loaded, diags = load_cohort(tmp_path / "v1.csv", tmp_path / "o1.csv")
        assert diags == []
        save_cohort(loaded, tmp_path / "v2.csv", tmp_path / "o2.csv")
        assert (tmp_path / "v1.csv").read_bytes() == (tmp_path / "v2.csv").read_bytes()
        assert (tmp_path / "o1.csv").read_bytes() == (tmp_path / "o2.csv").read_bytes()

    def test_out_of_bounds_measure_rejected_with_line(self, tmp_path):
        (tmp_path / "v.csv").write_text(
            "subject_id,visit_month,adas13,ravlt_immediate,ravlt_learning,faq,mmse\n"
            "A1,0,17.0,32.0,4.0,4.0,31.0\n")
        (tmp_path / "o.csv").write_text(
            "subject_id,age,sex,education_years,apoe4_count,imaging_risk,"
            "time_months,event\nA1,72.0,1,16.0,1,0.2,48.0,0\n")
        loaded, diags = load_cohort(tmp_path / "v.csv", tmp_path / "o.csv")
        assert loaded == []
        assert any("line 2" in d and "mmse" in d and "30" in d for d in diags)
        # the subject then fails the baseline requirement: one more diagnostic
        assert any("baseline" in d for d in diags)

    def test_unknown_column_rejected_by_name(self, tmp_path):
        (tmp_path / "v.csv").write_text(
            "subject_id,visit_month,adas13,ravlt_immediate,ravlt_learning,faq,mmse,extra\n")
        (tmp_path / "o.csv").write_text("subject_id\n")
        with pytest.raises(DataFormatError, match="extra"):
            load_cohort(tmp_path / "v.csv", tmp_path / "o.csv")

    def test_duplicate_visit_rejected(self, tmp_path):
        (tmp_path / "v.csv").write_text(
            "subject_id,visit_month,adas13,ravlt_immediate,ravlt_learning,faq,mmse\n"
            "A1,0,17.0,32.0,4.0,4.0,27.0\n"
            "A1,0,18.0,31.0,4.0,4.0,27.0\n")
        (tmp_path / "o.csv").write_text(
            "subject_id,age,sex,education_years,apoe4_count,imaging_risk,"
            "time_months,event\nA1,72.0,1,16.0,1,0.2,48.0,0\n")
        loaded, diags = load_cohort(tmp_path / "v.csv", tmp_path / "o.csv")
        assert len(loaded) == 1  # first row wins, duplicate line diagnosed
        assert any("duplicate visit" in d and "line 3" in d for d in diags)

    def test_missing_outcome_and_missing_baseline_reported(self, tmp_path):
        (tmp_path / "v.csv").write_text(
            "subject_id,visit_month,adas13,ravlt_immediate,ravlt_learning,faq,mmse\n"
            "A1,6,17.0,32.0,4.0,4.0,27.0\n"
            "A2,0,17.0,32.0,4.0,4.0,27.0\n")
        (tmp_path / "o.csv").write_text(
            "subject_id,age,sex,education_years,apoe4_count,imaging_risk,"
            "time_months,event\nA1,72.0,1,16.0,1,0.2,48.0,0\n")
        loaded, diags = load_cohort(tmp_path / "v.csv", tmp_path / "o.csv")
        assert loaded == []
        assert any("A1" in d and "baseline" in d for d in diags)
        assert any("A2" in d and "outcome" in d for d in diags)

    def test_malformed_row_line_numbers(self, tmp_path):
        (tmp_path / "v.csv").write_text(
            "subject_id,visit_month,adas13,ravlt_immediate,ravlt_learning,faq,mmse\n"
            "A1,0,17.0,32.0,4.0,4.0,27.0\n"
            "A1,6,not_a_number,32.0,4.0,4.0,27.0\n")
        (tmp_path / "o.csv").write_text(
            "subject_id,age,sex,education_years,apoe4_count,imaging_risk,"
            "time_months,event\nA1,72.0,1,16.0,1,0.2,48.0,0\n")
        loaded, diags = load_cohort(tmp_path / "v.csv", tmp_path / "o.csv")
        assert len(loaded) == 1 and len(loaded[0].visits) == 1
        assert any("line 3" in d and "adas13" in d for d in diags)


class TestTruncation:
    def test_converter_at_six_keeps_baseline_only(self):
        s = make_subject(months=(0, 6, 12), event=True, time=6.0)
        assert truncate_visits(s, 12).visit_months == [0]
        assert truncate_visits(s, 6).visit_months == [0]

    def test_full_data_noncoverter_six_month_horizon(self):
        s = make_subject(months=(0, 6, 12))
        assert truncate_visits(s, 6).visit_months == [0, 6]

    def test_full_data_nonconverter_twelve_month_horizon(self):
        s = make_subject(months=(0, 6, 12))
        assert truncate_visits(s, 12).visit_months == [0, 6, 12]

    def test_missing_visit_smci(self):
        s = make_subject(months=(0, 12))
        assert truncate_visits(s, 6).visit_months == [0]
        assert truncate_visits(s, 12).visit_months == [0, 12]

    def test_idempotent(self):
        for s in (make_subject(months=(0, 6, 12), event=True, time=12.0),
                  make_subject(months=(0, 6))):
            for h in (6, 12):
                once = truncate_visits(s, h)
                twice = truncate_visits(once, h)
                assert once.visit_months == twice.visit_months

    def test_bad_horizon_rejected(self):
        with pytest.raises(ValueError):
            truncate_visits(make_subject(), 9)


class TestNormalization:
    def test_train_measures_standardized(self):
        cohort = generate_cohort(GenConfig(n_subjects=60, seed=4))
        stats = compute_norm_stats(cohort)
        normed = normalize(cohort, stats)
        rows = np.concatenate([s.measure_matrix() for s in normed], axis=0)
        npt.assert_allclose(rows.mean(axis=0), 0.0, atol=1e-10)
        npt.assert_allclose(rows.std(axis=0), 1.0, atol=1e-10)

    def test_test_split_not_centered_by_train_stats(self):
        cohort = generate_cohort(GenConfig(n_subjects=100, seed=5))
        train, test = cohort[:50], cohort[50:]
        stats = compute_norm_stats(train)
        rows = np.concatenate([s.measure_matrix() for s in normalize(test, stats)], axis=0)
        assert np.abs(rows.mean(axis=0)).max() > 1e-6

    def test_zero_variance_measure_named(self):
        visits = [VisitRecord(f"Z{i}", 0, np.array([17.0, 32.0, 4.0, 4.0, 27.0]))
                  for i in range(4)]
        cohort = [SubjectTrajectory(f"Z{i}", [v], 70.0, 0, 12.0, 0, 0.0, 12.0, False)
                  for i, v in enumerate(visits)]
        with pytest.raises(ValueError, match="adas13"):
            compute_norm_stats(cohort)

    def test_stats_round_trip_dict(self):
        stats = NormStats(np.arange(5.0), np.arange(1.0, 6.0))
        again = NormStats.from_dict(stats.to_dict())
        npt.assert_array_equal(stats.mean, again.mean)
        npt.assert_array_equal(stats.sd, again.sd)


class TestSplit:
    def test_exact_train_count(self):
        cohort = generate_cohort(GenConfig(n_subjects=822, seed=1))
        train, test = split_cohort(cohort, 383 / 822, seed=0)
        assert len(train) == 383 and len(test) == 822 - 383

    def test_stratified_event_fractions(self):
        cohort = generate_cohort(GenConfig(n_subjects=822, seed=1))
        full = np.mean([s.event for s in cohort])
        train, test = split_cohort(cohort, 0.5, seed=3)
        for part in (train, test):
            frac = np.mean([s.event for s in part])
            assert abs(frac - full) / full < 0.10

    def test_disjoint_exhaustive_deterministic(self):
        cohort = generate_cohort(GenConfig(n_subjects=80, seed=6))
        t1, e1 = split_cohort(cohort, 0.5, seed=11)
        t2, e2 = split_cohort(cohort, 0.5, seed=11)
        assert [s.subject_id for s in t1] == [s.subject_id for s in t2]
        ids = {s.subject_id for s in t1} | {s.subject_id for s in e1}
        assert len(ids) == 80
        assert not ({s.subject_id for s in t1} & {s.subject_id for s in e1})

    def test_tags_honored_verbatim(self):
        cohort = [make_subject(f"T{i}", event=(i % 3 == 0), time=12.0 + 6 * i,
                               cohort_tag="train" if i < 6 else "test")
                  for i in range(12)]
        train, test = split_cohort(cohort, 0.99, seed=0)
        assert [s.subject_id for s in train] == [f"T{i}" for i in range(6)]
        assert [s.subject_id for s in test] == [f"T{i}" for i in range(6, 12)]

    def test_partial_tags_rejected(self):
        cohort = [make_subject("P1", cohort_tag="train"), make_subject("P2")]
        with pytest.raises(ValueError):
            split_cohort(cohort, 0.5, seed=0)

    def test_too_few_events_rejected(self):
        cohort = [make_subject(f"F{i}", event=(i == 0), time=12.0) for i in range(10)]
        with pytest.raises(ValueError):
            split_cohort(cohort, 0.5, seed=0)


def test_summarize_groups_has_both_rows():
    cohort = generate_cohort(GenConfig(n_subjects=100, seed=7))
    rows = summarize_groups(cohort)
    assert [r["group"] for r in rows] == ["sMCI", "pMCI"]
    assert all(r["n"] > 0 for r in rows)
    assert all("mmse_mean" in r and "time_sd" in r for r in rows)
