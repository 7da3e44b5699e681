import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsimta.cohort import (
    UNK,
    DatasetError,
    IterativeImputer,
    PreprocessStats,
    apply_preprocessor,
    derive_labels,
    dumps_record,
    eligibility_filter,
    feature_missingness_filter,
    fit_preprocessor,
    read_dataset,
    record_from_json,
    robust_stats,
    sample_cutoff,
    training_cutoff_range,
    truncate_and_label,
    window_events,
    write_dataset,
)

from helpers import raw_record


def blood(t, **vals):
    return (t, "blood", vals)


def img(t, **vals):
    return (t, "imaging", vals)


def med(t, *codes):
    return (t, "medication", codes)


# schema

def test_dataset_roundtrip(tmp_path):
    r = raw_record("X1", [blood(-3, a=1.0, b=None), med(5, "N02AA01"), img(10, v=3.5)], died=True, tte=120.5)
    path = tmp_path / "d.jsonl"
    write_dataset([r], path)
    back = read_dataset(path)
    assert dumps_record(back[0]) == dumps_record(r)
    assert back[0].events[0].features["b"] is None


@pytest.mark.parametrize("bad, msg", [
    ({"patient_id": "a"}, "fields"),
    ({"patient_id": 3, "event_indicator": False, "time_to_event_days": None, "last_followup_days": 1,
      "events": []}, "patient_id"),
    ({"patient_id": "a", "event_indicator": "yes", "time_to_event_days": None, "last_followup_days": 1,
      "events": []}, "boolean"),
    ({"patient_id": "a", "event_indicator": True, "time_to_event_days": None, "last_followup_days": 1,
      "events": []}, "required"),
    ({"patient_id": "a", "event_indicator": False, "time_to_event_days": 3, "last_followup_days": 1,
      "events": []}, "null"),
    ({"patient_id": "a", "event_indicator": False, "time_to_event_days": None, "last_followup_days": 1,
      "events": [{"t_days": 0, "modality": "genomics"}]}, "modality"),
    ({"patient_id": "a", "event_indicator": False, "time_to_event_days": None, "last_followup_days": 1,
      "events": [{"t_days": 0, "modality": "medication", "features": {"x": 1}}]}, "codes only"),
    ({"patient_id": "a", "event_indicator": False, "time_to_event_days": None, "last_followup_days": 1,
      "events": [{"t_days": 0, "modality": "blood", "codes": ["x"]}]}, "features only"),
    ({"patient_id": "a", "event_indicator": False, "time_to_event_days": None, "last_followup_days": 1,
      "events": [{"t_days": 0, "modality": "blood", "features": {"x": "high"}}]}, "finite number"),
])
def test_schema_violations(bad, msg):
    with pytest.raises(DatasetError, match=msg):
        record_from_json(bad)


def test_read_dataset_reports_line(tmp_path):
    good = dumps_record(raw_record("A", []))
    path = tmp_path / "d.jsonl"
    path.write_text(good + "\n\n" + good.replace('"A"', "7") + "\n")
    with pytest.raises(DatasetError, match="line 3"):
        read_dataset(path)
    path.write_text("{not json\n")
    with pytest.raises(DatasetError, match="line 1: invalid JSON"):
        read_dataset(path)


def test_docs_examples_parse():
    import pathlib
    doc = (pathlib.Path(__file__).parents[1] / "docs" / "dataset_schema.md").read_text()
    lines = [ln for ln in doc.splitlines() if ln.startswith('{"patient_id"')]
    assert len(lines) == 2
    recs = [record_from_json(json.loads(ln)) for ln in lines]
    assert recs[1].event_indicator and recs[1].time_to_event_days == 200.5


# eligibility

def test_eligibility_examples():
    early = raw_record("early", [], died=True, tte=30.0)
    short = raw_record("short", [], lfu=400.0)
    ok_alive = raw_record("alive", [], lfu=500.0)
    died200 = raw_record("d200", [], died=True, tte=200.0)
    inc, exc = eligibility_filter([early, short, ok_alive, died200])
    assert [r.patient_id for r in inc] == ["alive", "d200"]
    assert [(r.patient_id, why) for r, why in exc] == [("early", "followup<90d"), ("short", "no-12-month-window")]


def test_alive_followup_below_90_reason():
    _, exc = eligibility_filter([raw_record("x", [], lfu=60.0)])
    assert exc[0][1] == "followup<90d"


# labels

def test_labels_death_at_200_cutoff_90():
    assert derive_labels(True, 200.0, 200.0, 90.0).labels == (False, True, True, True)


def test_labels_alive_500():
    assert derive_labels(False, None, 500.0, 90.0).labels == (False, False, False, False)


def test_labels_censored_are_undefined():
    ls = derive_labels(False, None, 300.0, 100.0)
    assert ls.labels == (False, False, None, None)
    assert ls.mask.tolist() == [True, True, False, False]


def test_cutoff_post_mortem():
    with pytest.raises(DatasetError, match="cutoff-post-mortem"):
        derive_labels(True, 80.0, 80.0, 90.0)


def test_truncate_drops_later_events():
    r = raw_record("x", [blood(10, a=1.0), blood(100, a=2.0), med(90, "A")], lfu=800.0)
    cut, labels = truncate_and_label(r, 90.0)
    assert [e.t_days for e in cut.events] == [10.0, 90.0]
    assert labels.labels == (False,) * 4


@settings(max_examples=200, deadline=None)
@given(st.booleans(), st.floats(90, 1500), st.floats(450, 1500), st.floats(90, 365))
def test_label_monotone_property(died, tte, lfu, cutoff):
    if died and tte < cutoff:
        return
    ls = derive_labels(died, tte if died else None, tte if died else lfu, cutoff)
    defined = [lab for lab in ls.labels if lab is not None]
    assert defined == sorted(defined)
    # undefined labels only ever follow defined ones
    first_none = next((i for i, lab in enumerate(ls.labels) if lab is None), 4)
    assert all(lab is None for lab in ls.labels[first_none:])


def test_sample_cutoff_support_and_determinism():
    a = [sample_cutoff(np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    rng = np.random.default_rng(0)
    draws = np.array([sample_cutoff(rng) for _ in range(10_000)])
    assert draws.min() >= 90.0 and draws.max() <= 365.0
    with pytest.raises(ValueError):
        sample_cutoff(rng, 100, 100)


def test_training_cutoff_range_bounded_by_death():
    assert training_cutoff_range(raw_record("a", [], died=True, tte=200.0)) == (90.0, 200.0)
    assert training_cutoff_range(raw_record("b", [], died=True, tte=80.0)) is None
    assert training_cutoff_range(raw_record("c", [], lfu=900.0)) == (90.0, 365.0)


# missingness

def _cohort_with_missing(frac_img, frac_blood, n=10):
    recs = []
    for i in range(n):
        iv = None if i < frac_img * n else 1.0 + i
        bv = None if i < frac_blood * n else 2.0 + i
        recs.append(raw_record(f"p{i}", [blood(0, keep=float(i), maybe=bv), img(0, full=float(i), half=iv)]))
    return recs


def test_missingness_thresholds():
    kept = feature_missingness_filter(_cohort_with_missing(0.5, 0.6))
    assert kept["imaging"] == ["full"]  # exactly 50 % missing -> dropped
    assert kept["blood"] == ["keep", "maybe"]  # exactly 60 % missing -> kept
    kept = feature_missingness_filter(_cohort_with_missing(0.4, 0.7))
    assert kept["imaging"] == ["full", "half"]
    assert kept["blood"] == ["keep"]


def test_missingness_degenerate_modality():
    recs = [raw_record("a", [blood(0, x=None), img(0, y=1.0)])]
    with pytest.raises(DatasetError, match="modality degenerate"):
        feature_missingness_filter(recs)


def test_missingness_ignores_out_of_window_events():
    recs = [raw_record("a", [blood(0, x=1.0), blood(400, x=None), img(0, y=1.0)])]
    assert feature_missingness_filter(recs)["blood"] == ["x"]
    assert len(window_events(recs[0])) == 2


# robust scaling

def _type7(col, q):
    s = np.sort(col)
    h = (len(s) - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_robust_stats_match_type7_oracle(values):
    med, iqr = robust_stats(np.array(values)[:, None])
    col = np.array(values)
    assert med[0] == pytest.approx(_type7(col, 0.5), rel=1e-12, abs=1e-9)
    assert iqr[0] == pytest.approx(_type7(col, 0.75) - _type7(col, 0.25), rel=1e-9, abs=1e-6)


def test_outlier_robust_scaling():
    recs = [raw_record(f"p{i}", [blood(0, a=v, b=1.0), img(0, c=1.0)]) for i, v in enumerate([1.0, 2.0, 100.0])]
    stats = fit_preprocessor(recs, feature_missingness_filter(recs))
    assert stats.medians["blood"][0] == 2.0
    assert stats.iqrs["blood"][0] == pytest.approx(49.5)
    z = [apply_preprocessor(r, stats).modalities["blood"].x[0, 0] for r in recs]
    assert abs(z[0]) < 0.05 and z[1] == 0.0 and z[2] > 1.9
    # constant feature b: IQR 0 -> divisor 1
    assert stats.iqrs["blood"][1] == 0.0
    assert apply_preprocessor(recs[0], stats).modalities["blood"].x[0, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=20, unique=True))
def test_scaling_preserves_order(values):
    recs = [raw_record(f"p{i}", [blood(0, a=v), img(0, c=1.0)]) for i, v in enumerate(values)]
    stats = fit_preprocessor(recs, feature_missingness_filter(recs))
    z = [apply_preprocessor(r, stats).modalities["blood"].x[0, 0] for r in recs]
    # order-preserving up to ties created by rounding of nearly equal values
    order = np.argsort(values)
    assert np.all(np.diff(np.array(z)[order]) >= 0)


# imputer

def test_imputer_no_missing_one_round():
    imp = IterativeImputer()
    Z = np.random.default_rng(0).normal(size=(20, 3))
    out = imp.fit(Z)
    assert imp.rounds == 1 and np.array_equal(out, Z)
    assert np.array_equal(imp.transform(Z), Z)


def test_imputer_correlated_pair():
    x = np.linspace(-2, 2, 9)
    Z = np.column_stack([x, 2.0 * x + 0.5])
    Z[3, 1] = np.nan
    imp = IterativeImputer()
    filled = imp.fit(Z)
    assert filled[3, 1] == pytest.approx(2.0 * x[3] + 0.5, abs=1e-2)
    probe = np.array([[1.3, np.nan]])
    assert imp.transform(probe)[0, 1] == pytest.approx(2.0 * 1.3 + 0.5, abs=1e-2)


def test_imputer_ridge_oracle():
    # closed form of the ridge fit on the observed rows, solved independently
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 3))
    Z = X.copy()
    Z[5, 2] = np.nan
    imp = IterativeImputer()
    imp.fit(Z)
    obs = ~np.isnan(Z[:, 2])
    A = np.column_stack([np.ones(obs.sum()), Z[obs, :2]])
    P = np.diag([0.0, 1e-3, 1e-3])
    beta = np.linalg.lstsq(A.T @ A + P, A.T @ Z[obs, 2], rcond=None)[0]
    assert imp.intercepts[2] == pytest.approx(beta[0], abs=1e-10)
    assert imp.coefs[2] == pytest.approx(beta[1:], abs=1e-10)


def test_imputer_median_fallback():
    imp = IterativeImputer()
    out = imp.fit(np.array([[np.nan, 1.0, np.nan], [np.nan, np.nan, 2.0]]))
    assert imp.median_only
    assert np.array_equal(out, [[0.0, 1.0, 0.0], [0.0, 0.0, 2.0]])


def test_imputer_json_roundtrip():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(15, 4))
    Z[rng.random(Z.shape) < 0.2] = np.nan
    imp = IterativeImputer()
    imp.fit(Z)
    back = IterativeImputer.from_json(json.loads(json.dumps(imp.to_json())))
    assert np.array_equal(back.transform(Z), imp.transform(Z))


# preprocessing end to end

def _train_set():
    recs = []
    for i in range(8):
        recs.append(raw_record(f"p{i}", [
            blood(-10, a=float(i), b=float(2 * i) if i % 3 else None),
            blood(30, a=float(i + 1), b=float(2 * i + 1)),
            img(5, v=100.0 + i),
            med(20, "N02AA01" if i % 2 else "H02AB02"),
        ], lfu=600.0))
    return recs


def test_unknown_code_maps_to_unk():
    train = _train_set()
    stats = fit_preprocessor(train, feature_missingness_filter(train))
    assert stats.med_vocab[UNK] == 0 and stats.vocab_size == 3
    r = raw_record("new", [med(3, "L01XC99", "N02AA01"), med(4)])
    ids = apply_preprocessor(r, stats).modalities["medication"].codes
    assert ids[0].tolist() == [0, stats.med_vocab["N02AA01"]]
    assert ids[1].tolist() == [0]


def test_value_at_median_scales_to_zero_and_observed_values_untouched():
    train = _train_set()
    stats = fit_preprocessor(train, feature_missingness_filter(train))
    med_a = stats.medians["blood"][0]
    r = raw_record("q", [blood(0, a=med_a, b=3.0)])
    x = apply_preprocessor(r, stats).modalities["blood"].x
    assert x[0, 0] == 0.0
    assert x[0, 1] == pytest.approx((3.0 - stats.medians["blood"][1]) / stats.iqrs["blood"][1])


def test_fit_apply_idempotent():
    train = _train_set()
    kept = feature_missingness_filter(train)
    stats = fit_preprocessor(train, kept)
    clean = [r for r in train if all(v is not None for e in r.events if e.features for v in e.features.values())]
    kept2 = feature_missingness_filter(clean)
    assert kept2 == kept
    stats_clean = fit_preprocessor(clean, kept2)
    again = fit_preprocessor(clean, feature_missingness_filter(clean))
    assert stats_clean.kept_features == again.kept_features
    for m in stats_clean.medians:
        assert np.array_equal(stats_clean.medians[m], again.medians[m])
    assert stats.kept_features == kept


def test_preprocess_stats_json_roundtrip():
    train = _train_set()
    stats = fit_preprocessor(train, feature_missingness_filter(train))
    back = PreprocessStats.from_json(json.loads(json.dumps(stats.to_json())))
    for r in train:
        a, b = apply_preprocessor(r, stats), apply_preprocessor(r, back)
        for m in ("blood", "imaging"):
            assert np.array_equal(a.modalities[m].x, b.modalities[m].x)


@settings(max_examples=50, deadline=None)
@given(st.floats(90, 365), st.integers(0, 10_000))
def test_no_leak_after_truncation(cutoff, seed):
    rng = np.random.default_rng(seed)
    events = [blood(float(t), a=1.0) for t in rng.integers(-90, 365, size=6)]
    events += [med(float(t), "A") for t in rng.integers(-90, 365, size=4)]
    train = _train_set()
    stats = fit_preprocessor(train, feature_missingness_filter(train))
    p = apply_preprocessor(raw_record("x", events, lfu=900.0), stats)
    cut, _ = truncate_and_label(p, cutoff)
    assert cut.max_t() <= cutoff
    raw_cut, _ = truncate_and_label(raw_record("x", events, lfu=900.0), cutoff)
    assert all(e.t_days <= cutoff for e in raw_cut.events)
