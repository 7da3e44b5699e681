"""Patient data model, dataset I/O and the preprocessing pipeline.

Pipeline per cross-validation fold:

1. :func:`eligibility_filter` on the whole cohort (done once).
2. :func:`feature_missingness_filter` and :func:`fit_preprocessor` on the
   training patients only.
3. :func:`apply_preprocessor` on every patient, giving
   :class:`PreprocessedPatient` objects whose events can be cut at any
   prediction time with :func:`truncate_and_label`.
"""
from dataclasses import dataclass, field
import json
import logging
import math

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("blood", "imaging", "medication")
FEATURE_MODALITIES = ("blood", "imaging")
HORIZONS = (90, 180, 270, 360)
WINDOW = (-90.0, 365.0)
CUTOFF_RANGE = (90.0, 365.0)
MIN_FOLLOWUP = 90.0

IMAGING_MAX_MISSING = 0.5  # dropped when missing fraction >= this
BLOOD_MAX_MISSING = 0.6  # dropped when missing fraction > this

IMPUTE_ROUNDS = 10
IMPUTE_TOL = 1e-3
IMPUTE_RIDGE = 1e-3

UNK = "<UNK>"


class DatasetError(ValueError):
    """Malformed dataset line or impossible preprocessing request."""


@dataclass
class ObservationEvent:
    t_days: float
    modality: str
    features: dict = None
    codes: list = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DatasetError(f"unknown modality {self.modality!r}")
        if self.modality == "medication":
            if self.features:
                raise DatasetError("medication events carry codes only")
            self.codes = list(self.codes or [])
        else:
            if self.codes:
                raise DatasetError(f"{self.modality} events carry features only")
            self.features = dict(self.features or {})

    def to_json(self):
        out = {"t_days": self.t_days, "modality": self.modality}
        if self.modality == "medication":
            out["codes"] = self.codes
        else:
            out["features"] = self.features
        return out


@dataclass
class PatientRecord:
    patient_id: str
    events: list
    event_indicator: bool
    time_to_event_days: float = None
    last_followup_days: float = 0.0

    @property
    def followup_days(self):
        """End of observation: the death date for deceased patients."""
        return self.time_to_event_days if self.event_indicator else self.last_followup_days

    def to_json(self):
        return {
            "patient_id": self.patient_id,
            "event_indicator": self.event_indicator,
            "time_to_event_days": self.time_to_event_days,
            "last_followup_days": self.last_followup_days,
            "events": [e.to_json() for e in self.events],
        }


_RECORD_FIELDS = {"patient_id", "event_indicator", "time_to_event_days", "last_followup_days", "events"}


def _number(v, what):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise DatasetError(f"{what} must be a finite number, got {v!r}")
    return float(v)


def record_from_json(obj):
    if not isinstance(obj, dict):
        raise DatasetError("record must be an object")
    missing = _RECORD_FIELDS - set(obj)
    extra = set(obj) - _RECORD_FIELDS
    if missing or extra:
        raise DatasetError(f"record fields mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
    if not isinstance(obj["patient_id"], str):
        raise DatasetError("patient_id must be a string")
    if not isinstance(obj["event_indicator"], bool):
        raise DatasetError("event_indicator must be a boolean")
    tte = obj["time_to_event_days"]
    if obj["event_indicator"]:
        if tte is None:
            raise DatasetError("time_to_event_days required when event_indicator is true")
        tte = _number(tte, "time_to_event_days")
    elif tte is not None:
        raise DatasetError("time_to_event_days must be null when event_indicator is false")
    lfu = _number(obj["last_followup_days"], "last_followup_days")
    if not isinstance(obj["events"], list):
        raise DatasetError("events must be an array")
    events = []
    for ev in obj["events"]:
        if not isinstance(ev, dict) or "t_days" not in ev or "modality" not in ev:
            raise DatasetError("event needs t_days and modality")
        unknown = set(ev) - {"t_days", "modality", "features", "codes"}
        if unknown:
            raise DatasetError(f"unexpected event fields {sorted(unknown)}")
        feats = ev.get("features")
        if feats is not None:
            if not isinstance(feats, dict):
                raise DatasetError("features must be an object")
            feats = {k: (None if v is None else _number(v, f"feature {k}")) for k, v in feats.items()}
        codes = ev.get("codes")
        if codes is not None and not (isinstance(codes, list) and all(isinstance(c, str) for c in codes)):
            raise DatasetError("codes must be an array of strings")
        events.append(ObservationEvent(_number(ev["t_days"], "t_days"), ev["modality"], feats, codes))
    return PatientRecord(obj["patient_id"], events, obj["event_indicator"], tte, lfu)


def dumps_record(record):
    return json.dumps(record.to_json(), separators=(",", ":"))


def write_dataset(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(dumps_record(r) + "\n")


def read_dataset(path):
    """Parse a dataset file (one JSON record per line); errors name the line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# labels


@dataclass
class LabelSet:
    cutoff_days: float
    labels: tuple
    horizons: tuple = HORIZONS

    @property
    def mask(self):
        return np.array([lab is not None for lab in self.labels])

    @property
    def values(self):
        return np.array([float(lab) if lab is not None else 0.0 for lab in self.labels])


def derive_labels(event_indicator, time_to_event, last_followup, cutoff, horizons=HORIZONS):
    """Death-within-horizon labels at ``cutoff``; ``None`` where censoring hides the answer."""
    if event_indicator and time_to_event < cutoff:
        raise DatasetError("cutoff-post-mortem")
    alive_until = time_to_event if event_indicator else last_followup
    out = []
    for h in horizons:
        end = cutoff + h
        if event_indicator and time_to_event <= end:
            out.append(True)
        elif alive_until >= end:
            out.append(False)
        else:
            out.append(None)
    return LabelSet(float(cutoff), tuple(out), tuple(horizons))


def truncate_and_label(record, cutoff_days, horizons=HORIZONS):
    """Drop events after ``cutoff_days`` and derive the horizon labels."""
    labels = derive_labels(record.event_indicator, record.time_to_event_days, record.last_followup_days,
                           cutoff_days, horizons)
    if isinstance(record, PreprocessedPatient):
        return record.truncate(cutoff_days), labels
    kept = [e for e in record.events if e.t_days <= cutoff_days]
    return PatientRecord(record.patient_id, kept, record.event_indicator, record.time_to_event_days,
                         record.last_followup_days), labels


def sample_cutoff(rng, lo=CUTOFF_RANGE[0], hi=CUTOFF_RANGE[1]):
    if not lo < hi:
        raise ValueError(f"sample_cutoff: empty range [{lo}, {hi}]")
    return float(rng.uniform(lo, hi))


def training_cutoff_range(record, lo=CUTOFF_RANGE[0], hi=CUTOFF_RANGE[1]):
    """Cutoff range for a training draw; ``None`` when the patient died before ``lo``."""
    if record.event_indicator:
        hi = min(hi, record.time_to_event_days)
    return (lo, hi) if lo < hi else None


# ---------------------------------------------------------------------------
# eligibility


def eligibility_filter(cohort, horizons=HORIZONS):
    """Split the cohort into included patients and ``(record, reason)`` exclusions."""
    included, excluded = [], []
    longest = max(horizons)
    for r in cohort:
        if r.followup_days < MIN_FOLLOWUP:
            excluded.append((r, "followup<90d"))
        elif not r.event_indicator and r.last_followup_days < CUTOFF_RANGE[0] + longest:
            excluded.append((r, "no-12-month-window"))
        else:
            included.append(r)
    return included, excluded


def window_events(record, window=WINDOW):
    lo, hi = window
    return [e for e in record.events if lo <= e.t_days <= hi]


# ---------------------------------------------------------------------------
# preprocessing


def _feature_table(records, modality, names):
    rows, times = [], []
    for r in records:
        for e in window_events(r):
            if e.modality != modality:
                continue
            rows.append([np.nan if e.features.get(n) is None else e.features[n] for n in names])
            times.append(e.t_days)
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(names)), np.array(times)


def feature_missingness_filter(train):
    """Kept feature names per feature modality, from training events only."""
    kept = {}
    for modality in FEATURE_MODALITIES:
        names = sorted({n for r in train for e in window_events(r) if e.modality == modality for n in e.features})
        if not names:
            raise DatasetError(f"modality degenerate: no {modality} events in the training patients")
        X, _ = _feature_table(train, modality, names)
        frac = np.isnan(X).mean(axis=0)
        if modality == "imaging":
            keep = frac < IMAGING_MAX_MISSING
        else:
            keep = frac <= BLOOD_MAX_MISSING
        kept[modality] = [n for n, k in zip(names, keep) if k]
        if not kept[modality]:
            raise DatasetError(f"modality degenerate: every {modality} feature exceeds the missingness limit")
    return kept


def robust_stats(X):
    """Median and IQR (linear-interpolation quantiles) per column, ignoring NaN."""
    med = np.empty(X.shape[1])
    iqr = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        col = X[~np.isnan(X[:, j]), j]
        if col.size == 0:
            med[j], iqr[j] = 0.0, 1.0
            continue
        q1, q2, q3 = np.percentile(col, [25.0, 50.0, 75.0])
        med[j], iqr[j] = q2, q3 - q1
    return med, iqr


def _divisor(iqr):
    return np.where(iqr == 0.0, 1.0, iqr)


def _ridge(A, y, lam):
    """Least squares with an unpenalised intercept; returns ``(intercept, coef)``."""
    mu_a = A.mean(axis=0)
    mu_y = y.mean()
    Ac = A - mu_a
    coef = np.linalg.solve(Ac.T @ Ac + lam * np.eye(A.shape[1]), Ac.T @ (y - mu_y))
    return mu_y - mu_a @ coef, coef


@dataclass
class IterativeImputer:
    """Chained ridge regressions of each feature on all others (scaled space)."""

    intercepts: np.ndarray = None
    coefs: np.ndarray = None
    rounds: int = 0
    median_only: bool = False

    def fit(self, Z, rounds=IMPUTE_ROUNDS, tol=IMPUTE_TOL, ridge=IMPUTE_RIDGE):
        """Fit on scaled data ``Z`` (NaN = missing); returns the filled matrix."""
        n, F = Z.shape
        miss = np.isnan(Z)
        filled = np.where(miss, 0.0, Z)
        completeish = int(((~miss).sum(axis=1) * 2 >= F).sum())
        if F < 2 or completeish < 2:
            self.median_only = True
            self.rounds = 0
            log.warning("imputer: fewer than 2 usable rows or features, falling back to medians")
            return filled
        incomplete = [f for f in range(F) if miss[:, f].any() and (~miss[:, f]).sum() >= 2]
        for r in range(1, rounds + 1):
            self.rounds = r
            biggest = 0.0
            for f in incomplete:
                others = np.arange(F) != f
                obs = ~miss[:, f]
                b0, b = _ridge(filled[obs][:, others], filled[obs, f], ridge)
                pred = b0 + filled[miss[:, f]][:, others] @ b
                if pred.size:
                    biggest = max(biggest, float(np.abs(pred - filled[miss[:, f], f]).max()))
                filled[miss[:, f], f] = pred
            if biggest < tol:
                break
        self.intercepts = np.zeros(F)
        self.coefs = np.zeros((F, F - 1))
        for f in range(F):
            obs = ~miss[:, f]
            if obs.sum() < 2:
                continue
            others = np.arange(F) != f
            self.intercepts[f], self.coefs[f] = _ridge(filled[obs][:, others], filled[obs, f], ridge)
        return filled

    def transform(self, Z):
        """One median-initialised pass of the fitted regressions."""
        miss = np.isnan(Z)
        filled = np.where(miss, 0.0, Z)
        if self.median_only or not miss.any():
            return filled
        F = Z.shape[1]
        for f in range(F):
            rows = miss[:, f]
            if rows.any():
                others = np.arange(F) != f
                filled[rows, f] = self.intercepts[f] + filled[rows][:, others] @ self.coefs[f]
        return filled

    def to_json(self):
        return {
            "intercepts": None if self.intercepts is None else self.intercepts.tolist(),
            "coefs": None if self.coefs is None else self.coefs.tolist(),
            "rounds": self.rounds,
            "median_only": self.median_only,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            None if obj["intercepts"] is None else np.array(obj["intercepts"]),
            None if obj["coefs"] is None else np.array(obj["coefs"]).reshape(len(obj["intercepts"]), -1),
            obj["rounds"],
            obj["median_only"],
        )


@dataclass
class PreprocessStats:
    kept_features: dict
    medians: dict
    iqrs: dict
    imputer: IterativeImputer
    med_vocab: dict

    @property
    def vocab_size(self):
        return len(self.med_vocab)

    def to_json(self):
        return {
            "kept_features": self.kept_features,
            "medians": {m: v.tolist() for m, v in self.medians.items()},
            "iqrs": {m: v.tolist() for m, v in self.iqrs.items()},
            "imputer": self.imputer.to_json(),
            "med_vocab": self.med_vocab,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            {m: list(v) for m, v in obj["kept_features"].items()},
            {m: np.array(v, dtype=np.float64) for m, v in obj["medians"].items()},
            {m: np.array(v, dtype=np.float64) for m, v in obj["iqrs"].items()},
            IterativeImputer.from_json(obj["imputer"]),
            dict(obj["med_vocab"]),
        )


def fit_preprocessor(train, kept_features):
    medians, iqrs = {}, {}
    imputer = IterativeImputer()
    for modality in FEATURE_MODALITIES:
        names = kept_features[modality]
        if not names:
            raise DatasetError(f"modality degenerate: no kept {modality} features")
        X, _ = _feature_table(train, modality, names)
        medians[modality], iqrs[modality] = robust_stats(X)
        if modality == "blood":
            Z = (X - medians[modality]) / _divisor(iqrs[modality])
            imputer.fit(Z)
    codes = sorted({c for r in train for e in window_events(r) if e.modality == "medication" for c in e.codes})
    vocab = {UNK: 0}
    for c in codes:
        vocab[c] = len(vocab)
    return PreprocessStats({m: list(v) for m, v in kept_features.items()}, medians, iqrs, imputer, vocab)


@dataclass
class ModalityEvents:
    """Time-sorted events of one modality: ``x`` rows, or ``codes`` id arrays for medications."""

    t: np.ndarray
    x: np.ndarray = None
    codes: list = None

    def __len__(self):
        return len(self.t)

    def upto(self, cutoff):
        n = int(np.searchsorted(self.t, cutoff, side="right"))
        return ModalityEvents(self.t[:n], None if self.x is None else self.x[:n],
                              None if self.codes is None else self.codes[:n])


@dataclass
class PreprocessedPatient:
    patient_id: str
    event_indicator: bool
    time_to_event_days: float
    last_followup_days: float
    modalities: dict = field(default_factory=dict)

    def truncate(self, cutoff):
        return PreprocessedPatient(self.patient_id, self.event_indicator, self.time_to_event_days,
                                   self.last_followup_days, {m: ev.upto(cutoff) for m, ev in self.modalities.items()})

    def max_t(self):
        ts = [ev.t[-1] for ev in self.modalities.values() if len(ev)]
        return max(ts) if ts else -np.inf


def apply_preprocessor(record, stats):
    """Restrict to kept features, impute, robust-scale and tokenise one patient."""
    events = sorted(window_events(record), key=lambda e: e.t_days)
    out = {}
    for modality in FEATURE_MODALITIES:
        names = stats.kept_features[modality]
        evs = [e for e in events if e.modality == modality]
        X = np.array([[np.nan if e.features.get(n) is None else e.features[n] for n in names] for e in evs],
                     dtype=np.float64).reshape(len(evs), len(names))
        Z = (X - stats.medians[modality]) / _divisor(stats.iqrs[modality])
        Z = stats.imputer.transform(Z) if modality == "blood" else np.where(np.isnan(Z), 0.0, Z)
        out[modality] = ModalityEvents(np.array([e.t_days for e in evs], dtype=np.float64), Z)
    meds = [e for e in events if e.modality == "medication"]
    ids = [np.array([stats.med_vocab.get(c, 0) for c in e.codes] or [0], dtype=np.int64) for e in meds]
    out["medication"] = ModalityEvents(np.array([e.t_days for e in meds], dtype=np.float64), codes=ids)
    return PreprocessedPatient(record.patient_id, record.event_indicator, record.time_to_event_days,
                               record.last_followup_days, out)
