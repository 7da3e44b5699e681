"""Seeded synthetic cohorts with a known latent risk.

Each patient has a latent risk ``z ~ N(0, 1)``. Death follows an exponential
law with rate ``base_hazard_per_day * exp(beta * z)`` and follow-up is
administratively censored uniformly in [450, 1400] days. A measured feature
of modality ``m`` is

    baseline * (1 + scale * (s_m * loading * z + drift * t / 365 + noise))

with ``s_m = modality_signal[m]`` and fresh ``N(0, measurement_noise**2)``
noise per measurement, so modalities carry independent noise around the
same risk. Medication codes from the risk classes get logit
``1.5 * s_medication * z``.

All randomness comes from :class:`Xoshiro256`, implemented here, so a given
``(config, seed)`` produces the same bytes on any platform.
"""
from dataclasses import dataclass, field, asdict
import json
import math

from .cohort import ObservationEvent, PatientRecord, dumps_record, MODALITIES

_MASK64 = (1 << 64) - 1

DEFAULT_MED_CODES = (
    "L01FF01", "L01FF02", "L01FX04",   # anticancer
    "L04AA06", "L04AB02",              # immunosuppressants
    "N02AA01", "N02AB03",              # opioids
    "H02AB02", "H02AB06",              # corticosteroids
)
RISK_CODE_PREFIXES = ("N02A", "H02")


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** seeded through splitmix64."""

    def __init__(self, seed):
        s = seed & _MASK64
        state = []
        for _ in range(4):
            s = (s + 0x9E3779B97F4A7C15) & _MASK64
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
            state.append(z ^ (z >> 31))
        self.s = state
        self._spare = None

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def exponential(self, rate):
        return -math.log(1.0 - self.random()) / rate

    def bernoulli(self, p):
        return self.random() < p

    def below(self, n):
        return min(int(self.random() * n), n - 1)

    def categorical(self, logits):
        m = max(logits)
        w = [math.exp(v - m) for v in logits]
        u = self.random() * sum(w)
        acc = 0.0
        for i, wi in enumerate(w):
            acc += wi
            if u < acc:
                return i
        return len(w) - 1

    def poisson_times(self, rate, lo, hi):
        """Event times of a homogeneous Poisson process on [lo, hi]."""
        out = []
        t = lo
        while rate > 0:
            t += self.exponential(rate)
            if t > hi:
                break
            out.append(t)
        return out


@dataclass
class SynthConfig:
    n_patients: int = 1000
    seed: int = 7
    beta: float = 1.0
    base_hazard_per_day: float = 0.002
    modality_signal: dict = field(default_factory=lambda: {"blood": 0.6, "imaging": 0.6, "medication": 0.0})
    p_missing_imaging: float = 0.4
    visit_rate_per_month: dict = field(default_factory=lambda: {"blood": 1.0, "imaging": 0.3, "medication": 0.6})
    n_blood_features: int = 12
    n_imaging_features: int = 10
    med_categories: tuple = DEFAULT_MED_CODES
    censor_range: tuple = (450.0, 1400.0)
    feature_missing_rate: float = 0.1
    measurement_noise: float = 0.5

    def __post_init__(self):
        if self.n_patients < 0:
            raise ValueError("n_patients must be non-negative")
        for m in MODALITIES:
            s = self.modality_signal.get(m, 0.0)
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"modality_signal[{m}] must lie in [0, 1]")
        if not 0.0 <= self.p_missing_imaging <= 1.0:
            raise ValueError("p_missing_imaging must lie in [0, 1]")
        if self.measurement_noise < 0:
            raise ValueError("measurement_noise must be non-negative")
        if self.base_hazard_per_day <= 0:
            raise ValueError("base_hazard_per_day must be positive")

    def to_json(self):
        d = asdict(self)
        d["med_categories"] = list(self.med_categories)
        d["censor_range"] = list(self.censor_range)
        return d


@dataclass
class FeatureSpec:
    name: str
    mean: float
    scale: float
    loading: float
    drift: float
    missing_rate: float


@dataclass
class Truth:
    patient_id: str
    z: float
    t_death_days: float

    def to_json(self):
        return {"patient_id": self.patient_id, "z": self.z, "t_death_days": self.t_death_days}


def _feature_specs(rng, config):
    """Per-feature constants, drawn once per cohort ahead of the patients."""
    specs = {}
    blood = []
    for i in range(config.n_blood_features):
        sign = 1.0 if rng.bernoulli(0.5) else -1.0
        miss = 0.75 if i == config.n_blood_features - 1 and config.n_blood_features > 2 else config.feature_missing_rate
        blood.append(FeatureSpec(f"lab_{i:02d}", rng.uniform(5.0, 100.0), rng.uniform(0.1, 0.3),
                                 sign * rng.uniform(0.4, 1.0), rng.uniform(-0.3, 0.3), miss))
    imaging = []
    for i in range(config.n_imaging_features):
        sign = 1.0 if rng.bernoulli(0.5) else -1.0
        miss = 0.7 if i >= config.n_imaging_features - 2 and config.n_imaging_features > 3 else 0.05
        imaging.append(FeatureSpec(f"organ_{i:03d}", rng.uniform(1e4, 1e6), rng.uniform(0.05, 0.15),
                                   sign * rng.uniform(0.4, 1.0), rng.uniform(-0.2, 0.2), miss))
    specs["blood"] = blood
    specs["imaging"] = imaging
    return specs


def _feature_event(rng, specs, proxy, t, noise):
    feats = {}
    for f in specs:
        if rng.bernoulli(f.missing_rate):
            feats[f.name] = None
            continue
        latent = f.loading * proxy + f.drift * t / 365.0 + noise * rng.normal()
        feats[f.name] = round(f.mean * (1.0 + f.scale * latent), 4)
    return feats


def generate_patient(rng, config, specs, index):
    """One :class:`PatientRecord` plus its :class:`Truth`; ``specs`` from ``_feature_specs``."""
    pid = f"P{index:06d}"
    z = rng.normal()
    rate = config.base_hazard_per_day * math.exp(config.beta * z)
    t_death = rng.exponential(rate)
    censor = rng.uniform(*config.censor_range)
    died = t_death <= censor
    t_death_r = round(t_death, 2)
    censor_r = round(censor, 2)
    if died and t_death_r <= 0.0:
        t_death_r = 0.01
    end = min(365.0, t_death_r if died else censor_r)

    proxies = {m: config.modality_signal.get(m, 0.0) * z for m in MODALITIES}

    events = []
    blood_rate = config.visit_rate_per_month["blood"] / 30.0
    blood_times = [rng.uniform(-90.0, 0.0)] + rng.poisson_times(blood_rate, -90.0, end)
    for t in blood_times:
        td = float(math.floor(t))
        feats = _feature_event(rng, specs["blood"], proxies["blood"], td, config.measurement_noise)
        events.append(ObservationEvent(td, "blood", feats))

    has_imaging = not rng.bernoulli(config.p_missing_imaging)
    if has_imaging:
        img_rate = config.visit_rate_per_month["imaging"] / 30.0
        img_times = ([rng.uniform(-90.0, 0.0)] if rng.bernoulli(0.8) else []) + rng.poisson_times(img_rate, -90.0, end)
        for t in img_times:
            td = float(math.floor(t))
            feats = _feature_event(rng, specs["imaging"], proxies["imaging"], td, config.measurement_noise)
            events.append(ObservationEvent(td, "imaging", feats))

    codes = list(config.med_categories)
    if codes:
        logits = [1.5 * proxies["medication"] if c.startswith(RISK_CODE_PREFIXES) else 0.0 for c in codes]
        med_rate = config.visit_rate_per_month["medication"] / 30.0
        for t in rng.poisson_times(med_rate, -90.0, end):
            n_codes = 1 + rng.below(2)
            drawn = []
            for _ in range(n_codes):
                c = codes[rng.categorical(logits)]
                if c not in drawn:
                    drawn.append(c)
            events.append(ObservationEvent(float(math.floor(t)), "medication", codes=drawn))

    events.sort(key=lambda e: e.t_days)
    record = PatientRecord(pid, events, died, t_death_r if died else None, t_death_r if died else censor_r)
    return record, Truth(pid, round(z, 6), t_death_r)


def generate(config):
    """All patients of a cohort, in order, with their ground truth."""
    rng = Xoshiro256(config.seed)
    specs = _feature_specs(rng, config)
    records, truth = [], []
    for i in range(config.n_patients):
        r, t = generate_patient(rng, config, specs, i)
        records.append(r)
        truth.append(t)
    return records, truth


def generate_cohort(config, path, sidecar_path=None):
    """Write the cohort (dataset format) and the ``(patient_id, z, t_death_days)`` sidecar."""
    records, truth = generate(config)
    sidecar_path = sidecar_path or f"{path}.truth.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(dumps_record(r) + "\n")
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        for t in truth:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")
    return records, truth


def read_truth(path):
    with open(path, encoding="utf-8") as fh:
        return [Truth(**json.loads(line)) for line in fh if line.strip()]
