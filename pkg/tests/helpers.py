"""Small hand-built cohorts shared by several test modules."""
import numpy as np

from tsimta.cohort import ModalityEvents, ObservationEvent, PatientRecord, PreprocessedPatient

DIMS = {"blood": 3, "imaging": 2, "medication": 5}


def toy_patient(rng, pid="T0", imaging=True, n_blood=3, n_med=2, died=False, tte=None, lfu=500.0):
    def feats(n, width):
        t = np.sort(rng.integers(-90, 90, size=n)).astype(float)
        return ModalityEvents(t, rng.normal(size=(n, width)))

    n_img = 2 if imaging else 0
    t_med = np.sort(rng.integers(-90, 90, size=n_med)).astype(float)
    codes = [rng.integers(0, DIMS["medication"], size=rng.integers(1, 3)) for _ in range(n_med)]
    mods = {
        "blood": feats(n_blood, DIMS["blood"]),
        "imaging": feats(n_img, DIMS["imaging"]),
        "medication": ModalityEvents(t_med, codes=codes),
    }
    return PreprocessedPatient(pid, died, tte, tte if died else lfu, mods)


def raw_record(pid, events, died=False, tte=None, lfu=500.0):
    evs = []
    for t, m, payload in events:
        if m == "medication":
            evs.append(ObservationEvent(float(t), m, codes=list(payload)))
        else:
            evs.append(ObservationEvent(float(t), m, features=dict(payload)))
    return PatientRecord(pid, evs, died, tte, tte if died else lfu)
