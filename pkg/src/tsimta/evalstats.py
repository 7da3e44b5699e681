"""AUC, Mann-Whitney U, DeLong's paired-AUC test, Fisher's method and CV helpers."""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels

ALPHA = 0.05


@dataclass
class ScoredSample:
    patient_id: str
    score: float
    label: bool


def _split(scores, labels):
    if labels is None:
        samples = list(scores)
        scores = [s.score for s in samples]
        labels = [s.label for s in samples]
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if np.isnan(s).any():
        raise ValueError("NaN score")
    return s, y


def _norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def auc(scores, labels=None):
    """P(random positive outranks random negative), ties counted 1/2.

    Accepts score/label arrays, or a list of :class:`ScoredSample` alone.
    Returns ``None`` when either class is empty.
    """
    s, y = _split(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = kernels.midrank(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MannWhitneyResult:
    u: float
    p: float
    degenerate: bool = False


def mann_whitney_p(scores, labels=None):
    """Two-sided Mann-Whitney U test of positive vs negative scores.

    Normal approximation with tie-corrected variance and continuity
    correction. Returns ``None`` if a class is empty; zero variance gives
    ``p = 1`` flagged degenerate.
    """
    s, y = _split(scores, labels)
    n1 = int(y.sum())
    n2 = y.size - n1
    if n1 == 0 or n2 == 0:
        return None
    r = kernels.midrank(s)
    u = float(r[y].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, counts = np.unique(s, return_counts=True)
    tie = float(((counts ** 3) - counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0.0:
        return MannWhitneyResult(u, 1.0, True)
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return MannWhitneyResult(u, min(1.0, 2.0 * _norm_sf(z)))


def _structural_components(s, y):
    """Per-positive V10 and per-negative V01 DeLong components."""
    pos, neg = s[y], s[~y]
    m, n = pos.size, neg.size
    tz = kernels.midrank(s)
    tx = kernels.midrank(pos)
    ty = kernels.midrank(neg)
    v10 = (tz[y] - tx) / n
    v01 = 1.0 - (tz[~y] - ty) / m
    return v10, v01


def _cov(rows):
    if rows.shape[1] < 2:
        return np.zeros((rows.shape[0], rows.shape[0]))
    return np.atleast_2d(np.cov(rows, ddof=1))


def delong_variance(scores, labels):
    """DeLong variance of a single AUC estimate."""
    s, y = _split(scores, labels)
    v10, v01 = _structural_components(s, y)
    return float(_cov(v10[None, :])[0, 0] / v10.size + _cov(v01[None, :])[0, 0] / v01.size)


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    auc_diff: float
    variance: float
    p: float
    degenerate: bool = False


def delong_test(scores_a, scores_b, labels):
    """Two-sided DeLong test for the difference of two correlated AUCs."""
    a = np.asarray(scores_a, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_b, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if not a.shape == b.shape == y.shape:
        raise ValueError(f"delong_test: unpaired inputs ({a.size}, {b.size}, {y.size})")
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("NaN score")
    m = int(y.sum())
    n = y.size - m
    if m == 0 or n == 0:
        raise ValueError("delong_test: both classes must be non-empty")
    comps = [_structural_components(s, y) for s in (a, b)]
    v10 = np.vstack([c[0] for c in comps])
    v01 = np.vstack([c[1] for c in comps])
    aucs = v10.mean(axis=1)
    S = _cov(v10) / m + _cov(v01) / n
    var = float(S[0, 0] + S[1, 1] - 2.0 * S[0, 1])
    diff = float(aucs[0] - aucs[1])
    if var <= 1e-15 or np.array_equal(a, b):
        return DeLongResult(float(aucs[0]), float(aucs[1]), diff, max(var, 0.0), 1.0, True)
    z = diff / math.sqrt(var)
    return DeLongResult(float(aucs[0]), float(aucs[1]), diff, var, min(1.0, 2.0 * _norm_sf(abs(z))))


def fisher_combine(pvals):
    """Fisher's combined p: chi-square(2k) survival of ``-2 sum(ln p)``, via the even-df series."""
    pvals = list(pvals)
    if not pvals:
        raise ValueError("fisher_combine: empty p-value list")
    for p in pvals:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"fisher_combine: p-value {p} outside (0, 1]")
    half = -sum(math.log(p) for p in pvals)  # X / 2
    term = 1.0
    total = 1.0
    for j in range(1, len(pvals)):
        term *= half / j
        total += term
    return min(1.0, math.exp(-half) * total)


def stratified_kfold(keys, k, seed):
    """Assign each ``(patient_id, stratum)`` to one of ``k`` folds.

    Members of each stratum are shuffled with the seeded generator and dealt
    round-robin, continuing the deal across strata so fold sizes stay
    balanced too.
    """
    keys = list(keys)
    if k < 2:
        raise ValueError("stratified_kfold: k must be at least 2")
    if k > len(keys):
        raise ValueError(f"stratified_kfold: k={k} exceeds {len(keys)} patients")
    rng = np.random.default_rng(seed)
    strata = {}
    for pid, stratum in keys:
        strata.setdefault(stratum, []).append(pid)
    assignment = {}
    pos = 0
    for stratum in sorted(strata, key=repr):
        members = strata[stratum]
        for i in rng.permutation(len(members)):
            assignment[members[i]] = pos % k
            pos += 1
    return assignment


@dataclass
class TaskFold:
    auc: float
    mw_p: float
    n_pos: int
    n_neg: int

    @property
    def undefined(self):
        return self.auc is None


@dataclass
class FoldResult:
    fold_index: int
    tasks: list = field(default_factory=list)


def evaluate_fold(fold_index, scores, labels, mask):
    """Per-task AUC and Mann-Whitney p on one held-out fold.

    ``scores``, ``labels`` and ``mask`` are (n, T); masked entries are ignored.
    """
    tasks = []
    for t in range(scores.shape[1]):
        keep = mask[:, t]
        s, y = scores[keep, t], labels[keep, t].astype(bool)
        mw = mann_whitney_p(s, y)
        tasks.append(TaskFold(auc(s, y), None if mw is None else mw.p, int(y.sum()), int((~y).sum())))
    return FoldResult(fold_index, tasks)


@dataclass
class TaskAggregate:
    mean: float
    sd: float
    n_defined: int
    any_undefined: bool
    significant_folds: int

    @property
    def undefined(self):
        return self.mean is None


def aggregate_folds(fold_results):
    """Mean and sample SD (n - 1) of per-task AUCs over the defined folds."""
    n_tasks = len(fold_results[0].tasks)
    out = []
    for t in range(n_tasks):
        cells = [f.tasks[t] for f in fold_results]
        vals = [c.auc for c in cells if c.auc is not None]
        sig = sum(1 for c in cells if c.mw_p is not None and c.mw_p < ALPHA)
        if not vals:
            out.append(TaskAggregate(None, None, 0, True, sig))
            continue
        mean = float(np.mean(vals))
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(TaskAggregate(mean, sd, len(vals), len(vals) < len(cells), sig))
    return out
