"""Cross-validated training, fixed-cutoff evaluation and run comparison."""
from dataclasses import dataclass, field, asdict
import hashlib
import json
import logging
import math
import os

import numpy as np

from . import autodiff as ad
from . import evalstats
from .cohort import (
    HORIZONS,
    MODALITIES,
    CUTOFF_RANGE,
    eligibility_filter,
    feature_missingness_filter,
    fit_preprocessor,
    apply_preprocessor,
    training_cutoff_range,
    PreprocessStats,
)
from .attention import attention_rows
from .multimodal import (
    FusionConfig,
    LateMeanModel,
    ModelConfig,
    MultimodalModel,
    collate,
    load_model,
    save_model,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "tsimta-metrics/1"
COMPARE_SCHEMA = "tsimta-compare/1"
TASK_NAMES = tuple(f"{h // 30}m" for h in HORIZONS)
EVAL_BATCH = 64


class NumericalError(RuntimeError):
    pass


class RunMismatchError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = None
    family: str = "TSimTA"
    variant: str = "ConcatSA"
    n_blocks: int = 1
    n_inner: int = 3
    d_model: int = 32
    sa_heads: int = 2
    use_positional_encoding: bool = False
    mlp_hidden: int = 64
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    p_modality_drop: float = 0.25
    k_folds: int = 3
    train_cutoff: tuple = CUTOFF_RANGE
    eval_cutoffs: tuple = (90.0, 180.0)
    resample_cutoffs: bool = True
    seed: int = 0
    out_dir: str = None

    def __post_init__(self):
        self.train_cutoff = tuple(float(c) for c in self.train_cutoff)
        self.eval_cutoffs = tuple(float(c) for c in self.eval_cutoffs)
        FusionConfig(self.variant, self.sa_heads, self.use_positional_encoding, self.mlp_hidden,
                     self.p_modality_drop)
        if self.epochs < 0 or self.batch_size < 1 or self.k_folds < 2:
            raise ValueError("epochs >= 0, batch_size >= 1 and k_folds >= 2 required")

    def to_json(self):
        d = asdict(self)
        d["train_cutoff"] = list(self.train_cutoff)
        d["eval_cutoffs"] = list(self.eval_cutoffs)
        return d

    @property
    def label(self):
        return f"{self.family}/{self.variant}"

    def model_config(self, input_dims, seed, variant=None):
        fusion = FusionConfig(variant or self.variant, self.sa_heads, self.use_positional_encoding,
                              self.mlp_hidden, self.p_modality_drop)
        return ModelConfig(self.family, fusion, self.n_blocks, self.n_inner, self.d_model,
                           len(HORIZONS), seed=seed, input_dims=dict(input_dims))


def _derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# folds


def fold_checksum(assignment):
    payload = json.dumps(sorted(assignment.items()), separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class CohortSplit:
    included: list
    excluded: list
    assignment: dict

    @property
    def checksum(self):
        return fold_checksum(self.assignment)

    def fold_members(self, fold):
        test = [r for r in self.included if self.assignment[r.patient_id] == fold]
        train = [r for r in self.included if self.assignment[r.patient_id] != fold]
        return train, test

    def exclusion_counts(self):
        counts = {}
        for _, reason in self.excluded:
            counts[reason] = counts.get(reason, 0) + 1
        return dict(sorted(counts.items()))


def split_cohort(records, k, seed):
    """Eligibility filter plus stratified k-fold assignment keyed on the death indicator."""
    included, excluded = eligibility_filter(records)
    keys = [(r.patient_id, bool(r.event_indicator)) for r in included]
    return CohortSplit(included, excluded, evalstats.stratified_kfold(keys, k, seed))


def preprocess_fold(split, fold):
    train, test = split.fold_members(fold)
    stats = fit_preprocessor(train, feature_missingness_filter(train))
    return stats, [apply_preprocessor(r, stats) for r in train], [apply_preprocessor(r, stats) for r in test]


def input_dims(stats):
    return {"blood": len(stats.kept_features["blood"]), "imaging": len(stats.kept_features["imaging"]),
            "medication": stats.vocab_size}


# ---------------------------------------------------------------------------
# training


def _draw_cutoffs(patients, rng, lo, hi):
    items = []
    for p in patients:
        rng_range = training_cutoff_range(p, lo, hi)
        if rng_range is None:
            continue
        items.append((p, float(rng.uniform(*rng_range))))
    return items


def _batches(items, order, size):
    for start in range(0, len(order), size):
        chunk = [items[i] for i in order[start:start + size]]
        yield [p for p, _ in chunk], [c for _, c in chunk]


def train_model(model, patients, run_cfg, rng):
    """Adam on the masked multitask BCE; returns the loss curve dict."""
    opt = ad.Adam(model.parameters(), lr=run_cfg.lr)
    lo, hi = run_cfg.train_cutoff
    items = _draw_cutoffs(patients, rng, lo, hi)
    mods = model.config.modalities
    dims = model.config.input_dims

    total, count = 0.0, 0
    for ps, cs in _batches(items, np.arange(len(items)), EVAL_BATCH):
        batch = collate(ps, cs, modalities=mods, input_dims=dims)
        if batch.label_mask.any():
            n = int(batch.label_mask.sum())
            total += model.loss(batch, training=False)[0].item() * n
            count += n
    curve = {"initial_loss": total / max(count, 1), "epochs": []}

    for epoch in range(1, run_cfg.epochs + 1):
        if run_cfg.resample_cutoffs and epoch > 1:
            items = _draw_cutoffs(patients, rng, lo, hi)
        order = rng.permutation(len(items))
        total, count = 0.0, 0
        for bi, (ps, cs) in enumerate(_batches(items, order, run_cfg.batch_size)):
            batch = collate(ps, cs, modalities=mods, input_dims=dims)
            if not batch.label_mask.any():
                continue
            with ad.Tape() as tape:
                loss, _ = model.loss(batch, training=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            ad.backward(loss, tape)
            opt.step()
            n = int(batch.label_mask.sum())
            total += value * n
            count += n
        curve["epochs"].append(total / max(count, 1))
        log.debug("epoch %d loss %.4f", epoch, curve["epochs"][-1])
    return curve


def train_variant(run_cfg, train_patients, stats, fold):
    """Train the configured variant on one fold; returns ``(model, curves)``."""
    dims = input_dims(stats)
    if run_cfg.variant == "LateMean":
        members, curves = {}, {}
        for mi, m in enumerate(MODALITIES):
            cfg = run_cfg.model_config(dims, _derive_seed(run_cfg.seed, fold, 10 + mi), f"Unimodal:{m}")
            model = MultimodalModel(cfg)
            curves[m] = train_model(model, train_patients, run_cfg,
                                    np.random.default_rng([run_cfg.seed, fold, 20 + mi]))
            members[m] = model
        return LateMeanModel(members), curves
    model = MultimodalModel(run_cfg.model_config(dims, _derive_seed(run_cfg.seed, fold, 1)))
    curve = train_model(model, train_patients, run_cfg, np.random.default_rng([run_cfg.seed, fold, 2]))
    return model, {"model": curve}


@dataclass
class FoldArtifacts:
    fold: int
    stats: PreprocessStats
    model: object
    curves: dict
    test_ids: list


@dataclass
class TrainedRun:
    config: RunConfig
    split: CohortSplit
    folds: list = field(default_factory=list)


def _train_one_fold(args):
    run_cfg, split, fold = args
    stats, train, _ = preprocess_fold(split, fold)
    model, curves = train_variant(run_cfg, train, stats, fold)
    _, test = split.fold_members(fold)
    return FoldArtifacts(fold, stats, model, curves, [r.patient_id for r in test])


def train_cv(records, run_cfg, workers=1):
    """Full k-fold protocol on ``records``; folds run in parallel when ``workers > 1``."""
    split = split_cohort(records, run_cfg.k_folds, run_cfg.seed)
    jobs = [(run_cfg, split, f) for f in range(run_cfg.k_folds)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            folds = list(ex.map(_train_one_fold, jobs))
    else:
        folds = [_train_one_fold(j) for j in jobs]
    return TrainedRun(run_cfg, split, folds)


# ---------------------------------------------------------------------------
# evaluation


def predict_at_cutoff(model, patients, cutoff):
    """Scores, labels and label mask (n, T) for patients alive at ``cutoff``."""
    keep = [p for p in patients if not (p.event_indicator and p.time_to_event_days < cutoff)]
    mods = model.modalities if isinstance(model, LateMeanModel) else model.config.modalities
    scores, labels, masks, ids = [], [], [], []
    for start in range(0, len(keep), EVAL_BATCH):
        chunk = keep[start:start + EVAL_BATCH]
        batch = collate(chunk, [cutoff] * len(chunk), modalities=mods)
        scores.append(model.predict(batch))
        labels.append(batch.labels)
        masks.append(batch.label_mask)
        ids.extend(batch.patient_ids)
    T = len(HORIZONS)
    if not keep:
        return np.zeros((0, T)), np.zeros((0, T)), np.zeros((0, T), dtype=bool), []
    return np.vstack(scores), np.vstack(labels), np.vstack(masks), ids


def build_report(label, cutoff, checksum, fold_predictions, family=None, variant=None):
    """Metrics report from per-fold ``(fold, ids, scores, labels, mask)`` tuples."""
    fold_results, folds_json = [], []
    for fold, ids, scores, labels, mask in fold_predictions:
        fr = evalstats.evaluate_fold(fold, scores, labels, mask)
        fold_results.append(fr)
        preds = []
        for i, pid in enumerate(ids):
            preds.append({
                "patient_id": pid,
                "scores": [float(s) for s in scores[i]],
                "labels": [int(labels[i, t]) if mask[i, t] else None for t in range(scores.shape[1])],
            })
        folds_json.append({
            "fold": fold,
            "tasks": [
                {"task": TASK_NAMES[t], "auc": c.auc, "undefined": c.undefined, "mw_p": c.mw_p,
                 "n_pos": c.n_pos, "n_neg": c.n_neg}
                for t, c in enumerate(fr.tasks)
            ],
            "predictions": preds,
        })
    agg = evalstats.aggregate_folds(fold_results) if fold_results else []
    return {
        "schema": REPORT_SCHEMA,
        "model": family,
        "variant": variant,
        "label": label,
        "cutoff": float(cutoff),
        "fold_checksum": checksum,
        "tasks": [
            {"task": TASK_NAMES[t], "horizon_days": HORIZONS[t], "mean_auc": a.mean, "sd_auc": a.sd,
             "n_defined_folds": a.n_defined, "any_undefined_fold": a.any_undefined,
             "significant_folds": a.significant_folds}
            for t, a in enumerate(agg)
        ],
        "folds": folds_json,
    }


def evaluate_run(run, records, cutoff):
    by_id = {r.patient_id: r for r in records}
    fold_predictions = []
    for fa in run.folds:
        test = [apply_preprocessor(by_id[pid], fa.stats) for pid in fa.test_ids]
        scores, labels, mask, ids = predict_at_cutoff(fa.model, test, cutoff)
        fold_predictions.append((fa.fold, ids, scores, labels, mask))
    cfg = run.config
    return build_report(cfg.label, cutoff, run.split.checksum, fold_predictions, cfg.family, cfg.variant)


def report_json(report):
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# comparison


def compare_reports(a, b):
    """Per-fold DeLong tests of two reports plus their Fisher combination, per task."""
    if a["fold_checksum"] != b["fold_checksum"] or a["cutoff"] != b["cutoff"]:
        raise RunMismatchError("non-comparable runs")
    tasks = []
    for t, name in enumerate(TASK_NAMES):
        fold_p, diffs, degenerate = [], [], []
        for fa, fb in zip(a["folds"], b["folds"]):
            pa = {p["patient_id"]: p for p in fa["predictions"]}
            pb = {p["patient_id"]: p for p in fb["predictions"]}
            if set(pa) != set(pb):
                raise RunMismatchError("non-comparable runs")
            ids = [i for i in sorted(pa) if pa[i]["labels"][t] is not None]
            y = np.array([pa[i]["labels"][t] for i in ids], dtype=bool)
            if not ids or y.all() or not y.any():
                fold_p.append(None)
                diffs.append(None)
                degenerate.append(True)
                continue
            res = evalstats.delong_test([pa[i]["scores"][t] for i in ids], [pb[i]["scores"][t] for i in ids], y)
            fold_p.append(res.p)
            diffs.append(res.auc_diff)
            degenerate.append(res.degenerate)
        defined = [p for p in fold_p if p is not None]
        combined = evalstats.fisher_combine(defined) if defined else None
        tasks.append({
            "task": name,
            "fold_delong_p": fold_p,
            "fold_auc_diff": diffs,
            "fold_degenerate": degenerate,
            "fisher_p": combined,
            "degenerate": all(degenerate),
            "significant": combined is not None and combined < evalstats.ALPHA,
        })
    return {"schema": COMPARE_SCHEMA, "pair": [a["label"], b["label"]], "cutoff": a["cutoff"],
            "fold_checksum": a["fold_checksum"], "tasks": tasks}


# ---------------------------------------------------------------------------
# persistence


def save_run(run, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(run.config.to_json(), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "folds.json"), "w", encoding="utf-8") as fh:
        json.dump({"checksum": run.split.checksum, "assignment": dict(sorted(run.split.assignment.items())),
                   "excluded": run.split.exclusion_counts()}, fh, indent=1, sort_keys=True)
    for fa in run.folds:
        fdir = os.path.join(out_dir, f"fold{fa.fold}")
        os.makedirs(fdir, exist_ok=True)
        with open(os.path.join(fdir, "preprocess.json"), "w", encoding="utf-8") as fh:
            json.dump(fa.stats.to_json(), fh, sort_keys=True)
        with open(os.path.join(fdir, "loss_curve.json"), "w", encoding="utf-8") as fh:
            json.dump(fa.curves, fh, indent=1, sort_keys=True)
        with open(os.path.join(fdir, "test_ids.json"), "w", encoding="utf-8") as fh:
            json.dump(fa.test_ids, fh)
        save_model(fa.model, os.path.join(fdir, "model"))


def load_run(out_dir, records=None):
    with open(os.path.join(out_dir, "resolved_config.json"), encoding="utf-8") as fh:
        cfg = RunConfig(**json.load(fh))
    with open(os.path.join(out_dir, "folds.json"), encoding="utf-8") as fh:
        folds_meta = json.load(fh)
    split = CohortSplit([], [], folds_meta["assignment"])
    run = TrainedRun(cfg, split)
    for fold in range(cfg.k_folds):
        fdir = os.path.join(out_dir, f"fold{fold}")
        with open(os.path.join(fdir, "preprocess.json"), encoding="utf-8") as fh:
            stats = PreprocessStats.from_json(json.load(fh))
        with open(os.path.join(fdir, "loss_curve.json"), encoding="utf-8") as fh:
            curves = json.load(fh)
        with open(os.path.join(fdir, "test_ids.json"), encoding="utf-8") as fh:
            test_ids = json.load(fh)
        run.folds.append(FoldArtifacts(fold, stats, load_model(os.path.join(fdir, "model")), curves, test_ids))
    return run


# ---------------------------------------------------------------------------
# attention dump


def attention_dump(model, patients, cutoff):
    """SimTA weights of every layer and modality, as JSON-ready rows per patient.

    Time coordinates include the virtual query placed at ``cutoff``; rows
    cover only causal pairs (source not later than target).
    """
    members = model.members if isinstance(model, LateMeanModel) else None
    mods = model.modalities if members else model.config.modalities
    keep = [p for p in patients if not (p.event_indicator and p.time_to_event_days < cutoff)]
    out = []
    for start in range(0, len(keep), EVAL_BATCH):
        chunk = keep[start:start + EVAL_BATCH]
        batch = collate(chunk, [cutoff] * len(chunk), modalities=mods)
        records = {}
        if members:
            for m in mods:
                rec = {}
                members[m].forward(batch, record=rec)
                records[m] = rec[m]
        else:
            model.forward(batch, record=records)
        rows = {}
        for m in mods:
            mb = batch.modalities[m]
            B = len(chunk)
            t_ext = np.concatenate([mb.t, batch.cutoff[:, None]], axis=1)
            valid_ext = np.concatenate([mb.valid, np.ones((B, 1), dtype=bool)], axis=1)
            rows[m] = attention_rows(records[m], t_ext, valid_ext)
        for b, pid in enumerate(batch.patient_ids):
            out.append({
                "patient_id": pid,
                "cutoff": float(cutoff),
                "modalities": {
                    m: [{"layer": l, "target_t": ti, "source_t": tj, "weight": w} for l, ti, tj, w in rows[m][b]]
                    for m in mods
                },
            })
    return out
