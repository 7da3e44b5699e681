"""Multimodal SimTA / TSimTA models: encoders, modality dropout, fusion and heads.

Modalities are always handled in the fixed order ``(blood, imaging,
medication)``. A model is one of

* ``Unimodal:<modality>`` - a single encoder feeding the MLP and heads,
* ``Concat`` - modality summaries concatenated and passed through the MLP,
* ``ConcatSA`` - a self-attention transformer block over the modality
  tokens before the concatenation,
* ``LateMean`` - the mean of the probabilities of independently trained
  unimodal models over the modalities a patient actually has.
"""
from dataclasses import dataclass, field, asdict
import json
import os

import numpy as np

from . import autodiff as ad
from .attention import (
    TAU_DAYS,
    FFN_EXPANSION,
    HiddenSequence,
    SimTALayerParams,
    TSimTABlockParams,
    blend_missing,
    summarize_sequence,
    _dense,
    _vec,
    _ffn,
)
from .cohort import MODALITIES, HORIZONS, derive_labels

FAMILIES = ("SimTA", "TSimTA")
FUSIONS = ("Concat", "ConcatSA", "LateMean")
PARAMS_VERSION = "tsimta-params/1"


class ModelConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    variant: str = "ConcatSA"
    sa_heads: int = 2
    use_positional_encoding: bool = False
    mlp_hidden: int = 64
    p_modality_drop: float = 0.25

    def __post_init__(self):
        if self.variant not in FUSIONS and not self.variant.startswith("Unimodal:"):
            raise ModelConfigError(f"unknown fusion variant {self.variant!r}")
        if self.variant.startswith("Unimodal:") and self.variant.split(":", 1)[1] not in MODALITIES:
            raise ModelConfigError(f"unknown modality in {self.variant!r}")
        if not 0.0 <= self.p_modality_drop < 1.0:
            raise ModelConfigError("p_modality_drop must lie in [0, 1)")
        if self.sa_heads < 1 or self.mlp_hidden < 1:
            raise ModelConfigError("sa_heads and mlp_hidden must be positive")


@dataclass
class ModelConfig:
    family: str = "TSimTA"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    n_blocks: int = 1
    n_inner: int = 3
    d_model: int = 32
    n_tasks: int = len(HORIZONS)
    tau_days: float = TAU_DAYS
    seed: int = 0
    input_dims: dict = field(default_factory=dict)
    modality_order: tuple = MODALITIES

    def __post_init__(self):
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        self.modality_order = tuple(self.modality_order)
        unknown = set(self.modality_order) - set(MODALITIES)
        if unknown:
            raise ModelConfigError(f"unknown modality {sorted(unknown)}")
        if self.family not in FAMILIES:
            raise ModelConfigError(f"unknown model family {self.family!r}")
        if self.n_blocks < 1 or self.n_inner < 1 or self.d_model < 1:
            raise ModelConfigError("n_blocks, n_inner and d_model must be positive")
        if self.fusion.variant == "ConcatSA" and self.d_model % self.fusion.sa_heads:
            raise ModelConfigError(f"sa_heads={self.fusion.sa_heads} must divide d_model={self.d_model}")

    @property
    def modalities(self):
        v = self.fusion.variant
        if v.startswith("Unimodal:"):
            return (v.split(":", 1)[1],)
        return self.modality_order

    def to_json(self):
        d = asdict(self)
        d["modality_order"] = list(self.modality_order)
        return d


# ---------------------------------------------------------------------------
# batches


@dataclass
class ModalityBatch:
    """Padded events of one modality: features ``x`` (B, L, F) or code ``ids``/``weights`` (B, L, C)."""

    t: np.ndarray
    valid: np.ndarray
    x: np.ndarray = None
    ids: np.ndarray = None
    weights: np.ndarray = None


@dataclass
class Batch:
    patient_ids: list
    cutoff: np.ndarray
    modalities: dict
    labels: np.ndarray
    label_mask: np.ndarray

    def __len__(self):
        return len(self.patient_ids)


def collate(patients, cutoffs, horizons=HORIZONS, modalities=MODALITIES, input_dims=None):
    """Truncate each preprocessed patient at its cutoff, label it and pad into a :class:`Batch`."""
    B = len(patients)
    cutoffs = np.asarray(cutoffs, dtype=np.float64).reshape(B)
    labels = np.zeros((B, len(horizons)))
    lmask = np.zeros((B, len(horizons)), dtype=bool)
    cut = []
    for b, (p, c) in enumerate(zip(patients, cutoffs)):
        ls = derive_labels(p.event_indicator, p.time_to_event_days, p.last_followup_days, c, horizons)
        labels[b], lmask[b] = ls.values, ls.mask
        cut.append(p.truncate(c))
    mods = {}
    for m in modalities:
        evs = [p.modalities[m] for p in cut]
        L = max((len(e) for e in evs), default=0)
        t = np.repeat(cutoffs[:, None], L, axis=1)
        valid = np.zeros((B, L), dtype=bool)
        if m == "medication":
            C = max((len(ids) for e in evs for ids in e.codes), default=1)
            ids = np.zeros((B, L, C), dtype=np.int64)
            w = np.zeros((B, L, C))
            for b, e in enumerate(evs):
                n = len(e)
                t[b, :n] = e.t
                valid[b, :n] = True
                for i, codes in enumerate(e.codes):
                    ids[b, i, :len(codes)] = codes
                    w[b, i, :len(codes)] = 1.0 / len(codes)
            mods[m] = ModalityBatch(t, valid, ids=ids, weights=w)
        else:
            F = evs[0].x.shape[1] if evs else (input_dims or {}).get(m, 0)
            x = np.zeros((B, L, F))
            for b, e in enumerate(evs):
                n = len(e)
                t[b, :n] = e.t
                valid[b, :n] = True
                x[b, :n] = e.x
            mods[m] = ModalityBatch(t, valid, x=x)
    return Batch([p.patient_id for p in patients], cutoffs, mods, labels, lmask)


# ---------------------------------------------------------------------------
# parameters


def _encoder_tensors(encoder, prefix):
    out = {}
    for i, part in enumerate(encoder):
        for k, v in part.named_tensors().items():
            out[f"{prefix}.enc{i}.{k}"] = v
    return out


@dataclass
class ModalityParams:
    in_W: ad.Tensor
    in_b: ad.Tensor
    encoder: list
    query: ad.Tensor
    missing: ad.Tensor
    table: ad.Tensor = None

    def named_tensors(self, prefix):
        out = {f"{prefix}.in_W": self.in_W, f"{prefix}.in_b": self.in_b}
        if self.table is not None:
            out[f"{prefix}.table"] = self.table
        out.update(_encoder_tensors(self.encoder, prefix))
        out[f"{prefix}.query"] = self.query
        out[f"{prefix}.missing"] = self.missing
        return out


@dataclass
class SelfAttentionBlockParams:
    """Multi-head scaled dot-product self-attention block over modality tokens."""

    Wq: list
    bq: list
    Wk: list
    bk: list
    Wv: list
    bv: list
    Wo: ad.Tensor
    bo: ad.Tensor
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    W1: ad.Tensor
    b1: ad.Tensor
    W2: ad.Tensor
    b2: ad.Tensor
    pos: ad.Tensor = None

    @classmethod
    def init(cls, rng, d_model, heads, n_tokens, positional):
        dh = d_model // heads
        mk = lambda name: [_dense(rng, d_model, dh, f"{name}{h}") for h in range(heads)]  # noqa: E731
        zb = lambda name: [_vec(0.0, dh, f"{name}{h}") for h in range(heads)]  # noqa: E731
        hidden = FFN_EXPANSION * d_model
        pos = None
        if positional:
            pos = ad.Tensor(rng.normal(0.0, 0.1, size=(n_tokens, d_model)), requires_grad=True, name="pos")
        return cls(mk("Wq"), zb("bq"), mk("Wk"), zb("bk"), mk("Wv"), zb("bv"),
                   _dense(rng, d_model, d_model, "Wo"), _vec(0.0, d_model, "bo"),
                   _vec(1.0, d_model, "ln1_g"), _vec(0.0, d_model, "ln1_b"),
                   _vec(1.0, d_model, "ln2_g"), _vec(0.0, d_model, "ln2_b"),
                   _dense(rng, d_model, hidden, "W1"), _vec(0.0, hidden, "b1"),
                   _dense(rng, hidden, d_model, "W2"), _vec(0.0, d_model, "b2"), pos)

    def named_tensors(self, prefix):
        out = {}
        for name in ("Wq", "bq", "Wk", "bk", "Wv", "bv"):
            for h, t in enumerate(getattr(self, name)):
                out[f"{prefix}.{name}{h}"] = t
        for name in ("Wo", "bo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        if self.pos is not None:
            out[f"{prefix}.pos"] = self.pos
        return out


@dataclass
class MLPParams:
    W1: ad.Tensor
    b1: ad.Tensor
    W2: ad.Tensor
    b2: ad.Tensor

    @classmethod
    def init(cls, rng, d_in, hidden):
        return cls(_dense(rng, d_in, hidden, "W1"), _vec(0.0, hidden, "b1"),
                   _dense(rng, hidden, hidden, "W2"), _vec(0.0, hidden, "b2"))

    def named_tensors(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W1", "b1", "W2", "b2")}


@dataclass
class HeadParams:
    """T logit heads stored column-wise: ``logit_t = fused @ W[:, t] + b[t]``."""

    W: ad.Tensor
    b: ad.Tensor

    @classmethod
    def zeros(cls, d_in, n_tasks):
        return cls(ad.Tensor(np.zeros((d_in, n_tasks)), requires_grad=True, name="heads.W"),
                   ad.Tensor(np.zeros(n_tasks), requires_grad=True, name="heads.b"))

    def named_tensors(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


def _init_encoder(rng, cfg):
    if cfg.family == "TSimTA":
        return [TSimTABlockParams.init(rng, cfg.d_model, cfg.n_inner, cfg.tau_days) for _ in range(cfg.n_blocks)]
    return [SimTALayerParams.init(rng, cfg.d_model, cfg.tau_days) for _ in range(cfg.n_blocks * cfg.n_inner)]


def _init_modality(rng, cfg, m):
    d = cfg.d_model
    table = None
    if m == "medication":
        vocab = cfg.input_dims.get(m)
        if not vocab:
            raise ModelConfigError("medication vocabulary size missing from input_dims")
        table = ad.Tensor(rng.normal(0.0, 1.0, size=(vocab, d)), requires_grad=True, name="table")
        d_in = d
    else:
        d_in = cfg.input_dims.get(m)
        if not d_in:
            raise ModelConfigError(f"input width for {m} missing from input_dims")
    return ModalityParams(
        in_W=_dense(rng, d_in, d, "in_W"),
        in_b=_vec(0.0, d, "in_b"),
        encoder=_init_encoder(rng, cfg),
        query=ad.Tensor(rng.normal(0.0, 0.1, size=d), requires_grad=True, name="query"),
        missing=_vec(0.0, d, "missing"),
        table=table,
    )


class MultimodalModel:
    """Encoders + (optional) token self-attention + MLP + multitask heads."""

    def __init__(self, config):
        if config.fusion.variant == "LateMean":
            raise ModelConfigError("use LateMeanModel for late fusion")
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.per_modality = {m: _init_modality(rng, config, m) for m in config.modalities}
        M = len(config.modalities)
        self.sa = None
        if config.fusion.variant == "ConcatSA":
            self.sa = SelfAttentionBlockParams.init(rng, config.d_model, config.fusion.sa_heads, M,
                                                    config.fusion.use_positional_encoding)
        self.mlp = MLPParams.init(rng, M * config.d_model, config.fusion.mlp_hidden)
        self.heads = HeadParams.zeros(config.fusion.mlp_hidden, config.n_tasks)

    def named_tensors(self):
        out = {}
        for m, mp in self.per_modality.items():
            out.update(mp.named_tensors(m))
        if self.sa is not None:
            out.update(self.sa.named_tensors("fusion.sa"))
        out.update(self.mlp.named_tensors("mlp"))
        out.update(self.heads.named_tensors("heads"))
        return out

    def parameters(self):
        return list(self.named_tensors().values())

    def forward(self, batch, training=False, rng=None, record=None):
        """Probabilities (B, T); ``record`` collects attention matrices per modality."""
        reps = encode_modalities(batch, self, record)
        if training:
            reps = modality_dropout(reps, rng, self.config.fusion.p_modality_drop, True,
                                    {m: p.missing for m, p in self.per_modality.items()})
        order = self.config.modalities
        if self.sa is not None:
            fused = fuse_concat_sa(reps, self.sa, self.mlp, self.config.fusion.sa_heads, order)
        else:
            fused = fuse_concat(reps, self.mlp, order)
        return multitask_heads(fused, self.heads)

    def loss(self, batch, training=True, rng=None):
        probs = self.forward(batch, training, rng)
        return ad.bce_loss_masked(probs, batch.labels, batch.label_mask), probs

    def predict(self, batch):
        return self.forward(batch).data


class LateMeanModel:
    """Average of unimodal model probabilities over each patient's present modalities."""

    def __init__(self, members):
        self.members = dict(members)

    @property
    def modalities(self):
        return tuple(self.members)

    def predict(self, batch):
        probs, present = {}, {}
        for m, model in self.members.items():
            probs[m] = model.predict(batch)
            present[m] = batch.modalities[m].valid.any(axis=1)
        return late_fusion_mean(probs, present)


# ---------------------------------------------------------------------------
# model stages


def encode_modalities(batch, model, record=None):
    """Summaries for every modality of ``model``: ``{m: (rep (B, d), present (B,))}``."""
    out = {}
    for m, mp in model.per_modality.items():
        if m not in batch.modalities:
            raise ModelConfigError(f"unknown modality {m!r} in batch")
        mb = batch.modalities[m]
        if m == "medication":
            emb = ad.embedding_lookup(mp.table, mb.ids, mb.weights)
            h = ad.add(ad.matmul(emb, mp.in_W), mp.in_b)
        else:
            h = ad.add(ad.matmul(mb.x, mp.in_W), mp.in_b)
        seq = HiddenSequence(h, mb.t, mb.valid)
        rec = [] if record is not None else None
        out[m] = summarize_sequence(seq, mp.encoder, mp.query, batch.cutoff, mp.missing, rec)
        if record is not None:
            record[m] = rec
    return out


def modality_dropout(reps, rng, p, training, missing):
    """Randomly replace present modality summaries by their missing vectors (training only).

    A row never loses all of its present modalities: if the draw would drop
    them all, one of them, chosen uniformly, is kept.
    """
    if not training or p <= 0.0:
        return reps
    names = list(reps)
    present = np.stack([reps[m][1] for m in names], axis=1)
    B, M = present.shape
    drop = (rng.random((B, M)) < p) & present
    for b in np.flatnonzero(present.any(axis=1) & ~(present & ~drop).any(axis=1)):
        choices = np.flatnonzero(present[b])
        drop[b, choices[rng.integers(len(choices))]] = False
    out = {}
    for j, m in enumerate(names):
        rep, pres = reps[m]
        if drop[:, j].any():
            keep = pres & ~drop[:, j]
            out[m] = (blend_missing(rep, keep, missing[m]), keep)
        else:
            out[m] = (rep, pres)
    return out


def _mlp(x, mlp):
    h = ad.relu(ad.add(ad.matmul(x, mlp.W1), mlp.b1))
    return ad.add(ad.matmul(h, mlp.W2), mlp.b2)


def fuse_concat(reps, mlp, order):
    if len(reps) != len(order) or set(reps) != set(order):
        raise ModelConfigError(f"fuse_concat: expected slots {list(order)}, got {list(reps)}")
    x = ad.concat_last_axis([reps[m][0] for m in order])
    return _mlp(x, mlp)


def self_attention_block(tokens, sa, heads, record=None):
    """Post-norm transformer encoder block over tokens (B, M, d)."""
    B, M, d = tokens.shape
    dh = d // heads
    x = tokens
    if sa.pos is not None:
        x = ad.add(x, sa.pos)
    ctx = []
    for h in range(heads):
        q = ad.add(ad.matmul(x, sa.Wq[h]), sa.bq[h])
        k = ad.add(ad.matmul(x, sa.Wk[h]), sa.bk[h])
        v = ad.add(ad.matmul(x, sa.Wv[h]), sa.bv[h])
        scores = ad.scalar_affine(ad.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(dh), 0.0)
        w = ad.softmax_last_axis_masked(scores)
        if record is not None:
            record.append(w.data)
        ctx.append(ad.matmul(w, v))
    attn = ad.add(ad.matmul(ad.concat_last_axis(ctx), sa.Wo), sa.bo)
    y = ad.layer_norm_last_axis(ad.add(x, attn), sa.ln1_g, sa.ln1_b)
    f = _ffn(y, sa.W1, sa.b1, sa.W2, sa.b2)
    return ad.layer_norm_last_axis(ad.add(y, f), sa.ln2_g, sa.ln2_b)


def fuse_concat_sa(reps, sa, mlp, heads, order, record=None):
    if len(reps) != len(order) or set(reps) != set(order):
        raise ModelConfigError(f"fuse_concat_sa: expected slots {list(order)}, got {list(reps)}")
    first = reps[order[0]][0]
    B, d = first.shape
    if d % heads:
        raise ModelConfigError(f"sa_heads={heads} must divide d_model={d}")
    M = len(order)
    tokens = ad.reshape(ad.concat_last_axis([reps[m][0] for m in order]), (B, M, d))
    out = self_attention_block(tokens, sa, heads, record)
    return _mlp(ad.reshape(out, (B, M * d)), mlp)


def multitask_heads(fused, heads):
    if fused.shape[-1] != heads.W.shape[0]:
        raise ModelConfigError(f"heads expect width {heads.W.shape[0]}, got {fused.shape[-1]}")
    return ad.sigmoid(ad.add(ad.matmul(fused, heads.W), heads.b))


def late_fusion_mean(unimodal_probs, present):
    """Per-task unweighted mean over present modalities; arrays are (B, T) and (B,)."""
    names = list(unimodal_probs)
    P = np.stack([np.asarray(unimodal_probs[m], dtype=np.float64) for m in names])
    if P.ndim == 2:
        P = P[:, None, :]
    W = np.stack([np.asarray(present[m], dtype=bool).reshape(-1) for m in names]).astype(np.float64)
    n = W.sum(axis=0)
    if np.any(n == 0):
        raise ValueError("late_fusion_mean: a patient has no present modality")
    out = (P * W[:, :, None]).sum(axis=0) / n[:, None]
    return out[0] if np.ndim(unimodal_probs[names[0]]) == 1 else out


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path_prefix):
    """Write ``<prefix>.manifest.json`` and ``<prefix>.params.npz``."""
    if isinstance(model, LateMeanModel):
        members = {}
        for m, sub in model.members.items():
            members[m] = save_model(sub, f"{path_prefix}.{m}")
        manifest = {"version": PARAMS_VERSION, "kind": "LateMean", "members": members}
    else:
        arrays = {k: t.data for k, t in model.named_tensors().items()}
        np.savez(f"{path_prefix}.params.npz", __version__=np.array(PARAMS_VERSION), **arrays)
        cfg = model.config
        manifest = {
            "version": PARAMS_VERSION,
            "kind": "Multimodal",
            "encoder_family": cfg.family,
            "N": cfg.n_blocks,
            "N_inner": cfg.n_inner,
            "d_model": cfg.d_model,
            "fusion_variant": cfg.fusion.variant,
            "sa_heads": cfg.fusion.sa_heads,
            "use_positional_encoding": cfg.fusion.use_positional_encoding,
            "p_modality_drop": cfg.fusion.p_modality_drop,
            "T": cfg.n_tasks,
            "seed": cfg.seed,
            "modality_order": list(cfg.modality_order),
            "config": cfg.to_json(),
            "params": f"{os.path.basename(path_prefix)}.params.npz",
        }
    with open(f"{path_prefix}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return f"{os.path.basename(path_prefix)}.manifest.json"


def load_model(path_prefix):
    with open(f"{path_prefix}.manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != PARAMS_VERSION:
        raise ModelConfigError(f"unsupported parameter version {manifest.get('version')!r}")
    if manifest["kind"] == "LateMean":
        return LateMeanModel({m: load_model(f"{path_prefix}.{m}") for m in manifest["members"]})
    model = MultimodalModel(ModelConfig(**manifest["config"]))
    blob = np.load(f"{path_prefix}.params.npz")
    if str(blob["__version__"]) != PARAMS_VERSION:
        raise ModelConfigError("parameter blob version mismatch")
    for k, t in model.named_tensors().items():
        if blob[k].shape != t.shape:
            raise ModelConfigError(f"parameter {k}: stored shape {blob[k].shape} != {t.shape}")
        t.data = np.array(blob[k], dtype=np.float64)
    return model
