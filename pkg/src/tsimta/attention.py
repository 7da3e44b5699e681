"""Simple temporal attention (SimTA) and the TSimTA transformer block.

A SimTA layer attends from each event to every event at or before it, with
scores that depend only on the elapsed time between the two:

    score_ij = -softplus(lambda_raw) * (t_i - t_j) / tau + bias

so weights always favour recent observations. A TSimTA block wraps a stack of
SimTA layers in a post-norm transformer encoder block
``y = ln1(x + stack(x)); out = ln2(y + ffn(y))``.

Sequences are handled as padded batches (:class:`HiddenSequence`); the causal
mask is derived from timestamps, never from array order.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels

TAU_DAYS = 30.0
FFN_EXPANSION = 4


def _dense(rng, fan_in, fan_out, name):
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    return ad.Tensor(w, requires_grad=True, name=name)


def _vec(value, size, name):
    return ad.Tensor(np.full(size, value, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class SimTALayerParams:
    lambda_raw: ad.Tensor
    bias: ad.Tensor
    W_v: ad.Tensor
    b_v: ad.Tensor
    W_f1: ad.Tensor
    b_f1: ad.Tensor
    W_f2: ad.Tensor
    b_f2: ad.Tensor
    tau_days: float = TAU_DAYS

    @classmethod
    def init(cls, rng, d_model, tau_days=TAU_DAYS, decay=1.0):
        hidden = FFN_EXPANSION * d_model
        return cls(
            lambda_raw=_vec(np.log(np.expm1(decay)), 1, "lambda_raw"),
            bias=_vec(0.0, 1, "bias"),
            W_v=_dense(rng, d_model, d_model, "W_v"),
            b_v=_vec(0.0, d_model, "b_v"),
            W_f1=_dense(rng, d_model, hidden, "W_f1"),
            b_f1=_vec(0.0, hidden, "b_f1"),
            W_f2=_dense(rng, hidden, d_model, "W_f2"),
            b_f2=_vec(0.0, d_model, "b_f2"),
            tau_days=tau_days,
        )

    def named_tensors(self):
        return {k: getattr(self, k) for k in ("lambda_raw", "bias", "W_v", "b_v", "W_f1", "b_f1", "W_f2", "b_f2")}

    @property
    def decay(self):
        """Effective decay per ``tau_days``; always positive."""
        return float(np.logaddexp(0.0, self.lambda_raw.data[0]))


@dataclass
class TSimTABlockParams:
    simta_layers: list
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    W1: ad.Tensor
    b1: ad.Tensor
    W2: ad.Tensor
    b2: ad.Tensor

    @classmethod
    def init(cls, rng, d_model, n_inner=3, tau_days=TAU_DAYS):
        if n_inner < 1:
            raise ValueError("a TSimTA block needs at least one SimTA layer")
        hidden = FFN_EXPANSION * d_model
        return cls(
            simta_layers=[SimTALayerParams.init(rng, d_model, tau_days) for _ in range(n_inner)],
            ln1_g=_vec(1.0, d_model, "ln1_g"),
            ln1_b=_vec(0.0, d_model, "ln1_b"),
            ln2_g=_vec(1.0, d_model, "ln2_g"),
            ln2_b=_vec(0.0, d_model, "ln2_b"),
            W1=_dense(rng, d_model, hidden, "W1"),
            b1=_vec(0.0, hidden, "b1"),
            W2=_dense(rng, hidden, d_model, "W2"),
            b2=_vec(0.0, d_model, "b2"),
        )

    def named_tensors(self):
        out = {}
        for i, layer in enumerate(self.simta_layers):
            for k, v in layer.named_tensors().items():
                out[f"simta{i}.{k}"] = v
        for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2"):
            out[k] = getattr(self, k)
        return out


@dataclass
class AsyncSequence:
    """One patient's events for one modality, ordered by time, before a cutoff."""

    t_days: np.ndarray
    x: np.ndarray
    cutoff_days: float

    def __post_init__(self):
        t = np.asarray(self.t_days, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != len(t):
            raise ValueError(f"features {x.shape} do not match {len(t)} timestamps")
        order = np.argsort(t, kind="stable")
        self.t_days, self.x = t[order], x[order]
        if len(t) and self.t_days[-1] > self.cutoff_days:
            raise ValueError(f"event at t={self.t_days[-1]} lies after the cutoff {self.cutoff_days}")

    def __len__(self):
        return len(self.t_days)


@dataclass
class HiddenSequence:
    """Padded batch of hidden-state sequences with their timestamps.

    ``h`` has shape (B, L, d); ``t`` and ``valid`` have shape (B, L).
    """

    h: ad.Tensor
    t: np.ndarray
    valid: np.ndarray
    _grid: tuple = field(default=None, repr=False)

    @property
    def grid(self):
        if self._grid is None:
            self._grid = time_grid(self.t, self.valid)
        return self._grid

    def with_hidden(self, h):
        return HiddenSequence(h, self.t, self.valid, self._grid)

    @classmethod
    def from_sequences(cls, seqs):
        """Pad a list of :class:`AsyncSequence` into one batch (features become ``h``)."""
        B = len(seqs)
        L = max((len(s) for s in seqs), default=0)
        d = next((s.x.shape[1] for s in seqs if len(s)), 0)
        h = np.zeros((B, L, d))
        t = np.zeros((B, L))
        valid = np.zeros((B, L), dtype=bool)
        for b, s in enumerate(seqs):
            n = len(s)
            h[b, :n] = s.x
            t[b, :n] = s.t_days
            t[b, n:] = s.cutoff_days
            valid[b, :n] = True
        return cls(ad.Tensor(h), t, valid)


def time_grid(t, valid):
    """Elapsed-time matrix and causal mask, each (B, L, L)."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    v = np.ascontiguousarray(valid, dtype=np.uint8)
    dt, mask = kernels.causal_time_grid(t, v)
    return dt, mask.astype(bool)


def simta_scores(deltas, params, mask=None):
    """Attention weights from elapsed times ``deltas`` (>= 0) over the last axis."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if mask is None:
        mask = np.ones(deltas.shape, dtype=bool)
    if deltas.shape[-1] == 0:
        raise ValueError("simta_scores: empty candidate set")
    if np.any(deltas[mask] < 0.0):
        raise ValueError("simta_scores: negative elapsed time (non-causal pair)")
    slope = ad.scalar_affine(ad.softplus(params.lambda_raw), -1.0 / params.tau_days, 0.0)
    scores = ad.scalar_affine(np.where(mask, deltas, 0.0), slope, params.bias)
    return ad.softmax_last_axis_masked(scores, mask)


def _ffn(h, W1, b1, W2, b2):
    z = ad.relu(ad.add(ad.matmul(h, W1), b1))
    return ad.add(ad.matmul(z, W2), b2)


def simta_layer_forward(seq, params, record=None):
    """``out_i = FFN(sum_{t_j <= t_i} w_ij (W_v x_j + b_v))`` for every position."""
    h = seq.h
    if h.shape[-1] != params.W_v.shape[0]:
        raise ad.ShapeError(f"simta_layer_forward: width {h.shape[-1]} vs d_model {params.W_v.shape[0]}")
    dt, mask = seq.grid
    w = simta_scores(dt, params, mask)
    if record is not None:
        record.append(w.data)
    v = ad.add(ad.matmul(h, params.W_v), params.b_v)
    agg = ad.matmul(w, v)
    return seq.with_hidden(_ffn(agg, params.W_f1, params.b_f1, params.W_f2, params.b_f2))


def simta_stack_forward(seq, layers, record=None):
    if not layers:
        raise ValueError("simta_stack_forward: empty layer list")
    for layer in layers:
        seq = simta_layer_forward(seq, layer, record)
    return seq


def tsimta_block_forward(seq, params, record=None):
    x = seq.h
    s = simta_stack_forward(seq, params.simta_layers, record).h
    y = ad.layer_norm_last_axis(ad.add(x, s), params.ln1_g, params.ln1_b)
    f = _ffn(y, params.W1, params.b1, params.W2, params.b2)
    out = ad.layer_norm_last_axis(ad.add(y, f), params.ln2_g, params.ln2_b)
    return seq.with_hidden(out)


def encoder_forward(seq, encoder, record=None):
    """Run an encoder: a list of TSimTA blocks, or a plain list of SimTA layers."""
    if encoder and isinstance(encoder[0], TSimTABlockParams):
        for block in encoder:
            seq = tsimta_block_forward(seq, block, record)
        return seq
    return simta_stack_forward(seq, encoder, record)


def summarize_sequence(seq, encoder, query_embedding, cutoff, missing=None, record=None):
    """Fixed-width summary of each sequence, read out at a virtual query event.

    A learnable query vector is placed at ``t = cutoff`` after the real events,
    the encoder runs over the extended sequence and the output at the query
    slot is returned. With ``missing`` given, rows without any real event are
    replaced by that vector. Returns ``(rep, present)`` with ``rep`` (B, d).
    """
    h = seq.h
    B, L, d = h.shape
    cutoff = np.broadcast_to(np.asarray(cutoff, dtype=np.float64), (B,))
    if np.any(seq.valid & (seq.t > cutoff[:, None])):
        raise ValueError("summarize_sequence: event after the cutoff")
    place = np.zeros((B, L + 1, L))
    place[:, np.arange(L), np.arange(L)] = 1.0
    qslot = np.zeros((B, L + 1, 1))
    qslot[:, L, 0] = 1.0
    q = ad.reshape(query_embedding, (1, d))
    h_ext = ad.add(ad.matmul(place, h), ad.matmul(qslot, q))
    t_ext = np.concatenate([seq.t, cutoff[:, None]], axis=1)
    valid_ext = np.concatenate([seq.valid, np.ones((B, 1), dtype=bool)], axis=1)
    out = encoder_forward(HiddenSequence(h_ext, t_ext, valid_ext), encoder, record).h
    rep = ad.reshape(ad.matmul(qslot.transpose(0, 2, 1), out), (B, d))
    present = seq.valid.any(axis=1)
    if missing is not None:
        rep = blend_missing(rep, present, missing)
    return rep, present


def blend_missing(rep, keep, missing):
    """Rows where ``keep`` is false are replaced by the vector ``missing``."""
    B, d = rep.shape
    k = np.asarray(keep, dtype=np.float64)
    keep_mat = np.repeat(k[:, None], d, axis=1)
    fill = ad.matmul((1.0 - k)[:, None], ad.reshape(missing, (1, d)))
    return ad.add(ad.elementwise_mul(rep, keep_mat), fill)


def attention_rows(record, t, valid, layer_offset=0):
    """Flatten recorded attention matrices into ``(layer, target_t, source_t, weight)`` rows.

    ``record`` holds one (B, L, L) array per layer; returns one row list per batch item.
    """
    per_item = [[] for _ in range(t.shape[0])]
    for li, w in enumerate(record):
        for b in range(t.shape[0]):
            idx = np.flatnonzero(valid[b])
            for i in idx:
                for j in idx:
                    if t[b, j] <= t[b, i]:
                        per_item[b].append((layer_offset + li, float(t[b, i]), float(t[b, j]), float(w[b, i, j])))
    return per_item
