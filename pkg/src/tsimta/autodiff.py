"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The primitive set is closed and every op spells out its own shape rule; there
is no implicit broadcasting. Forward values are recorded on the innermost
active :class:`Tape`; outside a tape ops simply evaluate (inference mode).

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = mean_over_axis(elementwise_mul(x, x), axis=0)
    backward(loss, tape)
    x.grad  # array([1., 2.])
"""
from dataclasses import dataclass, field
import itertools

import numpy as np

from . import kernels

LAYER_NORM_EPS = 1e-5
BCE_CLAMP = 1e-7


class AutodiffError(ValueError):
    """Base class for errors raised by primitives and the tape."""


class ShapeError(AutodiffError):
    pass


class DegenerateMaskError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_ids = itertools.count()


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    saved: tuple
    attrs: dict


@dataclass
class Tape:
    """Ordered record of primitive applications; usable as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss):
        return backward(loss, self)


_TAPES = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _const(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive rules: forward(inputs, attrs) -> (value, saved)
#                  backward(g, inputs, value, saved, attrs) -> grads per input


def _matmul_fwd(xs, attrs):
    a, b = xs[0].data, xs[1].data
    tb = attrs.get("transpose_b", False)
    if b.ndim == 2:
        k = b.shape[1] if tb else b.shape[0]
        if a.ndim < 1 or a.shape[-1] != k:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        return a @ (b.T if tb else b), None
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0]:
        k = b.shape[2] if tb else b.shape[1]
        if a.shape[2] == k:
            return a @ (b.transpose(0, 2, 1) if tb else b), None
    raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs[0].data, xs[1].data
    tb = attrs.get("transpose_b", False)
    if b.ndim == 2:
        ga = g @ (b if tb else b.T)
        a2 = a.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = g2.T @ a2 if tb else a2.T @ g2
        return ga, gb
    bt = b.transpose(0, 2, 1)
    ga = g @ (b if tb else bt)
    at = a.transpose(0, 2, 1)
    gb = (g.transpose(0, 2, 1) @ a) if tb else (at @ g)
    return ga, gb


def _trailing(a_shape, b_shape):
    return len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


def _add_fwd(xs, attrs):
    a, b = xs[0].data, xs[1].data
    if a.shape != b.shape and not (b.ndim >= 1 and _trailing(a.shape, b.shape)):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    return a + b, None


def _add_bwd(g, xs, out, saved, attrs):
    b = xs[1].data
    gb = g if g.shape == b.shape else g.reshape((-1,) + b.shape).sum(axis=0)
    return g, gb


def _mul_fwd(xs, attrs):
    a, b = xs[0].data, xs[1].data
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ")
    return a * b, None


def _mul_bwd(g, xs, out, saved, attrs):
    return g * xs[1].data, g * xs[0].data


def _concat_fwd(xs, attrs):
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: shapes {xs[0].shape} and {x.shape} do not conform")
    widths = [x.shape[-1] for x in xs]
    return np.concatenate([x.data for x in xs], axis=-1), tuple(np.cumsum(widths)[:-1])


def _concat_bwd(g, xs, out, saved, attrs):
    return tuple(np.split(g, saved, axis=-1))


def _relu_fwd(xs, attrs):
    x = xs[0].data
    return np.maximum(x, 0.0), None


def _relu_bwd(g, xs, out, saved, attrs):
    return (g * (xs[0].data > 0.0),)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus_fwd(xs, attrs):
    return np.logaddexp(0.0, xs[0].data), None


def _softplus_bwd(g, xs, out, saved, attrs):
    return (g * _sigmoid(xs[0].data),)


def _sigmoid_fwd(xs, attrs):
    return _sigmoid(xs[0].data), None


def _sigmoid_bwd(g, xs, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _softmax_fwd(xs, attrs):
    x = xs[0].data
    mask = np.asarray(attrs["mask"])
    if mask.shape != x.shape:
        raise ShapeError(f"softmax_last_axis_masked: scores {x.shape} vs mask {mask.shape}")
    rows = kernels.as_rows(x)
    y, n_empty = kernels.softmax_masked_fwd(rows, np.ascontiguousarray(mask.reshape(rows.shape), dtype=np.uint8))
    if n_empty:
        raise DegenerateMaskError(f"softmax_last_axis_masked: degenerate mask ({n_empty} rows without a valid position)")
    return y.reshape(x.shape), None


def _softmax_bwd(g, xs, out, saved, attrs):
    y = kernels.as_rows(out)
    gx = kernels.softmax_masked_bwd(y, kernels.as_rows(g))
    return (gx.reshape(out.shape),)


def _layer_norm_fwd(xs, attrs):
    x, gamma, beta = (t.data for t in xs)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm_last_axis: input {x.shape} vs affine {gamma.shape}/{beta.shape}")
    y, xhat, rstd = kernels.layer_norm_fwd(kernels.as_rows(x), gamma, beta, attrs.get("eps", LAYER_NORM_EPS))
    return y.reshape(x.shape), (xhat, rstd)


def _layer_norm_bwd(g, xs, out, saved, attrs):
    xhat, rstd = saved
    gx, gg, gb = kernels.layer_norm_bwd(kernels.as_rows(g), xhat, rstd, xs[1].data)
    return gx.reshape(out.shape), gg, gb


def _embedding_fwd(xs, attrs):
    table = xs[0].data
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    w = np.asarray(attrs["weights"], dtype=np.float64)
    if table.ndim != 2 or ids.shape != w.shape or ids.ndim < 1:
        raise ShapeError(f"embedding_lookup: table {table.shape}, ids {ids.shape}, weights {w.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside table of {table.shape[0]} rows")
    lead = ids.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    pool = np.zeros((n, table.shape[0]))
    rows = np.repeat(np.arange(n), ids.shape[-1])
    np.add.at(pool, (rows, ids.reshape(-1)), w.reshape(-1))
    return (pool @ table).reshape(lead + (table.shape[1],)), (pool,)


def _embedding_bwd(g, xs, out, saved, attrs):
    (pool,) = saved
    return (pool.T @ g.reshape(-1, g.shape[-1]),)


def _mean_fwd(xs, attrs):
    x = xs[0].data
    axis = attrs["axis"]
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean_over_axis: axis {axis} out of range for shape {x.shape}")
    return x.mean(axis=axis), None


def _mean_bwd(g, xs, out, saved, attrs):
    x = xs[0].data
    axis = attrs["axis"] % x.ndim
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / x.shape[axis],)


def _scalar_affine_fwd(xs, attrs):
    x, a, b = (t.data for t in xs)
    if a.size != 1 or b.size != 1:
        raise ShapeError(f"scalar_affine: scale {a.shape} and shift {b.shape} must be single values")
    return x * a.reshape(()) + b.reshape(()), None


def _scalar_affine_bwd(g, xs, out, saved, attrs):
    x, a, b = (t.data for t in xs)
    return g * a.reshape(()), np.sum(g * x).reshape(a.shape), np.sum(g).reshape(b.shape)


def _bce_fwd(xs, attrs):
    p = xs[0].data
    y = np.asarray(attrs["targets"], dtype=np.float64)
    mask = np.asarray(attrs["mask"], dtype=bool)
    if y.shape != p.shape or mask.shape != p.shape:
        raise ShapeError(f"bce_loss_masked: probs {p.shape}, targets {y.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateMaskError("bce_loss_masked: degenerate mask (no labelled entries)")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return np.asarray(terms[mask].sum() / n), (pc, y, mask, n)


def _bce_bwd(g, xs, out, saved, attrs):
    pc, y, mask, n = saved
    p = xs[0].data
    inside = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)
    dp = (-y / pc + (1.0 - y) / (1.0 - pc)) * (mask & inside) / n
    return (g * dp,)


def _reshape_fwd(xs, attrs):
    x = xs[0].data
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape), None


def _reshape_bwd(g, xs, out, saved, attrs):
    return (g.reshape(xs[0].shape),)


PRIMITIVES = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "elementwise_mul": (_mul_fwd, _mul_bwd),
    "concat_last_axis": (_concat_fwd, _concat_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "softplus": (_softplus_fwd, _softplus_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "softmax_last_axis_masked": (_softmax_fwd, _softmax_bwd),
    "layer_norm_last_axis": (_layer_norm_fwd, _layer_norm_bwd),
    "embedding_lookup": (_embedding_fwd, _embedding_bwd),
    "mean_over_axis": (_mean_fwd, _mean_bwd),
    "scalar_affine": (_scalar_affine_fwd, _scalar_affine_bwd),
    "bce_loss_masked": (_bce_fwd, _bce_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
}


def apply_primitive(kind, inputs, attrs=None):
    """Evaluate primitive ``kind`` and record it on the active tape."""
    if kind not in PRIMITIVES:
        raise AutodiffError(f"unknown primitive {kind!r}")
    attrs = attrs or {}
    inputs = tuple(_const(x) for x in inputs)
    for x in inputs:
        if not np.isfinite(x.data).all():
            raise NonFiniteError(f"{kind}: non-finite input of shape {x.shape}")
    fwd, _ = PRIMITIVES[kind]
    value, saved = fwd(inputs, attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=np.float64)
    out.requires_grad = any(x.requires_grad for x in inputs)
    out.grad = None
    out.name = None
    out.id = next(_ids)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(Node(kind, inputs, out, saved, attrs))
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1 or loss.data.ndim > 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced:
        if loss.requires_grad and not tape.nodes:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise AutodiffError("backward: loss tensor is absent from the tape")
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        _, bwd = PRIMITIVES[node.kind]
        in_grads = bwd(g, node.inputs, node.output.data, node.saved, node.attrs)
        for x, gx in zip(node.inputs, in_grads):
            if not x.requires_grad or gx is None:
                continue
            if x.id in grads:
                grads[x.id] = grads[x.id] + gx
            else:
                grads[x.id] = np.array(gx, dtype=np.float64).reshape(x.shape)
            if x.id not in produced:
                leaves[x.id] = x
    for tid, x in leaves.items():
        g = grads.get(tid)
        if g is None:
            continue
        x.grad = g if x.grad is None else x.grad + g


# ---------------------------------------------------------------------------
# functional front-ends


def matmul(a, b, transpose_b=False):
    return apply_primitive("matmul", [a, b], {"transpose_b": transpose_b})


def add(a, b):
    return apply_primitive("add", [a, b])


def elementwise_mul(a, b):
    return apply_primitive("elementwise_mul", [a, b])


def concat_last_axis(xs):
    return apply_primitive("concat_last_axis", list(xs))


def relu(x):
    return apply_primitive("relu", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def softmax_last_axis_masked(x, mask=None):
    if mask is None:
        mask = np.ones(np.shape(_const(x).data), dtype=bool)
    return apply_primitive("softmax_last_axis_masked", [x], {"mask": mask})


def layer_norm_last_axis(x, gamma, beta, eps=LAYER_NORM_EPS):
    return apply_primitive("layer_norm_last_axis", [x, gamma, beta], {"eps": eps})


def embedding_lookup(table, ids, weights=None):
    """Weighted sum of table rows; ``weights`` defaults to a mean over the last axis of ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if weights is None:
        weights = np.full(ids.shape, 1.0 / ids.shape[-1])
    return apply_primitive("embedding_lookup", [table], {"ids": ids, "weights": weights})


def mean_over_axis(x, axis):
    return apply_primitive("mean_over_axis", [x], {"axis": axis})


def scalar_affine(x, scale=1.0, shift=0.0):
    return apply_primitive("scalar_affine", [x, scale, shift])


def bce_loss_masked(p, targets, mask=None):
    targets = np.asarray(targets, dtype=np.float64)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    return apply_primitive("bce_loss_masked", [p], {"targets": targets, "mask": mask})


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; rebinds each ``param.data`` to a new array."""
    if len(state.m) != len(params):
        raise AutodiffError(f"adam_step: state holds {len(state.m)} moments for {len(params)} params")
    b1, b2 = betas
    for p in params:
        if p.grad is None:
            raise AutodiffError(f"adam_step: parameter {p.name or p.id} has no grad")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


class Adam:
    """Stateful wrapper around :func:`adam_step`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(self.params, self.state, self.lr, self.betas, self.eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    per_param: dict
    n_coords: int

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} over {self.n_coords} coordinates"


def grad_check(f, params, h=1e-6, tol=1e-5):
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` is a zero-argument callable returning a scalar :class:`Tensor`.
    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise AutodiffError("grad_check: step h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if f().item() != loss.item():
        raise AutodiffError("grad_check: f is not deterministic (two evaluations differ)")

    per_param = {}
    worst = 0.0
    n_coords = 0
    for k, p in enumerate(params):
        base = p.data
        numeric = np.empty_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += h
            p.data = bumped.reshape(base.shape)
            fp = f().item()
            bumped[i] -= 2.0 * h
            p.data = bumped.reshape(base.shape)
            fm = f().item()
            flat[i] = (fp - fm) / (2.0 * h)
        p.data = base
        a = analytic[k]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        err = float((np.abs(a - numeric) / denom).max()) if base.size else 0.0
        per_param[p.name or f"param{k}"] = err
        worst = max(worst, err)
        n_coords += base.size
    for p in params:
        p.grad = None
    return GradCheckReport(worst < tol, worst, per_param, n_coords)
