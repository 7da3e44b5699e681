import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsimta import autodiff as ad
from tsimta.autodiff import Tensor


def param(rng, *shape, name=None, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, name=name)


def flat_mean(y):
    return ad.mean_over_axis(ad.reshape(y, (y.size,)), 0)


def check(f, params):
    rep = ad.grad_check(f, params, h=1e-6, tol=1e-5)
    assert rep.passed, str(rep)
    return rep


# scalar values against math-module oracles

def test_softmax_two_scores():
    y = ad.softmax_last_axis_masked(Tensor([0.0, -1.0])).data
    e = [1.0, math.exp(-1.0)]
    assert y == pytest.approx([e[0] / sum(e), e[1] / sum(e)], abs=1e-15)
    assert y == pytest.approx([0.731059, 0.268941], abs=1e-6)


def test_layer_norm_constant_vector_is_zero():
    y = ad.layer_norm_last_axis(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.array_equal(y.data, np.zeros(3))


def test_layer_norm_moments():
    x = Tensor(np.random.default_rng(1).normal(3.0, 4.0, size=(5, 7)))
    y = ad.layer_norm_last_axis(x, Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-5)


def test_bce_half_and_softplus_zero():
    assert ad.bce_loss_masked(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2.0), abs=1e-15)
    assert ad.softplus(Tensor([0.0])).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_bce_finite_at_extremes():
    loss = ad.bce_loss_masked(Tensor([0.0, 1.0]), [1.0, 0.0]).item()
    assert math.isfinite(loss)
    assert loss == pytest.approx(-math.log(1e-7), rel=1e-9)


def test_bce_ignores_masked_entries():
    full = ad.bce_loss_masked(Tensor([0.9, 0.2, 0.3]), [1.0, 0.0, 1.0], [True, True, False]).item()
    expect = -(math.log(0.9) + math.log(0.8)) / 2
    assert full == pytest.approx(expect, abs=1e-14)


def test_softmax_masked_positions_exactly_zero():
    x = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
    mask = np.random.default_rng(3).random((4, 6)) < 0.5
    mask[:, 0] = True
    y = ad.softmax_last_axis_masked(x, mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12, rtol=0)


# backward examples

def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.scalar_affine(ad.mean_over_axis(x, 0), 3.0)
    ad.backward(loss, tape)
    assert np.allclose(x.grad, [1.0, 1.0, 1.0])


def test_backward_sigmoid_at_zero():
    z = Tensor([0.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mean_over_axis(ad.sigmoid(z), 0)
    ad.backward(loss, tape)
    assert z.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_backward_bce_of_sigmoid():
    z = Tensor([0.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.bce_loss_masked(ad.sigmoid(z), [1.0])
    ad.backward(loss, tape)
    assert z.grad[0] == pytest.approx(-0.5, abs=1e-12)


def test_gradients_accumulate_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mean_over_axis(ad.add(ad.elementwise_mul(x, x), x), 0)
    ad.backward(loss, tape)
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ad.AutodiffError, match="scalar"):
        ad.backward(y, tape)
    other = ad.mean_over_axis(ad.relu(x), 0)
    with pytest.raises(ad.AutodiffError, match="absent"):
        ad.backward(other, tape)


# errors

def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_degenerate_mask():
    with pytest.raises(ad.DegenerateMaskError, match="degenerate mask"):
        ad.softmax_last_axis_masked(Tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]], bool))


def test_non_finite_input():
    with pytest.raises(ad.NonFiniteError, match="non-finite input"):
        ad.relu(Tensor([1.0, float("nan")]))


def test_unknown_primitive():
    with pytest.raises(ad.AutodiffError):
        ad.apply_primitive("conv2d", [Tensor([1.0])])


# per-primitive gradient checks on randomized shapes, seeds 0..9

SEEDS = range(10)


def _shape(rng, nd):
    return tuple(int(s) for s in rng.integers(1, 5, size=nd))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    m, k, n = _shape(rng, 3)
    a, b, bt = param(rng, m, k), param(rng, k, n), param(rng, n, k)
    check(lambda: ad.mean_over_axis(ad.mean_over_axis(ad.matmul(a, b), 0), 0), [a, b])
    check(lambda: ad.mean_over_axis(ad.mean_over_axis(ad.matmul(a, bt, transpose_b=True), 0), 0), [a, bt])
    B = int(rng.integers(1, 4))
    a3, b3 = param(rng, B, m, k), param(rng, B, k, n)
    c3 = param(rng, B, n, k)
    w = rng.normal(size=(B, m, n))

    def f3():
        y = ad.elementwise_mul(ad.add(ad.matmul(a3, b3), ad.matmul(a3, c3, transpose_b=True)), w)
        return flat_mean(y)

    check(f3, [a3, b3, c3])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_mul_bias(seed):
    rng = np.random.default_rng(seed)
    shp = _shape(rng, 3)
    a, b, bias = param(rng, *shp), param(rng, *shp), param(rng, shp[-1])
    w = rng.normal(size=shp)

    def f():
        y = ad.add(ad.elementwise_mul(ad.add(a, bias), b), a)
        return flat_mean(ad.elementwise_mul(y, w))

    check(f, [a, b, bias])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_concat_and_unary(seed):
    rng = np.random.default_rng(seed)
    r, c1, c2 = _shape(rng, 3)
    a, b = param(rng, r, c1), param(rng, r, c2)
    a.data[np.abs(a.data) < 1e-3] = 0.5  # stay clear of the relu kink
    w = rng.normal(size=(r, c1 + c2))

    def f():
        y = ad.concat_last_axis([ad.relu(a), ad.softplus(b)])
        y = ad.add(y, ad.sigmoid(ad.concat_last_axis([b, a])))
        return flat_mean(ad.elementwise_mul(y, w))

    check(f, [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_masked(seed):
    rng = np.random.default_rng(seed)
    r, c = _shape(rng, 2)
    x = param(rng, r, c + 1)
    mask = rng.random(x.shape) < 0.6
    mask[np.arange(r), rng.integers(0, c + 1, size=r)] = True
    w = rng.normal(size=x.shape)
    check(lambda: flat_mean(ad.elementwise_mul(ad.softmax_last_axis_masked(x, mask), w)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    r, c = _shape(rng, 2)
    x, g, b = param(rng, r, c + 1), param(rng, c + 1), param(rng, c + 1)
    w = rng.normal(size=x.shape)
    check(lambda: flat_mean(ad.elementwise_mul(ad.layer_norm_last_axis(x, g, b), w)), [x, g, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_embedding_mean_affine(seed):
    rng = np.random.default_rng(seed)
    V, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    table = param(rng, V, d)
    ids = rng.integers(0, V, size=(2, 3, 2))
    weights = rng.random(ids.shape)
    scale, shift = param(rng, 1), param(rng, 1)
    axis = int(rng.integers(0, 3))

    def f():
        e = ad.embedding_lookup(table, ids, weights)
        y = ad.scalar_affine(ad.mean_over_axis(e, axis), scale, shift)
        return flat_mean(ad.elementwise_mul(y, y))

    check(f, [table, scale, shift])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bce(seed):
    rng = np.random.default_rng(seed)
    r, c = _shape(rng, 2)
    z = param(rng, r, c)
    y = (rng.random((r, c)) < 0.5).astype(float)
    mask = rng.random((r, c)) < 0.7
    mask[0, 0] = True
    check(lambda: ad.bce_loss_masked(ad.sigmoid(z), y, mask), [z])


# grad_check itself

def test_grad_check_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    f = lambda: ad.scalar_affine(ad.mean_over_axis(ad.elementwise_mul(x, x), 0), 1.0)
    rep = ad.grad_check(f, [x])
    assert rep.passed and rep.max_rel_error < 1e-8


def test_grad_check_dead_relu_region():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mean_over_axis(ad.relu(x), 0)
    ad.backward(loss, tape)
    assert x.grad[0] == 0.0
    assert ad.grad_check(lambda: ad.mean_over_axis(ad.relu(x), 0), [x]).passed


def test_grad_check_detects_nondeterminism():
    x = Tensor([1.0], requires_grad=True)
    noise = np.random.default_rng(0)
    f = lambda: ad.mean_over_axis(ad.add(x, Tensor([noise.normal()])), 0)
    with pytest.raises(ad.AutodiffError, match="deterministic"):
        ad.grad_check(f, [x])


def test_grad_check_reports_wrong_gradient(monkeypatch):
    fwd, bwd = ad.PRIMITIVES["sigmoid"]
    monkeypatch.setitem(ad.PRIMITIVES, "sigmoid", (fwd, lambda g, *a: (2 * bwd(g, *a)[0],)))
    x = Tensor([0.3], requires_grad=True)
    assert not ad.grad_check(lambda: ad.mean_over_axis(ad.sigmoid(x), 0), [x]).passed


# Adam

def test_adam_first_step_is_lr_times_sign():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([1.0])
    state = ad.AdamState.zeros_like([w])
    ad.adam_step([w], state, lr=0.1)
    assert w.data[0] == pytest.approx(0.9, abs=1e-7)
    assert state.step == 1


def test_adam_zero_grad_fixed_point():
    w = Tensor([1.0, -2.0], requires_grad=True)
    state = ad.AdamState.zeros_like([w])
    w.grad = np.zeros(2)
    ad.adam_step([w], state, lr=0.1)
    assert np.array_equal(w.data, [1.0, -2.0])


def test_adam_zero_grad_decays_moments():
    w = Tensor([1.0], requires_grad=True)
    state = ad.AdamState([np.array([0.5])], [np.array([0.1])])
    w.grad = np.zeros(1)
    ad.adam_step([w], state, lr=0.1)
    assert state.m[0][0] == pytest.approx(0.45)
    assert state.v[0][0] == pytest.approx(0.0999)


def test_adam_constant_grad_monotone():
    w = Tensor([1.0], requires_grad=True)
    state = ad.AdamState.zeros_like([w])
    seen = [1.0]
    for _ in range(2):
        w.grad = np.array([1.0])
        ad.adam_step([w], state, lr=0.1)
        seen.append(w.data[0])
    assert seen[0] > seen[1] > seen[2]


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=3), requires_grad=True)
    ref = w.data.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    state = ad.AdamState.zeros_like([w])
    for t in range(1, 6):
        g = rng.normal(size=3)
        w.grad = g.copy()
        ad.adam_step([w], state, lr=1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g ** 2
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(w.data, ref, rtol=0, atol=1e-14)


def test_adam_missing_grad_named():
    w = Tensor([1.0], requires_grad=True, name="w_missing")
    with pytest.raises(ad.AutodiffError, match="w_missing"):
        ad.adam_step([w], ad.AdamState.zeros_like([w]))


# properties

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.data())
def test_softmax_rows_normalised(values, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(values), max_size=len(values)))
    mask[data.draw(st.integers(0, len(values) - 1))] = True
    y = ad.softmax_last_axis_masked(Tensor(values), np.array(mask)).data
    assert abs(y.sum() - 1.0) <= 1e-12
    assert np.all(y[~np.array(mask)] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_replay_bit_identical(seed):
    def run():
        rng = np.random.default_rng(seed)
        x, w = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with ad.Tape() as tape:
            p = ad.sigmoid(ad.matmul(ad.layer_norm_last_axis(x, Tensor(np.ones(4)), Tensor(np.zeros(4))), w))
            loss = ad.bce_loss_masked(p, np.ones((3, 2)))
        ad.backward(loss, tape)
        return loss.item(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10))
def test_forward_finite_on_finite_inputs(values):
    x = Tensor(values)
    out = ad.bce_loss_masked(ad.sigmoid(ad.softplus(x)), np.ones(len(values)))
    assert math.isfinite(out.item())
