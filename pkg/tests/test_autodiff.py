"""Autodiff behaviour: op semantics, tape rules, gradients vs finite differences."""

import math
import random
from array import array

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twopass_slu import ops
from twopass_slu.optim import Adam, OptimizerError
from twopass_slu.tensor import (ShapeError, Tape, TapeError, Tensor, backward,
                                from_list, full, randn, zeros)


def fd_grad(forward, x, i, h=1e-5):
    """Central finite difference of a scalar-valued forward() w.r.t. x.data[i]."""
    old = x.data[i]
    x.data[i] = old + h
    fp = forward()
    x.data[i] = old - h
    fm = forward()
    x.data[i] = old
    return (fp - fm) / (2 * h)


def analytic_grads(loss_fn, params):
    with Tape():
        loss = loss_fn()
        backward(loss)
    return [array("d", p.grad) for p in params]


def weighted_sum(t, weights):
    return ops.reduce_sum(ops.mul(t, weights))


def assert_grad_close(loss_fn, x, rel_tol, h=1e-5, spots=None):
    """Compare analytic grad of loss_fn against central differences at x."""
    (grad,) = analytic_grads(loss_fn, [x])
    idxs = spots if spots is not None else range(x.size)
    for i in idxs:
        fd = fd_grad(lambda: loss_fn().item(), x, i, h)
        denom = max(abs(grad[i]), abs(fd), 1e-8)
        assert abs(grad[i] - fd) / denom < rel_tol, (
            f"grad mismatch at {i}: analytic={grad[i]}, fd={fd}")


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    eye = from_list([[1.0, 0.0], [0.0, 1.0]])
    m = from_list([[1.0, 2.0], [3.0, 4.0]])
    assert ops.matmul(eye, m).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_matmul_projector_selects_rows():
    p = from_list([[1.0, 0.0], [0.0, 0.0]])
    m = from_list([[5.0, 6.0], [7.0, 8.0]])
    assert ops.matmul(p, m).tolist() == [[5.0, 6.0], [0.0, 0.0]]


def test_matmul_matches_triple_loop_oracle():
    rng = random.Random(0)
    a = randn((3, 4), rng)
    b = randn((4, 2), rng)
    got = ops.matmul(a, b)
    for i in range(3):
        for j in range(2):
            want = sum(a.data[i * 4 + p] * b.data[p * 2 + j] for p in range(4))
            assert abs(got.data[i * 2 + j] - want) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    a = zeros((2, 3))
    b = zeros((2, 3))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(a, b)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_logits():
    y = ops.softmax(from_list([0.0, 0.0, 0.0]))
    assert y.tolist() == pytest.approx([1 / 3] * 3, abs=1e-15)


def test_softmax_large_logits_stable():
    y = ops.softmax(from_list([1000.0, 0.0]))
    assert y.data[0] == pytest.approx(1.0)
    assert y.data[1] == pytest.approx(0.0, abs=1e-300)
    assert all(math.isfinite(v) for v in y.data)


def test_softmax_rows_sum_to_one():
    rng = random.Random(1)
    x = randn((5, 7), rng)
    y = ops.softmax(x)
    for r in range(5):
        assert abs(sum(y.row(r)) - 1.0) < 1e-12


def test_softmax_gradient_matches_finite_differences():
    rng = random.Random(2)
    x = randn((3, 4), rng, requires_grad=True)
    w = randn((3, 4), rng)
    assert_grad_close(lambda: weighted_sum(ops.softmax(x), w), x, rel_tol=1e-6)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
       st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_softmax_shift_leaves_argmax_invariant(vals, shift):
    x = from_list(vals)
    xs = from_list([v + shift for v in vals])
    y = ops.softmax(x)
    ys = ops.softmax(xs)
    assert max(range(len(vals)), key=lambda i: y.data[i]) == \
        max(range(len(vals)), key=lambda i: ys.data[i])
    assert abs(sum(y.data) - 1.0) < 1e-12
    assert abs(sum(ys.data) - 1.0) < 1e-12


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_maps_to_zero():
    x = full((2, 4), 3.7)
    gain = full((4,), 1.0)
    bias = zeros((4,))
    y = ops.layer_norm(x, gain, bias, eps=1e-5)
    assert all(abs(v) < 1e-9 for v in y.data)


def test_layer_norm_bias_shifts_mean():
    rng = random.Random(3)
    x = randn((3, 8), rng)
    gain = full((8,), 1.0)
    bias = full((8,), 0.25)
    y = ops.layer_norm(x, gain, bias)
    for r in range(3):
        assert sum(y.row(r)) / 8 == pytest.approx(0.25, abs=1e-9)


def test_layer_norm_gradient_matches_finite_differences():
    rng = random.Random(4)
    x = randn((3, 6), rng, requires_grad=True)
    gain = randn((6,), rng, std=0.3, requires_grad=True)
    bias = randn((6,), rng, std=0.3, requires_grad=True)
    w = randn((3, 6), rng)

    def loss():
        return weighted_sum(ops.layer_norm(x, gain, bias, eps=1e-5), w)

    for t in (x, gain, bias):
        t.zero_grad()
    assert_grad_close(loss, x, rel_tol=1e-5)
    for t in (gain, bias):
        t.zero_grad()
        x.zero_grad()
        assert_grad_close(loss, t, rel_tol=1e-5)
        # analytic_grads accumulates into x as well; clear between sweeps
        x.zero_grad()


def test_layer_norm_rejects_bad_eps_and_shapes():
    x = zeros((2, 4))
    with pytest.raises(ValueError):
        ops.layer_norm(x, full((4,), 1.0), zeros((4,)), eps=0.0)
    with pytest.raises(ShapeError):
        ops.layer_norm(x, full((3,), 1.0), zeros((4,)))


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_confident_correct_goes_to_zero():
    logits = from_list([[50.0, 0.0, 0.0, 0.0]])
    loss = ops.cross_entropy_label_smoothed(logits, [0], smoothing=0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = zeros((3, 7))
    loss = ops.cross_entropy_label_smoothed(logits, [0, 3, 6], smoothing=0.0)
    assert loss.item() == pytest.approx(math.log(7), abs=1e-12)


def test_cross_entropy_smoothed_matches_direct_summation_oracle():
    # single position, |V| = 4, hand-specified logits
    vals = [0.3, -1.2, 2.0, 0.5]
    eps = 0.1
    target = 2
    z = sum(math.exp(v) for v in vals)
    log_probs = [v - math.log(z) for v in vals]
    q = [eps / 3.0] * 4
    q[target] = 1.0 - eps
    want = sum(qj * (math.log(qj) - lp) for qj, lp in zip(q, log_probs))
    loss = ops.cross_entropy_label_smoothed(from_list([vals]), [target], smoothing=eps)
    assert loss.item() == pytest.approx(want, abs=1e-12)


def test_cross_entropy_smoothing_zero_equals_plain_nll():
    rng = random.Random(5)
    logits = randn((4, 9), rng)
    targets = [1, 0, 8, 4]
    loss = ops.cross_entropy_label_smoothed(logits, targets, smoothing=0.0)
    total = 0.0
    for r, t in enumerate(targets):
        row = logits.row(r)
        z = sum(math.exp(v) for v in row)
        total += -(row[t] - math.log(z))
    assert loss.item() == pytest.approx(total / 4, abs=1e-12)


def test_cross_entropy_ignore_id_and_errors():
    logits = zeros((2, 4))
    loss = ops.cross_entropy_label_smoothed(logits, [1, -1], smoothing=0.0, ignore_id=-1)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(ShapeError, match="target id"):
        ops.cross_entropy_label_smoothed(logits, [1, 9])
    with pytest.raises(ValueError, match="zero non-ignored"):
        ops.cross_entropy_label_smoothed(logits, [-1, -1], ignore_id=-1)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = random.Random(6)
    logits = randn((5, 6), rng, requires_grad=True)
    targets = [0, 2, 5, -1, 3]

    def loss():
        return ops.cross_entropy_label_smoothed(logits, targets, smoothing=0.1,
                                                ignore_id=-1)

    assert_grad_close(loss, logits, rel_tol=1e-6)


# ---------------------------------------------------------------- backward

def test_backward_of_sum_is_ones():
    rng = random.Random(7)
    x = randn((4, 3), rng, requires_grad=True)
    with Tape():
        loss = ops.reduce_sum(x)
        backward(loss)
    assert list(x.grad) == [1.0] * 12


def test_backward_of_sum_of_squares_is_2x():
    rng = random.Random(8)
    x = randn((6,), rng, requires_grad=True)
    with Tape():
        loss = ops.reduce_sum(ops.mul(x, x))
        backward(loss)
    for i in range(6):
        assert x.grad[i] == pytest.approx(2 * x.data[i], rel=1e-12)


def test_backward_requires_scalar():
    x = randn((3,), random.Random(9), requires_grad=True)
    with Tape():
        y = ops.mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(y)


def test_backward_twice_without_reset_errors():
    x = randn((3,), random.Random(10), requires_grad=True)
    with Tape():
        loss = ops.reduce_sum(x)
        backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            backward(loss)


def test_backward_off_tape_errors():
    x = randn((3,), random.Random(11), requires_grad=True)
    loss = ops.reduce_sum(x)  # no tape active
    with pytest.raises(TapeError, match="tape"):
        backward(loss)


def test_gradient_accumulates_across_tapes():
    x = full((2,), 1.0, requires_grad=True)
    for _ in range(3):
        with Tape():
            backward(ops.reduce_sum(x))
    assert list(x.grad) == [3.0, 3.0]
    x.zero_grad()
    assert list(x.grad) == [0.0, 0.0]


# ---------------------------------------------------------------- primitive ops

def test_add_bias_broadcast_and_errors():
    x = from_list([[1.0, 2.0], [3.0, 4.0]])
    b = from_list([10.0, 20.0])
    assert ops.add(x, b).tolist() == [[11.0, 22.0], [13.0, 24.0]]
    with pytest.raises(ShapeError):
        ops.add(x, from_list([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        ops.add(x, zeros((3, 2)))


def test_concat_then_complementary_slice_is_identity():
    rng = random.Random(12)
    a = randn((3, 4), rng)
    b = randn((2, 4), rng)
    joined = ops.concat([a, b], axis=0)
    assert ops.narrow(joined, 0, 0, 3).tolist() == a.tolist()
    assert ops.narrow(joined, 0, 3, 2).tolist() == b.tolist()
    c = randn((3, 2), rng)
    wide = ops.concat([a, c], axis=1)
    assert ops.narrow(wide, 1, 0, 4).tolist() == a.tolist()
    assert ops.narrow(wide, 1, 4, 2).tolist() == c.tolist()


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_concat_slice_roundtrip_property(r1, r2, cols):
    rng = random.Random(r1 * 100 + r2 * 10 + cols)
    a = randn((r1, cols), rng)
    b = randn((r2, cols), rng)
    joined = ops.concat([a, b], axis=0)
    assert joined.shape == (r1 + r2, cols)
    assert ops.narrow(joined, 0, 0, r1).tolist() == a.tolist()
    assert ops.narrow(joined, 0, r1, r2).tolist() == b.tolist()


def test_embedding_lookup_and_gradient():
    table = from_list([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    out = ops.embedding(table, [2, 0, 2])
    assert out.tolist() == [[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]]
    with Tape():
        loss = ops.reduce_sum(ops.embedding(table, [2, 0, 2]))
        backward(loss)
    assert list(table.grad) == [1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
    with pytest.raises(ShapeError, match="out of range"):
        ops.embedding(table, [3])


def test_dropout_eval_is_identity_and_train_masks():
    rng = random.Random(13)
    x = randn((10, 10), rng)
    assert ops.dropout(x, 0.5, rng, train=False) is x
    rng_a = random.Random(42)
    rng_b = random.Random(42)
    y1 = ops.dropout(x, 0.5, rng_a, train=True)
    y2 = ops.dropout(x, 0.5, rng_b, train=True)
    assert y1.data == y2.data  # seeded-deterministic
    zeroed = sum(1 for v in y1.data if v == 0.0)
    assert 20 < zeroed < 80
    for orig, masked in zip(x.data, y1.data):
        assert masked == 0.0 or masked == pytest.approx(orig * 2.0, rel=1e-15)


def test_transpose_reshape_roundtrip():
    rng = random.Random(14)
    x = randn((3, 5), rng)
    assert ops.transpose(ops.transpose(x)).tolist() == x.tolist()
    assert ops.reshape(x, (5, 3)).size == 15
    with pytest.raises(ShapeError):
        ops.reshape(x, (4, 4))


def test_all_op_gradients_match_finite_differences(any_backend):
    """Op-by-op FD sweep on random inputs in [-2, 2]; rel. error < 1e-4."""
    rng = random.Random(15)

    def mk(shape):
        t = zeros(shape, requires_grad=True)
        for i in range(t.size):
            t.data[i] = rng.uniform(-2.0, 2.0)
        return t

    w34 = randn((3, 4), rng)
    w43 = randn((4, 3), rng)
    w4 = randn((4,), rng)
    w24 = randn((2, 4), rng)
    w32 = randn((3, 2), rng)
    cases = []

    w33f = randn((3, 3), rng)
    x = mk((3, 4))
    y = mk((4, 3))
    cases.append((lambda: weighted_sum(ops.matmul(x, y), w33f), [x, y]))
    a = mk((3, 4))
    b = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.add(a, b), w34), [a, b]))
    c = mk((3, 4))
    bias = mk((4,))
    cases.append((lambda: weighted_sum(ops.add(c, bias), w34), [c, bias]))
    d = mk((3, 4))
    e = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.mul(d, e), w34), [d, e]))
    f = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.scale(f, -1.7), w34), [f]))
    g = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.gelu(g), w34), [g]))
    h = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.softmax(h), w34), [h]))
    ln_x = mk((2, 4))
    ln_g = mk((4,))
    ln_b = mk((4,))
    cases.append((lambda: weighted_sum(ops.layer_norm(ln_x, ln_g, ln_b, 1e-5), w24),
                  [ln_x, ln_g, ln_b]))
    s = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.narrow(s, 1, 1, 2), w32), [s]))
    t2 = mk((3, 4))
    u2 = mk((2, 4))
    w54 = randn((5, 4), rng)
    cases.append((lambda: weighted_sum(ops.concat([t2, u2], axis=0), w54), [t2, u2]))
    tr = mk((3, 4))
    cases.append((lambda: weighted_sum(ops.transpose(tr), w43), [tr]))
    tab = mk((4, 3))
    w33 = randn((3, 3), rng)
    cases.append((lambda: weighted_sum(ops.embedding(tab, [1, 3, 1]), w33), [tab]))

    for loss_fn, params in cases:
        for p in params:
            p.zero_grad()
        grads = analytic_grads(loss_fn, params)
        for p, grad in zip(params, grads):
            for i in range(p.size):
                fd = fd_grad(lambda: loss_fn().item(), p, i)
                denom = max(abs(grad[i]), abs(fd), 1e-8)
                assert abs(grad[i] - fd) / denom < 1e-4


def test_forward_values_finite_on_finite_inputs():
    rng = random.Random(16)
    x = randn((8, 8), rng, std=3.0)
    outs = [
        ops.softmax(x),
        ops.gelu(x),
        ops.layer_norm(x, full((8,), 1.0), zeros((8,))),
        ops.matmul(x, x),
    ]
    for o in outs:
        assert all(math.isfinite(v) for v in o.data)


# ---------------------------------------------------------------- optimizer

def _one_param(value=1.0):
    p = full((3,), value, requires_grad=True)
    return {"w": p}, p


def test_optimizer_zero_gradients_keep_parameters():
    params, p = _one_param()
    opt = Adam(params, peak_lr=0.1, warmup_steps=10)
    before = array("d", p.data)
    opt.step()
    assert p.data == before
    assert opt.step_count == 1


def test_optimizer_known_moment_update():
    params, p = _one_param(1.0)
    opt = Adam(params, peak_lr=0.01, warmup_steps=1, clip_norm=None)
    p.grad[0] = p.grad[1] = p.grad[2] = 0.5
    opt.step()
    m = 0.05
    v = 0.001 * 0.25
    want = 1.0 - 0.01 * (m / 0.1) / (math.sqrt(v / 0.001) + 1e-8)
    for val in p.data:
        assert val == pytest.approx(want, abs=1e-12)


def test_optimizer_missing_gradient_errors():
    params, p = _one_param()
    p.set_requires_grad(False)
    opt = Adam(params, peak_lr=0.1, warmup_steps=10)
    with pytest.raises(OptimizerError, match="no gradient"):
        opt.step()


def test_optimizer_deterministic_across_runs():
    def run():
        rng = random.Random(77)
        p = randn((4, 4), rng, requires_grad=True)
        opt = Adam({"w": p}, peak_lr=0.05, warmup_steps=5)
        for _ in range(10):
            with Tape():
                loss = ops.reduce_sum(ops.mul(p, p))
                backward(loss)
            opt.step()
            opt.zero_grad()
        return array("d", p.data)

    assert run() == run()


def test_tape_replay_determinism():
    def run():
        rng = random.Random(21)
        x = randn((4, 6), rng, requires_grad=True)
        w = randn((6, 3), rng, requires_grad=True)
        drop_rng = random.Random(5)
        with Tape():
            h = ops.gelu(ops.matmul(x, w))
            h = ops.dropout(h, 0.25, drop_rng, train=True)
            loss = ops.reduce_sum(ops.mul(h, h))
            backward(loss)
        return loss.item(), array("d", x.grad), array("d", w.grad)

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2 and gx1 == gx2 and gw1 == gw2
