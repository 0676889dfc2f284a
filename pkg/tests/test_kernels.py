"""Kernel-level checks: correctness against naive oracles and backend parity."""

import math
import random
from array import array

import pytest

from twopass_slu import backend, kernels_py


def _rand_buf(rng, n, lo=-2.0, hi=2.0):
    return array("d", [rng.uniform(lo, hi) for _ in range(n)])


def _matmul_oracle(a, b, m, n, k):
    """Independent triple-loop product over nested lists."""
    am = [[a[i * k + p] for p in range(k)] for i in range(m)]
    bm = [[b[p * n + j] for j in range(n)] for p in range(k)]
    return [sum(am[i][p] * bm[p][j] for p in range(k)) for i in range(m) for j in range(n)]


def test_matmul_nn_matches_triple_loop_oracle(any_backend):
    rng = random.Random(11)
    for m, n, k in [(3, 2, 4), (1, 1, 1), (5, 7, 3), (8, 8, 8)]:
        a = _rand_buf(rng, m * k)
        b = _rand_buf(rng, k * n)
        out = array("d", bytes(8 * m * n))
        backend.K.matmul_nn(a, b, out, m, n, k)
        want = _matmul_oracle(a, b, m, n, k)
        assert all(abs(x - y) < 1e-12 for x, y in zip(out, want))


def test_matmul_transposed_variants(any_backend):
    rng = random.Random(12)
    m, n, k = 4, 5, 3
    a = _rand_buf(rng, m * k)   # m x k
    b = _rand_buf(rng, k * n)   # k x n
    at = array("d", bytes(8 * m * k))
    bt = array("d", bytes(8 * k * n))
    backend.K.transpose2d(a, at, m, k)    # at: k x m
    backend.K.transpose2d(b, bt, k, n)    # bt: n x k
    want = _matmul_oracle(a, b, m, n, k)
    out_nt = array("d", bytes(8 * m * n))
    backend.K.matmul_nt(a, bt, out_nt, m, n, k)
    out_tn = array("d", bytes(8 * m * n))
    backend.K.matmul_tn(at, b, out_tn, m, n, k)
    assert all(abs(x - y) < 1e-12 for x, y in zip(out_nt, want))
    assert all(abs(x - y) < 1e-12 for x, y in zip(out_tn, want))


def test_matmul_accumulate_adds(any_backend):
    a = array("d", [1.0, 2.0])
    b = array("d", [3.0, 4.0])
    out = array("d", [10.0])
    backend.K.matmul_nn(a, b, out, 1, 1, 2, True)
    assert out[0] == 10.0 + 11.0


def test_softmax_rows_basic(any_backend):
    x = array("d", [0.0, 0.0, 0.0, 1000.0, 0.0, 0.0])
    out = array("d", bytes(8 * 6))
    backend.K.softmax_rows(x, out, 2, 3)
    assert all(abs(v - 1.0 / 3.0) < 1e-15 for v in out[:3])
    assert out[3] == pytest.approx(1.0)
    assert math.isfinite(out[3]) and out[4] == 0.0 and out[5] == 0.0
    assert abs(sum(out[3:]) - 1.0) < 1e-12


def test_softmax_neg_inf_gives_exact_zero(any_backend):
    x = array("d", [1.0, float("-inf"), 2.0])
    out = array("d", bytes(8 * 3))
    backend.K.softmax_rows(x, out, 1, 3)
    assert out[1] == 0.0
    assert abs(sum(out) - 1.0) < 1e-12


def test_layernorm_rows_stats(any_backend):
    rng = random.Random(13)
    rows, cols = 4, 8
    x = _rand_buf(rng, rows * cols)
    gain = array("d", [1.0] * cols)
    bias = array("d", [0.0] * cols)
    out = array("d", bytes(8 * rows * cols))
    mean = array("d", bytes(8 * rows))
    rstd = array("d", bytes(8 * rows))
    backend.K.layernorm_rows(x, gain, bias, 1e-12, out, mean, rstd, rows, cols)
    for r in range(rows):
        row = out[r * cols:(r + 1) * cols]
        mu = sum(row) / cols
        var = sum((v - mu) ** 2 for v in row) / cols
        assert abs(mu) < 1e-9
        assert abs(var - 1.0) < 1e-9


def test_gelu_known_values(any_backend):
    x = array("d", [0.0, 1.0, -1.0])
    out = array("d", bytes(8 * 3))
    backend.K.gelu_fwd(x, out, 3)
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))))
    assert out[2] == pytest.approx(-0.5 * (1 - math.erf(1 / math.sqrt(2))))


def test_adam_step_matches_hand_computation(any_backend):
    p = array("d", [1.0])
    g = array("d", [0.5])
    m = array("d", [0.1])
    v = array("d", [0.2])
    lr, b1, b2, eps, t = 0.01, 0.9, 0.999, 1e-8, 3
    m_new = b1 * 0.1 + (1 - b1) * 0.5
    v_new = b2 * 0.2 + (1 - b2) * 0.25
    p_new = 1.0 - lr * (m_new / (1 - b1 ** t)) / (math.sqrt(v_new / (1 - b2 ** t)) + eps)
    backend.K.adam_step(p, g, m, v, 1, lr, b1, b2, eps, t)
    assert abs(p[0] - p_new) < 1e-12
    assert abs(m[0] - m_new) < 1e-12
    assert abs(v[0] - v_new) < 1e-12


def _edit_distance_oracle(a, b):
    """Full-matrix DP, kept independent of the kernel implementation."""
    la, lb = len(a), len(b)
    d = [[0] * (lb + 1) for _ in range(la + 1)]
    for i in range(la + 1):
        d[i][0] = i
    for j in range(lb + 1):
        d[0][j] = j
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (0 if a[i - 1] == b[j - 1] else 1),
                d[i][j - 1] + 1,
                d[i - 1][j] + 1,
            )
    return d[la][lb]


def test_edit_distance_random_pairs(any_backend):
    rng = random.Random(14)
    for _ in range(200):
        a = array("q", [rng.randrange(3) for _ in range(rng.randrange(7))])
        b = array("q", [rng.randrange(3) for _ in range(rng.randrange(1, 7))])
        assert backend.K.edit_distance(a, b) == _edit_distance_oracle(a, b)


def test_dropout_mask_deterministic_and_scaled(any_backend):
    out1 = array("d", bytes(8 * 1000))
    out2 = array("d", bytes(8 * 1000))
    backend.K.dropout_mask(out1, 1000, 0.3, 1.0 / 0.7, 12345)
    backend.K.dropout_mask(out2, 1000, 0.3, 1.0 / 0.7, 12345)
    assert out1 == out2
    kept = sum(1 for v in out1 if v != 0.0)
    assert all(v in (0.0, 1.0 / 0.7) for v in out1)
    assert 600 < kept < 800  # ~700 expected


@pytest.mark.skipif(len(backend.available_backends()) < 2,
                    reason="compiled backend not built")
def test_backend_parity_on_random_inputs():
    """Compiled and pure-Python kernels agree to rounding noise."""
    compiled = backend.use_backend("compiled")
    rng = random.Random(15)
    m, n, k = 7, 5, 6
    a = _rand_buf(rng, m * k)
    b = _rand_buf(rng, k * n)
    rows, cols = 6, 9
    x = _rand_buf(rng, rows * cols)
    gain = _rand_buf(rng, cols, 0.5, 1.5)
    bias = _rand_buf(rng, cols)
    try:
        cases = {}
        for name, kern in (("c", compiled), ("py", kernels_py)):
            mm = array("d", bytes(8 * m * n))
            kern.matmul_nn(a, b, mm, m, n, k)
            sm = array("d", bytes(8 * rows * cols))
            kern.softmax_rows(x, sm, rows, cols)
            ln = array("d", bytes(8 * rows * cols))
            mean = array("d", bytes(8 * rows))
            rstd = array("d", bytes(8 * rows))
            kern.layernorm_rows(x, gain, bias, 1e-5, ln, mean, rstd, rows, cols)
            ge = array("d", bytes(8 * rows * cols))
            kern.gelu_fwd(x, ge, rows * cols)
            dm = array("d", bytes(8 * 64))
            kern.dropout_mask(dm, 64, 0.4, 1.0 / 0.6, 999)
            cases[name] = (mm, sm, ln, ge, dm)
        for bc, bp in zip(cases["c"], cases["py"]):
            assert all(abs(u - v) <= 1e-14 * max(1.0, abs(u)) for u, v in zip(bc, bp))
    finally:
        backend.use_backend("compiled")
