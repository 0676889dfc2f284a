# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: hot inner loops behind the same API as ``kernels_py``.

Keep accumulation order in lockstep with the pure-Python fallback so that the
two backends agree to rounding noise.
"""

from libc.math cimport erf, exp, log, sqrt

cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT2PI = 0.3989422804014327
cdef double _U53 = 1.0 / 9007199254740992.0


def matmul_nn(double[::1] a, double[::1] b, double[::1] out,
              Py_ssize_t m, Py_ssize_t n, Py_ssize_t k, bint accumulate=False):
    """out[m,n] (+)= a[m,k] @ b[k,n]."""
    cdef Py_ssize_t i, j, p, ai, oi, bp
    cdef double aip
    with nogil:
        if not accumulate:
            for i in range(m * n):
                out[i] = 0.0
        for i in range(m):
            ai = i * k
            oi = i * n
            for p in range(k):
                aip = a[ai + p]
                if aip == 0.0:
                    continue
                bp = p * n
                for j in range(n):
                    out[oi + j] += aip * b[bp + j]


def matmul_nt(double[::1] a, double[::1] b, double[::1] out,
              Py_ssize_t m, Py_ssize_t n, Py_ssize_t k, bint accumulate=False):
    """out[m,n] (+)= a[m,k] @ b[n,k]^T."""
    cdef Py_ssize_t i, j, p, ai, oi, bj
    cdef double acc
    with nogil:
        if not accumulate:
            for i in range(m * n):
                out[i] = 0.0
        for i in range(m):
            ai = i * k
            oi = i * n
            for j in range(n):
                bj = j * k
                acc = 0.0
                for p in range(k):
                    acc += a[ai + p] * b[bj + p]
                out[oi + j] += acc


def matmul_tn(double[::1] a, double[::1] b, double[::1] out,
              Py_ssize_t m, Py_ssize_t n, Py_ssize_t k, bint accumulate=False):
    """out[m,n] (+)= a[k,m]^T @ b[k,n]."""
    cdef Py_ssize_t i, j, p, ap, bp, oi
    cdef double api
    with nogil:
        if not accumulate:
            for i in range(m * n):
                out[i] = 0.0
        for p in range(k):
            ap = p * m
            bp = p * n
            for i in range(m):
                api = a[ap + i]
                if api == 0.0:
                    continue
                oi = i * n
                for j in range(n):
                    out[oi + j] += api * b[bp + j]


def vec_add(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] + b[i]


def vec_mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] * b[i]


def vec_scale(double[::1] a, double alpha, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = a[i] * alpha


def vec_axpy(double alpha, double[::1] a, double[::1] out, Py_ssize_t n):
    """out += alpha * a."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += alpha * a[i]


def vec_acc_mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    """out += a * b elementwise."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += a[i] * b[i]


def vec_fill(double[::1] out, double value, Py_ssize_t n):
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = value


def acc_const(double[::1] out, double value, Py_ssize_t n):
    """out += value elementwise."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] += value


def acc_range(double[::1] src, Py_ssize_t src_off, double[::1] dst,
              Py_ssize_t dst_off, Py_ssize_t n):
    """dst[dst_off:dst_off+n] += src[src_off:src_off+n]."""
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dst[dst_off + i] += src[src_off + i]


def bias_add(double[::1] x, double[::1] bias, double[::1] out,
             Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, c, off
    with nogil:
        for r in range(rows):
            off = r * cols
            for c in range(cols):
                out[off + c] = x[off + c] + bias[c]


def col_sum_acc(double[::1] x, double[::1] out, Py_ssize_t rows, Py_ssize_t cols):
    """out[c] += sum over rows of x[r,c]."""
    cdef Py_ssize_t r, c, off
    with nogil:
        for r in range(rows):
            off = r * cols
            for c in range(cols):
                out[c] += x[off + c]


def sum_all(double[::1] x, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc += x[i]
    return acc


def sum_sq(double[::1] x, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc += x[i] * x[i]
    return acc


def softmax_rows(double[::1] x, double[::1] out, Py_ssize_t rows, Py_ssize_t cols):
    """Row softmax with max-subtraction; -inf entries map to exactly 0."""
    cdef Py_ssize_t r, c, off
    cdef double mx, z, e, inv, v
    with nogil:
        for r in range(rows):
            off = r * cols
            mx = x[off]
            for c in range(1, cols):
                v = x[off + c]
                if v > mx:
                    mx = v
            z = 0.0
            for c in range(cols):
                e = exp(x[off + c] - mx)
                out[off + c] = e
                z += e
            inv = 1.0 / z
            for c in range(cols):
                out[off + c] *= inv


def softmax_rows_bwd(double[::1] y, double[::1] dy, double[::1] dx,
                     Py_ssize_t rows, Py_ssize_t cols):
    """dx += y * (dy - sum(dy * y)) per row."""
    cdef Py_ssize_t r, c, off
    cdef double dot
    with nogil:
        for r in range(rows):
            off = r * cols
            dot = 0.0
            for c in range(cols):
                dot += dy[off + c] * y[off + c]
            for c in range(cols):
                dx[off + c] += y[off + c] * (dy[off + c] - dot)


def layernorm_rows(double[::1] x, double[::1] gain, double[::1] bias, double eps,
                   double[::1] out, double[::1] mean_out, double[::1] rstd_out,
                   Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, c, off
    cdef double mu, var, d, rstd
    with nogil:
        for r in range(rows):
            off = r * cols
            mu = 0.0
            for c in range(cols):
                mu += x[off + c]
            mu /= cols
            var = 0.0
            for c in range(cols):
                d = x[off + c] - mu
                var += d * d
            var /= cols
            rstd = 1.0 / sqrt(var + eps)
            mean_out[r] = mu
            rstd_out[r] = rstd
            for c in range(cols):
                out[off + c] = (x[off + c] - mu) * rstd * gain[c] + bias[c]


def layernorm_rows_bwd(double[::1] x, double[::1] gain, double[::1] mean,
                       double[::1] rstd, double[::1] dout, double[::1] dx,
                       double[::1] dgain, double[::1] dbias,
                       Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, c, off
    cdef double mu, rs, s1, s2, xh, dxh
    with nogil:
        for r in range(rows):
            off = r * cols
            mu = mean[r]
            rs = rstd[r]
            s1 = 0.0
            s2 = 0.0
            for c in range(cols):
                xh = (x[off + c] - mu) * rs
                dxh = dout[off + c] * gain[c]
                s1 += dxh
                s2 += dxh * xh
                dgain[c] += dout[off + c] * xh
                dbias[c] += dout[off + c]
            s1 /= cols
            s2 /= cols
            for c in range(cols):
                xh = (x[off + c] - mu) * rs
                dxh = dout[off + c] * gain[c]
                dx[off + c] += rs * (dxh - s1 - xh * s2)


def gelu_fwd(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + erf(v * _INV_SQRT2))


def gelu_bwd(double[::1] x, double[::1] dout, double[::1] dx, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v, d
    with nogil:
        for i in range(n):
            v = x[i]
            d = 0.5 * (1.0 + erf(v * _INV_SQRT2)) + v * exp(-0.5 * v * v) * _INV_SQRT2PI
            dx[i] += dout[i] * d


def ce_smoothed_fwd(double[::1] logits, long long[::1] targets, double eps,
                    long long ignore_id, Py_ssize_t rows, Py_ssize_t cols,
                    double[::1] probs_out):
    """Label-smoothed cross-entropy; returns (loss_sum, counted_rows)."""
    cdef Py_ssize_t r, c, off
    cdef long long t
    cdef double off_target = eps / (cols - 1) if cols > 1 else 0.0
    cdef double const = 0.0
    cdef double loss_sum = 0.0
    cdef double mx, z, e, logz, inv, lsm_sum, lsm_t, v
    cdef Py_ssize_t count = 0
    if eps > 0.0:
        const = (1.0 - eps) * log(1.0 - eps) + eps * log(off_target)
    with nogil:
        for r in range(rows):
            off = r * cols
            t = targets[r]
            if t == ignore_id:
                for c in range(cols):
                    probs_out[off + c] = 0.0
                continue
            mx = logits[off]
            for c in range(1, cols):
                v = logits[off + c]
                if v > mx:
                    mx = v
            z = 0.0
            for c in range(cols):
                e = exp(logits[off + c] - mx)
                probs_out[off + c] = e
                z += e
            logz = log(z)
            inv = 1.0 / z
            lsm_sum = 0.0
            for c in range(cols):
                probs_out[off + c] *= inv
                lsm_sum += logits[off + c] - mx - logz
            lsm_t = logits[off + t] - mx - logz
            loss_sum += const - (1.0 - eps) * lsm_t - off_target * (lsm_sum - lsm_t)
            count += 1
    return loss_sum, count


def ce_smoothed_bwd(double[::1] probs, long long[::1] targets, double eps,
                    long long ignore_id, Py_ssize_t rows, Py_ssize_t cols,
                    double scale, double[::1] dlogits):
    """dlogits += scale * (probs - smoothed_target) on non-ignored rows."""
    cdef Py_ssize_t r, c, off
    cdef long long t
    cdef double off_target = eps / (cols - 1) if cols > 1 else 0.0
    cdef double q
    with nogil:
        for r in range(rows):
            off = r * cols
            t = targets[r]
            if t == ignore_id:
                continue
            for c in range(cols):
                q = (1.0 - eps) if c == t else off_target
                dlogits[off + c] += scale * (probs[off + c] - q)


def gather_rows(double[::1] table, long long[::1] ids, double[::1] out,
                Py_ssize_t n, Py_ssize_t dim):
    cdef Py_ssize_t i, c, src, dst
    with nogil:
        for i in range(n):
            src = ids[i] * dim
            dst = i * dim
            for c in range(dim):
                out[dst + c] = table[src + c]


def scatter_add_rows(double[::1] dout, long long[::1] ids, double[::1] dtable,
                     Py_ssize_t n, Py_ssize_t dim):
    cdef Py_ssize_t i, c, src, dst
    with nogil:
        for i in range(n):
            dst = ids[i] * dim
            src = i * dim
            for c in range(dim):
                dtable[dst + c] += dout[src + c]


def transpose2d(double[::1] a, double[::1] out, Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, c, off
    with nogil:
        for r in range(rows):
            off = r * cols
            for c in range(cols):
                out[c * rows + r] = a[off + c]


def copy_cols(double[::1] src, double[::1] dst, Py_ssize_t rows,
              Py_ssize_t src_cols, Py_ssize_t dst_cols,
              Py_ssize_t src_off, Py_ssize_t dst_off, Py_ssize_t width,
              bint accumulate=False):
    """Copy (or add) a column band between two row-major matrices."""
    cdef Py_ssize_t r, c, s, d
    with nogil:
        for r in range(rows):
            s = r * src_cols + src_off
            d = r * dst_cols + dst_off
            if accumulate:
                for c in range(width):
                    dst[d + c] += src[s + c]
            else:
                for c in range(width):
                    dst[d + c] = src[s + c]


def dropout_mask(double[::1] out, Py_ssize_t n, double rate, double scale,
                 unsigned long long seed):
    """Fill out with {0, scale} via xorshift64*; seed must be nonzero."""
    cdef Py_ssize_t i
    cdef unsigned long long s = seed
    cdef unsigned long long r
    with nogil:
        for i in range(n):
            s ^= (s >> 12)
            s ^= (s << 25)
            s ^= (s >> 27)
            r = (s * 2685821657736338717ULL) >> 11
            out[i] = 0.0 if r * _U53 < rate else scale


def adam_step(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
              Py_ssize_t n, double lr, double beta1, double beta2, double eps,
              long long t):
    """In-place adaptive-moment update with bias correction at step t (1-based)."""
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double gi, mi, vi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (sqrt(vi / bc2) + eps)


def edit_distance(long long[::1] a, long long[::1] b):
    """Levenshtein distance between two int sequences (unit costs)."""
    cdef Py_ssize_t la = a.shape[0]
    cdef Py_ssize_t lb = b.shape[0]
    if la == 0:
        return lb
    if lb == 0:
        return la
    cdef Py_ssize_t i, j
    cdef long long ai, diag, old, sub, ins, dele, best
    row_obj = bytearray(8 * (lb + 1))
    cdef long long[::1] row = memoryview(row_obj).cast("q")
    with nogil:
        for j in range(lb + 1):
            row[j] = j
        for i in range(1, la + 1):
            diag = row[0]
            row[0] = i
            ai = a[i - 1]
            for j in range(1, lb + 1):
                old = row[j]
                sub = diag + (0 if ai == b[j - 1] else 1)
                ins = row[j - 1] + 1
                dele = old + 1
                best = sub
                if ins < best:
                    best = ins
                if dele < best:
                    best = dele
                row[j] = best
                diag = old
    return row[lb]
