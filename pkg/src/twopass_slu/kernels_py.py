"""Pure-Python kernels: the portable fallback for the compiled extension.

Every function here mirrors the signature and the floating-point accumulation
order of its compiled twin in ``_kernels.pyx``, so the two backends agree to
rounding noise. Buffers are flat row-major float64 ``array('d')`` (token ids
use ``array('q')``); shapes are passed explicitly.
"""

import math

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327
_U53 = 1.0 / 9007199254740992.0  # 2**-53


def matmul_nn(a, b, out, m, n, k, accumulate=False):
    """out[m,n] (+)= a[m,k] @ b[k,n]."""
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


def matmul_nt(a, b, out, m, n, k, accumulate=False):
    """out[m,n] (+)= a[m,k] @ b[n,k]^T."""
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


def matmul_tn(a, b, out, m, n, k, accumulate=False):
    """out[m,n] (+)= a[k,m]^T @ b[k,n]."""
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


def vec_add(a, b, out, n):
    for i in range(n):
        out[i] = a[i] + b[i]


def vec_mul(a, b, out, n):
    for i in range(n):
        out[i] = a[i] * b[i]


def vec_scale(a, alpha, out, n):
    for i in range(n):
        out[i] = a[i] * alpha


def vec_axpy(alpha, a, out, n):
    """out += alpha * a."""
    for i in range(n):
        out[i] += alpha * a[i]


def vec_acc_mul(a, b, out, n):
    """out += a * b elementwise."""
    for i in range(n):
        out[i] += a[i] * b[i]


def vec_fill(out, value, n):
    for i in range(n):
        out[i] = value


def acc_const(out, value, n):
    """out += value elementwise."""
    for i in range(n):
        out[i] += value


def acc_range(src, src_off, dst, dst_off, n):
    """dst[dst_off:dst_off+n] += src[src_off:src_off+n]."""
    for i in range(n):
        dst[dst_off + i] += src[src_off + i]


def bias_add(x, bias, out, rows, cols):
    for r in range(rows):
        off = r * cols
        for c in range(cols):
            out[off + c] = x[off + c] + bias[c]


def col_sum_acc(x, out, rows, cols):
    """out[c] += sum over rows of x[r,c]."""
    for r in range(rows):
        off = r * cols
        for c in range(cols):
            out[c] += x[off + c]


def sum_all(x, n):
    acc = 0.0
    for i in range(n):
        acc += x[i]
    return acc


def sum_sq(x, n):
    acc = 0.0
    for i in range(n):
        acc += x[i] * x[i]
    return acc


def softmax_rows(x, out, rows, cols):
    """Row softmax with max-subtraction; -inf entries map to exactly 0."""
    for r in range(rows):
        off = r * cols
        mx = x[off]
        for c in range(1, cols):
            v = x[off + c]
            if v > mx:
                mx = v
        z = 0.0
        for c in range(cols):
            e = math.exp(x[off + c] - mx)
            out[off + c] = e
            z += e
        inv = 1.0 / z
        for c in range(cols):
            out[off + c] *= inv


def softmax_rows_bwd(y, dy, dx, rows, cols):
    """dx += y * (dy - sum(dy * y)) per row."""
    for r in range(rows):
        off = r * cols
        dot = 0.0
        for c in range(cols):
            dot += dy[off + c] * y[off + c]
        for c in range(cols):
            dx[off + c] += y[off + c] * (dy[off + c] - dot)


def layernorm_rows(x, gain, bias, eps, out, mean_out, rstd_out, rows, cols):
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
        rstd = 1.0 / math.sqrt(var + eps)
        mean_out[r] = mu
        rstd_out[r] = rstd
        for c in range(cols):
            out[off + c] = (x[off + c] - mu) * rstd * gain[c] + bias[c]


def layernorm_rows_bwd(x, gain, mean, rstd, dout, dx, dgain, dbias, rows, cols):
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


def gelu_fwd(x, out, n):
    for i in range(n):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))


def gelu_bwd(x, dout, dx, n):
    for i in range(n):
        v = x[i]
        d = 0.5 * (1.0 + math.erf(v * _INV_SQRT2)) + v * math.exp(-0.5 * v * v) * _INV_SQRT2PI
        dx[i] += dout[i] * d


def ce_smoothed_fwd(logits, targets, eps, ignore_id, rows, cols, probs_out):
    """Label-smoothed cross-entropy; returns (loss_sum, counted_rows).

    Smoothed target puts 1-eps on the target id and eps/(cols-1) elsewhere;
    loss per row is KL(smoothed || softmax(logits)). Rows whose target equals
    ignore_id contribute nothing and get zeroed probs.
    """
    off_target = eps / (cols - 1) if cols > 1 else 0.0
    const = 0.0
    if eps > 0.0:
        const = (1.0 - eps) * math.log(1.0 - eps) + eps * math.log(off_target)
    loss_sum = 0.0
    count = 0
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
            e = math.exp(logits[off + c] - mx)
            probs_out[off + c] = e
            z += e
        logz = math.log(z)
        inv = 1.0 / z
        lsm_sum = 0.0
        for c in range(cols):
            probs_out[off + c] *= inv
            lsm_sum += logits[off + c] - mx - logz
        lsm_t = logits[off + t] - mx - logz
        loss_sum += const - (1.0 - eps) * lsm_t - off_target * (lsm_sum - lsm_t)
        count += 1
    return loss_sum, count


def ce_smoothed_bwd(probs, targets, eps, ignore_id, rows, cols, scale, dlogits):
    """dlogits += scale * (probs - smoothed_target) on non-ignored rows."""
    off_target = eps / (cols - 1) if cols > 1 else 0.0
    for r in range(rows):
        off = r * cols
        t = targets[r]
        if t == ignore_id:
            continue
        for c in range(cols):
            q = (1.0 - eps) if c == t else off_target
            dlogits[off + c] += scale * (probs[off + c] - q)


def gather_rows(table, ids, out, n, dim):
    for i in range(n):
        src = ids[i] * dim
        dst = i * dim
        for c in range(dim):
            out[dst + c] = table[src + c]


def scatter_add_rows(dout, ids, dtable, n, dim):
    for i in range(n):
        dst = ids[i] * dim
        src = i * dim
        for c in range(dim):
            dtable[dst + c] += dout[src + c]


def transpose2d(a, out, rows, cols):
    for r in range(rows):
        off = r * cols
        for c in range(cols):
            out[c * rows + r] = a[off + c]


def copy_cols(src, dst, rows, src_cols, dst_cols, src_off, dst_off, width, accumulate=False):
    """Copy (or add) a column band between two row-major matrices."""
    for r in range(rows):
        s = r * src_cols + src_off
        d = r * dst_cols + dst_off
        if accumulate:
            for c in range(width):
                dst[d + c] += src[s + c]
        else:
            for c in range(width):
                dst[d + c] = src[s + c]


def dropout_mask(out, n, rate, scale, seed):
    """Fill out with {0, scale} via xorshift64*; seed must be nonzero."""
    s = seed & 0xFFFFFFFFFFFFFFFF
    for i in range(n):
        s ^= (s >> 12)
        s = (s ^ (s << 25)) & 0xFFFFFFFFFFFFFFFF
        s ^= (s >> 27)
        r = ((s * 2685821657736338717) & 0xFFFFFFFFFFFFFFFF) >> 11
        out[i] = 0.0 if r * _U53 < rate else scale


def adam_step(p, g, m, v, n, lr, beta1, beta2, eps, t):
    """In-place adaptive-moment update with bias correction at step t (1-based)."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i in range(n):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def edit_distance(a, b):
    """Levenshtein distance between two int sequences (unit costs)."""
    la = len(a)
    lb = len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    row = list(range(lb + 1))
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
