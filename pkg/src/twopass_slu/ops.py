"""Differentiable operations over flat-buffer tensors.

Every op validates shapes eagerly, computes through the active kernel backend
and, when a tape is active and an input requires grad, records a backward
rule that accumulates into input ``grad`` buffers. Broadcasting is limited to
bias-add over the last axis; anything else is a shape error.
"""

from array import array

from twopass_slu import backend
from twopass_slu.tensor import ShapeError, Tensor, current_tape


def _new(shape, n=None):
    return array("d", bytes(8 * (n if n is not None else _numel(shape))))


def _numel(shape):
    n = 1
    for d in shape:
        n *= d
    return n


def _rows_cols(t):
    if t.ndim == 2:
        return t.shape
    if t.ndim == 1:
        return 1, t.shape[0]
    raise ShapeError(f"need a 1-D or 2-D tensor, got shape {t.shape}")


def _make(shape, data, inputs):
    tape = current_tape()
    rg = tape is not None and any(t.requires_grad for t in inputs)
    return Tensor(shape, data, requires_grad=rg, tape=tape if rg else None), tape, rg


def matmul(a, b):
    """Matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k] @ [k,n], got {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    data = _new((m, n))
    backend.K.matmul_nn(a.data, b.data, data, m, n, k)
    out, tape, rg = _make((m, n), data, (a, b))
    if rg:
        def rule(dout, a=a, b=b, m=m, n=n, k=k):
            if a.grad is not None:
                backend.K.matmul_nt(dout, b.data, a.grad, m, k, n, True)
            if b.grad is not None:
                backend.K.matmul_tn(a.data, dout, b.grad, k, n, m, True)
        tape.record(out, rule)
    return out


def add(a, b):
    """Elementwise sum; b may also be a 1-D bias over a's last axis."""
    if a.shape == b.shape:
        data = _new(a.shape)
        backend.K.vec_add(a.data, b.data, data, a.size)
        out, tape, rg = _make(a.shape, data, (a, b))
        if rg:
            def rule(dout, a=a, b=b, n=a.size):
                if a.grad is not None:
                    backend.K.vec_axpy(1.0, dout, a.grad, n)
                if b.grad is not None:
                    backend.K.vec_axpy(1.0, dout, b.grad, n)
            tape.record(out, rule)
        return out
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        rows, cols = a.shape
        data = _new(a.shape)
        backend.K.bias_add(a.data, b.data, data, rows, cols)
        out, tape, rg = _make(a.shape, data, (a, b))
        if rg:
            def rule(dout, a=a, b=b, rows=rows, cols=cols):
                if a.grad is not None:
                    backend.K.vec_axpy(1.0, dout, a.grad, rows * cols)
                if b.grad is not None:
                    backend.K.col_sum_acc(dout, b.grad, rows, cols)
            tape.record(out, rule)
        return out
    raise ShapeError(f"add needs matching shapes or a last-axis bias, got {a.shape} + {b.shape}")


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul needs matching shapes, got {a.shape} * {b.shape}")
    data = _new(a.shape)
    backend.K.vec_mul(a.data, b.data, data, a.size)
    out, tape, rg = _make(a.shape, data, (a, b))
    if rg:
        def rule(dout, a=a, b=b, n=a.size):
            if a.grad is not None:
                backend.K.vec_acc_mul(dout, b.data, a.grad, n)
            if b.grad is not None:
                backend.K.vec_acc_mul(dout, a.data, b.grad, n)
        tape.record(out, rule)
    return out


def scale(a, alpha):
    """Multiply by a python float."""
    data = _new(a.shape)
    backend.K.vec_scale(a.data, float(alpha), data, a.size)
    out, tape, rg = _make(a.shape, data, (a,))
    if rg:
        def rule(dout, a=a, alpha=float(alpha), n=a.size):
            if a.grad is not None:
                backend.K.vec_axpy(alpha, dout, a.grad, n)
        tape.record(out, rule)
    return out


def reduce_sum(x):
    """Sum of all elements -> scalar tensor."""
    data = array("d", [backend.K.sum_all(x.data, x.size)])
    out, tape, rg = _make((), data, (x,))
    if rg:
        def rule(dout, x=x, n=x.size):
            if x.grad is not None:
                backend.K.acc_const(x.grad, dout[0], n)
        tape.record(out, rule)
    return out


def softmax(x, axis=-1):
    """Row-stable softmax over the last axis."""
    if axis not in (-1, x.ndim - 1):
        raise ShapeError(f"softmax supports the last axis only, got axis={axis} "
                         f"for shape {x.shape}")
    rows, cols = _rows_cols(x)
    data = _new(x.shape)
    backend.K.softmax_rows(x.data, data, rows, cols)
    out, tape, rg = _make(x.shape, data, (x,))
    if rg:
        def rule(dout, x=x, y=data, rows=rows, cols=cols):
            if x.grad is not None:
                backend.K.softmax_rows_bwd(y, dout, x.grad, rows, cols)
        tape.record(out, rule)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    rows, cols = _rows_cols(x)
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({cols},), "
                         f"got {gain.shape} / {bias.shape}")
    data = _new(x.shape)
    mean = _new((rows,))
    rstd = _new((rows,))
    backend.K.layernorm_rows(x.data, gain.data, bias.data, eps, data, mean, rstd,
                             rows, cols)
    out, tape, rg = _make(x.shape, data, (x, gain, bias))
    if rg:
        def rule(dout, x=x, gain=gain, bias=bias, mean=mean, rstd=rstd,
                 rows=rows, cols=cols):
            dx = x.grad if x.grad is not None else _new((rows, cols))
            dgain = gain.grad if gain.grad is not None else _new((cols,))
            dbias = bias.grad if bias.grad is not None else _new((cols,))
            backend.K.layernorm_rows_bwd(x.data, gain.data, mean, rstd, dout,
                                         dx, dgain, dbias, rows, cols)
        tape.record(out, rule)
    return out


def gelu(x):
    """Gaussian error linear unit (exact erf form)."""
    data = _new(x.shape)
    backend.K.gelu_fwd(x.data, data, x.size)
    out, tape, rg = _make(x.shape, data, (x,))
    if rg:
        def rule(dout, x=x, n=x.size):
            if x.grad is not None:
                backend.K.gelu_bwd(x.data, dout, x.grad, n)
        tape.record(out, rule)
    return out


def dropout(x, rate, rng, train):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    mask = _new(x.shape)
    seed = rng.getrandbits(63) | 1
    backend.K.dropout_mask(mask, x.size, rate, 1.0 / (1.0 - rate), seed)
    data = _new(x.shape)
    backend.K.vec_mul(x.data, mask, data, x.size)
    out, tape, rg = _make(x.shape, data, (x,))
    if rg:
        def rule(dout, x=x, mask=mask, n=x.size):
            if x.grad is not None:
                backend.K.vec_acc_mul(dout, mask, x.grad, n)
        tape.record(out, rule)
    return out


def concat(tensors, axis=0):
    """Concatenate along axis 0 (rows) or axis 1 (columns)."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0]
    if axis == 0:
        if first.ndim == 1:
            if any(t.ndim != 1 for t in tensors):
                raise ShapeError("concat axis 0: mixed ranks")
            total = sum(t.size for t in tensors)
            data = _new((total,))
            off = 0
            for t in tensors:
                data[off:off + t.size] = t.data
                off += t.size
            out, tape, rg = _make((total,), data, tensors)
            shape_out = (total,)
        else:
            cols = first.shape[1]
            if any(t.ndim != 2 or t.shape[1] != cols for t in tensors):
                raise ShapeError(f"concat axis 0 needs equal column counts, got "
                                 f"{[t.shape for t in tensors]}")
            rows = sum(t.shape[0] for t in tensors)
            data = _new((rows, cols))
            off = 0
            for t in tensors:
                data[off:off + t.size] = t.data
                off += t.size
            out, tape, rg = _make((rows, cols), data, tensors)
            shape_out = (rows, cols)
        if rg:
            offsets = []
            off = 0
            for t in tensors:
                offsets.append(off)
                off += t.size
            def rule(dout, tensors=tuple(tensors), offsets=tuple(offsets)):
                for t, o in zip(tensors, offsets):
                    if t.grad is not None:
                        backend.K.acc_range(dout, o, t.grad, 0, t.size)
            tape.record(out, rule)
        return out
    if axis == 1:
        if any(t.ndim != 2 or t.shape[0] != first.shape[0] for t in tensors):
            raise ShapeError(f"concat axis 1 needs equal row counts, got "
                             f"{[t.shape for t in tensors]}")
        rows = first.shape[0]
        widths = [t.shape[1] for t in tensors]
        cols = sum(widths)
        data = _new((rows, cols))
        off = 0
        for t, w in zip(tensors, widths):
            backend.K.copy_cols(t.data, data, rows, w, cols, 0, off, w)
            off += w
        out, tape, rg = _make((rows, cols), data, tensors)
        if rg:
            def rule(dout, tensors=tuple(tensors), widths=tuple(widths),
                     rows=rows, cols=cols):
                off = 0
                for t, w in zip(tensors, widths):
                    if t.grad is not None:
                        backend.K.copy_cols(dout, t.grad, rows, cols, w, off, 0,
                                            w, True)
                    off += w
            tape.record(out, rule)
        return out
    raise ShapeError(f"concat supports axis 0 or 1, got {axis}")


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    if length < 1:
        raise ShapeError(f"narrow needs length >= 1, got {length}")
    if x.ndim == 1 and axis == 0:
        if start < 0 or start + length > x.shape[0]:
            raise ShapeError(f"narrow [{start}:{start + length}] out of range "
                             f"for shape {x.shape}")
        data = array("d", x.data[start:start + length])
        out, tape, rg = _make((length,), data, (x,))
        if rg:
            def rule(dout, x=x, start=start, length=length):
                if x.grad is not None:
                    backend.K.acc_range(dout, 0, x.grad, start, length)
            tape.record(out, rule)
        return out
    if x.ndim != 2:
        raise ShapeError(f"narrow needs a 1-D or 2-D tensor, got shape {x.shape}")
    rows, cols = x.shape
    if axis == 0:
        if start < 0 or start + length > rows:
            raise ShapeError(f"narrow rows [{start}:{start + length}] out of range "
                             f"for shape {x.shape}")
        data = array("d", x.data[start * cols:(start + length) * cols])
        out, tape, rg = _make((length, cols), data, (x,))
        if rg:
            def rule(dout, x=x, o=start * cols, n=length * cols):
                if x.grad is not None:
                    backend.K.acc_range(dout, 0, x.grad, o, n)
            tape.record(out, rule)
        return out
    if axis == 1:
        if start < 0 or start + length > cols:
            raise ShapeError(f"narrow cols [{start}:{start + length}] out of range "
                             f"for shape {x.shape}")
        data = _new((rows, length))
        backend.K.copy_cols(x.data, data, rows, cols, length, start, 0, length)
        out, tape, rg = _make((rows, length), data, (x,))
        if rg:
            def rule(dout, x=x, rows=rows, cols=cols, start=start, length=length):
                if x.grad is not None:
                    backend.K.copy_cols(dout, x.grad, rows, length, cols, 0, start,
                                        length, True)
            tape.record(out, rule)
        return out
    raise ShapeError(f"narrow supports axis 0 or 1, got {axis}")


def reshape(x, shape):
    """Reinterpret the buffer under a new shape (copies)."""
    shape = tuple(shape)
    if _numel(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    data = array("d", x.data)
    out, tape, rg = _make(shape, data, (x,))
    if rg:
        def rule(dout, x=x, n=x.size):
            if x.grad is not None:
                backend.K.acc_range(dout, 0, x.grad, 0, n)
        tape.record(out, rule)
    return out


def transpose(x):
    """2-D transpose."""
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {x.shape}")
    rows, cols = x.shape
    data = _new((cols, rows))
    backend.K.transpose2d(x.data, data, rows, cols)
    out, tape, rg = _make((cols, rows), data, (x,))
    if rg:
        def rule(dout, x=x, rows=rows, cols=cols):
            if x.grad is not None:
                scratch = _new((rows, cols))
                backend.K.transpose2d(dout, scratch, cols, rows)
                backend.K.vec_axpy(1.0, scratch, x.grad, rows * cols)
        tape.record(out, rule)
    return out


def embedding(table, ids):
    """Gather rows of an embedding table by token id."""
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got shape {table.shape}")
    n_rows, dim = table.shape
    for t in ids:
        if not 0 <= t < n_rows:
            raise ShapeError(f"token id {t} out of range for table with {n_rows} rows")
    if not ids:
        raise ShapeError("embedding needs at least one id")
    idbuf = array("q", ids)
    data = _new((len(ids), dim))
    backend.K.gather_rows(table.data, idbuf, data, len(ids), dim)
    out, tape, rg = _make((len(ids), dim), data, (table,))
    if rg:
        def rule(dout, table=table, idbuf=idbuf, dim=dim):
            if table.grad is not None:
                backend.K.scatter_add_rows(dout, idbuf, table.grad, len(idbuf), dim)
        tape.record(out, rule)
    return out


def cross_entropy_label_smoothed(logits, targets, smoothing=0.0, ignore_id=-1):
    """Mean label-smoothed cross-entropy over non-ignored positions -> scalar.

    The smoothed target distribution puts 1-smoothing on the target id and
    smoothing/(|V|-1) on every other id; smoothing 0 is plain cross-entropy.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [positions, vocab], got shape {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    rows, cols = logits.shape
    if len(targets) != rows:
        raise ShapeError(f"{rows} logit rows but {len(targets)} targets")
    for t in targets:
        if t != ignore_id and not 0 <= t < cols:
            raise ShapeError(f"target id {t} outside vocabulary of size {cols}")
    tbuf = array("q", targets)
    probs = _new((rows, cols))
    loss_sum, count = backend.K.ce_smoothed_fwd(logits.data, tbuf, smoothing,
                                                ignore_id, rows, cols, probs)
    if count == 0:
        raise ValueError("cross-entropy over zero non-ignored positions")
    data = array("d", [loss_sum / count])
    out, tape, rg = _make((), data, (logits,))
    if rg:
        def rule(dout, logits=logits, probs=probs, tbuf=tbuf,
                 smoothing=smoothing, ignore_id=ignore_id, rows=rows, cols=cols,
                 count=count):
            if logits.grad is not None:
                backend.K.ce_smoothed_bwd(probs, tbuf, smoothing, ignore_id, rows,
                                          cols, dout[0] / count, logits.grad)
        tape.record(out, rule)
    return out
