"""Reverse-mode autodiff core: flat float64 tensors and an explicit tape.

Tensors are dense row-major ``array('d')`` buffers with a shape tuple (0-, 1-
or 2-dimensional). Operations defined in :mod:`twopass_slu.ops` record their
backward rules on the innermost active :class:`Tape`; :func:`backward` walks
the tape once in reverse. A tape and its tensors belong to a single thread;
frozen (requires_grad=False) tensors may be shared across threads read-only.
"""

import threading
from array import array


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, loss detached from a tape, etc."""


_STATE = threading.local()


def _stack():
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def current_tape():
    """The innermost active tape of this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations, consumed exactly once by backward().

    Entering the context makes the tape active; ops append (output, rule)
    nodes in execution order, so the list is topologically sorted by
    construction.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tape context exited out of order"
        return False

    def record(self, out, rule):
        self.nodes.append((out, rule))

    def __len__(self):
        return len(self.nodes)


def _numel(shape):
    n = 1
    for d in shape:
        n *= d
    return n


class Tensor:
    """Dense float64 tensor; grad buffer is present iff requires_grad."""

    __slots__ = ("shape", "data", "requires_grad", "grad", "tape")

    def __init__(self, shape, data, requires_grad=False, tape=None):
        shape = tuple(shape)
        if any(d <= 0 for d in shape):
            raise ShapeError(f"non-positive dimension in shape {shape}")
        if len(shape) > 2:
            raise ShapeError(f"at most 2 dimensions supported, got {shape}")
        if len(data) != _numel(shape):
            raise ShapeError(f"shape {shape} needs {_numel(shape)} values, got {len(data)}")
        self.shape = shape
        self.data = data
        self.requires_grad = requires_grad
        self.grad = array("d", bytes(8 * len(data))) if requires_grad else None
        self.tape = tape

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return len(self.data)

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return self.data[0]

    def tolist(self):
        """Nested-list view of the data (rows for 2-D)."""
        if self.ndim == 2:
            rows, cols = self.shape
            return [list(self.data[r * cols:(r + 1) * cols]) for r in range(rows)]
        if self.ndim == 1:
            return list(self.data)
        return self.data[0]

    def row(self, r):
        cols = self.shape[1]
        return list(self.data[r * cols:(r + 1) * cols])

    def copy(self):
        return Tensor(self.shape, array("d", self.data))

    def set_requires_grad(self, flag):
        """Toggle trainability; dropping the flag discards the grad buffer."""
        if flag and not self.requires_grad:
            self.grad = array("d", bytes(8 * self.size))
        elif not flag:
            self.grad = None
        self.requires_grad = flag

    def zero_grad(self):
        if self.grad is not None:
            from twopass_slu.backend import K
            K.vec_fill(self.grad, 0.0, self.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(shape, requires_grad=False):
    return Tensor(shape, array("d", bytes(8 * _numel(shape))), requires_grad)


def full(shape, value, requires_grad=False):
    return Tensor(shape, array("d", [value] * _numel(shape)), requires_grad)


def scalar(value):
    return Tensor((), array("d", [value]))


def from_list(values, requires_grad=False):
    """Build a tensor from a flat list (1-D) or list of rows (2-D)."""
    if values and isinstance(values[0], (list, tuple)):
        rows = len(values)
        cols = len(values[0])
        flat = array("d", bytes(0))
        for row in values:
            if len(row) != cols:
                raise ShapeError("ragged rows in from_list input")
            flat.extend(row)
        return Tensor((rows, cols), flat, requires_grad)
    return Tensor((len(values),), array("d", values), requires_grad)


def randn(shape, rng, std=1.0, requires_grad=False):
    data = array("d", bytes(8 * _numel(shape)))
    for i in range(len(data)):
        data[i] = rng.gauss(0.0, std)
    return Tensor(shape, data, requires_grad)


def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable grad buffer.

    The loss must have been produced under a tape that has not been consumed
    yet; rerunning backward requires building a new tape (and typically
    zeroing parameter grads first).
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not attached to a tape; run the forward pass "
                        "inside `with Tape():`")
    if tape.consumed:
        raise TapeError("tape already consumed by backward(); build a new tape "
                        "for the next step")
    tape.consumed = True
    loss.grad[0] += 1.0
    for out, rule in reversed(tape.nodes):
        rule(out.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
