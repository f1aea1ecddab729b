"""Define-by-run reverse-mode array engine.

All values are float64 numpy arrays. A ``Tape`` records every operation of
one forward pass; ``Tape.backward`` replays the records in exact reverse
order and accumulates gradients into the participating tensors. The tape is
rebuilt for each forward pass, and running backward twice on one tape is an
error.

Gradients only propagate through tensors created with ``requires_grad=True``
(or derived from one), so evaluation-only forwards record nothing and run at
plain numpy speed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class TapeError(RuntimeError):
    """Raised on tape misuse (reused tape, cross-tape operands, non-scalar loss)."""


def _as_f64(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    # note: ascontiguousarray would promote 0-d scalars to shape (1,)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


class DiffTensor:
    """Array value participating in a recorded computation graph."""

    __slots__ = ("data", "grad", "node_id", "tape", "requires_grad")

    def __init__(self, data: np.ndarray, tape: "Tape", requires_grad: bool,
                 node_id: int):
        self.data = data
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.data.shape}, node_id={self.node_id})"

    # Arithmetic sugar; float operands scale/shift without joining the graph.
    def __add__(self, other):
        if isinstance(other, DiffTensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffTensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of one forward pass.

    Every tensor belongs to exactly one tape and carries the node id it was
    assigned when it joined. Records are appended in forward order, so input
    node ids always precede their consumer's; backward walks the records in
    exact reverse order.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._grad_leaves: list[DiffTensor] = []
        self._next_id = 0
        self._spent = False

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data, requires_grad: bool = False) -> DiffTensor:
        """Wrap an array as a graph leaf (a parameter or an input)."""
        t = DiffTensor(_as_f64(data), self, requires_grad, self._new_id())
        if requires_grad:
            self._grad_leaves.append(t)
        return t

    def constant(self, data) -> DiffTensor:
        return self.leaf(data, requires_grad=False)

    def record(self, out: DiffTensor, inputs: Sequence[DiffTensor],
               backward: Callable[[np.ndarray], None]) -> None:
        if self._spent:
            raise TapeError("tape already consumed by backward; build a new one")
        self._records.append((out.node_id, tuple(t.node_id for t in inputs), backward))

    @property
    def num_records(self) -> int:
        return len(self._records)

    @property
    def record_ids(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(out, ins) for out, ins, _ in self._records]

    def backward(self, loss: DiffTensor) -> None:
        """Populate ``grad`` on every reachable tensor; unreachable leaves get zeros."""
        if self._spent:
            raise TapeError("backward already ran on this tape")
        if loss.tape is not self:
            raise TapeError("loss tensor belongs to a different tape")
        if loss.data.shape != ():
            raise TapeError(f"loss must be a scalar, got shape {loss.data.shape}")
        self._spent = True
        loss.grad = np.ones((), dtype=np.float64)
        for _, _, backward in reversed(self._records):
            backward()
        for t in self._grad_leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _accumulate(t: DiffTensor, g: np.ndarray) -> None:
    # Copy on first bind so backward closures can hand out shared arrays.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _check_same_tape(*tensors: DiffTensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise TapeError("operands belong to different tapes")
    return tape


def _make_out(tape: Tape, data: np.ndarray,
              inputs: Sequence[DiffTensor]) -> DiffTensor:
    rg = any(t.requires_grad for t in inputs)
    return DiffTensor(data, tape, rg, tape._new_id())


def _unary(x: DiffTensor, data: np.ndarray, grad_fn) -> DiffTensor:
    tape = x.tape
    out = _make_out(tape, data, (x,))
    if out.requires_grad:
        def backward():
            if out.grad is not None:
                _accumulate(x, grad_fn(out.grad))
        tape.record(out, (x,), backward)
    return out


def _require_same_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops and reductions


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape(a, b, "add")
    tape = _check_same_tape(a, b)
    out = _make_out(tape, a.data + b.data, (a, b))
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, out.grad)
            if b.requires_grad:
                _accumulate(b, out.grad)
        tape.record(out, (a, b), backward)
    return out


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape(a, b, "sub")
    tape = _check_same_tape(a, b)
    out = _make_out(tape, a.data - b.data, (a, b))
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, out.grad)
            if b.requires_grad:
                _accumulate(b, -out.grad)
        tape.record(out, (a, b), backward)
    return out


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _require_same_shape(a, b, "mul")
    tape = _check_same_tape(a, b)
    out = _make_out(tape, a.data * b.data, (a, b))
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, out.grad * b.data)
            if b.requires_grad:
                _accumulate(b, out.grad * a.data)
        tape.record(out, (a, b), backward)
    return out


def scale(x: DiffTensor, c: float) -> DiffTensor:
    return _unary(x, x.data * c, lambda g: g * c)


def shift(x: DiffTensor, c: float) -> DiffTensor:
    return _unary(x, x.data + c, lambda g: np.array(g))


def absval(x: DiffTensor) -> DiffTensor:
    # Subgradient 0 at exactly 0.
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data))


def relu(x: DiffTensor) -> DiffTensor:
    mask = x.data > 0.0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def sigmoid(x: DiffTensor) -> DiffTensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def log(x: DiffTensor) -> DiffTensor:
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def clamp(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _unary(x, data, lambda g: g * mask)


def tsum(x: DiffTensor) -> DiffTensor:
    return _unary(x, np.asarray(np.sum(x.data)),
                  lambda g: np.broadcast_to(g, x.data.shape).copy())


def tmean(x: DiffTensor) -> DiffTensor:
    n = x.data.size
    return _unary(x, np.asarray(np.mean(x.data)),
                  lambda g: np.broadcast_to(g / n, x.data.shape).copy())


def stop_gradient(x: DiffTensor) -> DiffTensor:
    """Copy of ``x`` that contributes zero gradient to it."""
    return x.tape.constant(x.data.copy())


def softmax_channels(x: DiffTensor) -> DiffTensor:
    """Softmax across axis 0 (the class axis), per remaining position."""
    m = x.data.max(axis=0, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=0, keepdims=True)

    def grad_fn(g):
        return p * (g - np.sum(g * p, axis=0, keepdims=True))

    return _unary(x, p, grad_fn)


def concat_channels(parts: Sequence[DiffTensor]) -> DiffTensor:
    """Concatenate along axis 0; trailing extents must agree."""
    tail = parts[0].data.shape[1:]
    for p in parts[1:]:
        if p.data.shape[1:] != tail:
            raise ShapeMismatchError(
                f"concat: trailing extents {p.data.shape[1:]} != {tail}")
    tape = _check_same_tape(*parts)
    out = _make_out(tape, np.concatenate([p.data for p in parts], axis=0), parts)
    if out.requires_grad:
        sizes = [p.data.shape[0] for p in parts]

        def backward():
            if out.grad is None:
                return
            off = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    _accumulate(p, out.grad[off:off + n].copy())
                off += n
        tape.record(out, tuple(parts), backward)
    return out


def global_avg_pool(x: DiffTensor) -> DiffTensor:
    """[C,h,w] -> [C] spatial mean."""
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"global_avg_pool expects [C,h,w], got {x.data.shape}")
    n = x.data.shape[1] * x.data.shape[2]
    return _unary(x, x.data.mean(axis=(1, 2)),
                  lambda g: np.broadcast_to(g[:, None, None] / n, x.data.shape).copy())


def scale_channels(x: DiffTensor, c: DiffTensor) -> DiffTensor:
    """Multiply [C,h,w] by a per-channel vector [C]."""
    if x.data.ndim != 3 or c.data.shape != (x.data.shape[0],):
        raise ShapeMismatchError(
            f"scale_channels: feature {x.data.shape} vs channel vector {c.data.shape}")
    tape = _check_same_tape(x, c)
    out = _make_out(tape, x.data * c.data[:, None, None], (x, c))
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            if x.requires_grad:
                _accumulate(x, out.grad * c.data[:, None, None])
            if c.requires_grad:
                _accumulate(c, (out.grad * x.data).sum(axis=(1, 2)))
        tape.record(out, (x, c), backward)
    return out


# ---------------------------------------------------------------------------
# dense / convolution / pooling / resize


def dense(x: DiffTensor, w: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Affine map: w[m,n] @ x[n] + b[m]."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0] \
            or b.data.shape != (w.data.shape[0],):
        raise ShapeMismatchError(
            f"dense: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    tape = _check_same_tape(x, w, b)
    out = _make_out(tape, w.data @ x.data + b.data, (x, w, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _accumulate(x, w.data.T @ g)
            if w.requires_grad:
                _accumulate(w, np.outer(g, x.data))
            if b.requires_grad:
                _accumulate(b, g)
        tape.record(out, (x, w, b), backward)
    return out


def _im2col3(x: np.ndarray) -> np.ndarray:
    """[C,H,W] -> [C*9, H*W] patch matrix for 3x3 kernels, zero padding 1.

    Row order is (channel, kernel row, kernel col), matching a reshaped
    [C_out, C*9] kernel, so convolution is a single row-major matmul."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    col = np.empty((c, 9, h, w))
    for u in range(3):
        for v in range(3):
            col[:, u * 3 + v] = xp[:, u:u + h, v:v + w]
    return col.reshape(c * 9, h * w)


def conv2d(x: DiffTensor, k: DiffTensor, b: DiffTensor) -> DiffTensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: [C_in,H,W], k: [C_out,C_in,3,3], b: [C_out] -> [C_out,H,W].
    """
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"conv2d input must be [C,H,W], got {x.data.shape}")
    if k.data.ndim != 4 or k.data.shape[2:] != (3, 3):
        raise ShapeMismatchError(f"conv2d kernel must be [C_out,C_in,3,3], got {k.data.shape}")
    if k.data.shape[1] != x.data.shape[0]:
        raise ShapeMismatchError(
            f"conv2d: input channels {x.data.shape} do not match kernel {k.data.shape}")
    if b.data.shape != (k.data.shape[0],):
        raise ShapeMismatchError(f"conv2d bias {b.data.shape} vs kernel {k.data.shape}")
    tape = _check_same_tape(x, k, b)
    c_out = k.data.shape[0]
    c_in, h, w = x.data.shape
    col = _im2col3(x.data)                       # [C_in*9, HW]
    km = k.data.reshape(c_out, -1)
    out_data = (km @ col).reshape(c_out, h, w) + b.data[:, None, None]
    out = _make_out(tape, out_data, (x, k, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            gm = g.reshape(c_out, h * w)
            if k.requires_grad:
                _accumulate(k, (gm @ col.T).reshape(k.data.shape))
            if b.requires_grad:
                _accumulate(b, gm.sum(axis=1))
            if x.requires_grad:
                # upstream-grad correlation with the flipped, channel-swapped kernel
                kf = np.ascontiguousarray(
                    k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                dx = (kf.reshape(c_in, -1) @ _im2col3(g)).reshape(x.data.shape)
                _accumulate(x, dx)
        tape.record(out, (x, k, b), backward)
    return out


def conv1x1(x: DiffTensor, w: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Per-pixel channel mix: w[C_out,C_in] applied at every position of x[C_in,H,W]."""
    if x.data.ndim != 3 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0] \
            or b.data.shape != (w.data.shape[0],):
        raise ShapeMismatchError(
            f"conv1x1: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    tape = _check_same_tape(x, w, b)
    c_in, h, wd = x.data.shape
    xm = x.data.reshape(c_in, h * wd)
    out_data = (w.data @ xm).reshape(w.data.shape[0], h, wd) + b.data[:, None, None]
    out = _make_out(tape, out_data, (x, w, b))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            gm = g.reshape(w.data.shape[0], h * wd)
            if x.requires_grad:
                _accumulate(x, (w.data.T @ gm).reshape(x.data.shape))
            if w.requires_grad:
                _accumulate(w, gm @ xm.T)
            if b.requires_grad:
                _accumulate(b, gm.sum(axis=1))
        tape.record(out, (x, w, b), backward)
    return out


def maxpool2(x: DiffTensor) -> DiffTensor:
    """2x2 max pooling, stride 2; gradient routes to the first (row-major) max."""
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"maxpool2 expects [C,H,W], got {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2 needs even extents, got {h}x{w}")
    win = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4) \
                .reshape(c, h // 2, w // 2, 4)
    arg = win.argmax(axis=3)                     # first max in row-major window order
    out_data = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    out = _make_out(x.tape, np.ascontiguousarray(out_data), (x,))
    if out.requires_grad:
        ci, ri, cj = np.meshgrid(np.arange(c), np.arange(h // 2), np.arange(w // 2),
                                 indexing="ij")
        rows = 2 * ri + arg // 2
        cols = 2 * cj + arg % 2
        flat = ((ci * h + rows) * w + cols).ravel()

        def backward():
            if out.grad is None:
                return
            dx = np.zeros(c * h * w)
            dx[flat] = out.grad.ravel()          # windows are disjoint
            _accumulate(x, dx.reshape(x.data.shape))
        x.tape.record(out, (x,), backward)
    return out


_UPSAMPLE_MATS: dict[int, np.ndarray] = {}


def _upsample2_matrix(n: int) -> np.ndarray:
    """[2n, n] bilinear interpolation operator, align-corners-false."""
    m = _UPSAMPLE_MATS.get(n)
    if m is None:
        m = np.zeros((2 * n, n))
        for o in range(2 * n):
            src = max((o + 0.5) / 2.0 - 0.5, 0.0)
            i0 = min(int(src), n - 1)
            i1 = min(i0 + 1, n - 1)
            w1 = src - i0
            m[o, i0] += 1.0 - w1
            m[o, i1] += w1
        _UPSAMPLE_MATS[n] = m
    return m


def upsample2_array(x: np.ndarray) -> np.ndarray:
    """Plain-array 2x bilinear upsampling of [C,h,w] (shared with detached callers)."""
    uh = _upsample2_matrix(x.shape[1])
    uw = _upsample2_matrix(x.shape[2])
    return np.matmul(np.matmul(uh, x), uw.T)


def bilinear_upsample2(x: DiffTensor) -> DiffTensor:
    """2x bilinear upsampling (align-corners-false) with transposed-weight backward."""
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"bilinear_upsample2 expects [C,h,w], got {x.data.shape}")
    uh = _upsample2_matrix(x.data.shape[1])
    uw = _upsample2_matrix(x.data.shape[2])
    return _unary(x, np.matmul(np.matmul(uh, x.data), uw.T),
                  lambda g: np.matmul(np.matmul(uh.T, g), uw))


def apply_op(inputs: Sequence[DiffTensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> DiffTensor:
    """Record a custom op. ``backward_fn(out_grad)`` returns one gradient
    array (or None) per input; used by loss modules with hand-derived
    vectorized backward rules."""
    tape = _check_same_tape(*inputs)
    out = _make_out(tape, _as_f64(out_data), inputs)
    if out.requires_grad:
        def backward():
            if out.grad is None:
                return
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if t.requires_grad and g is not None:
                    _accumulate(t, g)
        tape.record(out, tuple(inputs), backward)
    return out
