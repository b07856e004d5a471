"""Dense float64 tensors with tape-based reverse-mode differentiation.

The tensor type is a thin wrapper over a C-contiguous float64 ndarray plus a
gradient slot.  Differentiable operations take an optional ``tape``; when one
is passed, the op appends a backward closure to it.  ``backward(tape, loss)``
replays the closures in reverse execution order, accumulating gradients
additively into every tensor that contributed to the loss.

Tapes are single-threaded; independent tapes may run concurrently.  A tape
stays replayable after ``backward`` (each call re-seeds and re-zeroes the
gradients of all tensors it touches); ``clear()`` drops the records.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an operation's operands have incompatible shapes."""


class TapeError(RuntimeError):
    """Raised when a tape is missing the records needed for backward."""


class Tensor:
    """Dense N-dimensional array of float64 values with a gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def add_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Accumulate a gradient contribution.

        ``own=True`` promises ``g`` is a freshly computed array (or a view of
        one) that the caller will not reuse, letting the first contribution
        skip a zero-fill-and-add pass.
        """
        if self.grad is None:
            if own and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Tape:
    """Ordered record of executed differentiable operations."""

    __slots__ = ("_records", "_saved_bytes")

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._saved_bytes = 0

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...],
               bwd: Callable[[np.ndarray], None], saved_bytes: int = 0) -> None:
        self._records.append((out, inputs, bwd))
        self._saved_bytes += saved_bytes

    def clear(self) -> None:
        self._records.clear()
        self._saved_bytes = 0

    def tensors(self):
        seen: set[int] = set()
        for out, inputs, _ in self._records:
            for t in (out, *inputs):
                if id(t) not in seen:
                    seen.add(id(t))
                    yield t

    def recorded_bytes(self) -> int:
        """Allocation-counter estimate: bytes of every distinct array the tape
        keeps alive (op outputs, leaf inputs, saved intermediates)."""
        seen: set[int] = set()
        total = self._saved_bytes
        for out, inputs, _ in self._records:
            for t in (out, *inputs):
                if id(t.data) not in seen:
                    seen.add(id(t.data))
                    total += t.data.nbytes
        return total

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self._records:
            raise TapeError("tape has no records (already cleared?)")
        for t in self.tensors():
            t.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for out, _, bwd in reversed(self._records):
            if out.grad is not None:
                bwd(out.grad)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor recorded on ``tape``.

    Gradients of tensors consumed by several operations accumulate
    additively.  The tape stays intact and may be replayed.
    """
    tape.backward(loss)


# ---------------------------------------------------------------------------
# im2col machinery shared by conv2d and its gradient


def _im2col(xp: np.ndarray, s: int, stride: int) -> np.ndarray:
    """Stack every kernel-sized window of a padded map as a row.

    Returns an (out_h*out_w, k*s*s) array; row order matches the row-major
    traversal of output positions, column order matches the row-major layout
    of a (k, s, s) kernel.
    """
    windows = sliding_window_view(xp, (s, s), axis=(1, 2))[:, ::stride, ::stride]
    k, out_h, out_w = windows.shape[:3]
    cols = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4))
    return cols.reshape(out_h * out_w, k * s * s)


def _col2im(dcols: np.ndarray, k: int, hp: int, wp: int, s: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Scatter per-window gradients back onto the padded map (inverse of
    ``_im2col``), summing where windows overlap."""
    d5 = dcols.reshape(out_h, out_w, k, s, s)
    if out_h == 1 and out_w == 1:
        dxp = np.zeros((k, hp, wp))
        dxp[:, :s, :s] = d5[0, 0]
        return dxp
    if stride == s:
        # disjoint windows tile the padded map exactly: pure un-transpose
        return np.ascontiguousarray(d5.transpose(2, 0, 3, 1, 4)).reshape(k, hp, wp)
    # overlapping (or gapped) windows: two-stage overlap-add, width then height
    tmpw = np.zeros((out_h, k, s, wp))
    dt = d5.transpose(0, 2, 3, 1, 4)  # (out_h, k, s, out_w, s)
    for j in range(out_w):
        c = j * stride
        tmpw[:, :, :, c:c + s] += dt[:, :, :, j, :]
    dxp = np.zeros((k, hp, wp))
    for i in range(out_h):
        r = i * stride
        dxp[:, r:r + s, :] += tmpw[i]
    return dxp


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    k, h, w = x.shape
    xp = np.zeros((k, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    return xp


# ---------------------------------------------------------------------------
# differentiable operations


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation of a (k_in, H, W) map with (k_out, k_in, s, s)
    kernels plus a per-channel bias.  Zero padding, integer stride.

    The output height is (H + 2*padding - s)/stride + 1 and the division must
    be exact; same for the width.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be k x H x W, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be k_out x k_in x s x s, got {weight.shape}")
    k_in, h, w = x.shape
    k_out, wk_in, s, s2 = weight.shape
    if s != s2:
        raise ShapeError(f"conv2d kernel must be square, got {s}x{s2}")
    if wk_in != k_in:
        raise ShapeError(
            f"conv2d weight expects {wk_in} input channels, input has {k_in}")
    if bias.shape != (k_out,):
        raise ShapeError(
            f"conv2d bias must have shape ({k_out},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be nonnegative, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < s:
        raise ShapeError(f"padded height {hp} smaller than kernel {s}")
    if wp < s:
        raise ShapeError(f"padded width {wp} smaller than kernel {s}")
    if (hp - s) % stride != 0:
        raise ShapeError(
            f"height {hp} minus kernel {s} not divisible by stride {stride}")
    if (wp - s) % stride != 0:
        raise ShapeError(
            f"width {wp} minus kernel {s} not divisible by stride {stride}")
    out_h = (hp - s) // stride + 1
    out_w = (wp - s) // stride + 1

    xp = _pad_spatial(x.data, padding)
    cols = _im2col(xp, s, stride)                    # (P, K)
    w2 = weight.data.reshape(k_out, k_in * s * s)    # (c, K)
    out_pc = cols @ w2.T                              # (P, c)
    out = Tensor(out_pc.T.reshape(k_out, out_h, out_w) + bias.data[:, None, None])

    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            g_pc = g.reshape(k_out, out_h * out_w).T
            bias.add_grad(g.sum(axis=(1, 2)), own=True)
            weight.add_grad((g_pc.T @ cols).reshape(weight.shape), own=True)
            dcols = g_pc @ w2
            dxp = _col2im(dcols, k_in, hp, wp, s, stride, out_h, out_w)
            if padding:
                x.add_grad(dxp[:, padding:padding + h, padding:padding + w], own=True)
            else:
                x.add_grad(dxp, own=True)

        tape.record(out, (x, weight, bias), bwd, saved_bytes=cols.nbytes)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        keep = x.data > 0

        def bwd(g: np.ndarray) -> None:
            x.add_grad(g * keep, own=True)

        tape.record(out, (x,), bwd, saved_bytes=keep.nbytes)
    return out


def global_average_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Average each channel of a (c, H, W) map down to a scalar."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_average_pool input must be c x H x W, got {x.shape}")
    c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_average_pool needs nonempty spatial dims, got {h}x{w}")
    out = Tensor(x.data.reshape(c, -1).mean(axis=1))
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            x.add_grad(np.broadcast_to((g / (h * w))[:, None, None], x.data.shape))

        tape.record(out, (x,), bwd)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise logistic function, stable for large |v|."""
    v = x.data
    out_data = np.empty_like(v)
    pos = v >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_data[~pos] = ev / (1.0 + ev)
    out = Tensor(out_data)
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            x.add_grad(g * out.data * (1.0 - out.data), own=True)

        tape.record(out, (x,), bwd)
    return out


def sigmoid_cross_entropy(logits: Tensor, targets, tape: Tape | None = None) -> Tensor:
    """Mean binary cross-entropy between per-class logits and 0/1 targets.

    Uses the log-sum-exp form max(z,0) - z*t + log(1 + exp(-|z|)), which
    saturates gracefully; the gradient is (sigmoid(z) - t) / n_classes.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    z = logits.data
    if t.shape != z.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {z.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("targets must be binary (0 or 1)")
    n = z.size
    losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(losses.mean())
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            sz = np.empty_like(z)
            pos = z >= 0
            sz[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            sz[~pos] = ez / (1.0 + ez)
            logits.add_grad((float(g) / n) * (sz - t), own=True)

        tape.record(out, (logits,), bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            a.add_grad(g)
            b.add_grad(g)

        tape.record(out, (a, b), bwd)
    return out


def scale(x: Tensor, factor: float, tape: Tape | None = None) -> Tensor:
    f = float(factor)
    out = Tensor(x.data * f)
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            x.add_grad(g * f, own=True)

        tape.record(out, (x,), bwd)
    return out


def pick(x: Tensor, index: int, tape: Tape | None = None) -> Tensor:
    """Select one element (flat index) as a scalar tensor."""
    flat = x.data.reshape(-1)
    if not 0 <= index < flat.size:
        raise ShapeError(f"pick index {index} out of range for {x.size} elements")
    out = Tensor(np.float64(flat[index]))
    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            d = np.zeros_like(x.data)
            d.reshape(-1)[index] = float(g)
            x.add_grad(d, own=True)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# serialization: flat binary and CSV, both with a shape header

_TENSOR_MAGIC = b"SCTN"


def save_tensor(path, t: Tensor) -> None:
    """Flat little-endian binary: magic, ndim, shape, float64 payload."""
    arr = t.data
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TENSOR_MAGIC:
            raise ValueError(f"not a tensor file (bad magic {magic!r})")
        ndim = struct.unpack("<B", fh.read(1))[0]
        shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return Tensor(data.copy())


def save_tensor_csv(path, t: Tensor) -> None:
    """One value per line after a ``shape,d0,d1,...`` header; full precision."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("shape," + ",".join(str(d) for d in t.shape) + "\n")
        for v in t.data.reshape(-1):
            fh.write(f"{float(v)!r}\n")


def load_tensor_csv(path) -> Tensor:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "shape":
            raise ValueError("missing shape header in tensor CSV")
        shape = tuple(int(d) for d in header[1:])
        values = [float(line) for line in fh if line.strip()]
    arr = np.array(values, dtype=np.float64).reshape(shape)
    return Tensor(arr)
