"""NCHW tensors and a reverse-mode differentiation tape.

Every value in this package is a ``Tensor4``: a dense (batch, channels,
height, width) array plus an optional same-shape gradient buffer.
Differentiable operations record nodes on the active ``Tape``; ``backward``
replays the tape in reverse and *accumulates* d(output)/d(tensor) into the
``grad`` buffer of every ``requires_grad`` tensor it can reach.  Callers are
responsible for zeroing gradients between steps.

Two precisions are supported end to end: float64 for gradient-check work and
float32 for training and inference.  Ops never change the dtype of their
inputs.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operands disagree on one or more tensor axes."""


class GraphError(RuntimeError):
    """backward() was asked to differentiate something the tape cannot reach."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator.

    PCG64 is a published, implementation-independent algorithm, so the same
    seed yields the same draw sequence on every platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def derived_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of integers (e.g. seed and epoch)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(tuple(keys))))


class Tensor4:
    """A dense NCHW value array with an optional gradient buffer.

    ``data`` is always a 4-d float32/float64 array whose dimensions are all
    at least 1.  ``grad``, once populated, has the same shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dimensions (n,c,h,w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all Tensor4 dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    """One recorded operation: how its output id maps back onto its inputs."""

    kind: str
    out_id: int
    input_ids: tuple[int, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPE_STACK = threading.local()


def _stack() -> list:
    if not hasattr(_TAPE_STACK, "items"):
        _TAPE_STACK.items = []
    return _TAPE_STACK.items


def active_tape() -> "Tape | None":
    items = _stack()
    return items[-1] if items else None


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Nodes are appended in execution order, so every node's inputs precede
    it and a single reverse sweep visits each node exactly once.  A tape and
    the tensors registered on it belong to one logical execution context.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.next_id = 0
        self._tensors: dict[int, Tensor4] = {}

    def register(self, t: Tensor4) -> int:
        if t.tape is self and t.node_id is not None:
            return t.node_id
        t.tape = self
        t.node_id = self.next_id
        self.next_id += 1
        self._tensors[t.node_id] = t
        return t.node_id

    def record(self, kind: str, out: Tensor4, inputs: Sequence[Tensor4], backward_fn) -> None:
        input_ids = tuple(self.register(t) for t in inputs)
        out_id = self.register(out)
        self.nodes.append(TapeNode(kind, out_id, input_ids, backward_fn))

    def tensor_for(self, node_id: int) -> Tensor4:
        return self._tensors[node_id]

    def release(self) -> None:
        """Drop the recorded graph and detach every registered tensor.

        Tensors, nodes, and their saved buffers form reference cycles, so
        without an explicit break they linger until the cycle collector
        runs; a training loop that has consumed its gradients calls this to
        free the step's memory immediately.  backward() on a released tape
        raises GraphError.
        """
        for t in self._tensors.values():
            t.tape = None
            t.node_id = None
        self._tensors.clear()
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _stack().pop()


def record_op(kind: str, out: Tensor4, inputs: Sequence[Tensor4], backward_fn) -> Tensor4:
    """Attach ``out`` to the active tape if any input participates in grad."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, out, inputs, backward_fn)
    return out


def backward(scalar_output: Tensor4, tape: Tape) -> None:
    """Accumulate d(scalar_output)/d(t) into every reachable requires_grad t.

    Gradients add onto whatever is already in each ``grad`` buffer; running
    backward twice over the same tape therefore doubles them.
    """
    if scalar_output.shape != (1, 1, 1, 1):
        raise GraphError(f"backward needs a scalar (1,1,1,1) output, got shape {scalar_output.shape}")
    if scalar_output.tape is not tape or scalar_output.node_id is None:
        raise GraphError("output tensor is detached from this tape")

    flow: dict[int, np.ndarray] = {
        scalar_output.node_id: np.ones((1, 1, 1, 1), dtype=scalar_output.dtype)
    }
    for node in reversed(tape.nodes):
        g = flow.get(node.out_id)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for tid, gi in zip(node.input_ids, input_grads):
            if gi is None:
                continue
            if tid in flow:
                flow[tid] = flow[tid] + gi
            else:
                flow[tid] = gi

    for tid, g in flow.items():
        t = tape.tensor_for(tid)
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def _as_scalar(value) -> float:
    if isinstance(value, Tensor4):
        return value.item()
    return float(value)


def finite_difference_grad(f, x: Tensor4, eps: float) -> Tensor4:
    """Central-difference estimate of d f(x) / dx, element by element.

    ``f`` must be a deterministic tensor-to-scalar function; it is re-run
    with each element of ``x`` nudged by +/- eps.  This is the independent
    oracle every analytic backward rule in the package is checked against.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _as_scalar(f(x))
        flat[i] = orig - eps
        fm = _as_scalar(f(x))
        flat[i] = orig
        out_flat[i] = (fp - fm) / (2.0 * eps)
    return Tensor4(out)


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic


def _check_same_shape(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in zip("nchw", zip(a.shape, b.shape)):
            if da != db:
                raise ShapeError(f"{op}: axis {axis} differs ({da} vs {db})")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "add")
    out = Tensor4(a.data + b.data)
    return record_op("add", out, (a, b), lambda g: (g, g))


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "sub")
    out = Tensor4(a.data - b.data)
    return record_op("sub", out, (a, b), lambda g: (g, -g))


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = Tensor4(ad * bd)
    return record_op("mul", out, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = Tensor4(ad / bd)
    return record_op("div", out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def add_scalar(x: Tensor4, s: float) -> Tensor4:
    out = Tensor4(x.data + x.dtype.type(s))
    return record_op("add_scalar", out, (x,), lambda g: (g,))


def mul_scalar(x: Tensor4, s: float) -> Tensor4:
    sv = x.dtype.type(s)
    out = Tensor4(x.data * sv)
    return record_op("mul_scalar", out, (x,), lambda g: (g * sv,))


def absval(x: Tensor4) -> Tensor4:
    sign = np.sign(x.data)
    out = Tensor4(np.abs(x.data))
    return record_op("abs", out, (x,), lambda g: (g * sign,))


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Stack b's channels after a's; backward splits the gradient at a.c."""
    for axis, ia, ib in (("n", a.n, b.n), ("h", a.h, b.h), ("w", a.w, b.w)):
        if ia != ib:
            raise ShapeError(f"concat_channels: axis {axis} differs ({ia} vs {ib})")
    split = a.c
    out = Tensor4(np.concatenate((a.data, b.data), axis=1))
    return record_op(
        "concat_channels", out, (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def split_channels(t: Tensor4, c: int) -> tuple[Tensor4, Tensor4]:
    """Inverse of concat_channels on the value level (no tape recording)."""
    if not 0 < c < t.c:
        raise ShapeError(f"split point {c} outside (0, {t.c})")
    return Tensor4(t.data[:, :c].copy()), Tensor4(t.data[:, c:].copy())


def mul_channel_scale(x: Tensor4, s: Tensor4) -> Tensor4:
    """x scaled per (sample, channel); s has shape (n, c, 1, 1)."""
    if s.shape != (x.n, x.c, 1, 1):
        raise ShapeError(f"mul_channel_scale: scale shape {s.shape} != {(x.n, x.c, 1, 1)}")
    xd, sd = x.data, s.data
    out = Tensor4(xd * sd)
    return record_op(
        "mul_channel_scale", out, (x, s),
        lambda g: (g * sd, (g * xd).sum(axis=(2, 3), keepdims=True)),
    )


def mul_spatial_scale(x: Tensor4, s: Tensor4) -> Tensor4:
    """x scaled per (sample, pixel); s has shape (n, 1, h, w)."""
    if s.shape != (x.n, 1, x.h, x.w):
        raise ShapeError(f"mul_spatial_scale: scale shape {s.shape} != {(x.n, 1, x.h, x.w)}")
    xd, sd = x.data, s.data
    out = Tensor4(xd * sd)
    return record_op(
        "mul_spatial_scale", out, (x, s),
        lambda g: (g * sd, (g * xd).sum(axis=1, keepdims=True)),
    )


def sum_all(x: Tensor4) -> Tensor4:
    shape = x.shape
    out = Tensor4(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1))
    return record_op("sum_all", out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(x: Tensor4) -> Tensor4:
    shape = x.shape
    inv_n = 1.0 / x.data.size
    out = Tensor4(x.data.mean(dtype=x.dtype).reshape(1, 1, 1, 1))
    return record_op(
        "mean_all", out, (x,),
        lambda g: ((np.broadcast_to(g.reshape(()), shape) * inv_n).astype(x.dtype, copy=False),),
    )


# ---------------------------------------------------------------------------
# fixture dump format, for cross-checking tensors between builds
#
# layout: magic "DFT1", u32 rank (always 4), four u32 dims, then the raw
# little-endian floats.  Element width (4 or 8 bytes) is implied by the
# payload size.

_FIXTURE_MAGIC = b"DFT1"


def save_fixture(t: Tensor4, path) -> None:
    dims = t.shape
    payload = t.data.astype("<f4" if t.dtype == np.float32 else "<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(_FIXTURE_MAGIC)
        fh.write(struct.pack("<I", 4))
        fh.write(struct.pack("<4I", *dims))
        fh.write(payload)


def load_fixture(path) -> Tensor4:
    raw = Path(path).read_bytes()
    if raw[:4] != _FIXTURE_MAGIC:
        raise ValueError(f"{path}: not a DFT1 fixture (bad magic {raw[:4]!r})")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank != 4:
        raise ValueError(f"{path}: unsupported rank {rank}")
    dims = struct.unpack_from("<4I", raw, 8)
    count = int(np.prod(dims))
    payload = raw[24:]
    if len(payload) == 4 * count:
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    elif len(payload) == 8 * count:
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    else:
        raise ValueError(f"{path}: payload size {len(payload)} does not match dims {dims}")
    return Tensor4(arr.reshape(dims))
