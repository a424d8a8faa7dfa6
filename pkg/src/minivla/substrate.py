"""Dense float32 compute substrate with eager dispatch and capture/replay.

Every operation is an :class:`OpCommand` that names its input and output
buffers by id. ``dispatch`` runs one command eagerly and pays the per-command
bookkeeping (id resolution, shape inference, validation). Between
``begin_capture`` and ``end_capture`` the dispatched commands are also
recorded into an :class:`ExecGraph`; ``replay`` re-executes a recorded graph
as a single issue, skipping the per-command bookkeeping.

Matrix products run through one of two kernels. ``"blas"`` (the default)
hands C-contiguous float32 operands to ``np.matmul``; the reduction order is
whatever the BLAS kernel picks for that shape, which is fixed for a given
shape on a given machine, so two runs issuing identical shapes agree bit for
bit. ``"ordered"`` evaluates an elementwise product with the reduction axis
last followed by numpy's pairwise sum, so each output element depends only on
its two input vectors regardless of layout. It is slower and serves as a
reference.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

__all__ = [
    "OP_KINDS",
    "Buffer",
    "OpCommand",
    "ExecGraph",
    "DispatchStats",
    "Substrate",
    "SubstrateError",
    "UnknownBufferError",
    "ShapeMismatchError",
    "CaptureError",
    "StaleGraphError",
    "infer_shape",
    "MATMUL_KERNELS",
]

OP_KINDS = frozenset(
    {
        "matmul",
        "add",
        "scale",
        "softmax",
        "layernorm",
        "gelu",
        "copy",
        "write_slice",
        "read_slice",
        "embed_lookup",
        "concat",
        "permute",
        "sinusoid",
    }
)

# Upper bound on the element count of one matmul product tile.
_MATMUL_TILE_ELEMENTS = 1 << 21


class SubstrateError(RuntimeError):
    pass


class UnknownBufferError(SubstrateError):
    pass


class ShapeMismatchError(SubstrateError):
    pass


class CaptureError(SubstrateError):
    pass


class StaleGraphError(SubstrateError):
    pass


Shape = tuple[int, ...]


@dataclass
class Buffer:
    id: int
    shape: Shape
    data: np.ndarray
    generation: int

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)


@dataclass(frozen=True)
class OpCommand:
    kind: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class ExecGraph:
    commands: tuple[OpCommand, ...]
    # (buffer id, generation, shape) for every buffer the commands touch
    bound_buffers: tuple[tuple[int, int, Shape], ...]
    capture_iteration: int | None = None

    def __len__(self) -> int:
        return len(self.commands)


@dataclass(frozen=True)
class DispatchStats:
    dispatch_count: int = 0
    replay_count: int = 0
    alloc_count: int = 0
    bytes_allocated: int = 0

    def __sub__(self, other: DispatchStats) -> DispatchStats:
        return DispatchStats(
            self.dispatch_count - other.dispatch_count,
            self.replay_count - other.replay_count,
            self.alloc_count - other.alloc_count,
            self.bytes_allocated - other.bytes_allocated,
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "dispatch_count": self.dispatch_count,
            "replay_count": self.replay_count,
            "alloc_count": self.alloc_count,
            "bytes_allocated": self.bytes_allocated,
        }


# ---------------------------------------------------------------------------
# shape rules


def _window_slices(shape: Shape, window) -> tuple[slice, ...]:
    if window is None:
        return tuple(slice(None) for _ in shape)
    if len(window) != len(shape):
        raise ShapeMismatchError(f"window rank {len(window)} != buffer rank {len(shape)}")
    out = []
    for dim, w in zip(shape, window):
        if w is None:
            out.append(slice(None))
            continue
        start, stop = w
        if not (0 <= start <= stop <= dim):
            raise ShapeMismatchError(f"window {w} out of range for dim {dim}")
        out.append(slice(start, stop))
    return tuple(out)


def _window_shape(shape: Shape, window) -> Shape:
    sl = _window_slices(shape, window)
    return tuple(len(range(*s.indices(d))) for s, d in zip(sl, shape))


def _broadcast(*shapes: Shape) -> Shape:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from None


def infer_shape(kind: str, shapes: Sequence[Shape], attrs: dict[str, Any]) -> Shape:
    """Output shape of ``kind`` applied to inputs of ``shapes``."""
    if kind not in OP_KINDS:
        raise SubstrateError(f"unknown op kind {kind!r}")
    arity = {
        "matmul": 2, "add": 2, "scale": 1, "softmax": 1, "layernorm": 3,
        "gelu": 1, "copy": 1, "write_slice": 2, "read_slice": 1,
        "embed_lookup": 2, "permute": 1, "sinusoid": 1,
    }
    if kind in arity and len(shapes) != arity[kind]:
        raise ShapeMismatchError(f"{kind} takes {arity[kind]} inputs, got {len(shapes)}")

    if kind == "matmul":
        a, b = shapes
        if len(a) < 2 or len(b) < 2:
            raise ShapeMismatchError(f"matmul needs rank >= 2, got {a} and {b}")
        if attrs.get("transpose_b"):
            b = b[:-2] + (b[-1], b[-2])
        if a[-1] != b[-2]:
            raise ShapeMismatchError(f"matmul inner dims differ: {a} x {b}")
        return _broadcast(a[:-2], b[:-2]) + (a[-2], b[-1])
    if kind == "add":
        return _broadcast(shapes[0], shapes[1])
    if kind in ("scale", "softmax", "gelu", "copy"):
        return tuple(shapes[0])
    if kind == "layernorm":
        x, g, b = shapes
        if g != x[-1:] or b != x[-1:]:
            raise ShapeMismatchError(f"layernorm params {g}, {b} do not match {x}")
        return tuple(x)
    if kind == "write_slice":
        dst, src = shapes
        target = _window_shape(dst, attrs.get("window"))
        src = _window_shape(src, attrs.get("src_window"))
        if _broadcast(target, src) != target:
            raise ShapeMismatchError(f"cannot write {src} into window {target}")
        return tuple(dst)
    if kind == "read_slice":
        return _window_shape(shapes[0], attrs.get("window"))
    if kind == "embed_lookup":
        table, ids = shapes
        if len(table) != 2:
            raise ShapeMismatchError(f"embedding table must be 2-D, got {table}")
        return tuple(ids) + (table[1],)
    if kind == "concat":
        if not shapes:
            raise ShapeMismatchError("concat of nothing")
        axis = attrs.get("axis", 0)
        ref = list(shapes[0])
        ax = axis % len(ref)
        total = 0
        for s in shapes:
            if len(s) != len(ref) or any(d != r for i, (d, r) in enumerate(zip(s, ref)) if i != ax):
                raise ShapeMismatchError(f"concat shapes disagree: {shapes}")
            total += s[ax]
        ref[ax] = total
        return tuple(ref)
    if kind == "permute":
        shape = _window_shape(shapes[0], attrs.get("window"))
        pre = tuple(attrs.get("shape", shape))
        if math.prod(pre) != math.prod(shape):
            raise ShapeMismatchError(f"cannot reshape {shape} to {pre}")
        axes = attrs.get("axes", tuple(range(len(pre))))
        if sorted(axes) != list(range(len(pre))):
            raise ShapeMismatchError(f"bad axes {axes} for rank {len(pre)}")
        moved = tuple(pre[a] for a in axes)
        post = tuple(attrs.get("out_shape", moved))
        if math.prod(post) != math.prod(moved):
            raise ShapeMismatchError(f"cannot reshape {moved} to {post}")
        return post
    if kind == "sinusoid":
        x = shapes[0]
        nf = len(attrs["freqs"])
        return tuple(x[:-1]) + (x[-1] * 2 * nf,)
    raise AssertionError(kind)


# ---------------------------------------------------------------------------
# kernels


MATMUL_KERNELS = ("blas", "ordered")


def _matmul_blas(a: np.ndarray, b: np.ndarray, transpose_b: bool) -> np.ndarray:
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    return np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _matmul_ordered(a: np.ndarray, b: np.ndarray, transpose_b: bool) -> np.ndarray:
    bt = b if transpose_b else np.swapaxes(b, -1, -2)  # [..., N, K]
    batch = tuple(np.broadcast_shapes(a.shape[:-2], bt.shape[:-2]))
    m, k = a.shape[-2:]
    n = bt.shape[-2]
    a = np.broadcast_to(a, batch + (m, k))
    bt = np.broadcast_to(bt, batch + (n, k))
    out = np.empty(batch + (m, n), dtype=np.float32)
    per_row = max(1, math.prod(batch) * n * k)
    step = max(1, _MATMUL_TILE_ELEMENTS // per_row)
    for m0 in range(0, m, step):
        tile = np.multiply(a[..., m0:m0 + step, None, :], bt[..., None, :, :])
        np.add.reduce(tile, axis=-1, out=out[..., m0:m0 + step, :])
    return out


def _softmax(x: np.ndarray, causal_offset: int | None) -> np.ndarray:
    x = np.array(x, dtype=np.float32, copy=True)
    if causal_offset is not None:
        rows, cols = x.shape[-2:]
        mask = np.arange(cols)[None, :] > (np.arange(rows)[:, None] + causal_offset)
        x[..., mask] = -np.inf
    x -= np.max(x, axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= np.add.reduce(x, axis=-1, keepdims=True)
    return x


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mu = np.add.reduce(x, axis=-1, keepdims=True) / np.float32(x.shape[-1])
    d = x - mu
    var = np.add.reduce(d * d, axis=-1, keepdims=True) / np.float32(x.shape[-1])
    return (d / np.sqrt(var + np.float32(eps))) * g + b


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))


def _gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + np.float32(0.044715) * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


def _sinusoid(x: np.ndarray, freqs) -> np.ndarray:
    f = np.asarray(freqs, dtype=np.float32)
    ang = x[..., :, None] * f  # [..., C, F]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # [..., C, 2F]
    return out.reshape(x.shape[:-1] + (-1,))


def _permute(x: np.ndarray, attrs: dict[str, Any]) -> np.ndarray:
    x = x[_window_slices(x.shape, attrs.get("window"))]
    if "shape" in attrs:
        x = x.reshape(attrs["shape"])
    if "axes" in attrs:
        x = x.transpose(attrs["axes"])
    if "out_shape" in attrs:
        x = x.reshape(attrs["out_shape"])
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------------


class Substrate:
    """Owns buffers and executes commands against them.

    A substrate is single-owner: one logical stream dispatches, captures and
    replays at a time. ``dispatch_delay_ns`` adds a synthetic busy-wait to
    each eager dispatch to emulate launch overhead in demonstrations.
    """

    def __init__(self, dispatch_delay_ns: int = 0, matmul_kernel: str = "blas"):
        if matmul_kernel not in MATMUL_KERNELS:
            raise ValueError(f"unknown matmul kernel {matmul_kernel!r}")
        self.dispatch_delay_ns = int(dispatch_delay_ns)
        self.matmul_kernel = matmul_kernel
        self._matmul = _matmul_blas if matmul_kernel == "blas" else _matmul_ordered
        self._buffers: dict[int, Buffer] = {}
        self._next_id = 1
        self._generation = 0
        self._dispatch_count = 0
        self._replay_count = 0
        self._alloc_count = 0
        self._bytes_allocated = 0
        self._capture: list[OpCommand] | None = None
        self._capture_token: int | None = None
        self._capture_iteration: int | None = None
        self._tokens = 0

    # -- memory -----------------------------------------------------------

    def alloc(self, shape: Sequence[int]) -> Buffer:
        if self._capture is not None:
            raise CaptureError("allocation during capture")
        shape = tuple(int(d) for d in shape)
        if any(d < 0 for d in shape):
            raise ShapeMismatchError(f"negative dimension in {shape}")
        self._generation += 1
        buf = Buffer(self._next_id, shape, np.zeros(shape, dtype=np.float32), self._generation)
        self._next_id += 1
        self._buffers[buf.id] = buf
        self._alloc_count += 1
        self._bytes_allocated += buf.nbytes
        return buf

    def free(self, buffer_id: int) -> None:
        if buffer_id not in self._buffers:
            raise UnknownBufferError(f"free of unknown buffer {buffer_id}")
        del self._buffers[buffer_id]

    def stats(self) -> DispatchStats:
        return DispatchStats(
            self._dispatch_count, self._replay_count, self._alloc_count, self._bytes_allocated
        )

    def _get(self, buffer_id: int) -> Buffer:
        try:
            return self._buffers[buffer_id]
        except KeyError:
            raise UnknownBufferError(f"unknown buffer id {buffer_id}") from None

    def exists(self, buffer_id: int) -> bool:
        return buffer_id in self._buffers

    def shape(self, buffer_id: int) -> Shape:
        return self._get(buffer_id).shape

    def buffer(self, buffer_id: int) -> Buffer:
        return self._get(buffer_id)

    def live_buffers(self) -> int:
        return len(self._buffers)

    # -- host transfer ------------------------------------------------------

    def write(self, buffer_id: int, values, window=None) -> None:
        """Host-side write into a buffer (or a window of it). Not a dispatch."""
        buf = self._get(buffer_id)
        sl = _window_slices(buf.shape, window)
        target = buf.data[sl]
        values = np.asarray(values, dtype=np.float32)
        if _broadcast(target.shape, values.shape) != target.shape:
            raise ShapeMismatchError(f"cannot write {values.shape} into {target.shape}")
        buf.data[sl] = values

    def read(self, buffer_id: int, window=None) -> np.ndarray:
        buf = self._get(buffer_id)
        return np.array(buf.data[_window_slices(buf.shape, window)], copy=True)

    def view(self, buffer_id: int, window=None) -> np.ndarray:
        """Read-only view of a buffer's contents; no copy."""
        buf = self._get(buffer_id)
        v = buf.data[_window_slices(buf.shape, window)].view()
        v.flags.writeable = False
        return v

    # -- execution ----------------------------------------------------------

    def dispatch(self, cmd: OpCommand) -> int:
        ins = [self._get(i) for i in cmd.inputs]
        out = self._get(cmd.output)
        expected = infer_shape(cmd.kind, [b.shape for b in ins], cmd.attrs)
        if expected != out.shape:
            raise ShapeMismatchError(
                f"{cmd.kind}: output buffer {cmd.output} has shape {out.shape}, expected {expected}"
            )
        if self.dispatch_delay_ns:
            deadline = time.perf_counter_ns() + self.dispatch_delay_ns
            while time.perf_counter_ns() < deadline:
                pass
        self._execute(cmd, [b.data for b in ins], out.data)
        self._dispatch_count += 1
        if self._capture is not None:
            self._capture.append(cmd)
        return cmd.output

    def _execute(self, cmd: OpCommand, ins: list[np.ndarray], out: np.ndarray) -> None:
        kind, attrs = cmd.kind, cmd.attrs
        if kind == "matmul":
            out[...] = self._matmul(ins[0], ins[1], bool(attrs.get("transpose_b")))
        elif kind == "add":
            np.add(ins[0], ins[1], out=out)
        elif kind == "scale":
            np.multiply(ins[0], np.float32(attrs["factor"]), out=out)
        elif kind == "softmax":
            out[...] = _softmax(ins[0], attrs.get("causal_offset"))
        elif kind == "layernorm":
            out[...] = _layernorm(ins[0], ins[1], ins[2], attrs.get("eps", 1e-5))
        elif kind == "gelu":
            out[...] = _gelu(ins[0])
        elif kind == "copy":
            out[...] = ins[0]
        elif kind == "write_slice":
            # out is the destination buffer (same id as ins[0])
            src = ins[1][_window_slices(ins[1].shape, attrs.get("src_window"))]
            out[_window_slices(out.shape, attrs.get("window"))] = src
        elif kind == "read_slice":
            out[...] = ins[0][_window_slices(ins[0].shape, attrs.get("window"))]
        elif kind == "embed_lookup":
            table, ids = ins
            idx = ids.astype(np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
                raise ShapeMismatchError("embedding id out of range")
            out[...] = table[idx]
        elif kind == "concat":
            out[...] = np.concatenate(ins, axis=attrs.get("axis", 0))
        elif kind == "permute":
            out[...] = _permute(ins[0], attrs)
        elif kind == "sinusoid":
            out[...] = _sinusoid(ins[0], attrs["freqs"])
        else:  # pragma: no cover - guarded by infer_shape
            raise SubstrateError(kind)

    # -- capture / replay ---------------------------------------------------

    @property
    def capturing(self) -> bool:
        return self._capture is not None

    def begin_capture(self, iteration: int | None = None) -> int:
        if self._capture is not None:
            raise CaptureError("nested capture")
        self._tokens += 1
        self._capture = []
        self._capture_token = self._tokens
        self._capture_iteration = iteration
        return self._tokens

    def end_capture(self, token: int) -> ExecGraph:
        if self._capture is None or token != self._capture_token:
            raise CaptureError("end_capture without matching begin_capture")
        commands = tuple(self._capture)
        self._capture = None
        self._capture_token = None
        seen: dict[int, tuple[int, int, Shape]] = {}
        for cmd in commands:
            for bid in (*cmd.inputs, cmd.output):
                if bid not in seen:
                    buf = self._get(bid)
                    seen[bid] = (bid, buf.generation, buf.shape)
        return ExecGraph(commands, tuple(seen.values()), self._capture_iteration)

    def replay(self, graph: ExecGraph) -> None:
        if self._capture is not None:
            raise CaptureError("replay during capture")
        for bid, gen, shape in graph.bound_buffers:
            buf = self._buffers.get(bid)
            if buf is None or buf.generation != gen or buf.shape != shape:
                raise StaleGraphError(f"stale graph: bound buffer {bid} is dead or resized")
        bufs = self._buffers
        for cmd in graph.commands:
            self._execute(cmd, [bufs[i].data for i in cmd.inputs], bufs[cmd.output].data)
        self._dispatch_count += 1
        self._replay_count += 1
