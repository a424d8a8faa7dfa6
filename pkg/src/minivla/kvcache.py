"""Per-block key/value storage with dynamic and static management.

Keys and values of one block live together in a single buffer shaped
``[2, batch, tokens, kv_dim]`` (index 0 keys, index 1 values). The first
``reasoning_len`` tokens are the reasoning region, filled during prefill and
decode; the next ``action_len`` tokens are the action region, rewritten on
every diffusion iteration.

``dynamic``
    Every update allocates a fresh buffer and copies the previous content
    into it (copy-and-reallocate). During action generation each block gets
    a new ``reasoning_len + action_len`` buffer per iteration.
``static``
    One buffer per block is allocated up front with capacity for the whole
    run. Updates are in-place writes at a per-block cursor, so no buffer is
    allocated after initialization and buffer ids never change.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .substrate import OpCommand, Substrate

__all__ = [
    "KvLayout",
    "KvView",
    "KvCache",
    "KvError",
    "CapacityExceededError",
    "replicate_for_batch",
    "content_fingerprint",
    "footprint_bytes",
    "layout_footprint_bytes",
    "FULL_SCALE_LAYOUT",
    "STRATEGIES",
]

STRATEGIES = ("dynamic", "static")


class KvError(RuntimeError):
    pass


class CapacityExceededError(KvError):
    pass


@dataclass(frozen=True)
class KvLayout:
    num_blocks: int
    batch: int
    kv_dim: int
    reasoning_len: int = 0
    action_len: int = 64
    dtype_bytes: int = 4

    def __post_init__(self):
        if self.num_blocks < 1 or self.batch < 1 or self.kv_dim < 1 or self.action_len < 1:
            raise ValueError(f"invalid KV layout {self}")

    def bytes_per_token(self) -> int:
        """Bytes of one token's keys plus values across every block and lane."""
        return self.num_blocks * self.batch * 2 * self.kv_dim * self.dtype_bytes


def layout_footprint_bytes(layout: KvLayout, reasoning_tokens: int | None = None,
                           action_tokens: int = 0) -> int:
    if reasoning_tokens is None:
        reasoning_tokens = layout.reasoning_len
    return layout.bytes_per_token() * (reasoning_tokens + action_tokens)


# Sizing of the full-scale model: 36 decoder blocks, 8 KV heads of width 128
# stored in bfloat16, and a 3061-token prompt followed by 20 CoT tokens.
FULL_SCALE_LAYOUT = KvLayout(num_blocks=36, batch=1, kv_dim=1024, reasoning_len=3081,
                              action_len=64, dtype_bytes=2)


@dataclass(frozen=True)
class KvView:
    """Handle on the attendable keys/values of one block.

    ``buffer_id`` is the packed ``[2, batch, capacity, kv_dim]`` buffer and
    ``tokens`` the number of leading tokens that are visible.
    """

    substrate: Substrate
    buffer_id: int
    tokens: int

    @property
    def keys(self) -> np.ndarray:
        return self.substrate.view(self.buffer_id, self._window(0))[0]

    @property
    def values(self) -> np.ndarray:
        return self.substrate.view(self.buffer_id, self._window(1))[0]

    def _window(self, which: int):
        return [(which, which + 1), None, (0, self.tokens), None]

    def __len__(self) -> int:
        return self.tokens


class KvCache:
    def __init__(self, substrate: Substrate, layout: KvLayout, strategy: str = "dynamic",
                 reasoning_capacity: int | None = None):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown KV strategy {strategy!r}")
        if layout.reasoning_len != 0:
            layout = replace(layout, reasoning_len=0)
        self.substrate = substrate
        self.layout = layout
        self.strategy = strategy
        self.reasoning_len = 0
        self.sealed = False
        self.kv_alloc_count = 0
        self._block_len = [0] * layout.num_blocks
        self._action_written = [False] * layout.num_blocks
        self._any_action = False
        self.iteration = 0
        if strategy == "static":
            if reasoning_capacity is None or reasoning_capacity < 1:
                raise ValueError("static strategy needs a positive reasoning_capacity")
            self.reasoning_capacity = int(reasoning_capacity)
            cap = self.reasoning_capacity + layout.action_len
            self._buffers = [self._alloc(cap) for _ in range(layout.num_blocks)]
            self.write_cursor = [0] * layout.num_blocks
            self._reasoning_buffers = self._buffers
        else:
            self.reasoning_capacity = None
            self._reasoning_buffers: list[int | None] = [None] * layout.num_blocks
            self._buffers: list[int | None] = [None] * layout.num_blocks
            self.write_cursor = None

    # -- helpers --------------------------------------------------------------

    def _alloc(self, tokens: int) -> int:
        L = self.layout
        self.kv_alloc_count += 1
        return self.substrate.alloc((2, L.batch, tokens, L.kv_dim)).id

    def _check_block(self, block: int) -> None:
        if not 0 <= block < self.layout.num_blocks:
            raise IndexError(f"block {block} out of range")

    def _put(self, dst: int, window, src) -> None:
        """Write ``src`` (buffer id or host array) into ``dst[window]``."""
        if isinstance(src, (int, np.integer)):
            self.substrate.dispatch(OpCommand("write_slice", (dst, int(src)), dst, {"window": window}))
        else:
            self.substrate.write(dst, src, window)

    def _tokens_of(self, src) -> int:
        shape = self.substrate.shape(int(src)) if isinstance(src, (int, np.integer)) else np.shape(src)
        if len(shape) != 3 or shape[0] != self.layout.batch or shape[2] != self.layout.kv_dim:
            raise KvError(f"expected [batch={self.layout.batch}, tokens, {self.layout.kv_dim}], got {shape}")
        return shape[1]

    def _kv_window(self, which: int, start: int, stop: int):
        return [(which, which + 1), None, (start, stop), None]

    # -- reasoning ------------------------------------------------------------

    def append_reasoning(self, block: int, keys, values) -> None:
        """Append token-major keys/values ``[batch, t, kv_dim]`` to a block."""
        self._check_block(block)
        if self.sealed:
            raise KvError("reasoning region is sealed")
        t = self._tokens_of(keys)
        if self._tokens_of(values) != t:
            raise KvError("keys and values cover different token counts")
        if t < 1:
            raise KvError("append of zero tokens")
        old = self._block_len[block]
        new = old + t
        if self.strategy == "static":
            if new > self.reasoning_capacity:
                raise CapacityExceededError(
                    f"capacity exceeded: {new} tokens > reasoning capacity {self.reasoning_capacity}"
                )
            dst = self._buffers[block]
        else:
            dst = self._alloc(new)
            prev = self._buffers[block]
            if prev is not None:
                self._put(dst, [None, None, (0, old), None], prev)
                self.substrate.free(prev)
            self._buffers[block] = dst
            self._reasoning_buffers[block] = dst
        self._put(dst, self._kv_window(0, old, new), keys)
        self._put(dst, self._kv_window(1, old, new), values)
        self._block_len[block] = new
        if self.strategy == "static":
            self.write_cursor[block] = new
        self.reasoning_len = max(self._block_len)

    def block_len(self, block: int) -> int:
        return self._block_len[block]

    def reasoning_view(self, block: int) -> KvView:
        self._check_block(block)
        return KvView(self.substrate, self._reasoning_buffers[block], self._block_len[block])

    def seal(self) -> None:
        if self.sealed:
            return
        if len(set(self._block_len)) != 1 or self._block_len[0] < 1:
            raise KvError(f"cannot seal uneven or empty reasoning region {self._block_len}")
        self.sealed = True
        self.layout = replace(self.layout, reasoning_len=self.reasoning_len)

    # -- action region ----------------------------------------------------------

    def begin_iteration(self) -> None:
        """Start a diffusion iteration: cursors return to the action region start."""
        if not self.sealed:
            raise KvError("begin_iteration before reasoning is sealed")
        self.iteration += 1
        self._action_written = [False] * self.layout.num_blocks
        if self.strategy == "static":
            self.write_cursor = [self.reasoning_len] * self.layout.num_blocks

    def action_window(self, which: int):
        """Window of the static action region for keys (0) or values (1)."""
        R = self.reasoning_len
        return self._kv_window(which, R, R + self.layout.action_len)

    def write_action_kv(self, block: int, iteration: int, keys, values) -> None:
        self._check_block(block)
        if not self.sealed:
            raise KvError("write_action_kv before reasoning is sealed")
        A = self.layout.action_len
        if self._tokens_of(keys) != A or self._tokens_of(values) != A:
            raise KvError(f"action KV must cover exactly {A} tokens")
        R = self.reasoning_len
        if self.strategy == "static":
            if self.write_cursor[block] != R:
                raise KvError("write cursor is not at the action region start")
            dst = self._buffers[block]
            self._put(dst, self._kv_window(0, R, R + A), keys)
            self._put(dst, self._kv_window(1, R, R + A), values)
            self.write_cursor[block] = R + A
        else:
            dst = self._alloc(R + A)
            self._put(dst, [None, None, (0, R), None], self._reasoning_buffers[block])
            self._put(dst, self._kv_window(0, R, R + A), keys)
            self._put(dst, self._kv_window(1, R, R + A), values)
            prev = self._buffers[block]
            if prev is not None and prev != self._reasoning_buffers[block]:
                self.substrate.free(prev)
            self._buffers[block] = dst
        self._action_written[block] = True
        self._any_action = True

    def mark_action_written(self) -> None:
        """Record that a replayed graph rewrote every block's action region."""
        if self.strategy != "static":
            raise KvError("only static caches can be written by graph replay")
        self._action_written = [True] * self.layout.num_blocks
        self.write_cursor = [self.reasoning_len + self.layout.action_len] * self.layout.num_blocks
        self._any_action = True

    def attend_view(self, block: int) -> KvView:
        self._check_block(block)
        if not self.sealed:
            raise KvError("attend_view before reasoning is sealed")
        if not self._action_written[block]:
            raise KvError(f"action region of block {block} not written this iteration")
        return KvView(self.substrate, self._buffers[block], self.reasoning_len + self.layout.action_len)

    def buffer_ids(self) -> list[int | None]:
        return list(self._buffers)

    # -- accounting -------------------------------------------------------------

    def footprint_bytes(self) -> int:
        action = self.layout.action_len if self._any_action else 0
        return layout_footprint_bytes(self.layout, self.reasoning_len, action)

    def logical_blocks(self, include_action: bool = True):
        """Yield ``(keys, values)`` per block over the logical token range."""
        R = self.reasoning_len
        A = self.layout.action_len if (include_action and self._any_action) else 0
        for b in range(self.layout.num_blocks):
            if self._block_len[b] == 0:
                continue
            if A:
                bid = self._buffers[b]
                n = R + A
            else:
                bid = self._reasoning_buffers[b]
                n = self._block_len[b]
            data = self.substrate.view(bid, [None, None, (0, n), None])
            yield data[0], data[1]

    def release(self) -> None:
        freed = set()
        for bid in (*self._buffers, *self._reasoning_buffers):
            if bid is not None and bid not in freed and self.substrate.exists(bid):
                self.substrate.free(bid)
                freed.add(bid)
        self._buffers = [None] * self.layout.num_blocks
        self._reasoning_buffers = [None] * self.layout.num_blocks


def footprint_bytes(cache: KvCache) -> int:
    return cache.footprint_bytes()


def content_fingerprint(cache: KvCache, include_action: bool = True) -> str:
    """Digest of the logical (block, lane, token, channel) content.

    Independent of strategy and buffer capacity: only the visible tokens are
    hashed, each as a contiguous float32 array.
    """
    h = hashlib.sha256()
    for b, (k, v) in enumerate(cache.logical_blocks(include_action)):
        h.update(f"block{b}:{k.shape}".encode())
        h.update(np.ascontiguousarray(k, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(v, dtype=np.float32).tobytes())
    return h.hexdigest()


def lane_fingerprints(cache: KvCache) -> list[str]:
    """Per-lane digest of the reasoning region."""
    out = []
    for lane in range(cache.layout.batch):
        h = hashlib.sha256()
        for k, v in cache.logical_blocks(include_action=False):
            h.update(np.ascontiguousarray(k[lane]).tobytes())
            h.update(np.ascontiguousarray(v[lane]).tobytes())
        out.append(h.hexdigest())
    return out


def replicate_for_batch(cache: KvCache, n: int) -> KvCache:
    """Physically duplicate a sealed batch-1 cache into ``n`` lanes."""
    if n < 1:
        raise ValueError("replication count must be >= 1")
    if not cache.sealed:
        raise KvError("replicate_for_batch needs a sealed cache")
    if cache.layout.batch != 1:
        raise KvError("replicate_for_batch expects a batch-1 cache")
    R = cache.reasoning_len
    layout = replace(cache.layout, batch=n, reasoning_len=0)
    out = KvCache(cache.substrate, layout, cache.strategy,
                  reasoning_capacity=cache.reasoning_capacity)
    for b in range(layout.num_blocks):
        src = cache.reasoning_view(b).buffer_id
        if out.strategy == "static":
            dst = out._buffers[b]
        else:
            dst = out._alloc(R)
            out._buffers[b] = dst
            out._reasoning_buffers[b] = dst
        window = [None, None, (0, R), None]
        cache.substrate.dispatch(OpCommand(
            "write_slice", (dst, src), dst, {"window": window, "src_window": window}))
        out._block_len[b] = R
        if out.strategy == "static":
            out.write_cursor[b] = R
    out.reasoning_len = R
    out.seal()
    return out

