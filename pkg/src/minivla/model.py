"""Seeded toy transformer stacks that run on a :class:`~minivla.substrate.Substrate`.

Three stacks share one pre-LayerNorm block design:

* a vision encoder over image patches (full attention within each frame),
* a language decoder with causal attention whose keys/values go to a
  :class:`~minivla.kvcache.KvCache` during prefill and decode,
* an action decoder whose queries attend, in one parallel pass, over the
  reasoning KV plus the action KV it writes for the current iteration.

Weights are drawn uniformly from [-0.05, 0.05] with a seeded generator; the
point is the runtime structure, not model quality.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .kvcache import KvCache
from .substrate import OpCommand, Substrate, infer_shape

__all__ = [
    "ModelConfig",
    "Model",
    "BoundModel",
    "Program",
    "IterationStats",
    "sample_token",
    "sinusoidal_table",
    "EXECUTORS",
]

EXECUTORS = ("eager", "graph")
INIT_RANGE = 0.05


@dataclass(frozen=True)
class ModelConfig:
    vision_blocks: int = 4
    decoder_blocks: int = 6
    hidden_dim: int = 64
    action_hidden_dim: int = 32
    kv_dim: int = 32
    heads: int = 4
    vocab_size: int = 512
    patch_size: int = 14
    action_steps: int = 64
    diffusion_iters: int = 10
    update_scale: float = 0.1
    max_new_tokens: int = 256
    weight_seed: int = 0
    mlp_ratio: int = 4
    action_freqs: int = 8
    traj_bins: int = 32
    max_positions: int = 4096

    def __post_init__(self):
        if self.update_scale <= 0:
            raise ValueError("update_scale must be positive")
        if self.diffusion_iters < 1:
            raise ValueError("diffusion_iters must be >= 1")
        for name in ("hidden_dim", "kv_dim", "action_hidden_dim"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name} must be divisible by heads")
        if self.vocab_size <= 3 * self.traj_bins + 4:
            raise ValueError("vocab_size too small")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")

    @property
    def traj_base_id(self) -> int:
        return self.vocab_size - 3 * self.traj_bins

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((n, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out.astype(np.float32)


def _block_params(prefix: str, width: int, attn: int, mlp: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (prefix + "ln1_g", (width,)), (prefix + "ln1_b", (width,)),
        (prefix + "wq", (width, attn)), (prefix + "bq", (attn,)),
        (prefix + "wk", (width, attn)), (prefix + "bk", (attn,)),
        (prefix + "wv", (width, attn)), (prefix + "bv", (attn,)),
        (prefix + "wo", (attn, width)), (prefix + "bo", (width,)),
        (prefix + "ln2_g", (width,)), (prefix + "ln2_b", (width,)),
        (prefix + "w1", (width, mlp)), (prefix + "b1", (mlp,)),
        (prefix + "w2", (mlp, width)), (prefix + "b2", (width,)),
    ]


class Model:
    """Immutable weights for all three stacks."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = c = config or ModelConfig()
        H, Ha, r = c.hidden_dim, c.action_hidden_dim, c.mlp_ratio
        patch_in = c.patch_size * c.patch_size * 3
        spec: list[tuple[str, tuple[int, ...]]] = [
            ("vis.patch_w", (patch_in, H)), ("vis.patch_b", (H,)),
        ]
        for i in range(c.vision_blocks):
            spec += _block_params(f"vis.b{i}.", H, H, r * H)
        spec += [("lm.embed", (c.vocab_size, H))]
        for i in range(c.decoder_blocks):
            spec += _block_params(f"lm.b{i}.", H, c.kv_dim, r * H)
        spec += [("lm.lnf_g", (H,)), ("lm.lnf_b", (H,)), ("lm.head", (H, c.vocab_size))]
        spec += [
            ("act.enc_w1", (4 * c.action_freqs, Ha)), ("act.enc_b1", (Ha,)),
            ("act.enc_w2", (Ha, Ha)), ("act.enc_b2", (Ha,)),
        ]
        for i in range(c.decoder_blocks):
            spec += _block_params(f"act.b{i}.", Ha, c.kv_dim, r * Ha)
        spec += [("act.lnf_g", (Ha,)), ("act.lnf_b", (Ha,)),
                 ("act.head_w", (Ha, 2)), ("act.head_b", (2,))]

        rng = np.random.default_rng(c.weight_seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in spec:
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                arr = np.ones(shape, dtype=np.float32)
            elif leaf.endswith("_b") and leaf.startswith("ln"):
                arr = np.zeros(shape, dtype=np.float32)
            else:
                arr = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(np.float32)
            params[name] = arr
        self.params = params

        self.tables = {
            "vis.pos": sinusoidal_table(4096, H),
            "act.pos": sinusoidal_table(c.action_steps, Ha),
            "act.freqs": (2.0 ** np.linspace(-2, 5, c.action_freqs)).astype(np.float32),
        }

    def with_params(self, **overrides: np.ndarray) -> Model:
        """Copy of this model with some parameters replaced (names use dots)."""
        out = Model.__new__(Model)
        out.config = self.config
        out.params = dict(self.params)
        out.tables = self.tables
        for name, value in overrides.items():
            if name not in out.params:
                raise KeyError(name)
            value = np.asarray(value, dtype=np.float32)
            if value.shape != out.params[name].shape:
                raise ValueError(f"{name}: shape {value.shape} != {out.params[name].shape}")
            out.params[name] = value
        return out


class Program:
    """Issues commands into named scratch buffers that persist across calls.

    A slot is reallocated only when the shape it must hold changes, so a
    repeated command sequence with fixed shapes touches the same buffers
    every time.
    """

    def __init__(self, substrate: Substrate):
        self.sub = substrate
        self.slots: dict[str, int] = {}

    def slot(self, name: str, shape) -> int:
        shape = tuple(shape)
        bid = self.slots.get(name)
        if bid is not None and self.sub.exists(bid) and self.sub.shape(bid) == shape:
            return bid
        if bid is not None and self.sub.exists(bid):
            self.sub.free(bid)
        bid = self.sub.alloc(shape).id
        self.slots[name] = bid
        return bid

    def op(self, kind: str, inputs, slot: str, **attrs) -> int:
        shape = infer_shape(kind, [self.sub.shape(i) for i in inputs], attrs)
        out = self.slot(slot, shape)
        return self.sub.dispatch(OpCommand(kind, tuple(inputs), out, attrs))

    def into(self, kind: str, inputs, out: int, **attrs) -> int:
        return self.sub.dispatch(OpCommand(kind, tuple(inputs), out, attrs))

    def upload(self, name: str, array: np.ndarray) -> int:
        bid = self.slot(name, np.shape(array))
        self.sub.write(bid, array)
        return bid

    def release(self, prefix: str = "") -> None:
        for name in [n for n in self.slots if n.startswith(prefix)]:
            bid = self.slots.pop(name)
            if self.sub.exists(bid):
                self.sub.free(bid)


@dataclass
class IterationStats:
    iteration: int
    ms: float
    dispatches: int
    replays: int
    allocs: int
    kv_allocs: int
    mode: str  # eager | capture | replay


KvHook = Callable[[int, int, int], tuple[int, int, int]]


class BoundModel:
    """A model whose weights are resident in one substrate."""

    def __init__(self, model: Model, substrate: Substrate):
        self.model = model
        self.config = model.config
        self.sub = substrate
        self.prog = Program(substrate)
        self.w: dict[str, int] = {}
        for name, arr in model.params.items():
            self.w[name] = self.prog.upload("w:" + name, arr)
        for name, arr in model.tables.items():
            self.w[name] = self.prog.upload("w:" + name, arr)
        self._lm_pos_len = 0

    # -- shared block -------------------------------------------------------

    def _linear(self, x: int, p: str, wname: str, bname: str, slot: str) -> int:
        y = self.prog.op("matmul", [x, self.w[p + wname]], slot + ".mm")
        return self.prog.op("add", [y, self.w[p + bname]], slot)

    def _block(self, x: int, p: str, tag: str, attn_dim: int, kv_hook: KvHook,
               causal: bool) -> int:
        op, W = self.prog.op, self.w
        heads = self.config.heads
        d = attn_dim // heads
        L, T, _ = self.sub.shape(x)
        h = op("layernorm", [x, W[p + "ln1_g"], W[p + "ln1_b"]], tag + ".ln1")
        q = self._linear(h, p, "wq", "bq", tag + ".q")
        k = self._linear(h, p, "wk", "bk", tag + ".k")
        v = self._linear(h, p, "wv", "bv", tag + ".v")
        kh, vh, S = kv_hook(k, v, T)
        qh = op("permute", [q], tag + ".qh", shape=(L, T, heads, d), axes=(0, 2, 1, 3))
        sc = op("matmul", [qh, kh], tag + ".sc", transpose_b=True)
        sc = op("scale", [sc], tag + ".scs", factor=1.0 / math.sqrt(d))
        pr = op("softmax", [sc], tag + ".pr", causal_offset=(S - T) if causal else None)
        ctx = op("matmul", [pr, vh], tag + ".ctx")
        ctx = op("permute", [ctx], tag + ".ctxm", axes=(0, 2, 1, 3), out_shape=(L, T, attn_dim))
        o = self._linear(ctx, p, "wo", "bo", tag + ".o")
        x1 = op("add", [x, o], tag + ".r1")
        h2 = op("layernorm", [x1, W[p + "ln2_g"], W[p + "ln2_b"]], tag + ".ln2")
        m = self._linear(h2, p, "w1", "b1", tag + ".m1")
        m = op("gelu", [m], tag + ".gelu")
        m = self._linear(m, p, "w2", "b2", tag + ".m2")
        return op("add", [x1, m], tag + ".r2")

    def _split_heads(self, src: int, tag: str, L: int, S: int, window=None) -> int:
        heads = self.config.heads
        d = self.config.kv_dim // heads
        attrs = {"shape": (L, S, heads, d), "axes": (0, 2, 1, 3)}
        if window is not None:
            attrs["window"] = window
        return self.prog.op("permute", [src], tag, **attrs)

    def _cache_heads(self, bid: int, tag: str, L: int, S: int) -> tuple[int, int]:
        kh = self._split_heads(bid, tag + ".kh", L, S, [(0, 1), None, (0, S), None])
        vh = self._split_heads(bid, tag + ".vh", L, S, [(1, 2), None, (0, S), None])
        return kh, vh

    # -- vision -------------------------------------------------------------

    def patch_embed(self, patches: np.ndarray) -> int:
        """Project ``[L, F, P, D]`` patches to ``[L*F, P, hidden]`` plus positions."""
        L, F, P, D = patches.shape
        x = self.prog.upload("vis.in", patches.reshape(L * F, P, D))
        x = self._linear(x, "vis.", "patch_w", "patch_b", "vis.proj")
        pos = self.prog.op("read_slice", [self.w["vis.pos"]], "vis.posw",
                           window=[(0, P), None])
        return self.prog.op("add", [x, pos], "vis.x0")

    def encode_patch_tokens(self, x: int, lanes: int) -> int:
        """Run the vision blocks on ``[L*F, P, H]`` tokens; returns ``[L, F*P, H]``."""
        H = self.config.hidden_dim
        heads = self.config.heads
        d = H // heads
        LF, P, _ = self.sub.shape(x)

        def hook(k, v, T):
            kh = self.prog.op("permute", [k], "vis.kh", shape=(LF, T, heads, d), axes=(0, 2, 1, 3))
            vh = self.prog.op("permute", [v], "vis.vh", shape=(LF, T, heads, d), axes=(0, 2, 1, 3))
            return kh, vh, T

        for i in range(self.config.vision_blocks):
            x = self._block(x, f"vis.b{i}.", "vis", H, hook, causal=False)
        return self.prog.op("permute", [x], "vis.out", out_shape=(lanes, LF // lanes * P, H))

    def vision_encode(self, patches: np.ndarray) -> int:
        return self.encode_patch_tokens(self.patch_embed(patches), patches.shape[0])

    # -- language decoder -----------------------------------------------------

    def _lm_pos(self, n: int) -> int:
        if n > self.config.max_positions:
            raise ValueError(f"sequence of {n} tokens exceeds max_positions")
        if n > self._lm_pos_len:
            size = max(n, 512)
            self.w["lm.pos"] = self.prog.upload("w:lm.pos", sinusoidal_table(size, self.config.hidden_dim))
            self._lm_pos_len = size
        return self.w["lm.pos"]

    def embed_tokens(self, ids: np.ndarray, slot: str = "lm.tok") -> int:
        ids_buf = self.prog.upload(slot + ".ids", np.asarray(ids, dtype=np.float32))
        return self.prog.op("embed_lookup", [self.w["lm.embed"], ids_buf], slot)

    def _lm_hook(self, kv: KvCache, block: int, tag: str):
        def hook(k, v, T):
            kv.append_reasoning(block, k, v)
            view = kv.reasoning_view(block)
            L = kv.layout.batch
            kh, vh = self._cache_heads(view.buffer_id, tag, L, view.tokens)
            return kh, vh, view.tokens
        return hook

    def _lm_stack(self, x: int, kv: KvCache, start: int, tag: str) -> np.ndarray:
        L, T, H = self.sub.shape(x)
        pos = self.prog.op("read_slice", [self._lm_pos(start + T)], tag + ".posw",
                           window=[(start, start + T), None])
        x = self.prog.op("add", [x, pos], tag + ".x0")
        for i in range(self.config.decoder_blocks):
            x = self._block(x, f"lm.b{i}.", tag, self.config.kv_dim, self._lm_hook(kv, i, tag), causal=True)
        last = self.prog.op("read_slice", [x], tag + ".last", window=[None, (T - 1, T), None])
        hid = self.prog.op("layernorm", [last, self.w["lm.lnf_g"], self.w["lm.lnf_b"]], tag + ".hid")
        return self.sub.read(hid)[:, 0, :]

    def prefill(self, embeds: int, kv: KvCache) -> np.ndarray:
        """Process ``[L, T, H]`` embeddings in one causal pass; returns ``[L, H]``."""
        if kv.reasoning_len != 0 or kv.sealed:
            raise ValueError("prefill needs an empty KV cache")
        if self.sub.shape(embeds)[1] < 1:
            raise ValueError("prefill of zero tokens")
        return self._lm_stack(embeds, kv, 0, "lm")

    def forward_step(self, embeds: int, kv: KvCache) -> np.ndarray:
        """Extend the sequence by the tokens in ``embeds`` using the cached context."""
        return self._lm_stack(embeds, kv, kv.reasoning_len, "lm")

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        h = self.prog.upload("lm.hidin", np.asarray(hidden, dtype=np.float32)[:, None, :])
        out = self.prog.op("matmul", [h, self.w["lm.head"]], "lm.logits")
        return self.sub.read(out)[:, 0, :]

    def decode_step(self, kv: KvCache, token_ids) -> tuple[np.ndarray, np.ndarray]:
        """Feed one token per lane; returns ``(hidden, logits)`` for the next token."""
        ids = np.asarray(token_ids).reshape(-1, 1)
        emb = self.embed_tokens(ids, "lm.step")
        hidden = self.forward_step(emb, kv)
        return hidden, self.logits(hidden)

    # -- action generation ----------------------------------------------------

    def action_encode(self, actions: int) -> int:
        op = self.prog.op
        freqs = tuple(float(f) for f in self.model.tables["act.freqs"])
        f = op("sinusoid", [actions], "act.sin", freqs=freqs)
        h = self._linear(f, "act.", "enc_w1", "enc_b1", "act.e1")
        h = op("gelu", [h], "act.egelu")
        h = self._linear(h, "act.", "enc_w2", "enc_b2", "act.e2")
        return op("add", [h, self.w["act.pos"]], "act.emb")

    def action_decoder_pass(self, emb: int, kv: KvCache, iteration: int = 0) -> int:
        """One parallel pass over all action steps; returns the ``[L, 64, 2]`` update."""
        L = self.sub.shape(emb)[0]
        if L != kv.layout.batch:
            raise ValueError(f"lane mismatch: {L} action lanes vs {kv.layout.batch} KV lanes")
        x = emb
        for i in range(self.config.decoder_blocks):
            def hook(k, v, T, block=i):
                kv.write_action_kv(block, iteration, k, v)
                view = kv.attend_view(block)
                kh, vh = self._cache_heads(view.buffer_id, "act", L, view.tokens)
                return kh, vh, view.tokens
            x = self._block(x, f"act.b{i}.", "act", self.config.kv_dim, hook, causal=False)
        h = self.prog.op("layernorm", [x, self.w["act.lnf_g"], self.w["act.lnf_b"]], "act.lnf")
        return self._linear(h, "act.", "head_w", "head_b", "act.delta")

    def _refine_body(self, state: int, kv: KvCache, iteration: int) -> None:
        emb = self.action_encode(state)
        delta = self.action_decoder_pass(emb, kv, iteration)
        upd = self.prog.op("scale", [delta], "act.upd", factor=self.config.update_scale)
        self.prog.into("add", [state, upd], state)

    def diffusion_refine(self, init: np.ndarray, kv: KvCache, executor: str = "eager",
                         on_iteration: Callable[[IterationStats], None] | None = None
                         ) -> tuple[np.ndarray, list[IterationStats]]:
        """Refine ``[L, steps, 2]`` actions for ``diffusion_iters`` iterations.

        With ``executor="graph"`` the first iteration runs eagerly and
        allocates every scratch buffer, the second is captured, and the rest
        replay the captured graph.
        """
        if executor not in EXECUTORS:
            raise ValueError(f"unknown executor {executor!r}")
        if executor == "graph" and kv.strategy != "static":
            raise ValueError("graph executor requires the static KV strategy")
        init = np.asarray(init, dtype=np.float32)
        if init.ndim != 3 or init.shape[1:] != (self.config.action_steps, 2):
            raise ValueError(f"actions must be [lanes, {self.config.action_steps}, 2], got {init.shape}")
        state = self.prog.upload("act.state", init)
        graph = None
        records: list[IterationStats] = []
        for it in range(1, self.config.diffusion_iters + 1):
            s0, k0 = self.sub.stats(), kv.kv_alloc_count
            t0 = time.perf_counter()
            kv.begin_iteration()
            if executor == "graph" and it == 2:
                token = self.sub.begin_capture(iteration=it)
                try:
                    self._refine_body(state, kv, it)
                finally:
                    graph = self.sub.end_capture(token)
                mode = "capture"
            elif executor == "graph" and it > 2:
                self.sub.replay(graph)
                kv.mark_action_written()
                mode = "replay"
            else:
                self._refine_body(state, kv, it)
                mode = "eager"
            ms = (time.perf_counter() - t0) * 1e3
            d = self.sub.stats() - s0
            rec = IterationStats(it, ms, d.dispatch_count, d.replay_count, d.alloc_count,
                                 kv.kv_alloc_count - k0, mode)
            records.append(rec)
            if on_iteration is not None:
                on_iteration(rec)
        self.last_graph = graph
        return self.sub.read(state), records

    def release_scratch(self) -> None:
        self.prog.release("lm")
        self.prog.release("vis")
        self.prog.release("act")


def sample_token(logits, rng: np.random.Generator | int | None = None, mode: str = "greedy") -> int:
    """Pick the next token: argmax (lowest index on ties) or a softmax sample."""
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise ValueError("NaN logits")
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode != "stochastic":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p = np.exp(logits - logits.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))
