"""Slot-based multi-view fusion: object slots absorb shape evidence from
bird's-eye-view and front-view tokens frame by frame, then write the
accumulated evidence back into the front-view tokens, in both temporal
directions.

Attention blocks here fuse a read-only "provider" token set into an updated
"receiver" set: receiver + self-attention, then cross-attention with keys
and values taken from the provider and queries from the receiver, then a
feed-forward layer. Normalization is pre-norm (the formulas this follows
elide normalization entirely); the feed-forward output keeps a residual
connection unless strict_ff=True drops it.

Provider tokens are reordered into a canonical (byte-lexicographic) order
before the key/value projections, which makes the output bitwise invariant
under any permutation of provider tokens, not merely invariant up to
rounding. Receivers are never reordered, so receiver permutations commute
with the block exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, UsageError
from .params import ParameterStore
from .rng import Rng
from .tensor import (Tensor, concat, layer_norm, matmul, permute_rows,
                     reshape, softmax, transpose)


@dataclass
class TokenSet:
    """A [L, d] token tensor (optionally with leading batch dims) plus
    provenance and, for spatial sources, the (rows, cols) grid it was
    flattened from (row-major)."""

    data: Tensor
    kind: str                       # "front" | "bev" | "slots"
    grid: Optional[tuple] = None    # (rows, cols) for spatial sources

    @property
    def count(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


def flatten_map(feat: Tensor) -> Tensor:
    """[c, H, W] (or [B, c, H, W]) -> [(B,) H*W, c] row-major tokens."""
    *lead, c, H, W = feat.shape
    flat = reshape(feat, tuple(lead) + (c, H * W))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return transpose(flat, axes)


def unflatten_map(tokens: Tensor, grid: tuple) -> Tensor:
    """[(B,) H*W, d] -> [(B,) d, H, W], inverse of flatten_map."""
    H, W = grid
    *lead, L, d = tokens.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    return reshape(transpose(tokens, axes), tuple(lead) + (d, H, W))


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: Rng, zero_init: bool = False):
        init = "zeros" if zero_init else "fan_in_uniform"
        self.w = store.parameter(f"{name}.weight", (d_in, d_out), init, rng, fan_in=d_in)
        self.b = store.parameter(f"{name}.bias", (d_out,), "zeros", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int, rng: Rng):
        self.gain = store.parameter(f"{name}.gain", (d,), "ones", rng)
        self.bias = store.parameter(f"{name}.bias", (d,), "zeros", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, axis=-1)


def canonical_order(tokens: np.ndarray) -> np.ndarray:
    """Permutation sorting token rows (axis -2) by their raw bytes; any
    fixed total order works, byte order is cheap and exact."""
    rows = np.ascontiguousarray(tokens)
    width = rows.shape[-1] * rows.itemsize
    keys = rows.view([("", f"V{width}")]).reshape(rows.shape[:-1])
    return np.argsort(keys, axis=-1, kind="stable")


def _split_heads(x: Tensor, heads: int, dh: int) -> Tensor:
    """[..., L, d] -> [..., heads, L, dh]."""
    *lead, L, _ = x.shape
    nl = len(lead)
    y = reshape(x, tuple(lead) + (L, heads, dh))
    return transpose(y, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x: Tensor, d: int) -> Tensor:
    """[..., heads, L, dh] -> [..., L, d]."""
    *lead, h, L, dh = x.shape
    nl = len(lead)
    y = transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return reshape(y, tuple(lead) + (L, d))


class MultiHeadAttention:
    """Attention(provider, receiver, provider): queries from the receiver
    stream, keys and values from the provider stream. Works on [L, d] or
    with any leading batch dims."""

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int, rng: Rng):
        if d % heads:
            raise ConfigError(f"head count {heads} must divide width {d}")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q = Linear(store, f"{name}.q_proj", d, d, rng)
        self.k = Linear(store, f"{name}.k_proj", d, d, rng)
        self.v = Linear(store, f"{name}.v_proj", d, d, rng)
        self.out = Linear(store, f"{name}.out_proj", d, d, rng)

    def __call__(self, queries: Tensor, keyvals: Tensor) -> Tensor:
        kv = permute_rows(keyvals, canonical_order(keyvals.data))
        q = _split_heads(self.q(queries), self.heads, self.dh)
        k = _split_heads(self.k(kv), self.heads, self.dh)
        v = _split_heads(self.v(kv), self.heads, self.dh)
        nd = len(k.shape)
        kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
        scores = matmul(q, kt) * (1.0 / np.sqrt(self.dh))
        attn = softmax(scores, axis=-1)
        return self.out(_merge_heads(matmul(attn, v), self.d))


def attention_reference(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Scalar-loop multi-head attention oracle (plain numpy, forward only)."""
    import math
    Lq, d = q.shape
    Lk = k.shape[0]
    dh = d // heads
    qp, kp, vp = q @ wq + bq, k @ wk + bk, v @ wv + bv
    ctx = np.zeros((Lq, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(Lq):
            scores = [sum(qp[i, sl][c] * kp[j, sl][c] for c in range(dh)) / math.sqrt(dh)
                      for j in range(Lk)]
            mx = max(scores)
            es = [math.exp(s - mx) for s in scores]
            tot = sum(es)
            for j in range(Lk):
                a = es[j] / tot
                for c in range(dh):
                    ctx[i, h * dh + c] += a * vp[j, h * dh + c]
    return ctx @ wo + bo


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, d: int, hidden: int, rng: Rng):
        self.fc1 = Linear(store, f"{name}.fc1", d, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import gelu
        return self.fc2(gelu(self.fc1(x)))


class ObjAttentionBlock:
    """One provider -> receiver fusion block (self-attn, cross-attn, FF)."""

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int,
                 ff_hidden: int, rng: Rng, strict_ff: bool = False):
        self.norm_self = LayerNorm(store, f"{name}.norm_self", d, rng)
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", d, heads, rng)
        self.norm_q = LayerNorm(store, f"{name}.norm_q", d, rng)
        self.norm_kv = LayerNorm(store, f"{name}.norm_kv", d, rng)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", d, heads, rng)
        self.norm_ff = LayerNorm(store, f"{name}.norm_ff", d, rng)
        self.ff = FeedForward(store, f"{name}.ff", d, ff_hidden, rng)
        self.strict_ff = strict_ff

    def __call__(self, receiver: Tensor, provider: Tensor) -> Tensor:
        if receiver.shape[-1] != provider.shape[-1]:
            raise ConfigError(f"receiver width {receiver.shape[-1]} != provider width "
                              f"{provider.shape[-1]}")
        x = self.norm_self(receiver)
        sr_hat = receiver + self.self_attn(x, x)
        sr_tilde = sr_hat + self.cross_attn(self.norm_q(sr_hat), self.norm_kv(provider))
        ff_out = self.ff(self.norm_ff(sr_tilde))
        return ff_out if self.strict_ff else sr_tilde + ff_out


def obj_attention(receiver: TokenSet, provider: TokenSet,
                  block: ObjAttentionBlock) -> TokenSet:
    out = block(receiver.data, provider.data)
    return TokenSet(out, receiver.kind, receiver.grid)


class ObjAttentionStack:
    def __init__(self, store: ParameterStore, name: str, depth: int, d: int,
                 heads: int, ff_hidden: int, rng: Rng, strict_ff: bool = False):
        self.layers = [ObjAttentionBlock(store, f"{name}.layer{i}", d, heads,
                                         ff_hidden, rng, strict_ff)
                       for i in range(depth)]

    def __call__(self, receiver: Tensor, provider: Tensor) -> Tensor:
        for layer in self.layers:
            receiver = layer(receiver, provider)
        return receiver


class TokenEmbedder:
    """Channel projection plus a learned 2-D positional embedding for one
    spatial token source."""

    def __init__(self, store: ParameterStore, name: str, channels: int, d: int,
                 grid: tuple, rng: Rng):
        self.proj = Linear(store, f"{name}.proj", channels, d, rng)
        self.pos = store.parameter(f"{name}.pos", (grid[0] * grid[1], d),
                                   "normal_over_sqrt_dim", rng)
        self.grid = grid
        self.kind = name.rsplit(".", 1)[-1]

    def __call__(self, feat: Tensor) -> TokenSet:
        tokens = self.proj(flatten_map(feat)) + self.pos
        return TokenSet(tokens, self.kind, self.grid)


class FusionDirection:
    """One temporal direction: learnable initial slots plus three stacks
    (bev -> slots, front -> slots, slots -> front)."""

    def __init__(self, store: ParameterStore, prefix: str, d: int, n_slots: int,
                 depth: int, heads: int, ff_hidden: int, rng: Rng,
                 use_bev: bool, strict_ff: bool = False):
        self.initial_slots = store.parameter(f"{prefix}.slots0", (n_slots, d),
                                             "normal_over_sqrt_dim", rng)
        self.use_bev = use_bev
        if use_bev:
            self.bev_stack = ObjAttentionStack(store, f"{prefix}.bev", depth, d,
                                               heads, ff_hidden, rng, strict_ff)
        self.front_stack = ObjAttentionStack(store, f"{prefix}.front", depth, d,
                                             heads, ff_hidden, rng, strict_ff)
        self.refine_stack = ObjAttentionStack(store, f"{prefix}.refine", depth, d,
                                              heads, ff_hidden, rng, strict_ff)

    def fuse_step(self, slots: Tensor, bev: Optional[TokenSet],
                  front: TokenSet) -> tuple[Tensor, TokenSet]:
        """Advance the slots with the current frame's views, then write the
        accumulated shape evidence back into the front tokens."""
        if self.use_bev:
            if bev is None:
                raise UsageError("fusion configured with a bev stack but got no bev tokens")
            slots = self.bev_stack(slots, bev.data)
        slots = self.front_stack(slots, front.data)
        refined = self.refine_stack(front.data, slots)
        return slots, TokenSet(refined, front.kind, front.grid)

    def run_stream(self, frames: list[tuple[TokenSet, Optional[TokenSet]]],
                   backward_time: bool = False) -> list[TokenSet]:
        """Iterate fuse_step over (front, bev) frame pairs; the backward
        direction consumes the reversed list and realigns its outputs.
        Token sets may carry leading batch dims; the learned initial slots
        broadcast to match."""
        if not frames:
            raise UsageError("run_stream requires at least one frame")
        order = range(len(frames) - 1, -1, -1) if backward_time else range(len(frames))
        lead = frames[0][0].data.shape[:-2]
        slots = self.initial_slots
        if lead:
            from .tensor import broadcast_to
            slots = broadcast_to(slots, lead + slots.shape)
        refined: list[TokenSet] = []
        for t in order:
            front, bev = frames[t]
            slots, ref = self.fuse_step(slots, bev, front)
            refined.append(ref)
        if backward_time:
            refined.reverse()
        return refined


def concat_streams(fwd: list[TokenSet], bwd: list[TokenSet]) -> list[Tensor]:
    """Per frame, restore the spatial layout and concatenate forward and
    backward channels: two [(B,) L, d] token sets -> [(B,) 2d, H, W]."""
    out = []
    for f, b in zip(fwd, bwd):
        if f.grid is None:
            raise UsageError("concat_streams needs spatial token sets")
        ax = len(f.data.shape) - 2  # channel axis after unflattening
        out.append(concat([unflatten_map(f.data, f.grid),
                           unflatten_map(b.data, b.grid)], axis=ax))
    return out
