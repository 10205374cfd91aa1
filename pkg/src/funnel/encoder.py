"""Compressing encoder: blocks of transformer layers with inter-block pooling.

Block 1 runs full-length layers.  Every later block starts by pooling the
previous block's output (window 2, stride 2) and then attends with the
pooled sequence as queries against the unpooled sequence as keys/values
(pool-query-only attention), after which standard layers continue at the
reduced length.

The classification token at index 0 can be kept out of the pooling
windows (``separate_cls``); to keep lengths at powers of two afterwards,
the final pooled state is dropped (``truncate_seq``).  Pooled states keep
the position id of the first token of their window so relative distances
against unpooled keys stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ContractError, Tensor, concat_rows, dropout, gather_rows,
                       max_pool_pairs, mean_pool_pairs)
from .relattn import RelPosEncoding, attention, pffn, transformer_layer

POOL_OPS = ("mean", "max", "top_attn")


@dataclass
class PooledState:
    """Hidden states plus the bookkeeping that rides along through pooling."""

    hidden: Tensor
    pos: np.ndarray   # absolute position ids, int64
    mask: np.ndarray  # True where the state is real (not padding)


@dataclass
class EncoderState:
    """Per-block outputs of one encoder pass."""

    block_hidden: list[Tensor] = field(default_factory=list)
    block_pos: list[np.ndarray] = field(default_factory=list)
    block_mask: list[np.ndarray] = field(default_factory=list)
    last_attn: np.ndarray | None = None  # attention map of the final layer run

    @property
    def h_first(self) -> Tensor:
        """Full-length output of block 1 (the decoder's skip input)."""
        return self.block_hidden[0]

    @property
    def h_last(self) -> Tensor:
        return self.block_hidden[-1]


def pool_pair(h: Tensor, pos: np.ndarray, mask: np.ndarray, op: str
              ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Window-2 stride-2 pooling of states, positions and mask.

    An odd tail forms a singleton window.  The pooled position is the
    first position of the window; the pooled mask is True iff any member
    is real; mean pooling averages only real members (an all-pad window
    stays pad with value 0).
    """
    if op not in ("mean", "max"):
        raise ValueError(f"pool_pair op must be mean or max, got {op!r}")
    pooled = mean_pool_pairs(h, mask) if op == "mean" else max_pool_pairs(h, mask)
    pos = np.asarray(pos)
    mask = np.asarray(mask, dtype=bool)
    new_pos = pos[0::2].copy()
    t = len(mask)
    new_mask = np.array([mask[2 * w: min(2 * w + 2, t)].any() for w in range((t + 1) // 2)])
    return pooled, new_pos, new_mask


def pool_top_attn(h: Tensor, pos: np.ndarray, mask: np.ndarray,
                  prev_attn: np.ndarray | None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Keep the half of the states that drew the most attention.

    Per-key score = attention map summed over heads and queries.  Exactly
    ceil(n/2) states are kept, ties broken toward the lower index, and the
    survivors stay in original order with their original position ids.
    The map must come from a same-length attention layer, so blocks need
    at least one standard layer after a pool-query-only transition.
    """
    if prev_attn is None:
        raise ContractError("top-attention pooling needs the previous layer's attention map")
    n = h.shape[0]
    scores = prev_attn.sum(axis=(0, 1))
    if scores.shape != (n,):
        raise ContractError(f"attention map keys ({scores.shape}) do not match states ({n})")
    keep = (n + 1) // 2
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    chosen = np.array(sorted(order[:keep]), dtype=np.int64)
    return gather_rows(h, chosen), np.asarray(pos)[chosen], np.asarray(mask, dtype=bool)[chosen]


def pool_step(state: PooledState, op: str, separate_cls: bool, truncate: bool,
              prev_attn: np.ndarray | None = None) -> PooledState:
    """One inter-block compression step.

    With ``separate_cls`` the index-0 state is carried through untouched and
    only the rest is pooled; the pooled sequence then has one state too many
    for a power-of-two input, so with ``truncate`` the final pooled state is
    dropped to land on a power of two again.  Without ``separate_cls`` the
    whole sequence is pooled stride-2 (already a power of two; no drop).
    """
    if op not in POOL_OPS:
        raise ValueError(f"unknown pool op {op!r}")
    t = state.hidden.shape[0]
    if separate_cls:
        if t <= 1:
            return state
        rest = gather_rows(state.hidden, np.arange(1, t))
        rest_pos, rest_mask = state.pos[1:], state.mask[1:]
        if op == "top_attn":
            pooled, ppos, pmask = pool_top_attn(
                rest, rest_pos, rest_mask,
                None if prev_attn is None else prev_attn[:, :, 1:])
        else:
            pooled, ppos, pmask = pool_pair(rest, rest_pos, rest_mask, op)
        cls_row = gather_rows(state.hidden, np.arange(1))
        hidden = concat_rows([cls_row, pooled])
        pos = np.concatenate([state.pos[:1], ppos])
        mask = np.concatenate([state.mask[:1], pmask])
        if truncate and _is_pow2(t) and hidden.shape[0] > 1:
            hidden = gather_rows(hidden, np.arange(hidden.shape[0] - 1))
            pos = pos[:-1]
            mask = mask[:-1]
        return PooledState(hidden, pos, mask)
    if op == "top_attn":
        pooled, ppos, pmask = pool_top_attn(state.hidden, state.pos, state.mask, prev_attn)
    else:
        pooled, ppos, pmask = pool_pair(state.hidden, state.pos, state.mask, op)
    return PooledState(pooled, ppos, pmask)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def block_transition_attention(pooled: PooledState, unpooled: PooledState,
                               params, w_r, enc, variant: str, n_heads: int,
                               pool_query_only: bool = True,
                               attn_dropout: float = 0.0, hidden_dropout: float = 0.0,
                               rng=None) -> tuple[Tensor, np.ndarray]:
    """First attention of a block: pooled queries, unpooled keys/values.

    The residual comes from the pooled sequence, so the output length is
    the pooled length.  With ``pool_query_only`` off this degenerates to a
    standard layer over the pooled sequence alone.
    """
    if pool_query_only:
        return attention(pooled.hidden, unpooled.hidden, pooled.pos, unpooled.pos,
                         params, w_r, enc, variant=variant, key_mask=unpooled.mask,
                         n_heads=n_heads, attn_dropout=attn_dropout,
                         hidden_dropout=hidden_dropout, rng=rng)
    return attention(pooled.hidden, pooled.hidden, pooled.pos, pooled.pos,
                     params, w_r, enc, variant=variant, key_mask=pooled.mask,
                     n_heads=n_heads, attn_dropout=attn_dropout,
                     hidden_dropout=hidden_dropout, rng=rng)


def encoder_forward(config, params, token_ids: np.ndarray,
                    pad_mask: np.ndarray | None = None, rng=None) -> EncoderState:
    """Run the full encoder: embedding lookup then per-block processing.

    ``token_ids`` is a single sequence whose length must be a power of two
    when truncation is enabled; ``pad_mask`` is True at real positions.
    Returns every block's final hidden states (block 1 is kept for the
    decoder's skip connection).
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    t = len(token_ids)
    if config.truncate_seq and not _is_pow2(t):
        raise ContractError(f"sequence length {t} must be a power of two with truncation on")
    if pad_mask is None:
        pad_mask = np.ones(t, dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    enc: RelPosEncoding = config.encoding()
    w_r = params["rel/w_r"]

    hidden = gather_rows(params["embed/token"], token_ids)
    if config.dropout:
        hidden = dropout(hidden, config.dropout, rng)
    state = PooledState(hidden, np.arange(t, dtype=np.int64), pad_mask)

    out = EncoderState()
    last_attn = None
    for m, block in enumerate(config.layout.blocks):
        layer_start = 0
        if m > 0:
            pooled = pool_step(state, config.pool_op, config.separate_cls,
                               config.truncate_seq, prev_attn=last_attn)
            lp = config.layer_params(params, m, 0)
            hidden, last_attn = block_transition_attention(
                pooled, state, lp, w_r, enc, config.attn_variant, config.layout.heads,
                pool_query_only=config.pool_query_only,
                attn_dropout=config.attn_dropout, hidden_dropout=config.dropout, rng=rng)
            hidden = pffn(hidden, lp, hidden_dropout=config.dropout, rng=rng)
            state = PooledState(hidden, pooled.pos, pooled.mask)
            layer_start = 1
        for t_idx in range(layer_start, block.total_layers):
            lp = config.layer_params(params, m, t_idx)
            hidden, last_attn = transformer_layer(
                state.hidden, state.pos, lp, w_r, enc, config.attn_variant,
                state.mask, config.layout.heads,
                attn_dropout=config.attn_dropout, hidden_dropout=config.dropout, rng=rng)
            state = PooledState(hidden, state.pos, state.mask)
        out.block_hidden.append(state.hidden)
        out.block_pos.append(state.pos)
        out.block_mask.append(state.mask)
    out.last_attn = last_attn
    return out
