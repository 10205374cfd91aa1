"""Relative positional multi-head attention.

The pre-softmax score between query position i and key position j is

    A[i,j] = (q_i + v)' k_j  +  (q_i + u)' (W_R r_{i-j})

with q = x W_Q, k = x W_K, a sinusoidal encoding r of the signed distance
i-j, and trainable biases u (position) and v (content).  Three
interchangeable implementations of the position term are provided:

* ``naive``      -- materializes every r_{i-j}; the reference/oracle form.
* ``gather``     -- one projection of a 2L-1 distance table, then a
                    per-(i,j) gather (the classic shift trick).
* ``factorized`` -- two outer products against position encodings
                    phi/psi/pi/omega derived from the angle-difference
                    identities; no gather at all.

All three accept arbitrary integer position ids so pooled queries can
attend to unpooled keys.  Scores are scaled by 1/sqrt(head_dim); applied
uniformly, the scaling does not affect cross-variant agreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (NumericError, ShapeError, Tensor, add, concat_last, dropout,
                       einsum_id_ijd, gelu, layer_norm, mask_fill, matmul, mul,
                       reshape, slice_last, softmax_lastdim, take_along_last,
                       transpose)

VARIANTS = ("naive", "gather", "factorized")


class RelPosEncoding:
    """Sinusoidal distance encoding tables of width D (even).

    r_t = cat(sin_t, cos_t) where component i (1-based, i = 1..D/2) of
    sin_t is sin(t / 10000^(2i/D)) and likewise for cos_t.  phi/psi/pi/
    omega are the four per-position concatenations used by the factorized
    form:

        phi_i   = cat(sin_i,  cos_i)
        psi_j   = cat(cos_j,  cos_j)
        pi_i    = cat(-cos_i, sin_i)
        omega_j = cat(sin_j,  sin_j)
    """

    def __init__(self, width: int, dtype=np.float64):
        if width % 2 != 0 or width < 2:
            raise ShapeError(f"encoding width must be even and >= 2, got {width}")
        self.width = width
        self.dtype = np.dtype(dtype)
        i = np.arange(1, width // 2 + 1, dtype=np.float64)
        self.inv_freq = 10000.0 ** (-2.0 * i / width)

    def _angles(self, t: np.ndarray) -> np.ndarray:
        # angles in f64 regardless of output dtype: positions can be large
        a = np.asarray(t, dtype=np.float64)[:, None] * self.inv_freq[None, :]
        return a

    def _cast(self, x: np.ndarray) -> np.ndarray:
        return x.astype(self.dtype, copy=False)

    def encode(self, distances: np.ndarray) -> np.ndarray:
        """r_d rows for an array of signed distances: [N, D]."""
        a = self._angles(distances)
        return self._cast(np.concatenate([np.sin(a), np.cos(a)], axis=-1))

    def phi(self, pos: np.ndarray) -> np.ndarray:
        a = self._angles(pos)
        return self._cast(np.concatenate([np.sin(a), np.cos(a)], axis=-1))

    def psi(self, pos: np.ndarray) -> np.ndarray:
        c = np.cos(self._angles(pos))
        return self._cast(np.concatenate([c, c], axis=-1))

    def pi(self, pos: np.ndarray) -> np.ndarray:
        a = self._angles(pos)
        return self._cast(np.concatenate([-np.cos(a), np.sin(a)], axis=-1))

    def omega(self, pos: np.ndarray) -> np.ndarray:
        s = np.sin(self._angles(pos))
        return self._cast(np.concatenate([s, s], axis=-1))


def position_term_naive(proj_q: Tensor, q_pos: np.ndarray, k_pos: np.ndarray,
                        w_r: Tensor, u: Tensor, enc: RelPosEncoding) -> Tensor:
    """Reference form: scores[i,j] = (proj_q[i] + u)' (w_r' r_{q_pos[i]-k_pos[j]}).

    Every distance encoding is materialized explicitly, one per (i, j)
    pair; this is the oracle the cheaper forms are tested against.
    """
    q_pos = np.asarray(q_pos, dtype=np.int64)
    k_pos = np.asarray(k_pos, dtype=np.int64)
    tq, tk = len(q_pos), len(k_pos)
    dist = q_pos[:, None] - k_pos[None, :]
    rhat = Tensor(enc.encode(dist.reshape(-1)))            # [tq*tk, D]
    rhat_w = reshape(matmul(rhat, w_r), (tq, tk, w_r.shape[1]))
    qu = add(proj_q, u)
    return einsum_id_ijd(qu, rhat_w)


def gather_index_matrix(q_pos: np.ndarray, k_pos: np.ndarray) -> tuple[np.ndarray, int]:
    """Index matrix into the ascending distance table, plus the table half-span.

    The table rows run r_{-(L-1)} .. r_{L-1}; entry [i,j] points at
    r_{q_pos[i]-k_pos[j]}.  For stride-1 positions, consecutive row
    entries differ by exactly 1 (idx[i,j] - idx[i,j+1] == 1): the shift
    structure.
    """
    q_pos = np.asarray(q_pos, dtype=np.int64)
    k_pos = np.asarray(k_pos, dtype=np.int64)
    dist = q_pos[:, None] - k_pos[None, :]
    span = int(np.abs(dist).max()) if dist.size else 0
    return dist + span, span


def position_term_gather(proj_q: Tensor, q_pos: np.ndarray, k_pos: np.ndarray,
                         w_r: Tensor, u: Tensor, enc: RelPosEncoding) -> Tensor:
    """Shift-trick form: project a 2L-1 distance table once, then gather."""
    idx, span = gather_index_matrix(q_pos, k_pos)
    table = Tensor(enc.encode(np.arange(-span, span + 1)))  # ascending distances
    table_w = matmul(table, w_r)                             # [2L-1, dh]
    qu = add(proj_q, u)
    full = matmul(qu, transpose(table_w))                    # [tq, 2L-1]
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError("distance outside the encoding table")
    return take_along_last(full, idx)


def position_term_factorized(proj_q: Tensor, q_pos: np.ndarray, k_pos: np.ndarray,
                             w_r: Tensor, u: Tensor, enc: RelPosEncoding) -> Tensor:
    """Gather-free form: [(q+u) w_r' (.) phi] psi' + [(q+u) w_r' (.) pi] omega'."""
    q_pos = np.asarray(q_pos, dtype=np.int64)
    k_pos = np.asarray(k_pos, dtype=np.int64)
    qu = add(proj_q, u)
    qr = matmul(qu, transpose(w_r))                          # [tq, D]
    phi = Tensor(enc.phi(q_pos))
    pi = Tensor(enc.pi(q_pos))
    psi = Tensor(enc.psi(k_pos))
    omega = Tensor(enc.omega(k_pos))
    return add(matmul(mul(qr, phi), transpose(psi)),
               matmul(mul(qr, pi), transpose(omega)))


_POSITION_TERMS = {
    "naive": position_term_naive,
    "gather": position_term_gather,
    "factorized": position_term_factorized,
}


@dataclass
class LayerParams:
    """Per-layer attention + FFN parameters.

    Projections are packed [D, D] and sliced per head; ``u``/``v`` are the
    packed per-head position/content biases of length D.  The projection
    of the positional encodings (``w_r``) is shared across layers and
    passed in separately.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    u: Tensor
    v: Tensor
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    w_ffn1: Tensor
    b_ffn1: Tensor
    w_ffn2: Tensor
    b_ffn2: Tensor
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor


def attention(q_in: Tensor, kv_in: Tensor, q_pos: np.ndarray, k_pos: np.ndarray,
              params: LayerParams, w_r: Tensor, enc: RelPosEncoding,
              variant: str = "factorized", key_mask: np.ndarray | None = None,
              n_heads: int = 1, attn_dropout: float = 0.0,
              hidden_dropout: float = 0.0, rng=None,
              ) -> tuple[Tensor, np.ndarray]:
    """One post-norm relative-attention sub-layer.

    Per head: scores = (content + position) / sqrt(head_dim), masked keys
    forced to -inf before the softmax.  Head outputs are concatenated,
    projected by w_o, added to the residual ``q_in`` and layer normed.
    Returns the new hidden states and the [heads, Tq, Tk] attention map
    (detached; used by top-attention pooling).
    """
    if variant not in _POSITION_TERMS:
        raise ValueError(f"unknown attention variant {variant!r}")
    d = q_in.shape[1]
    if d % n_heads != 0:
        raise ShapeError(f"hidden {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any():
            raise NumericError("attention with every key masked")

    pos_term = _POSITION_TERMS[variant]
    head_outs = []
    maps = np.zeros((n_heads, q_in.shape[0], kv_in.shape[0]))
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        wq = slice_last(params.w_q, lo, hi)
        wk = slice_last(params.w_k, lo, hi)
        wv = slice_last(params.w_v, lo, hi)
        bq = slice_last(params.b_q, lo, hi)
        bk = slice_last(params.b_k, lo, hi)
        bv = slice_last(params.b_v, lo, hi)
        uh = slice_last(params.u, lo, hi)
        vh = slice_last(params.v, lo, hi)
        whr = slice_last(w_r, lo, hi)

        q = add(matmul(q_in, wq), bq)
        k = add(matmul(kv_in, wk), bk)
        val = add(matmul(kv_in, wv), bv)
        content = matmul(add(q, vh), transpose(k))
        position = pos_term(q, q_pos, k_pos, whr, uh, enc)
        scores = mul(add(content, position), scale)
        if key_mask is not None:
            scores = mask_fill(scores, key_mask[None, :], -np.inf)
        weights = softmax_lastdim(scores)
        maps[h] = weights.data
        if attn_dropout:
            weights = dropout(weights, attn_dropout, rng)
        head_outs.append(matmul(weights, val))

    merged = head_outs[0] if n_heads == 1 else concat_last(head_outs)
    out = add(matmul(merged, params.w_o), params.b_o)
    if hidden_dropout:
        out = dropout(out, hidden_dropout, rng)
    hidden = layer_norm(add(q_in, out), params.ln_attn_g, params.ln_attn_b)
    return hidden, maps


def pffn(x: Tensor, params: LayerParams, hidden_dropout: float = 0.0, rng=None) -> Tensor:
    """Position-wise FFN with GeLU, wrapped in residual + layer norm."""
    inner = gelu(add(matmul(x, params.w_ffn1), params.b_ffn1))
    out = add(matmul(inner, params.w_ffn2), params.b_ffn2)
    if hidden_dropout:
        out = dropout(out, hidden_dropout, rng)
    return layer_norm(add(x, out), params.ln_ffn_g, params.ln_ffn_b)


def transformer_layer(x: Tensor, pos: np.ndarray, params: LayerParams, w_r: Tensor,
                      enc: RelPosEncoding, variant: str, key_mask: np.ndarray | None,
                      n_heads: int, attn_dropout: float = 0.0,
                      hidden_dropout: float = 0.0, rng=None) -> tuple[Tensor, np.ndarray]:
    """Standard self-attention layer: queries, keys and values from ``x``."""
    hidden, maps = attention(x, x, pos, pos, params, w_r, enc, variant=variant,
                             key_mask=key_mask, n_heads=n_heads,
                             attn_dropout=attn_dropout, hidden_dropout=hidden_dropout,
                             rng=rng)
    return pffn(hidden, params, hidden_dropout=hidden_dropout, rng=rng), maps
