"""Training objectives: masked-token reconstruction and replaced-token detection.

Masking replaces selected positions with the [MASK] token outright (no
80/10/10 split): the reconstruction loss is the mean negative
log-likelihood of the original tokens under an output softmax tied to the
input embedding.  The ELECTRA-style objective pairs a quarter-width
generator trained with that loss against a discriminator that classifies
every non-pad position of the generator-sampled sequence as kept or
replaced, weighted by a coefficient of 50.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ContractError, Rng, Tensor, add, bce_with_logits_mean,
                       cross_entropy_mean, gather_rows, matmul, reshape, transpose)
from .corpus import CLS, MASK, PAD, SEP, EncodedLine
from .model import FunnelModel

DISC_LOSS_WEIGHT = 50.0
GENERATOR_SIZE_MULTIPLIER = 0.25


@dataclass
class MaskPlan:
    """Chosen mask positions and the tokens they hid."""

    positions: np.ndarray  # sorted int64 indices
    originals: np.ndarray  # token ids at those indices

    def __len__(self) -> int:
        return len(self.positions)

    def apply(self, token_ids: np.ndarray) -> np.ndarray:
        corrupted = np.array(token_ids, dtype=np.int64)
        corrupted[self.positions] = MASK
        return corrupted


def maskable_positions(token_ids: np.ndarray) -> np.ndarray:
    """Indices eligible for masking: real content only, never CLS/SEP/PAD."""
    token_ids = np.asarray(token_ids)
    ok = ~np.isin(token_ids, (PAD, CLS, SEP, MASK))
    return np.flatnonzero(ok)


def sample_mask_single(token_ids: np.ndarray, rate: float = 0.15,
                       rng: Rng | None = None) -> MaskPlan:
    """Uniform subset of exactly floor(rate * n) maskable positions."""
    if not 0.0 < rate < 1.0:
        raise ContractError(f"mask rate must be in (0,1), got {rate}")
    rng = rng or Rng(0)
    pool = maskable_positions(token_ids)
    count = int(rate * len(pool))
    if count == 0:
        return MaskPlan(np.array([], dtype=np.int64), np.array([], dtype=np.int64))
    chosen = np.sort(rng.choice_without_replacement(pool, count))
    return MaskPlan(chosen, np.asarray(token_ids)[chosen].astype(np.int64))


def sample_mask_span(token_ids: np.ndarray, word_boundaries: list[tuple[int, int]],
                     rate: float = 0.15, max_words: int = 5,
                     rng: Rng | None = None) -> MaskPlan:
    """Complete-word span sampling.

    Spans of Uniform{1..max_words} words at uniform starts are drawn until
    floor(rate * n) masked tokens are reached.  Words are never split: the
    final span is truncated in whole words to fit the budget when it can
    be, and otherwise overshoots by exactly one word.
    """
    if not 0.0 < rate < 1.0:
        raise ContractError(f"mask rate must be in (0,1), got {rate}")
    rng = rng or Rng(0)
    token_ids = np.asarray(token_ids)
    pool = set(maskable_positions(token_ids).tolist())
    words = [tuple(range(lo, hi)) for lo, hi in word_boundaries
             if all(i in pool for i in range(lo, hi))]
    budget = int(rate * len(pool))
    if budget == 0 or not words:
        return MaskPlan(np.array([], dtype=np.int64), np.array([], dtype=np.int64))

    masked: set[int] = set()
    while len(masked) < budget:
        if all(set(w) <= masked for w in words):
            break
        span_words = int(rng.integers(1, max_words + 1))
        start = int(rng.integers(0, len(words)))
        added_this_span = False
        for word in words[start: start + span_words]:
            fresh = [i for i in word if i not in masked]
            if not fresh:
                continue
            needed = budget - len(masked)
            if len(fresh) > needed:
                if not added_this_span:
                    masked.update(fresh)  # no whole word fits: overshoot by this one
                break  # otherwise truncate the span at the word boundary
            masked.update(fresh)
            added_this_span = True
            if len(masked) >= budget:
                break
    positions = np.array(sorted(masked), dtype=np.int64)
    return MaskPlan(positions, token_ids[positions].astype(np.int64))


def mlm_logits(hidden: Tensor, embedding: Tensor, positions: np.ndarray) -> Tensor:
    """Tied-output logits at the given positions: h_i . e(x') for every x'."""
    sel = gather_rows(hidden, positions)
    return matmul(sel, transpose(embedding))


def mlm_loss(decoder_hidden: Tensor, embedding: Tensor, plan: MaskPlan) -> Tensor:
    """Mean over masked positions of -log softmax(e(x)' h_i)[original token]."""
    if len(plan) == 0:
        raise ContractError("mask plan is empty; skip this step instead")
    logits = mlm_logits(decoder_hidden, embedding, plan.positions)
    return cross_entropy_mean(logits, plan.originals)


@dataclass
class ElectraBatch:
    """Generator-sampled sequence plus per-position replaced labels."""

    sampled_ids: np.ndarray  # original sequence with masked slots re-sampled
    labels: np.ndarray       # 1.0 where the token differs from the original


def build_electra_batch(token_ids: np.ndarray, plan: MaskPlan,
                        gen_probs: np.ndarray, rng: Rng) -> ElectraBatch:
    """Sample each masked slot from the generator distribution.

    Labels satisfy: replaced <=> sampled token != original token.
    Unmasked positions always copy the original (label 0).
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    sampled = token_ids.copy()
    for row, pos in enumerate(plan.positions):
        sampled[pos] = rng.categorical(gen_probs[row])
    labels = (sampled != token_ids).astype(np.float64)
    return ElectraBatch(sampled, labels)


def electra_step(gen: FunnelModel, disc: FunnelModel, disc_head: tuple[Tensor, Tensor],
                 line: EncodedLine, plan: MaskPlan, rng: Rng,
                 ) -> tuple[Tensor, Tensor, ElectraBatch]:
    """One replaced-token-detection step on a single sequence.

    The generator is trained by its reconstruction loss on the masked
    positions; the sampled sequence is rebuilt from raw token ids, so no
    gradient can flow from the discriminator loss into the generator.
    The discriminator's binary loss averages over all non-pad positions.
    Returns (generator loss, discriminator loss, sampled batch); the
    training objective combines them as gen + DISC_LOSS_WEIGHT * disc.
    """
    if len(plan) == 0:
        raise ContractError("mask plan is empty; skip this step instead")
    corrupted = plan.apply(line.token_ids)
    gen_hidden = gen.token_hidden(corrupted, line.pad_mask, rng=rng)
    logits = mlm_logits(gen_hidden, gen.params["embed/token"], plan.positions)
    gen_loss = cross_entropy_mean(logits, plan.originals)

    batch = build_electra_batch(line.token_ids, plan, _softmax_rows(logits.data), rng)

    w, b = disc_head
    disc_hidden = disc.token_hidden(batch.sampled_ids, line.pad_mask, rng=rng)
    real = np.flatnonzero(line.pad_mask)
    sel = gather_rows(disc_hidden, real)
    disc_logits = add(matmul(sel, reshape(w, (sel.shape[1], 1))), b)
    disc_loss = bce_with_logits_mean(disc_logits, batch.labels[real][:, None])
    return gen_loss, disc_loss, batch


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
