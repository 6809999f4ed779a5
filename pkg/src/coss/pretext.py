"""Masked-modeling pretext tasks.

Text: BERT-style masked prediction — 15% of eligible word positions get the
MASK id substituted, the encoder sees the full-length row, cross-entropy is
taken over masked positions only. Visual: MAE-style masked reconstruction —
75% of patch tokens are dropped, the encoder sees only visible tokens, and
the decoder's output is penalized with MSE over masked patches only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import seeds
from . import tensor as T
from .tensor import Tensor
from .tokenizers import CLS_ID, MASK_ID, PAD_ID, TokenBatch

log = logging.getLogger(__name__)


def round_half_up(x) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class MaskPlan:
    modality: str
    grid: np.ndarray  # bool [N, L], True = masked
    ratio: float
    seed: int | None = None

    @property
    def keep(self):
        return ~self.grid

    @property
    def masked_count(self):
        return int(self.grid.sum())


def _resolve_rng(rng, seed, *stream):
    if rng is not None:
        return rng
    if seed is None:
        raise ValueError("provide either an rng or a seed")
    return seeds.rng_for(seed, seeds.MASK, *stream)


def sample_text_mask(batch: TokenBatch, ratio: float = 0.15, rng=None,
                     seed=None) -> MaskPlan:
    """Choose round(ratio * eligible) positions per row, minimum 1.

    Eligible positions are non-PAD, non-CLS ids. A row with no eligible
    positions masks nothing (and later contributes zero loss).
    """
    if batch.modality != "text":
        raise ValueError("text mask plans apply to text batches")
    rng = _resolve_rng(rng, seed)
    ids = batch.ids
    grid = np.zeros(ids.shape, dtype=bool)
    eligible = (ids != PAD_ID) & (ids != CLS_ID)
    for i in range(ids.shape[0]):
        positions = np.nonzero(eligible[i])[0]
        if positions.size == 0:
            continue
        k = max(1, round_half_up(ratio * positions.size))
        chosen = rng.choice(positions, size=min(k, positions.size), replace=False)
        grid[i, chosen] = True
    return MaskPlan("text", grid, ratio, seed)


def apply_text_mask(batch: TokenBatch, plan: MaskPlan) -> TokenBatch:
    """Substitute MASK at planned positions; originals stay in ``batch``."""
    ids = batch.ids.copy()
    ids[plan.grid] = MASK_ID
    return TokenBatch("text", ids=ids, valid=batch.valid)


def sample_visual_mask(batch: TokenBatch, ratio: float = 0.75, rng=None,
                       seed=None) -> MaskPlan:
    """Mask round(ratio * L) patch tokens per sample, uniform without replacement."""
    if batch.modality == "text":
        raise ValueError("visual mask plans apply to visual batches")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"visual mask ratio must be in (0,1), got {ratio}")
    rng = _resolve_rng(rng, seed)
    n, length = batch.patches.shape[:2]
    k = max(1, round_half_up(ratio * length))
    if k >= length:
        k = length - 1  # at least one visible token for the encoder
    grid = np.zeros((n, length), dtype=bool)
    for i in range(n):
        grid[i, rng.choice(length, size=k, replace=False)] = True
    return MaskPlan(batch.modality, grid, ratio, seed)


def mlm_loss(logits, target_ids, plan: MaskPlan):
    """Mean cross-entropy over masked positions only."""
    target_ids = np.asarray(target_ids)
    if logits.shape[:2] != target_ids.shape or target_ids.shape != plan.grid.shape:
        raise ValueError("logits/targets/plan shapes disagree")
    n_masked = plan.masked_count
    if n_masked == 0:
        log.warning("mlm_loss: no masked positions in batch; returning 0")
        return Tensor(np.array(0.0, dtype=T.default_dtype()))
    lp = T.log_softmax(logits, axis=-1)
    picked = T.gather_last(lp, target_ids)
    mask = plan.grid.astype(picked.dtype)
    return -(picked * mask).sum() / float(n_masked)


def mim_loss(reconstruction, target_patches, plan: MaskPlan):
    """MSE over masked patches only: sum of squared error / (masked * patch_dim)."""
    target = np.asarray(target_patches, dtype=reconstruction.dtype)
    if reconstruction.shape != target.shape:
        raise ValueError("reconstruction/target shapes disagree")
    if reconstruction.shape[:2] != plan.grid.shape:
        raise ValueError("plan shape disagrees with reconstruction")
    n_masked = plan.masked_count
    if n_masked == 0:
        log.warning("mim_loss: no masked positions in batch; returning 0")
        return Tensor(np.array(0.0, dtype=T.default_dtype()))
    diff = reconstruction - Tensor(target)
    sq = diff * diff
    mask = plan.grid.astype(sq.dtype)[:, :, None]
    denom = float(n_masked * reconstruction.shape[2])
    return (sq * mask).sum() / denom
