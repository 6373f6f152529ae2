"""Corruption plans for masked image and masked language modeling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from flavars.encoders import TokenSequence
from flavars.errors import ConfigurationError, DataError

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
NUM_SPECIAL = 5

MASK, RANDOM, KEEP = "mask", "random", "keep"


@dataclass(frozen=True)
class MaskingConfig:
    image_mask_ratio: float = 0.4
    text_mask_prob: float = 0.15
    mlm_actions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        for name in ("image_mask_ratio", "text_mask_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        object.__setattr__(self, "mlm_actions", tuple(float(a) for a in self.mlm_actions))
        if len(self.mlm_actions) != 3 or any(a < 0 for a in self.mlm_actions):
            raise ConfigurationError("mlm_actions must be three non-negative probabilities")
        if abs(sum(self.mlm_actions) - 1.0) > 1e-9:
            raise ConfigurationError(f"mlm_actions must sum to 1, got {sum(self.mlm_actions)}")


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...] = ()
    actions: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.positions) != len(self.actions):
            raise DataError("positions and actions differ in length")
        if list(self.positions) != sorted(set(self.positions)):
            raise DataError("plan positions must be sorted and unique")

    def __len__(self):
        return len(self.positions)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def sample_image_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if num_patches < 1:
        raise ConfigurationError("num_patches must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"mask ratio must lie in [0, 1], got {ratio}")
    count = round_half_away(ratio * num_patches)
    positions = sorted(int(i) for i in rng.choice(num_patches, size=count, replace=False))
    return MaskPlan(tuple(positions), (MASK,) * count)


def sample_text_mask(
    tokens: TokenSequence,
    prob: float,
    actions: Sequence[float],
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[MaskPlan, TokenSequence]:
    """BERT-style corruption of the non-special, non-pad positions of ``tokens``.

    Every candidate consumes exactly three draws (select, action, random id),
    so the stream position does not depend on earlier outcomes.
    """
    if not 0.0 <= prob <= 1.0:
        raise ConfigurationError(f"mask probability must lie in [0, 1], got {prob}")
    p_mask, p_random, _ = actions
    ids = list(tokens.ids)
    candidates = [i for i, (t, pad) in enumerate(zip(ids, tokens.pad_mask)) if not pad and t >= NUM_SPECIAL]
    n = len(candidates)
    select = rng.random(n)
    action_u = rng.random(n)
    random_ids = rng.integers(NUM_SPECIAL, max(vocab_size, NUM_SPECIAL + 1), size=n)

    positions, tags = [], []
    for j, pos in enumerate(candidates):
        if select[j] >= prob:
            continue
        if action_u[j] < p_mask:
            ids[pos] = MASK_ID
            tags.append(MASK)
        elif action_u[j] < p_mask + p_random:
            ids[pos] = int(random_ids[j])
            tags.append(RANDOM)
        else:
            tags.append(KEEP)
        positions.append(pos)
    return MaskPlan(tuple(positions), tuple(tags)), TokenSequence(tuple(ids), tokens.pad_mask)


def apply_image_mask(patch_embeddings, plan: MaskPlan, mask_token):
    """Replace the planned rows of ``[N, D]`` embeddings with ``mask_token``."""
    n = patch_embeddings.shape[0]
    if any(p < 0 or p >= n for p in plan.positions):
        raise DataError(f"mask position outside [0, {n})")
    if isinstance(patch_embeddings, torch.Tensor):
        out = patch_embeddings.clone()
        if plan.positions:
            out[list(plan.positions)] = torch.as_tensor(mask_token, dtype=out.dtype)
        return out
    out = np.array(patch_embeddings, copy=True)
    if plan.positions:
        out[list(plan.positions)] = mask_token
    return out


def plans_to_mask(plans: Sequence[MaskPlan], length: int) -> torch.Tensor:
    """Stack plans into a bool ``[B, length]`` tensor."""
    out = torch.zeros(len(plans), length, dtype=torch.bool)
    for b, plan in enumerate(plans):
        if plan.positions:
            out[b, list(plan.positions)] = True
    return out
