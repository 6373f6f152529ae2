"""The joint training losses and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from flavars.errors import ConfigurationError, DataError, InvalidBatchError, TrainingError

COMPONENTS = ("mim", "mlm", "itm", "contrastive_it", "contrastive_il", "contrastive_tl")


@dataclass(frozen=True)
class LossWeights:
    w_mim: float = 1.0
    w_mlm: float = 1.0
    w_itm: float = 1.0
    w_contrastive_it: float = 1.0
    w_contrastive_il: float = 1.0
    # optional text-location alignment, off unless asked for
    w_contrastive_tl: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {value}")

    def for_component(self, name: str) -> float:
        return getattr(self, f"w_{name}")


@dataclass
class LossBreakdown:
    mim: float
    mlm: float
    itm: float
    contrastive_it: float
    contrastive_il: float
    total: float
    contrastive_tl: float | None = None

    def log_record(self, step: int, lr: float) -> dict:
        rec = {
            "step": step,
            "mim": self.mim,
            "mlm": self.mlm,
            "itm": self.itm,
            "c_it": self.contrastive_it,
            "c_il": self.contrastive_il,
            "total": self.total,
            "lr": lr,
        }
        if self.contrastive_tl is not None:
            rec["c_tl"] = self.contrastive_tl
        return rec


class Temperature(nn.Module):
    """Learnable softmax temperature, clamped into ``[tau_min, tau_max]`` on use."""

    def __init__(self, init: float = 0.07, tau_min: float = 0.01, tau_max: float = 1.0):
        super().__init__()
        if not 0 < tau_min <= init <= tau_max:
            raise ConfigurationError(f"need 0 < tau_min <= init <= tau_max, got {tau_min}, {init}, {tau_max}")
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    def forward(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(self.tau_min, self.tau_max)


def contrastive_loss(emb_a: torch.Tensor, emb_b: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE over matched rows of two ``[N, d]`` embedding sets."""
    if emb_a.dim() != 2 or emb_a.shape != emb_b.shape:
        raise InvalidBatchError(f"embedding shapes differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
    n = emb_a.shape[0]
    if n < 2:
        raise InvalidBatchError("contrastive loss needs at least 2 pairs")
    if not (torch.isfinite(emb_a).all() and torch.isfinite(emb_b).all()):
        raise InvalidBatchError("non-finite embedding")
    logits = emb_a @ emb_b.T / tau
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


# ---------------------------------------------------------------------------
# patch codebook (MIM targets)
# ---------------------------------------------------------------------------


@dataclass
class PatchCodebook:
    centroids: np.ndarray  # [K, patch_dim]

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ConfigurationError("codebook needs at least one centroid row")
        if not np.isfinite(self.centroids).all():
            raise ConfigurationError("codebook centroids must be finite")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 256) -> np.ndarray:
    # explicit differences (not the dot-product expansion) keep exact ties exact
    out = np.empty((x.shape[0], c.shape[0]))
    for start in range(0, x.shape[0], chunk):
        out[start : start + chunk] = ((x[start : start + chunk, None, :] - c[None, :, :]) ** 2).sum(-1)
    return out


def fit_patch_codebook(patches, K: int, rng: np.random.Generator, max_iter: int = 50) -> PatchCodebook:
    """k-means with k-means++ seeding over raw patch vectors."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("patches must be a [M, patch_dim] matrix")
    m = x.shape[0]
    if K < 1 or m < K:
        raise DataError(f"need 1 <= K <= number of patches, got K={K}, M={m}")

    centroids = np.empty((K, x.shape[1]))
    centroids[0] = x[rng.integers(m)]
    closest = ((x - centroids[0]) ** 2).sum(1)
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(m))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        centroids[k] = x[idx]
        closest = np.minimum(closest, ((x - centroids[k]) ** 2).sum(1))

    assign = None
    for _ in range(max_iter):
        new_assign = _sq_dists(x, centroids).argmin(1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(K):
            members = x[assign == k]
            if len(members):
                centroids[k] = members.mean(0)
    return PatchCodebook(centroids)


def quantize_patches(patches, codebook: PatchCodebook) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != codebook.centroids.shape[1]:
        raise DataError(f"patch dim {x.shape[-1]} does not match codebook dim {codebook.centroids.shape[1]}")
    flat = x.reshape(-1, x.shape[-1])
    return _sq_dists(flat, codebook.centroids).argmin(1).reshape(x.shape[:-1])


def quantize_patch(patch, codebook: PatchCodebook) -> int:
    """Nearest centroid by Euclidean distance; ties go to the lowest index."""
    return int(quantize_patches(np.asarray(patch, dtype=np.float64).reshape(1, -1), codebook)[0])


# ---------------------------------------------------------------------------
# masked modeling and matching
# ---------------------------------------------------------------------------


def _masked_ce(logits: torch.Tensor, targets, plan) -> torch.Tensor:
    if plan is not None and len(plan) != logits.shape[0]:
        raise DataError(f"{logits.shape[0]} logit rows for a plan of {len(plan)} positions")
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    targets = torch.as_tensor(targets, dtype=torch.long)
    return F.cross_entropy(logits, targets)


def mim_loss(code_logits: torch.Tensor, target_codes, plan=None) -> torch.Tensor:
    """Mean cross-entropy over masked patches; rows must follow the plan order."""
    return _masked_ce(code_logits, target_codes, plan)


def mlm_loss(token_logits: torch.Tensor, target_ids, plan=None) -> torch.Tensor:
    return _masked_ce(token_logits, target_ids, plan)


def mim_pixel_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Regression alternative to the codebook target: MSE over masked patches."""
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return F.mse_loss(pred, target)


def itm_loss(match_logits: torch.Tensor, labels) -> torch.Tensor:
    """Two-class cross-entropy; label 1 = matched pair, 0 = mismatched."""
    if match_logits.shape[0] == 0:
        raise InvalidBatchError("ITM loss on an empty batch")
    return F.cross_entropy(match_logits, torch.as_tensor(labels, dtype=torch.long))


def total_loss(components: Mapping[str, torch.Tensor | float], weights: LossWeights):
    total = 0.0
    for name, value in components.items():
        v = value.detach() if isinstance(value, torch.Tensor) else torch.tensor(float(value))
        if not bool(torch.isfinite(v).all()):
            raise TrainingError(name)
        total = total + weights.for_component(name) * value
    return total
