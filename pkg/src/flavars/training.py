"""Deterministic joint optimisation over the five pretraining objectives."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from flavars import config as cfgio
from flavars.checkpoint import (
    Checkpoint,
    load_checkpoint,
    optimizer_from_tensors,
    optimizer_to_tensors,
    save_checkpoint,
)
from flavars.datapipe.records import Dataset, SampleRecord
from flavars.datapipe.selection import SplitSpec
from flavars.datapipe.vocab import Vocabulary, build_vocab, tokenize
from flavars.encoders import images_to_tensor, patchify
from flavars.errors import ConfigurationError, DataError, InvalidBatchError, TrainingError
from flavars.masking import MaskingConfig, sample_image_mask, sample_text_mask
from flavars.model import FlavarsModel, ModelConfig, build_model
from flavars.objectives import (
    LossBreakdown,
    LossWeights,
    contrastive_loss,
    fit_patch_codebook,
    itm_loss,
    mim_loss,
    mim_pixel_loss,
    mlm_loss,
    quantize_patches,
    total_loss,
)

log = logging.getLogger(__name__)

LOG_NAME = "loss_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 1000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.05
    seed: int = 0
    checkpoint_every: int = 500
    max_vocab: int = 128
    codebook_patches: int = 4096
    weights: LossWeights = field(default_factory=LossWeights)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (contrastive losses need negatives)")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigurationError("learning_rate, weight_decay and warmup_steps must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay; ``step`` is 0-based."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: FlavarsModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() >= 2 and "pos_embed" not in name else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, foreach=False)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # [B, H, W, C] float
    ids: torch.Tensor  # [B, T]
    pad: torch.Tensor  # [B, T] bool
    coords: torch.Tensor  # [B, 2]
    patch_mask: torch.Tensor  # [B, N] bool
    mim_targets: torch.Tensor  # [M] codes or [M, patch_dim] pixels
    corrupted_ids: torch.Tensor
    mlm_mask: torch.Tensor  # [B, T] bool
    mlm_targets: torch.Tensor  # [M']
    itm_index: torch.Tensor  # [B] caption source per sample
    itm_labels: torch.Tensor  # [B] 1 matched / 0 mismatched


def prepare_batch(
    records: Sequence[SampleRecord],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    masking: MaskingConfig,
    rng: np.random.Generator,
    codebook=None,
    dtype=torch.float32,
) -> Batch:
    """Tokenise, sample corruption plans and ITM negatives for one batch.

    Random draws happen in a fixed order: image masks, text masks, then ITM
    negatives, all from ``rng``.
    """
    b = len(records)
    if b < 2:
        raise InvalidBatchError("batch needs at least 2 samples")
    vcfg, tcfg = model_cfg.vision, model_cfg.text
    raw = np.stack([r.image for r in records])
    images = images_to_tensor(raw, dtype)
    tokens = [tokenize(r.caption, vocab, tcfg.max_len) for r in records]
    ids = torch.tensor([t.ids for t in tokens], dtype=torch.long)
    pad = torch.tensor([t.pad_mask for t in tokens], dtype=torch.bool)
    coords = torch.tensor([[r.coord.lat, r.coord.lon] for r in records], dtype=dtype)

    n = vcfg.num_patches
    patch_mask = torch.zeros(b, n, dtype=torch.bool)
    for i in range(b):
        plan = sample_image_mask(n, masking.image_mask_ratio, rng)
        if plan.positions:
            patch_mask[i, list(plan.positions)] = True
    patches = patchify(torch.from_numpy(raw.astype(np.float64) / 255.0), vcfg.patch_size)  # [B, N, D]
    masked_patches = patches[patch_mask]
    if model_cfg.mim_target == "codebook":
        if codebook is None:
            raise ConfigurationError("codebook MIM targets need a fitted codebook")
        mim_targets = torch.from_numpy(quantize_patches(masked_patches.numpy(), codebook).astype(np.int64))
    else:
        mim_targets = masked_patches.to(dtype)

    corrupted = ids.clone()
    mlm_mask = torch.zeros_like(pad)
    for i, seq in enumerate(tokens):
        plan, bad = sample_text_mask(seq, masking.text_mask_prob, masking.mlm_actions, rng, tcfg.vocab_size)
        corrupted[i] = torch.tensor(bad.ids)
        if plan.positions:
            mlm_mask[i, list(plan.positions)] = True
    mlm_targets = ids[mlm_mask]

    swap = rng.random(b) < 0.5
    offsets = rng.integers(1, b, size=b)
    source = np.where(swap, (np.arange(b) + offsets) % b, np.arange(b))
    return Batch(
        images=images,
        ids=ids,
        pad=pad,
        coords=coords,
        patch_mask=patch_mask,
        mim_targets=mim_targets,
        corrupted_ids=corrupted,
        mlm_mask=mlm_mask,
        mlm_targets=mlm_targets,
        itm_index=torch.from_numpy(source.astype(np.int64)),
        itm_labels=torch.from_numpy((~swap).astype(np.int64)),
    )


def compute_losses(model: FlavarsModel, batch: Batch, weights: LossWeights) -> dict[str, torch.Tensor]:
    tau = model.temperature()
    img = model.encode_image(batch.images)
    txt = model.encode_text(batch.ids, batch.pad)
    loc = model.encode_location(batch.coords)

    losses = {}
    masked_img = model.encode_image(batch.images, batch.patch_mask)
    mim_states = masked_img.token_states[:, 1:][batch.patch_mask]
    if model.cfg.mim_target == "codebook":
        losses["mim"] = mim_loss(model.mim_head(mim_states), batch.mim_targets)
    else:
        losses["mim"] = mim_pixel_loss(model.mim_head(mim_states), batch.mim_targets)

    corrupted = model.encode_text(batch.corrupted_ids, batch.pad)
    losses["mlm"] = mlm_loss(model.mlm_head(corrupted.token_states[batch.mlm_mask]), batch.mlm_targets)

    _, fused_cls = model.encode_multimodal(img.token_states, txt.token_states[batch.itm_index], batch.pad[batch.itm_index])
    losses["itm"] = itm_loss(model.itm_head(fused_cls), batch.itm_labels)

    pairs = {"contrastive_it": (img.pooled, txt.pooled), "contrastive_il": (img.pooled, loc)}
    if weights.w_contrastive_tl > 0:
        pairs["contrastive_tl"] = (txt.pooled, loc)
    for name, (a, b) in pairs.items():
        if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
            raise TrainingError(name)
        losses[name] = contrastive_loss(a, b, tau)
    return losses


def breakdown_of(losses: dict[str, torch.Tensor], total: torch.Tensor) -> LossBreakdown:
    vals = {k: v.item() for k, v in losses.items()}
    return LossBreakdown(
        mim=vals["mim"],
        mlm=vals["mlm"],
        itm=vals["itm"],
        contrastive_it=vals["contrastive_it"],
        contrastive_il=vals["contrastive_il"],
        total=total.item(),
        contrastive_tl=vals.get("contrastive_tl"),
    )


def train_step(
    model: FlavarsModel,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    weights: LossWeights,
    lr: float,
) -> LossBreakdown:
    """One forward/backward/update on ``total_loss``; aborts on any non-finite component."""
    if batch.images.shape[0] < 2:
        raise InvalidBatchError("batch_size must be >= 2")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = compute_losses(model, batch, weights)
    total = total_loss(losses, weights)
    if not torch.isfinite(total):
        raise TrainingError("total")
    total.backward()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return breakdown_of(losses, total)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 3, step])


def epoch_order(train_ids: Sequence[str], seed: int, epoch: int) -> list[str]:
    perm = np.random.default_rng([seed, 2, epoch]).permutation(len(train_ids))
    return [train_ids[i] for i in perm]


def fit_codebook_for(records: Sequence[SampleRecord], cfg: TrainConfig):
    mcfg = cfg.model
    patches = patchify(np.stack([r.image for r in records]).astype(np.float64) / 255.0, mcfg.vision.patch_size)
    patches = patches.reshape(-1, patches.shape[-1])
    rng = np.random.default_rng([cfg.seed, 1])
    if len(patches) > cfg.codebook_patches:
        patches = patches[np.sort(rng.choice(len(patches), cfg.codebook_patches, replace=False))]
    return fit_patch_codebook(patches, mcfg.codebook_size, rng)


@dataclass
class TrainState:
    model: FlavarsModel
    optimizer: torch.optim.AdamW
    vocab: Vocabulary
    config: TrainConfig
    step: int = 0  # number of completed steps

    def to_checkpoint(self) -> Checkpoint:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        opt_tensors, opt_meta = optimizer_to_tensors(self.optimizer.state_dict())
        tensors.update(opt_tensors)
        return Checkpoint(
            step=self.step,
            config=cfgio.to_dict(self.config),
            config_fingerprint=self.config.model.fingerprint,
            tensors=tensors,
            optimizer=opt_meta,
            vocab=list(self.vocab.tokens),
            rng={"kind": "numpy-default_rng", "seed": self.config.seed, "next_step": self.step},
        )


def init_state(cfg: TrainConfig, train_records: Sequence[SampleRecord]) -> TrainState:
    vocab = build_vocab([r.caption for r in train_records], cfg.max_vocab)
    mcfg = replace(cfg.model, text=replace(cfg.model.text, vocab_size=len(vocab)))
    cfg = replace(cfg, model=mcfg)
    model = build_model(mcfg, cfg.seed)
    if mcfg.mim_target == "codebook":
        model.set_codebook(fit_codebook_for(train_records, cfg))
    return TrainState(model, make_optimizer(model, cfg), vocab, cfg)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    cfg = cfgio.from_dict(TrainConfig, ckpt.config)
    model = FlavarsModel(cfg.model)
    model.load_state_dict(ckpt.model_state(), strict=True)
    optimizer = make_optimizer(model, cfg)
    if ckpt.optimizer is not None:
        optimizer.load_state_dict(optimizer_from_tensors(ckpt.tensors, ckpt.optimizer))
    return TrainState(model, optimizer, Vocabulary(list(ckpt.vocab)), cfg, ckpt.step)


def load_model(path, expected_fingerprint: str | None = None, force: bool = False) -> TrainState:
    return state_from_checkpoint(load_checkpoint(path, expected_fingerprint, force))


@dataclass
class FitResult:
    state: TrainState
    checkpoint: Path
    log: list[dict]


def fit(
    cfg: TrainConfig,
    dataset: Dataset,
    split: SplitSpec,
    out_dir,
    resume_from=None,
    stop_after: int | None = None,
) -> FitResult:
    """Train for ``cfg.steps`` steps, checkpointing every ``checkpoint_every`` and at the end.

    Batch order, masking and negatives derive from ``(seed, epoch)`` and
    ``(seed, step)``, so resuming from a checkpoint continues exactly as an
    uninterrupted run would.  ``stop_after`` ends early (used to simulate an
    interruption) after checkpointing.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records = dataset.subset(split.train)
    if len(train_records) < cfg.batch_size:
        raise DataError(f"train split has {len(train_records)} records, fewer than batch_size {cfg.batch_size}")

    if resume_from is not None:
        state = load_model(resume_from)
        if cfgio.to_dict(state.config) != cfgio.to_dict(replace(cfg, model=state.config.model)):
            raise ConfigurationError("resume config differs from the checkpointed run")
    else:
        state = init_state(cfg, train_records)
    cfg = state.config
    codebook = state.model.patch_codebook() if cfg.model.mim_target == "codebook" else None

    log_path = out_dir / LOG_NAME
    kept = []
    if state.step and log_path.exists():
        kept = [ln for ln in log_path.read_text(encoding="utf-8").splitlines() if json.loads(ln)["step"] <= state.step]
    log_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")
    records_log = [json.loads(ln) for ln in kept]

    per_epoch = len(train_records) // cfg.batch_size
    by_id = dataset.by_id()
    last_ckpt = None
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    with open(log_path, "a", encoding="utf-8") as log_fh:
        while state.step < end:
            s = state.step
            epoch, idx = divmod(s, per_epoch)
            order = epoch_order(split.train, cfg.seed, epoch)
            batch_ids = order[idx * cfg.batch_size : (idx + 1) * cfg.batch_size]
            batch = prepare_batch([by_id[i] for i in batch_ids], state.vocab, cfg.model, cfg.masking, step_rng(cfg.seed, s), codebook)
            lr = lr_at(s, cfg)
            breakdown = train_step(state.model, state.optimizer, batch, cfg.weights, lr)
            state.step += 1
            rec = breakdown.log_record(state.step, lr)
            records_log.append(rec)
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
            if state.step % cfg.checkpoint_every == 0 or state.step == end:
                last_ckpt = save_checkpoint(out_dir / "checkpoints" / f"step_{state.step:06d}", state.to_checkpoint())
    if last_ckpt is None:
        last_ckpt = save_checkpoint(out_dir / "checkpoints" / f"step_{state.step:06d}", state.to_checkpoint())
    return FitResult(state, last_ckpt, records_log)
