"""The joint model: four encoders, the pretraining heads and the shared temperature."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from flavars import config as cfgio
from flavars.encoders import (
    EmbeddingSet,
    FusionConfig,
    FusionEncoder,
    LocationConfig,
    LocationEncoder,
    TextConfig,
    TextEncoder,
    VisionConfig,
    VisionEncoder,
    init_transformer_params,
)
from flavars.errors import ConfigurationError
from flavars.objectives import PatchCodebook, Temperature


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    location: LocationConfig = field(default_factory=LocationConfig)
    codebook_size: int = 64
    mim_target: str = "codebook"  # "codebook" or "pixels"
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0

    def __post_init__(self):
        if self.mim_target not in ("codebook", "pixels"):
            raise ConfigurationError(f"mim_target must be 'codebook' or 'pixels', got {self.mim_target!r}")
        if self.codebook_size < 1:
            raise ConfigurationError("codebook_size must be >= 1")
        shared = {self.vision.proj_dim, self.text.proj_dim, self.location.proj_dim}
        if len(shared) != 1:
            raise ConfigurationError(f"encoders must share one proj_dim, got {sorted(shared)}")

    @property
    def fingerprint(self) -> str:
        """Architecture hash; the vocabulary size is data-derived and left out."""
        data = cfgio.to_dict(self)
        data["text"].pop("vocab_size")
        return cfgio.fingerprint(data)


class FlavarsModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionEncoder(cfg.vision)
        self.text = TextEncoder(cfg.text)
        self.fusion = FusionEncoder(cfg.fusion, cfg.vision.width, cfg.text.width)
        self.location = LocationEncoder(cfg.location)
        mim_out = cfg.codebook_size if cfg.mim_target == "codebook" else cfg.vision.patch_dim
        self.mim_head = nn.Sequential(nn.LayerNorm(cfg.vision.width), nn.Linear(cfg.vision.width, mim_out))
        self.mlm_head = nn.Sequential(nn.LayerNorm(cfg.text.width), nn.Linear(cfg.text.width, cfg.text.vocab_size))
        self.itm_head = nn.Linear(cfg.fusion.width, 2)
        self.temperature = Temperature(cfg.tau_init, cfg.tau_min, cfg.tau_max)
        self.register_buffer("codebook", torch.zeros(cfg.codebook_size, cfg.vision.patch_dim))

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.vision.reset_parameters(generator)
        self.text.reset_parameters(generator)
        self.fusion.reset_parameters(generator)
        self.location.reset_parameters(generator)
        for head in (self.mim_head, self.mlm_head):
            init_transformer_params(head, generator)
        with torch.no_grad():
            # head Sequentials name their LayerNorm "0"
            for head in (self.mim_head, self.mlm_head):
                head[0].weight.fill_(1.0)
                head[0].bias.zero_()
        init_transformer_params(self.itm_head, generator)

    def set_codebook(self, codebook: PatchCodebook) -> None:
        if codebook.centroids.shape != tuple(self.codebook.shape):
            raise ConfigurationError(f"codebook shape {codebook.centroids.shape} != {tuple(self.codebook.shape)}")
        with torch.no_grad():
            self.codebook.copy_(torch.from_numpy(codebook.centroids))

    def patch_codebook(self) -> PatchCodebook:
        return PatchCodebook(self.codebook.detach().cpu().numpy().astype(np.float64))

    # named entry points
    def encode_image(self, images: torch.Tensor, patch_mask=None) -> EmbeddingSet:
        return self.vision(images, patch_mask)

    def encode_text(self, ids: torch.Tensor, pad_mask=None) -> EmbeddingSet:
        return self.text(ids, pad_mask)

    def encode_multimodal(self, image_states, text_states, text_pad=None):
        return self.fusion(image_states, text_states, text_pad)

    def encode_location(self, coords: torch.Tensor) -> torch.Tensor:
        return self.location(coords)


def build_model(cfg: ModelConfig, seed: int) -> FlavarsModel:
    model = FlavarsModel(cfg)
    model.reset_parameters(torch.Generator().manual_seed(seed))
    return model
