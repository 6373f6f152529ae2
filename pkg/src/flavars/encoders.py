"""Image, text, fusion and location encoders sharing one embedding space.

Every encoder returns token states plus a pooled embedding: the [CLS]
state projected to ``proj_dim`` and L2-normalised.  Images are channel-last
``[B, H, W, C]`` floats in ``[0, 1]``; coordinates are ``[B, 2]`` tensors of
``(lat, lon)`` in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from flavars.errors import ConfigurationError, DataError

# ---------------------------------------------------------------------------
# configs and small value types
# ---------------------------------------------------------------------------


def _require_positive(obj, names):
    for name in names:
        value = getattr(obj, name)
        if not isinstance(value, int) or value <= 0:
            raise ConfigurationError(f"{type(obj).__name__}.{name} must be a positive int, got {value!r}")


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    width: int = 64
    depth: int = 2
    heads: int = 4
    proj_dim: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        _require_positive(self, ["image_size", "patch_size", "channels", "width", "depth", "heads", "proj_dim", "mlp_ratio"])
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 128
    max_len: int = 16
    width: int = 64
    depth: int = 2
    heads: int = 4
    proj_dim: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        _require_positive(self, ["vocab_size", "max_len", "width", "depth", "heads", "proj_dim", "mlp_ratio"])
        if self.vocab_size < 5:
            raise ConfigurationError("vocab_size must be >= 5 to hold the special tokens")
        if self.max_len < 2:
            raise ConfigurationError("max_len must be >= 2")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class FusionConfig:
    width: int = 64
    depth: int = 1
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        _require_positive(self, ["width", "depth", "heads", "mlp_ratio"])
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class LocationConfig:
    max_degree: int = 3
    hidden_width: int = 64
    hidden_depth: int = 2
    proj_dim: int = 32

    def __post_init__(self):
        if not isinstance(self.max_degree, int) or self.max_degree < 0:
            raise ConfigurationError(f"max_degree must be a non-negative int, got {self.max_degree!r}")
        _require_positive(self, ["hidden_width", "hidden_depth", "proj_dim"])

    @property
    def num_basis(self) -> int:
        return (self.max_degree + 1) ** 2


@dataclass(frozen=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise DataError(f"latitude {self.lat!r} outside [-90, 90]")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise DataError(f"longitude {self.lon!r} outside [-180, 180]")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    pad_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.pad_mask):
            raise DataError("ids and pad_mask lengths differ")
        seen_pad = False
        for is_pad in self.pad_mask:
            if seen_pad and not is_pad:
                raise DataError("pad positions must form a suffix")
            seen_pad = seen_pad or is_pad

    def __len__(self):
        return len(self.ids)


@dataclass
class EmbeddingSet:
    """Token states ``[B, T, width]`` and pooled unit-norm embeddings ``[B, proj_dim]``."""

    token_states: torch.Tensor
    pooled: torch.Tensor


def stack_tokens(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch token sequences of equal length into ``(ids, pad_mask)`` tensors."""
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    pad = torch.tensor([s.pad_mask for s in seqs], dtype=torch.bool)
    return ids, pad


def coords_to_tensor(coords: Sequence[GeoCoordinate], dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([[c.lat, c.lon] for c in coords], dtype=dtype)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``[B, H, W, C]`` arrays to floats in ``[0, 1]``."""
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return torch.from_numpy(arr.astype(np.float64) / 255.0).to(dtype)
    return torch.as_tensor(arr, dtype=dtype)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(image, patch_size: int):
    """Split ``[..., H, W, C]`` into ``[..., (H/p)*(W/p), p*p*C]`` row-major patches.

    Works on numpy arrays and torch tensors alike.
    """
    h, w, c = image.shape[-3:]
    if h != w:
        raise ConfigurationError(f"image must be square, got {h}x{w}")
    if patch_size <= 0 or h % patch_size:
        raise ConfigurationError(f"image side {h} not divisible by patch_size {patch_size}")
    g = h // patch_size
    lead = tuple(image.shape[:-3])
    x = image.reshape(*lead, g, patch_size, g, patch_size, c)
    x = x.swapaxes(-4, -3)
    return x.reshape(*lead, g * g, patch_size * patch_size * c)


def unpatchify(patches, patch_size: int, channels: int):
    n, d = patches.shape[-2:]
    g = math.isqrt(n)
    if g * g != n or d != patch_size * patch_size * channels:
        raise ConfigurationError(f"cannot unpatchify {n} patches of length {d}")
    lead = tuple(patches.shape[:-2])
    x = patches.reshape(*lead, g, g, patch_size, patch_size, channels)
    x = x.swapaxes(-4, -3)
    return x.reshape(*lead, g * patch_size, g * patch_size, channels)


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def spherical_harmonic_features(coords, max_degree: int) -> torch.Tensor:
    """Real orthonormal spherical harmonics up to degree ``max_degree``.

    ``coords`` is a GeoCoordinate, a sequence of them, or a ``[..., 2]``
    array of (lat, lon) degrees.  Colatitude is ``90 - lat``, azimuth is
    ``lon``.  Output index for degree l and order m is ``l*l + l + m``.
    """
    if isinstance(coords, GeoCoordinate):
        coords = [[coords.lat, coords.lon]]
        squeeze = True
    else:
        squeeze = False
        if isinstance(coords, (list, tuple)) and coords and isinstance(coords[0], GeoCoordinate):
            coords = [[c.lat, c.lon] for c in coords]
    t = torch.as_tensor(coords)
    out_dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
    t = t.to(torch.float64)
    theta = torch.deg2rad(90.0 - t[..., 0])
    lon = t[..., 1]
    # +180 and -180 are the same meridian
    lam = torch.deg2rad(torch.where(lon >= 180.0, lon - 360.0, lon))
    x = torch.cos(theta)
    s = torch.sin(theta).clamp_min(0.0)

    L = max_degree
    # unnormalised associated Legendre P_l^m(x), no Condon-Shortley phase
    P = {}
    pmm = torch.ones_like(x)
    for m in range(L + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * s
        P[(m, m)] = pmm
        if m + 1 <= L:
            P[(m + 1, m)] = x * (2 * m + 1) * pmm
        for l in range(m + 2, L + 1):
            P[(l, m)] = ((2 * l - 1) * x * P[(l - 1, m)] - (l + m - 1) * P[(l - 2, m)]) / (l - m)

    feats = []
    for l in range(L + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
            if m == 0:
                feats.append(norm * P[(l, 0)])
            elif m > 0:
                feats.append(math.sqrt(2.0) * norm * P[(l, am)] * torch.cos(am * lam))
            else:
                feats.append(math.sqrt(2.0) * norm * P[(l, am)] * torch.sin(am * lam))
    out = torch.stack(feats, dim=-1).to(out_dtype)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, key_pad=None):
        b, t, d = x.shape
        q, k, v = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_pad is not None:
            # -inf gives exactly zero weight, so pad contents cannot leak
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width))

    def forward(self, x, key_pad=None):
        x = x + self.attn(self.norm1(x), key_pad)
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, depth: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList([Block(width, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)

    def forward(self, x, key_pad=None):
        for block in self.blocks:
            x = block(x, key_pad)
        return self.norm(x)


def init_transformer_params(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Seeded init: matrices and learned tokens ~ N(0, std), biases 0, norms 1."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if ".norm" in f".{name}" and leaf == "weight":
                p.fill_(1.0)
            elif p.dim() >= 2 or leaf in ("cls_token", "pos_embed", "mask_token", "type_embed"):
                p.normal_(0.0, std, generator=generator)
            else:
                p.zero_()


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.width))
        self.mask_token = nn.Parameter(torch.zeros(cfg.width))
        self.transformer = Transformer(cfg.width, cfg.depth, cfg.heads, cfg.mlp_ratio)
        self.proj = nn.Linear(cfg.width, cfg.proj_dim, bias=False)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_transformer_params(self, generator)

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ConfigurationError(
                f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], got {tuple(images.shape)}"
            )
        return self.patch_embed(patchify(images, cfg.patch_size))

    def forward(self, images: torch.Tensor, patch_mask: torch.Tensor | None = None) -> EmbeddingSet:
        """``patch_mask`` is an optional bool ``[B, num_patches]``; True rows get the mask token."""
        x = self.embed_patches(images)
        if patch_mask is not None:
            x = torch.where(patch_mask[..., None], self.mask_token.to(x.dtype), x)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        states = self.transformer(x)
        pooled = F.normalize(self.proj(states[:, 0]), dim=-1)
        return EmbeddingSet(states, pooled)


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len, cfg.width))
        self.transformer = Transformer(cfg.width, cfg.depth, cfg.heads, cfg.mlp_ratio)
        self.proj = nn.Linear(cfg.width, cfg.proj_dim, bias=False)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_transformer_params(self, generator)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> EmbeddingSet:
        if ids.dim() != 2 or ids.shape[1] > self.cfg.max_len or ids.shape[1] < 1:
            raise ConfigurationError(f"expected ids [B, <= {self.cfg.max_len}], got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise DataError(f"token id outside [0, {self.cfg.vocab_size})")
        x = self.token_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        states = self.transformer(x, pad_mask)
        pooled = F.normalize(self.proj(states[:, 0]), dim=-1)
        return EmbeddingSet(states, pooled)


class FusionEncoder(nn.Module):
    """Joint transformer over ``[fusion CLS] + image states + text states``."""

    def __init__(self, cfg: FusionConfig, image_width: int, text_width: int):
        super().__init__()
        self.cfg = cfg
        self.image_width = image_width
        self.text_width = text_width
        self.image_in = nn.Linear(image_width, cfg.width)
        self.text_in = nn.Linear(text_width, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.type_embed = nn.Parameter(torch.zeros(2, cfg.width))
        self.transformer = Transformer(cfg.width, cfg.depth, cfg.heads, cfg.mlp_ratio)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_transformer_params(self, generator)

    def forward(self, image_states, text_states, text_pad=None):
        if image_states.shape[-1] != self.image_width or text_states.shape[-1] != self.text_width:
            raise ConfigurationError(
                f"fusion expects widths ({self.image_width}, {self.text_width}), "
                f"got ({image_states.shape[-1]}, {text_states.shape[-1]})"
            )
        img = self.image_in(image_states) + self.type_embed[0]
        txt = self.text_in(text_states) + self.type_embed[1]
        b = img.shape[0]
        x = torch.cat([self.cls_token.expand(b, -1, -1), img, txt], dim=1)
        key_pad = None
        if text_pad is not None:
            head = torch.zeros(b, 1 + img.shape[1], dtype=torch.bool, device=text_pad.device)
            key_pad = torch.cat([head, text_pad], dim=1)
        states = self.transformer(x, key_pad)
        return states, states[:, 0]


class LocationEncoder(nn.Module):
    """Spherical-harmonic basis followed by a GELU MLP and a normalised projection."""

    def __init__(self, cfg: LocationConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        fan_in = cfg.num_basis
        for _ in range(cfg.hidden_depth):
            layers += [nn.Linear(fan_in, cfg.hidden_width), nn.GELU()]
            fan_in = cfg.hidden_width
        self.mlp = nn.Sequential(*layers)
        self.proj = nn.Linear(fan_in, cfg.proj_dim, bias=False)

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    # the SH basis has small magnitudes, so keep unit-variance fan-in scaling
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.weight.mul_(math.sqrt(3.0))
                    if module.bias is not None:
                        module.bias.zero_()

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        if coords.dim() != 2 or coords.shape[1] != 2:
            raise ConfigurationError(f"expected coords [B, 2], got {tuple(coords.shape)}")
        lat, lon = coords[:, 0], coords[:, 1]
        if bool(((lat < -90) | (lat > 90) | (lon < -180) | (lon > 180)).any()):
            raise DataError("coordinate outside lat [-90, 90] / lon [-180, 180]")
        basis = spherical_harmonic_features(coords, self.cfg.max_degree).to(self.proj.weight.dtype)
        return F.normalize(self.proj(self.mlp(basis)), dim=-1)
