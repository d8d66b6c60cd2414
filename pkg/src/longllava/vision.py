"""Toy vision tower: patch encoder, 2D/1D token pooling, MLP projector,
image tiling, and a tiny uncompressed raster file format.

Geometry mirrors the real model at a smaller pixel scale: a 96px image cut
into 4px patches gives the same 24x24 = 576 token grid as 336px / 14px, and
2x2 pooling gives the same 12x12 = 144.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import GQAAttention, RMSNorm, _linear
from .tensor import DEFAULT_DTYPE, Rng, ShapeError


@dataclass
class Image:
    """RGB image, pixels in [0, 1], array shape ``[height, width, channels]``."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError("Image", px.shape, detail="expected [H, W, C]")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def constant(cls, height: int, width: int, color=(0.5, 0.5, 0.5)) -> "Image":
        return cls(np.broadcast_to(np.asarray(color, np.float32), (height, width, len(color))).copy())


# ---------------------------------------------------------------------------
# raster file format: b"LLRI" | u32 width | u32 height | u32 channels | float32 LE pixels (row-major HWC)

RASTER_MAGIC = b"LLRI"
_RASTER_HEADER = struct.Struct("<4sIII")


def write_raster(image: Image, path: str | Path) -> None:
    header = _RASTER_HEADER.pack(RASTER_MAGIC, image.width, image.height, image.channels)
    Path(path).write_bytes(header + image.pixels.astype("<f4").tobytes())


def read_raster(path: str | Path) -> Image:
    raw = Path(path).read_bytes()
    if len(raw) < _RASTER_HEADER.size:
        raise ValueError(f"{path}: truncated raster header")
    magic, w, h, c = _RASTER_HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file")
    body = raw[_RASTER_HEADER.size:]
    if len(body) != w * h * c * 4:
        raise ValueError(f"{path}: payload is {len(body)} bytes, expected {w * h * c * 4}")
    return Image(np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32))


# ---------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 96
    patch_size: int = 4
    channels: int = 3
    d_vision: int = 64
    n_layers: int = 2
    n_heads: int = 4
    seed: int = 0

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> "EncoderConfig":
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not a multiple of patch_size {self.patch_size}")
        if self.d_vision % self.n_heads:
            raise ValueError("d_vision must be a multiple of n_heads")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PatchGrid:
    """``side x side`` feature vectors in raster order, ``tokens`` shape ``[side*side, d]``."""

    tokens: torch.Tensor
    side: int

    def __post_init__(self) -> None:
        if self.tokens.shape[0] != self.side * self.side:
            raise ShapeError("PatchGrid", self.tokens.shape, detail=f"side {self.side}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def as_map(self) -> torch.Tensor:
        return self.tokens.reshape(self.side, self.side, -1)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, rng: Rng, dtype) -> None:
        super().__init__()
        self.norm1 = RMSNorm(d, dtype=dtype)
        self.attn = GQAAttention(d, n_heads, n_heads, d // n_heads, rng.spawn("attn"), causal=False, dtype=dtype)
        self.norm2 = RMSNorm(d, dtype=dtype)
        self.fc1 = _linear(d, 2 * d, rng.spawn("fc1"), 0.02, bias=True, dtype=dtype)
        self.fc2 = _linear(2 * d, d, rng.spawn("fc2"), 0.02, bias=True, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class VisionEncoder(nn.Module):
    """Patchify, linear embed, a few bidirectional attention layers."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.cfg = cfg.validate()
        rng = Rng(cfg.seed, "encoder")
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_embed = _linear(patch_dim, cfg.d_vision, rng.spawn("patch"), 1.0 / math.sqrt(patch_dim),
                                   bias=True, dtype=dtype)
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_vision, cfg.n_heads, rng.spawn(f"layer{i}"), dtype)
                                    for i in range(cfg.n_layers))

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def patchify(self, image: Image) -> torch.Tensor:
        cfg = self.cfg
        if image.height != cfg.image_size or image.width != cfg.image_size or image.channels != cfg.channels:
            raise ShapeError("encode", image.pixels.shape, (cfg.image_size, cfg.image_size, cfg.channels))
        g, p = cfg.grid_side, cfg.patch_size
        px = torch.from_numpy(image.pixels).to(self.dtype)
        patches = px.reshape(g, p, g, p, cfg.channels).permute(0, 2, 1, 3, 4).reshape(g * g, p * p * cfg.channels)
        return patches

    def embed_patches(self, image: Image) -> torch.Tensor:
        return self.patch_embed(self.patchify(image))

    def forward(self, image: Image) -> PatchGrid:
        return encode(image, self)


def encode(image: Image, encoder: VisionEncoder) -> PatchGrid:
    x = encoder.embed_patches(image)
    for layer in encoder.layers:
        x = layer(x)
    return PatchGrid(x, encoder.cfg.grid_side)


# ---------------------------------------------------------------------------
# pooling


def pool2d(grid: PatchGrid, factor: int = 2, mode: str = "mean") -> PatchGrid:
    """Aggregate each ``factor x factor`` spatial block into one token (raster order kept)."""
    if factor < 1 or grid.side % factor:
        raise ShapeError("pool2d", (grid.side, grid.side), detail=f"side not divisible by factor {factor}")
    g, f = grid.side, factor
    d = grid.tokens.shape[-1]
    blocks = grid.tokens.reshape(g // f, f, g // f, f, d).permute(0, 2, 1, 3, 4).reshape(g // f, g // f, f * f, d)
    if mode == "mean":
        pooled = blocks.mean(dim=2)
    elif mode == "max":
        pooled = blocks.amax(dim=2)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return PatchGrid(pooled.reshape((g // f) ** 2, d), g // f)


def pool1d(grid: PatchGrid, factor: int = 4) -> torch.Tensor:
    """Mean over runs of ``factor`` consecutive raster-order tokens; ignores 2D adjacency."""
    n, d = grid.tokens.shape
    if factor < 1 or n % factor:
        raise ShapeError("pool1d", grid.tokens.shape, detail=f"token count not divisible by factor {factor}")
    return grid.tokens.reshape(n // factor, factor, d).mean(dim=1)


def upsample(grid: PatchGrid, factor: int = 2) -> PatchGrid:
    """Nearest-neighbour replication, the right inverse of ``pool2d`` on constant blocks."""
    m = grid.as_map().repeat_interleave(factor, 0).repeat_interleave(factor, 1)
    return PatchGrid(m.reshape(-1, m.shape[-1]), grid.side * factor)


# ---------------------------------------------------------------------------
# projector


class Projector(nn.Module):
    """Two affine maps with a GELU between them: d_vision -> d_hidden -> d_model."""

    def __init__(self, d_vision: int, d_model: int, d_hidden: int | None = None, seed: int = 0,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        d_hidden = d_hidden or d_model
        self.d_vision, self.d_hidden, self.d_model = d_vision, d_hidden, d_model
        rng = Rng(seed, "projector")
        self.fc1 = _linear(d_vision, d_hidden, rng.spawn("fc1"), 1.0 / math.sqrt(d_vision), bias=True, dtype=dtype)
        self.fc2 = _linear(d_hidden, d_model, rng.spawn("fc2"), 1.0 / math.sqrt(d_hidden), bias=True, dtype=dtype)

    def config(self) -> dict:
        return {"d_vision": self.d_vision, "d_hidden": self.d_hidden, "d_model": self.d_model}

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return project(tokens, self)


def project(tokens: torch.Tensor, projector: Projector) -> torch.Tensor:
    if tokens.shape[-1] != projector.d_vision:
        raise ShapeError("project", tokens.shape, (None, projector.d_vision))
    return projector.fc2(F.gelu(projector.fc1(tokens)))


# ---------------------------------------------------------------------------
# tiling


@dataclass
class Segmentation:
    main: Image
    subimages: list[Image]
    n_rows: int
    n_cols: int
    row_splits: list[int] = field(default_factory=list)  # cumulative sub-image count at each row end


def resize(image: Image, height: int, width: int) -> Image:
    t = torch.from_numpy(image.pixels).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return Image(out[0].permute(1, 2, 0).numpy())


def pad_to_tiles(image: Image, tile_side: int) -> np.ndarray:
    rows = math.ceil(image.height / tile_side)
    cols = math.ceil(image.width / tile_side)
    canvas = np.zeros((rows * tile_side, cols * tile_side, image.channels), np.float32)
    canvas[:image.height, :image.width] = image.pixels
    return canvas


def segment_image(image: Image, tile_side: int) -> Segmentation:
    """Zero-pad right/bottom to whole tiles and cut into row-major sub-images.

    ``main`` is the whole (unpadded) image resized to a single tile.
    """
    if tile_side <= 0:
        raise ValueError("tile_side must be positive")
    canvas = pad_to_tiles(image, tile_side)
    rows, cols = canvas.shape[0] // tile_side, canvas.shape[1] // tile_side
    subs = [Image(canvas[r * tile_side:(r + 1) * tile_side, c * tile_side:(c + 1) * tile_side])
            for r in range(rows) for c in range(cols)]
    return Segmentation(resize(image, tile_side, tile_side), subs, rows, cols,
                        [cols * (r + 1) for r in range(rows)])


# ---------------------------------------------------------------------------


def image_features(image: Image, encoder: VisionEncoder, pool_factor: int = 2) -> torch.Tensor:
    """Encoder output pooled 2D, ready for the projector (``[(g/f)^2, d_vision]``)."""
    grid = encode(image, encoder)
    if pool_factor == 1:
        return grid.tokens
    return pool2d(grid, pool_factor).tokens
