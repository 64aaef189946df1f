"""Patch featurizer, transformer encoder, and object-query selection.

Turns an RGB image into a map of context-aware feature tokens and picks the
top-scoring tokens as the initial object queries. This is the desk-scale
stand-in for a CNN backbone + hybrid encoder: a linear patch projection with
fixed 2-D sinusoidal positions, followed by plain transformer encoder layers
and a hard top-N objectness selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import (
    AttentionParams,
    ConfigError,
    DiffArray,
    FeedForwardParams,
    LayerNormParams,
    LinearParams,
    attn_sublayer,
    ffn_sublayer,
)


@dataclass
class ModelConfig:
    """Structural hyperparameters of the detector.

    Desk-scale defaults; the paper-scale operating point (embed_dim 256,
    300 queries, 8 heads) stays reachable through explicit settings.
    """

    embed_dim: int = 64
    num_queries: int = 25
    text_tokens: int = 8
    decoder_layers: int = 6
    heads: int = 4
    encoder_layers: int = 2
    patch_size: int = 8
    image_size: int = 64
    vocab_size: int = 12
    ffn_multiplier: int = 4

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def ffn_hidden(self):
        return self.embed_dim * self.ffn_multiplier

    def validate(self):
        if self.image_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.embed_dim % 4 != 0:
            raise ConfigError("embed dim must be a multiple of 4 for 2-D sinusoidal positions")
        if not 1 <= self.num_queries <= self.num_patches:
            raise ConfigError(
                f"num_queries {self.num_queries} must be in [1, {self.num_patches}]"
            )
        if self.text_tokens < 2:
            raise ConfigError("text_tokens must be >= 2 (one token plus the end marker)")
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers must be >= 1")
        if self.encoder_layers < 0:
            raise ConfigError("encoder_layers must be >= 0")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover PAD, EOS, and at least one word")
        return self


@dataclass
class FeatureMap:
    """Per-patch feature tokens plus the fixed positional table they carry."""

    tokens: DiffArray  # (num_patches, embed_dim)
    positions: np.ndarray  # (num_patches, embed_dim), deterministic from config


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln_attn: LayerNormParams
    ffn: FeedForwardParams
    ln_ffn: LayerNormParams

    @staticmethod
    def create(rng, d, hidden, dtype=np.float32):
        # identity q/k start attention at content+position similarity, so
        # same-colored neighboring patches group without any training
        return EncoderLayerParams(
            attn=AttentionParams.create(rng, d, dtype=dtype, zero_out=True, identity_qk=True),
            ln_attn=LayerNormParams.create(d, dtype=dtype),
            ffn=FeedForwardParams.create(rng, d, hidden, dtype=dtype, zero_out=True),
            ln_ffn=LayerNormParams.create(d, dtype=dtype),
        )


@dataclass
class FeaturizerParams:
    patch: LinearParams
    encoder: list
    score: LinearParams  # objectness logit per encoder token
    query_proj: LinearParams

    @staticmethod
    def create(rng, cfg, dtype=np.float32):
        d = cfg.embed_dim
        own = 5 * ORIENTATION_BINS + 1
        in_dim = cfg.patch_size * cfg.patch_size * 3 + own + 8 * (ORIENTATION_BINS + 4)
        return FeaturizerParams(
            patch=LinearParams.create(rng, in_dim, d, dtype=dtype),
            encoder=[
                EncoderLayerParams.create(rng, d, cfg.ffn_hidden, dtype=dtype)
                for _ in range(cfg.encoder_layers)
            ],
            score=LinearParams.create(rng, d, 1, dtype=dtype),
            query_proj=LinearParams.create(rng, d, d, dtype=dtype),
        )


def sinusoidal_positions(grid_h, grid_w, d):
    """Fixed 2-D sin/cos positional table, (grid_h * grid_w, d)."""
    half = d // 2

    def axis_table(n):
        pos = np.arange(n, dtype=np.float64)[:, None]
        i = np.arange(half // 2, dtype=np.float64)[None, :]
        angles = pos / np.power(10000.0, 2.0 * i / half)
        table = np.zeros((n, half))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        return table

    ys = axis_table(grid_h)
    xs = axis_table(grid_w)
    out = np.zeros((grid_h, grid_w, d))
    out[:, :, :half] = ys[:, None, :]
    out[:, :, half:] = xs[None, :, :]
    return out.reshape(grid_h * grid_w, d)


def image_to_patches(image, patch_size):
    """(..., H, W, 3) -> (..., num_patches, patch_size*patch_size*3) with a
    row-major patch grid."""
    *lead, h, w, _ = image.shape
    gh, gw = h // patch_size, w // patch_size
    patches = image.reshape(*lead, gh, patch_size, gw, patch_size, 3)
    n = len(lead)
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    return patches.transpose(order).reshape(*lead, gh * gw, -1)


ORIENTATION_BINS = 6


def edge_orientation_descriptors(image, patch_size):
    """Fixed per-patch edge statistics: magnitude-weighted orientation
    histograms (whole patch + four quadrants), computed strictly inside
    each patch. (..., num_patches, 30 + 1) features that expose local
    contour geometry a linear pixel projection keeps entangled with
    position."""
    gray = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    *lead, h, w = gray.shape
    gh, gw = h // patch_size, w // patch_size
    n = len(lead)
    cells = gray.reshape(*lead, gh, patch_size, gw, patch_size)
    cells = cells.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3))
    dy = np.zeros_like(cells)
    dx = np.zeros_like(cells)
    dy[..., 1:-1, :] = cells[..., 2:, :] - cells[..., :-2, :]
    dx[..., :, 1:-1] = cells[..., :, 2:] - cells[..., :, :-2]
    mag = np.hypot(dx, dy)
    ang = np.mod(np.arctan2(dy, dx), np.pi)
    bins = np.minimum(
        (ang * (ORIENTATION_BINS / np.pi)).astype(np.int64), ORIENTATION_BINS - 1
    )
    half = patch_size // 2
    parts = []
    regions = [(slice(None), slice(None))]
    regions += [
        (slice(0, half), slice(0, half)),
        (slice(0, half), slice(half, None)),
        (slice(half, None), slice(0, half)),
        (slice(half, None), slice(half, None)),
    ]
    for ys, xs in regions:
        m = mag[..., ys, xs].reshape(*lead, gh, gw, -1)
        b = bins[..., ys, xs].reshape(*lead, gh, gw, -1)
        hist = np.zeros((*lead, gh, gw, ORIENTATION_BINS))
        for k in range(ORIENTATION_BINS):
            hist[..., k] = np.where(b == k, m, 0.0).sum(axis=-1)
        hist /= hist.sum(axis=-1, keepdims=True) + 1e-6
        parts.append(hist)
    total_mag = mag.reshape(*lead, gh, gw, -1).sum(axis=-1, keepdims=True)
    parts.append(np.tanh(total_mag))
    own = np.concatenate(parts, axis=-1)

    # receptive-field widening: each patch also sees the coarse signature
    # (edge histogram + strength + mean color) of its 8 neighbors
    mean_rgb = image.reshape(*lead, gh, patch_size, gw, patch_size, 3)
    mean_rgb = mean_rgb.mean(axis=(n + 1, n + 3))  # (..., gh, gw, 3)
    summary = np.concatenate([parts[0], np.tanh(total_mag), mean_rgb], axis=-1)
    padded = np.zeros((*lead, gh + 2, gw + 2, summary.shape[-1]))
    padded[..., 1:-1, 1:-1, :] = summary
    rings = [
        padded[..., 1 + dy : 1 + dy + gh, 1 + dx : 1 + dx + gw, :]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if not (dy == 0 and dx == 0)
    ]
    out = np.concatenate([own] + rings, axis=-1)
    return out.reshape(*lead, gh * gw, out.shape[-1])


def patch_embed(image, params, cfg):
    """Project non-overlapping patches to embed_dim and add positions.

    Each patch contributes its flattened pixels plus fixed patch-local edge
    descriptors; both stay strictly local to the patch. Accepts one
    (H, W, 3) image or a stacked (B, H, W, 3) batch.
    """
    image = np.asarray(image)
    if image.shape[-3:] != (cfg.image_size, cfg.image_size, 3) or image.ndim not in (3, 4):
        raise ConfigError(
            f"expected a {cfg.image_size}x{cfg.image_size}x3 image (or batch), got {image.shape}"
        )
    if cfg.image_size % cfg.patch_size != 0:
        raise ConfigError("image size not divisible by patch size")
    dtype = params.patch.w.data.dtype
    image = image.astype(dtype)
    flat = np.concatenate(
        [
            image_to_patches(image, cfg.patch_size),
            edge_orientation_descriptors(image, cfg.patch_size).astype(dtype),
        ],
        axis=-1,
    )
    positions = sinusoidal_positions(cfg.grid, cfg.grid, cfg.embed_dim).astype(dtype)
    tokens = params.patch(DiffArray(flat)) + positions
    return FeatureMap(tokens=tokens, positions=positions)


def encode(fm, params, cfg):
    """Run the encoder stack; zero layers is the identity on the tokens."""
    x = fm.tokens
    for layer in params.encoder:
        x = attn_sublayer(layer.attn, layer.ln_attn, x, x, cfg.heads)
        x = ffn_sublayer(layer.ffn, layer.ln_ffn, x)
    return x


def select_queries(features, params, cfg):
    """Pick the top-N encoder tokens by objectness logit as initial queries.

    Returns the projected query features (descending-score order; score ties
    broken by lower token index) and the selected token indices. Gradients
    flow through the gathered features, never through the ranking.
    """
    m = features.data.shape[-2]
    if cfg.num_queries > m:
        raise ConfigError(f"cannot select {cfg.num_queries} queries from {m} tokens")
    logits = (features.data @ params.score.w.data + params.score.b.data)[..., 0]
    order = np.argsort(-logits, axis=-1, kind="stable")
    selected = order[..., : cfg.num_queries]
    if features.data.ndim == 2:
        gathered = features[selected]
    else:
        batch = np.arange(features.data.shape[0])[:, None]
        gathered = features[batch, selected]
    queries = params.query_proj(gathered)
    return queries, selected
