"""Region-aware cross-attention and concept-isolating self-attention.

This is the heart of the composition block: each foreground concept gets
its own cross-attention branch whose queries are restricted to the
concept's layout region and whose key/value projections carry that
concept's low-rank deltas; branch outputs are merged back over the
background branch. Self-attention is hard-masked so queries of one
concept region can never attend to keys of another, while
foreground/background interaction stays soft (handled by the region
loss, not a hard mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assets import AttentionWeights, ConceptBundle, apply_projection
from .autodiff import Tensor
from .errors import ArgumentError, ConfigurationError, EmptyMaskError, ShapeError

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class RegionSpec:
    """One concept's normalized layout box (x0, y0, x1, y1)."""

    box: Box
    concept_id: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ArgumentError(f"degenerate or out-of-range box {self.box}")


@dataclass(frozen=True)
class LayoutCondition:
    """Ordered concept regions plus the global prompt embedding."""

    regions: tuple[RegionSpec, ...]
    global_prompt_embed: np.ndarray  # (tokens, d_text)

    def __post_init__(self):
        ids = [r.concept_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ArgumentError(f"duplicate concept ids in layout: {ids}")
        if self.global_prompt_embed.ndim != 2:
            raise ArgumentError("global prompt embedding must be (tokens, d_text)")

    @property
    def concept_ids(self) -> tuple[str, ...]:
        return tuple(r.concept_id for r in self.regions)


@dataclass
class LayerRecord:
    """Attention maps captured by one composer block."""

    resolution: tuple[int, int]          # (height, width)
    cross_maps: dict[str, Tensor]        # concept id -> (h, w), heads averaged
    self_map: Tensor                     # (h*w, h*w), heads averaged


@dataclass
class AttnRecord:
    layers: list[LayerRecord] = field(default_factory=list)

    @property
    def loss_resolution(self) -> tuple[int, int]:
        if not self.layers:
            raise ArgumentError("empty attention record")
        return max((l.resolution for l in self.layers), key=lambda r: r[0] * r[1])

    def loss_layers(self) -> list[LayerRecord]:
        """Layers at the highest recorded resolution; these feed the losses."""
        res = self.loss_resolution
        return [l for l in self.layers if l.resolution == res]

    def averaged_cross_map(self, concept_id: str) -> np.ndarray:
        """Concept-token map averaged over the loss-resolution layers."""
        maps = [l.cross_maps[concept_id].data for l in self.loss_layers()]
        if not maps:
            raise ArgumentError(f"no cross map recorded for {concept_id!r}")
        return np.mean(maps, axis=0)


def rasterize_mask(box: Box, height: int, width: int) -> np.ndarray:
    """Binary (h, w) mask: pixel centers falling in [x0,x1) x [y0,y1)."""
    if height < 1 or width < 1:
        raise ArgumentError("mask extents must be positive")
    x0, y0, x1, y1 = box
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    mask = ((cy[:, None] >= y0) & (cy[:, None] < y1)
            & (cx[None, :] >= x0) & (cx[None, :] < x1)).astype(np.float64)
    if not mask.any():
        raise EmptyMaskError(f"box {box} covers no pixel at {height}x{width}")
    return mask


def gaussian_weight(box: Box, height: int, width: int) -> np.ndarray:
    """Separable Gaussian over the box, zero outside, in-box maximum 1.

    Sigmas are half the box extents in pixel units, so the weight decays
    toward the box edges and pulls high responses toward the center.
    """
    mask = rasterize_mask(box, height, width)
    x0, y0, x1, y1 = box
    sigma_x = (x1 - x0) * width / 2.0
    sigma_y = (y1 - y0) * height / 2.0
    cx = (x0 + x1) / 2.0 * width
    cy = (y0 + y1) / 2.0 * height
    dx = (np.arange(width) + 0.5) - cx
    dy = (np.arange(height) + 0.5) - cy
    g = np.exp(-(dy[:, None] ** 2 / (2.0 * sigma_y ** 2)
                 + dx[None, :] ** 2 / (2.0 * sigma_x ** 2)))
    g = g * mask
    return g / g.max()


@dataclass(frozen=True)
class RegionGeometry:
    """Layout rasterized at one resolution, shared across timesteps."""

    height: int
    width: int
    concept_ids: tuple[str, ...]
    masks: dict[str, np.ndarray]       # (h, w) binary
    gaussians: dict[str, np.ndarray]   # (h, w), in-box max 1
    allowed_self: np.ndarray | None    # (h*w, h*w) bool; None without regions

    @classmethod
    def build(cls, layout: LayoutCondition, height: int, width: int) -> "RegionGeometry":
        masks = {r.concept_id: rasterize_mask(r.box, height, width)
                 for r in layout.regions}
        gaussians = {r.concept_id: gaussian_weight(r.box, height, width)
                     for r in layout.regions}
        allowed = None
        if masks:
            stack = np.stack([m.reshape(-1) for m in masks.values()]) > 0
            foreground = stack.any(axis=0)
            shared = (stack.T.astype(np.float64) @ stack.astype(np.float64)) > 0
            blocked = foreground[:, None] & foreground[None, :] & ~shared
            allowed = ~blocked
        return cls(height=height, width=width, concept_ids=layout.concept_ids,
                   masks=masks, gaussians=gaussians, allowed_self=allowed)

    def flat_mask(self, concept_id: str) -> np.ndarray:
        return self.masks[concept_id].reshape(-1)


def _multihead(q: Tensor, k: Tensor, v: Tensor, n_heads: int, wo: np.ndarray,
               allowed: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns hidden and heads-averaged map."""
    d = q.shape[1]
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = math.sqrt(dh)
    outs, maps = [], []
    for h in range(n_heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        logits = ad.matmul(qh, ad.transpose2d(kh)) / scale
        if allowed is None:
            attn = ad.softmax_rows(logits)
        else:
            attn = ad.masked_softmax_rows(logits, allowed)
        maps.append(attn)
        outs.append(ad.matmul(attn, vh))
    hidden = ad.matmul(ad.concat(outs, axis=1), ad.transpose2d(Tensor(wo)))
    avg = maps[0]
    for m in maps[1:]:
        avg = avg + m
    if n_heads > 1:
        avg = avg / float(n_heads)
    return hidden, avg


def compose_hidden(h0: Tensor, regional: list[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Merge per-region hidden states over the background hidden state.

    Pixels covered by no mask keep h0; pixels covered by k masks take the
    arithmetic mean of the k covering states.
    """
    if not regional:
        return h0
    n_pixels = h0.shape[0]
    flats = []
    for mask, hidden in regional:
        flat = np.asarray(mask, dtype=np.float64).reshape(-1)
        if flat.size != n_pixels or hidden.shape != h0.shape:
            raise ShapeError("regional entries must match the base hidden state")
        flats.append(flat)
    count = np.sum(flats, axis=0)
    background = (count == 0).astype(np.float64)
    safe = np.maximum(count, 1.0)
    out = ad.mul(h0, Tensor(background[:, None]))
    for flat, (_, hidden) in zip(flats, regional):
        out = out + ad.mul(hidden, Tensor((flat / safe)[:, None]))
    return out


def region_cross_attention(
    z_flat: Tensor,
    layout: LayoutCondition,
    bundles: dict[str, ConceptBundle],
    weights: AttentionWeights,
    n_heads: int,
    geometry: RegionGeometry,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Cross-attention with one LoRA-injected branch per concept region.

    The n=0 branch attends the global prompt with base weights and an
    all-ones mask; branch n masks its queries with the concept's region
    and projects keys/values through the concept's deltas. Returns the
    composed hidden state and the recorded concept-token maps.
    """
    h, w = geometry.height, geometry.width
    if z_flat.shape[0] != h * w:
        raise ShapeError(f"hidden rows {z_flat.shape[0]} != {h}x{w}")
    q_full = apply_projection(z_flat, weights.wq)
    k0 = apply_projection(Tensor(layout.global_prompt_embed), weights.wk)
    v0 = apply_projection(Tensor(layout.global_prompt_embed), weights.wv)
    h0, _ = _multihead(q_full, k0, v0, n_heads, weights.wo, allowed=None)

    regional: list[tuple[np.ndarray, Tensor]] = []
    cross_maps: dict[str, Tensor] = {}
    for region in layout.regions:
        bundle = bundles.get(region.concept_id)
        if bundle is None:
            raise ConfigurationError(f"no bundle for concept {region.concept_id!r}")
        mask = geometry.flat_mask(region.concept_id)
        qn = ad.mul(q_full, Tensor(mask[:, None]))
        prompt = Tensor(bundle.prompt_embed)
        kn = apply_projection(prompt, weights.wk, bundle.deltas.get("cross.W_K"))
        vn = apply_projection(prompt, weights.wv, bundle.deltas.get("cross.W_V"))
        hn, attn = _multihead(qn, kn, vn, n_heads, weights.wo, allowed=None)
        concept_col = ad.column(attn, bundle.token_index)
        cross_maps[region.concept_id] = ad.reshape(concept_col, (h, w))
        regional.append((mask, hn))

    return compose_hidden(h0, regional), cross_maps


def masked_self_attention(
    z_flat: Tensor,
    weights: AttentionWeights,
    n_heads: int,
    geometry: RegionGeometry,
) -> tuple[Tensor, Tensor]:
    """Self-attention whose cross-concept interactions are hard-masked.

    Attention between pixels of distinct foreground regions is exactly
    zero in both directions; every other pair, including foreground to
    background, interacts normally. Rows renormalize over permitted keys.
    """
    h, w = geometry.height, geometry.width
    if z_flat.shape[0] != h * w:
        raise ShapeError(f"hidden rows {z_flat.shape[0]} != {h}x{w}")
    q = apply_projection(z_flat, weights.wq)
    k = apply_projection(z_flat, weights.wk)
    v = apply_projection(z_flat, weights.wv)
    return _multihead(q, k, v, n_heads, weights.wo, geometry.allowed_self)
