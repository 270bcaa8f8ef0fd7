"""Toy two-resolution denoiser built from composer attention blocks.

The stack is intentionally small but keeps the structure that matters:
a per-pixel linear lift, a sinusoidal timestep bias, two attention blocks
at full resolution, a 2x2 pooled block at half resolution (so concept
features really do bleed across region borders on the coarse grid), a
nearest-neighbour upsample with skip connection and a per-pixel linear
head predicting the noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assets import BaseWeights, ConceptBundle, ModelDims
from .attention import (
    AttnRecord,
    LayerRecord,
    LayoutCondition,
    RegionGeometry,
    masked_self_attention,
    region_cross_attention,
)
from .autodiff import Tensor
from .errors import ConfigurationError


@dataclass(frozen=True)
class DenoiserContext:
    """Everything a forward pass needs besides the latent and timestep."""

    weights: BaseWeights
    layout: LayoutCondition
    bundles: dict[str, ConceptBundle]
    geometries: dict[tuple[int, int], RegionGeometry]

    @property
    def dims(self) -> ModelDims:
        return self.weights.dims

    @property
    def loss_geometry(self) -> RegionGeometry:
        d = self.dims
        return self.geometries[(d.height, d.width)]


def build_context(weights: BaseWeights, layout: LayoutCondition,
                  bundles: dict[str, ConceptBundle]) -> DenoiserContext:
    """Validate assets against each other and rasterize every resolution."""
    dims = weights.dims
    for region in layout.regions:
        bundle = bundles.get(region.concept_id)
        if bundle is None:
            raise ConfigurationError(f"no bundle for concept {region.concept_id!r}")
        if bundle.prompt_embed.shape[1] != dims.d_text:
            raise ConfigurationError(
                f"bundle {region.concept_id!r} has d_text "
                f"{bundle.prompt_embed.shape[1]}, model expects {dims.d_text}")
        for name, delta in bundle.deltas.items():
            if delta.up.shape[0] != dims.d_model:
                raise ConfigurationError(
                    f"bundle {region.concept_id!r} delta {name} targets width "
                    f"{delta.up.shape[0]}, model expects {dims.d_model}")
    if layout.global_prompt_embed.shape[1] != dims.d_text:
        raise ConfigurationError(
            f"global prompt d_text {layout.global_prompt_embed.shape[1]} "
            f"does not match model d_text {dims.d_text}")
    resolutions = ((dims.height, dims.width), (dims.height // 2, dims.width // 2))
    geometries = {res: RegionGeometry.build(layout, *res) for res in resolutions}
    return DenoiserContext(weights=weights, layout=layout, bundles=bundles,
                           geometries=geometries)


def sinusoidal_embedding(t: int, width: int) -> np.ndarray:
    """Fixed sin/cos timestep features used as a channel bias."""
    half = (width + 1) // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs
    emb = np.zeros(width)
    emb[0::2] = np.sin(angles[: (width + 1) // 2])
    emb[1::2] = np.cos(angles[: width // 2])
    return emb


def _composer_block(x: Tensor, ctx: DenoiserContext, block_index: int,
                    geometry: RegionGeometry) -> tuple[Tensor, LayerRecord]:
    """Pre-norm residual block: masked self-attention then region cross."""
    block = ctx.weights.blocks[block_index]
    heads = ctx.dims.n_heads
    sa_out, self_map = masked_self_attention(
        ad.layernorm_rows(x), block.self_attn, heads, geometry)
    x = x + sa_out
    ca_out, cross_maps = region_cross_attention(
        ad.layernorm_rows(x), ctx.layout, ctx.bundles, block.cross_attn,
        heads, geometry)
    x = x + ca_out
    record = LayerRecord(resolution=(geometry.height, geometry.width),
                         cross_maps=cross_maps, self_map=self_map)
    return x, record


def denoiser_forward(z: Tensor, t: int, ctx: DenoiserContext) -> tuple[Tensor, AttnRecord]:
    """Predict the noise for latent z at timestep t, recording attention."""
    dims = ctx.dims
    if z.shape != (dims.channels, dims.height, dims.width):
        raise ConfigurationError(
            f"latent shape {z.shape} does not match "
            f"({dims.channels}, {dims.height}, {dims.width})")
    h, w = dims.height, dims.width
    full = ctx.geometries[(h, w)]
    pooled = ctx.geometries[(h // 2, w // 2)]

    z_flat = ad.transpose2d(ad.reshape(z, (dims.channels, h * w)))
    x = ad.matmul(z_flat, ad.transpose2d(Tensor(ctx.weights.w_in)))
    x = x + Tensor(sinusoidal_embedding(t, dims.d_model))

    record = AttnRecord()
    x, layer0 = _composer_block(x, ctx, 0, full)
    record.layers.append(layer0)
    x, layer1 = _composer_block(x, ctx, 1, full)
    record.layers.append(layer1)

    skip = x
    down = ad.avg_pool_2x2(x, h, w)
    down, layer2 = _composer_block(down, ctx, 2, pooled)
    record.layers.append(layer2)
    x = ad.upsample_nearest_2x(down, h // 2, w // 2) + skip

    eps_flat = ad.matmul(x, ad.transpose2d(Tensor(ctx.weights.w_out)))
    eps = ad.reshape(ad.transpose2d(eps_flat), (dims.channels, h, w))
    return eps, record
