from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from conftest import SMALL_DIMS, build_test_context, empty_layout_context
from loracanvas.assets import synth_bundle
from loracanvas.attention import LayoutCondition, RegionSpec
from loracanvas.autodiff import Tensor
from loracanvas.denoiser import (
    build_context,
    denoiser_forward,
    sinusoidal_embedding,
)
from loracanvas.errors import ConfigurationError


def test_sinusoidal_embedding_shape_and_determinism():
    e1 = sinusoidal_embedding(7, 16)
    e2 = sinusoidal_embedding(7, 16)
    assert e1.shape == (16,)
    assert np.array_equal(e1, e2)
    assert not np.array_equal(e1, sinusoidal_embedding(8, 16))
    assert np.max(np.abs(e1)) <= 1.0


def test_denoiser_records_three_layers_two_resolutions():
    ctx = build_test_context()
    z = np.random.default_rng(0).standard_normal((4, 8, 8))
    eps, record = denoiser_forward(Tensor(z), 5, ctx)
    assert eps.shape == (4, 8, 8)
    assert [l.resolution for l in record.layers] == [(8, 8), (8, 8), (4, 4)]
    assert record.loss_resolution == (8, 8)
    assert len(record.loss_layers()) == 2
    for layer in record.layers:
        assert set(layer.cross_maps) == {"concept_a", "concept_b"}
        n = layer.resolution[0] * layer.resolution[1]
        assert layer.self_map.shape == (n, n)


def test_denoiser_zero_output_head_gives_zero_noise():
    ctx = build_test_context()
    weights = dataclasses.replace(ctx.weights, w_out=np.zeros_like(ctx.weights.w_out))
    ctx_zero = dataclasses.replace(ctx, weights=weights)
    z = np.random.default_rng(1).standard_normal((4, 8, 8))
    eps, _ = denoiser_forward(Tensor(z), 3, ctx_zero)
    assert np.array_equal(eps.data, np.zeros((4, 8, 8)))


def test_denoiser_neutrality_chain_matches_empty_layout():
    # zero-scale deltas + local prompt equal to the global prompt + one
    # full-image region collapses to the unconditioned network
    plain = empty_layout_context()
    embed = plain.layout.global_prompt_embed
    template = synth_bundle(99, tokens=embed.shape[0], d_text=SMALL_DIMS.d_text,
                            d_model=SMALL_DIMS.d_model, rank=4, scale=0.0,
                            concept_id="solo")
    bundle = dataclasses.replace(template, prompt_embed=embed)
    layout = LayoutCondition(regions=(RegionSpec((0.0, 0.0, 1.0, 1.0), "solo"),),
                             global_prompt_embed=embed)
    neutral = build_context(plain.weights, layout, {"solo": bundle})
    z = np.random.default_rng(2).standard_normal((4, 8, 8))
    for t in (10, 4):
        eps_plain, _ = denoiser_forward(Tensor(z), t, plain)
        eps_neutral, _ = denoiser_forward(Tensor(z), t, neutral)
        assert np.array_equal(eps_plain.data, eps_neutral.data)


def test_denoiser_deterministic_within_process():
    ctx = build_test_context()
    z = np.random.default_rng(3).standard_normal((4, 8, 8))
    eps1, _ = denoiser_forward(Tensor(z), 6, ctx)
    eps2, _ = denoiser_forward(Tensor(z), 6, ctx)
    assert np.array_equal(eps1.data, eps2.data)


def test_denoiser_shape_validation():
    ctx = build_test_context()
    with pytest.raises(ConfigurationError):
        denoiser_forward(Tensor(np.zeros((4, 8, 4))), 1, ctx)


def test_build_context_validates_bundle_dims():
    ctx = build_test_context()
    bad_bundle = synth_bundle(1, tokens=3, d_text=12, d_model=SMALL_DIMS.d_model,
                              rank=4, concept_id="concept_a")
    with pytest.raises(ConfigurationError):
        build_context(ctx.weights, ctx.layout,
                      {**ctx.bundles, "concept_a": bad_bundle})


def test_build_context_requires_all_bundles():
    ctx = build_test_context()
    missing = {k: v for k, v in ctx.bundles.items() if k != "concept_b"}
    with pytest.raises(ConfigurationError):
        build_context(ctx.weights, ctx.layout, missing)
