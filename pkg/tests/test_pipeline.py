from __future__ import annotations

import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from loracanvas.cli import make_toy_assets
from loracanvas.errors import ArgumentError, ConfigurationError
from loracanvas.pipeline import (
    RunConfig,
    SamplerSchedule,
    ddim_step,
    decode_preview,
    sample,
    write_pgm,
)


@pytest.fixture(scope="module")
def asset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("assets")
    make_toy_assets(out, seed=42)
    return out


@pytest.fixture(scope="module")
def small_config(asset_dir):
    # the gradcheck stack is the cheapest full configuration
    return RunConfig.from_json(asset_dir / "gradcheck.json")


# ------------------------------------------------------------------ schedule


def test_schedule_linear_endpoints():
    sched = SamplerSchedule.linear(25)
    assert sched.alpha_bar[0] == pytest.approx(0.999)
    assert sched.alpha_bar[25] == pytest.approx(0.01)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))


def test_schedule_validation():
    with pytest.raises(ArgumentError):
        SamplerSchedule.linear(0)
    with pytest.raises(ArgumentError):
        SamplerSchedule(steps=2, alpha_bar=np.array([0.9, 0.5]))
    with pytest.raises(ArgumentError):
        SamplerSchedule(steps=1, alpha_bar=np.array([0.5, 0.9]))


# ------------------------------------------------------------------ ddim


def test_ddim_zero_noise_closed_form():
    sched = SamplerSchedule.linear(25)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 4, 4))
    cur = z.copy()
    for t in range(25, 0, -1):
        cur = ddim_step(cur, np.zeros_like(cur), t, sched)
    expected = z * np.sqrt(sched.alpha_bar[0] / sched.alpha_bar[25])
    assert np.max(np.abs(cur - expected)) / np.max(np.abs(expected)) < 1e-12


def test_ddim_near_degenerate_schedule_step_is_identity():
    # alpha_bar must strictly decrease, so probe the t-1 == t limit
    sched = SamplerSchedule(steps=1, alpha_bar=np.array([0.5, 0.5 * (1 - 1e-13)]))
    rng = np.random.default_rng(1)
    z = rng.standard_normal((1, 2, 2))
    eps = rng.standard_normal((1, 2, 2))
    out = ddim_step(z, eps, 1, sched)
    assert np.max(np.abs(out - z)) < 1e-9


def test_ddim_matches_hand_formula():
    sched = SamplerSchedule.linear(10)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((3, 4, 4))
    eps = rng.standard_normal((3, 4, 4))
    t = 6
    a_t, a_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    x0 = (z - np.sqrt(1 - a_t) * eps) / np.sqrt(a_t)
    expected = np.sqrt(a_prev) * x0 + np.sqrt(1 - a_prev) * eps
    assert np.max(np.abs(ddim_step(z, eps, t, sched) - expected)) < 1e-12


def test_ddim_rejects_t_zero():
    with pytest.raises(ArgumentError):
        ddim_step(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 0,
                  SamplerSchedule.linear(5))


# ------------------------------------------------------------------ preview


def test_preview_constant_latent_is_mid_gray():
    img = decode_preview(np.full((3, 4, 4), 2.0))
    assert img.dtype == np.uint8
    assert np.all(img == 128)


def test_preview_rescales_endpoints():
    z = np.zeros((1, 2, 2))
    z[0, 1, 1] = 4.0
    img = decode_preview(z)
    assert img[1, 1] == 255
    assert img[0, 0] == 0


def test_preview_shape():
    img = decode_preview(np.random.default_rng(0).standard_normal((8, 16, 16)))
    assert img.shape == (16, 16)


def test_write_pgm_format(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    p = write_pgm(tmp_path / "x.pgm", img)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert raw[len(b"P5\n4 3\n255\n"):] == img.tobytes()


# ------------------------------------------------------------------ config


def test_config_round_trip(asset_dir):
    config = RunConfig.from_json(asset_dir / "config.json")
    assert config.seed == 42
    assert config.steps == 25
    assert config.channels == 8 and config.height == 16
    assert len(config.regions) == 2
    assert config.guidance.phi0 == 800.0
    assert config.guidance.alpha == 0.25 and config.guidance.beta == 0.8
    # paths resolved relative to the config file
    assert config.global_prompt_embed.exists()
    for _, bundle in config.regions:
        assert bundle.exists()


def test_config_missing_key(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text(json.dumps({"steps": 5}))
    with pytest.raises(ConfigurationError):
        RunConfig.from_json(p)


def test_config_bad_json(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{nope")
    with pytest.raises(ConfigurationError):
        RunConfig.from_json(p)


def test_config_duplicate_bundles(tmp_path):
    raw = {"seed": 1, "global_prompt_embed": "e.lcb",
           "regions": [{"box": [0, 0, 0.5, 1], "bundle": "b.lcb"},
                       {"box": [0.5, 0, 1, 1], "bundle": "b.lcb"}]}
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(raw, tmp_path)


# ------------------------------------------------------------------ sampling


def test_sample_empty_layout_has_no_guidance_rows(small_config, tmp_path):
    config = dataclasses.replace(small_config, regions=(),
                                 output_dir=tmp_path / "plain")
    result = sample(config)
    assert result.trace == []
    assert result.mass_history == []
    assert result.final.t == 0
    assert (tmp_path / "plain" / "trace.csv").read_text().count("\n") == 1


def test_sample_trace_rows_reconstruct_total(small_config, tmp_path):
    config = dataclasses.replace(small_config, output_dir=tmp_path / "run")
    result = sample(config)
    assert result.trace, "guided run must record rows"
    g = config.guidance
    for row in result.trace:
        recombined = row.l_ce + g.alpha * row.l_fill + g.beta * row.l_region
        assert abs(row.total - recombined) <= 1e-12
        assert row.l_ce >= 0 and row.l_fill >= 0 and row.l_region >= 0


def test_sample_guidance_fraction_zero_ignores_guidance_knobs(small_config, tmp_path):
    from loracanvas.guidance import GuidanceConfig

    results = []
    for name, phi0 in (("a", 10.0), ("b", 500.0)):
        config = dataclasses.replace(
            small_config,
            guidance=GuidanceConfig(phi0=phi0, guidance_fraction=0.0),
            reinit=False, output_dir=tmp_path / name)
        results.append(sample(config))
    assert results[0].trace == [] and results[1].trace == []
    assert np.array_equal(results[0].final.z, results[1].final.z)


def test_sample_writes_all_artifacts(small_config, tmp_path):
    config = dataclasses.replace(small_config, output_dir=tmp_path / "art",
                                 dump_attention=True)
    result = sample(config)
    for key in ("trace", "latent", "preview", "attention"):
        assert result.outputs[key].exists()
    from loracanvas import tensorio

    latent = tensorio.read_container(result.outputs["latent"])
    assert set(latent) == {"latent"}
    assert latent["latent"].shape == (4, 8, 8)
    dumped = tensorio.read_container(result.outputs["attention"])
    assert "cross.gradcheck_concept_a" in dumped
    preview = result.outputs["preview"].read_bytes()
    assert preview.startswith(b"P5\n8 8\n255\n")


def test_sample_deterministic_artifacts(small_config, tmp_path):
    c1 = dataclasses.replace(small_config, output_dir=tmp_path / "one")
    c2 = dataclasses.replace(small_config, output_dir=tmp_path / "two")
    r1, r2 = sample(c1), sample(c2)
    assert np.array_equal(r1.final.z, r2.final.z)
    for key in ("trace", "latent", "preview"):
        assert r1.outputs[key].read_bytes() == r2.outputs[key].read_bytes()


def test_sample_guidance_window_boundaries(small_config, tmp_path):
    config = dataclasses.replace(small_config, output_dir=tmp_path / "win")
    result = sample(config)
    guided_ts = sorted({row.timestep for row in result.trace})
    total = config.steps
    fraction = config.guidance.guidance_fraction
    expected = [t for t in range(1, total + 1)
                if t / total >= (1 - fraction) - 1e-9]
    assert guided_ts == expected


def test_sample_flushes_trace_on_numeric_error(small_config, tmp_path, monkeypatch):
    from loracanvas import pipeline as pipeline_module
    from loracanvas.errors import NumericError

    real = pipeline_module.denoiser_forward
    calls = {"n": 0}

    def exploding(z, t, ctx):
        calls["n"] += 1
        if calls["n"] > 12:
            raise NumericError("synthetic blowup")
        return real(z, t, ctx)

    monkeypatch.setattr(pipeline_module, "denoiser_forward", exploding)
    config = dataclasses.replace(small_config, output_dir=tmp_path / "crash")
    with pytest.raises(NumericError):
        sample(config)
    trace = (tmp_path / "crash" / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("timestep,")
    assert len(trace) > 1  # rows collected before the failure were kept


def test_denoiser_bit_identical_across_processes(asset_dir):
    snippet = (
        "import numpy as np, hashlib;"
        "from loracanvas.pipeline import RunConfig, prepare;"
        "from loracanvas.denoiser import denoiser_forward;"
        "from loracanvas.reinit import initial_latent;"
        "from loracanvas.autodiff import Tensor;"
        f"config = RunConfig.from_json(r'{asset_dir}/gradcheck.json');"
        "ctx, sched = prepare(config);"
        "z = initial_latent(config.seed, ctx.dims);"
        "eps, _ = denoiser_forward(Tensor(z), sched.steps, ctx);"
        "print(hashlib.sha256(eps.data.tobytes()).hexdigest())"
    )
    runs = [subprocess.run([sys.executable, "-c", snippet], capture_output=True,
                           text=True, check=True).stdout.strip()
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert len(runs[0]) == 64
