"""Deterministic sampling pipeline: schedule, DDIM steps, orchestration.

A run is fully determined by its configuration: the same seed reproduces
base weights, initial noise, re-initialization, every guidance update and
therefore byte-identical artifacts (trace.csv, latent dump, preview).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .assets import ModelDims, generate_base_weights, load_bundle
from .attention import LayoutCondition, RegionSpec
from .autodiff import Tensor
from .denoiser import DenoiserContext, build_context, denoiser_forward
from .errors import ArgumentError, ConfigurationError, NumericError
from .guidance import (
    GuidanceConfig,
    TraceRow,
    guided_update,
    in_guidance_window,
    inbox_mass_fraction,
)
from .reinit import initial_latent, reinitialize

TRACE_COLUMNS = ("timestep", "iteration", "l_ce", "l_fill", "l_region",
                 "total", "phi_t", "accepted")


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray  # (channels, height, width)
    t: int


@dataclass(frozen=True)
class SamplerSchedule:
    """Cumulative signal coefficients, linear in t, indexed by timestep."""

    steps: int
    alpha_bar: np.ndarray  # length steps + 1

    @classmethod
    def linear(cls, steps: int = 25, alpha_bar_clean: float = 0.999,
               alpha_bar_noisy: float = 0.01) -> "SamplerSchedule":
        if steps < 1:
            raise ArgumentError("schedule needs at least one step")
        if not (0.0 < alpha_bar_noisy < alpha_bar_clean < 1.0):
            raise ArgumentError("schedule endpoints must satisfy 0 < noisy < clean < 1")
        t = np.arange(steps + 1) / steps
        return cls(steps=steps,
                   alpha_bar=alpha_bar_clean + (alpha_bar_noisy - alpha_bar_clean) * t)

    def __post_init__(self):
        if len(self.alpha_bar) != self.steps + 1:
            raise ArgumentError("alpha_bar must have steps + 1 entries")
        if not np.all((self.alpha_bar > 0) & (self.alpha_bar < 1)):
            raise ArgumentError("alpha_bar values must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ArgumentError("alpha_bar must increase as t decreases")


def ddim_step(z_t: np.ndarray, epsilon_hat: np.ndarray, t: int,
              schedule: SamplerSchedule) -> np.ndarray:
    """One deterministic denoising step (eta = 0)."""
    if t < 1 or t > schedule.steps:
        raise ArgumentError(f"cannot step from timestep {t}")
    a_t = schedule.alpha_bar[t]
    a_prev = schedule.alpha_bar[t - 1]
    x0 = (z_t - np.sqrt(1.0 - a_t) * epsilon_hat) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * epsilon_hat


def decode_preview(z: np.ndarray) -> np.ndarray:
    """Channel mean rescaled to an 8-bit grayscale image."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ArgumentError("latent must be (channels, height, width)")
    mean = z.mean(axis=0)
    lo, hi = mean.min(), mean.max()
    if hi == lo:
        return np.full(mean.shape, 128, dtype=np.uint8)
    return np.rint((mean - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Binary PGM (P5), maxval 255."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ArgumentError("preview image must be 2-D")
    h, w = image.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())
    return path


def write_trace(path: str | Path, rows: list[TraceRow]) -> Path:
    path = Path(path)
    lines = [",".join(TRACE_COLUMNS)]
    for r in rows:
        lines.append(",".join((
            str(r.timestep), str(r.iteration), repr(r.l_ce), repr(r.l_fill),
            repr(r.l_region), repr(r.total), repr(r.phi_t), str(r.accepted))))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one sampling run."""

    seed: int
    steps: int
    channels: int
    height: int
    width: int
    d_model: int
    n_heads: int
    guidance: GuidanceConfig
    global_prompt_embed: Path
    regions: tuple[tuple[tuple[float, float, float, float], Path], ...]
    output_dir: Path
    dump_attention: bool = False
    reinit: bool = True

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path = ".") -> "RunConfig":
        base = Path(base_dir)

        def resolve(p: str) -> Path:
            candidate = Path(p)
            return candidate if candidate.is_absolute() else base / candidate

        try:
            latent = raw.get("latent", {})
            model = raw.get("model", {})
            regions = tuple(
                (tuple(float(v) for v in entry["box"]), resolve(entry["bundle"]))
                for entry in raw.get("regions", ())
            )
            config = cls(
                seed=int(raw["seed"]),
                steps=int(raw.get("steps", 25)),
                channels=int(latent.get("channels", 8)),
                height=int(latent.get("height", 16)),
                width=int(latent.get("width", 16)),
                d_model=int(model.get("d_model", 16)),
                n_heads=int(model.get("heads", 2)),
                guidance=GuidanceConfig(**raw.get("guidance", {})),
                global_prompt_embed=resolve(raw["global_prompt_embed"]),
                regions=regions,
                output_dir=resolve(raw.get("output_dir", "out")),
                dump_attention=bool(raw.get("dump_attention", False)),
                reinit=bool(raw.get("reinit", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid run config: {exc}") from exc
        if config.steps < 1:
            raise ConfigurationError("steps must be positive")
        if len(set(p for _, p in config.regions)) != len(config.regions):
            raise ConfigurationError("regions must reference distinct bundles")
        return config

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "steps": self.steps,
            "latent": {"channels": self.channels, "height": self.height,
                       "width": self.width},
            "model": {"d_model": self.d_model, "heads": self.n_heads},
            "guidance": dataclasses.asdict(self.guidance),
            "global_prompt_embed": str(self.global_prompt_embed),
            "regions": [{"box": list(box), "bundle": str(p)}
                        for box, p in self.regions],
            "output_dir": str(self.output_dir),
            "dump_attention": self.dump_attention,
            "reinit": self.reinit,
        }


def prepare(config: RunConfig) -> tuple[DenoiserContext, SamplerSchedule]:
    """Load assets, generate weights and rasterize the layout."""
    embed_tensors = tensorio.read_container(config.global_prompt_embed)
    if "prompt_embed" not in embed_tensors:
        raise ConfigurationError(
            f"{config.global_prompt_embed} holds no 'prompt_embed' tensor")
    global_embed = embed_tensors["prompt_embed"]
    if global_embed.ndim != 2:
        raise ConfigurationError("global prompt embedding must be 2-D")
    dims = ModelDims(channels=config.channels, height=config.height,
                     width=config.width, d_model=config.d_model,
                     n_heads=config.n_heads, d_text=global_embed.shape[1])
    weights = generate_base_weights(config.seed, dims)
    bundles = {}
    regions = []
    for box, bundle_path in config.regions:
        bundle = load_bundle(bundle_path)
        bundles[bundle.concept_id] = bundle
        regions.append(RegionSpec(box=box, concept_id=bundle.concept_id))
    layout = LayoutCondition(regions=tuple(regions), global_prompt_embed=global_embed)
    ctx = build_context(weights, layout, bundles)
    return ctx, SamplerSchedule.linear(steps=config.steps)


# ------------------------------------------------------------------ sampling


@dataclass
class SampleResult:
    final: LatentState
    trace: list[TraceRow]
    mass_history: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    outputs: dict[str, Path] = field(default_factory=dict)


def sample(config: RunConfig) -> SampleResult:
    """Run the full guided sampler and write all artifacts.

    On a numeric failure the trace collected so far is flushed before the
    error propagates.
    """
    ctx, schedule = prepare(config)
    guidance_cfg = config.guidance
    geometry = ctx.loss_geometry
    total = schedule.steps
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trace: list[TraceRow] = []
    mass_history: list[tuple[int, dict[str, float]]] = []
    has_regions = bool(ctx.layout.regions)
    guiding = has_regions and guidance_cfg.guidance_fraction > 0.0

    try:
        if config.reinit:
            z, rows = reinitialize(config.seed, ctx, guidance_cfg, total)
            trace.extend(rows)
        else:
            z = initial_latent(config.seed, ctx.dims)

        record = None
        for t in range(total, 0, -1):
            if guiding and in_guidance_window(t, total, guidance_cfg.guidance_fraction):
                # mass is measured on the state entering the timestep, so the
                # history shows what the accumulated guidance achieved
                _, entering = denoiser_forward(Tensor(z), t, ctx)
                mass_history.append((t, {
                    cid: inbox_mass_fraction(entering, geometry, cid)
                    for cid in geometry.concept_ids}))

                def forward(zt: Tensor, _t=t):
                    return denoiser_forward(zt, _t, ctx)[1]

                z, rows = guided_update(z, forward, geometry, guidance_cfg, t, total)
                trace.extend(rows)
            eps, record = denoiser_forward(Tensor(z), t, ctx)
            z = ddim_step(z, eps.data, t, schedule)
    except NumericError:
        write_trace(out_dir / "trace.csv", trace)
        raise

    outputs = {
        "trace": write_trace(out_dir / "trace.csv", trace),
        "latent": out_dir / "latent.lcb",
        "preview": write_pgm(out_dir / "preview.pgm", decode_preview(z)),
    }
    tensorio.write_container(outputs["latent"], {"latent": z})
    if config.dump_attention and record is not None:
        dump: dict[str, np.ndarray] = {}
        for cid in geometry.concept_ids:
            dump[f"cross.{cid}"] = record.averaged_cross_map(cid)
        for i, layer in enumerate(record.loss_layers()):
            dump[f"self.layer{i}"] = layer.self_map.data
        outputs["attention"] = out_dir / "attention.lcb"
        tensorio.write_container(outputs["attention"], dump)

    return SampleResult(final=LatentState(z=z, t=0), trace=trace,
                        mass_history=mass_history, outputs=outputs)
