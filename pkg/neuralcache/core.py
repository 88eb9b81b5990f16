"""
Command-line surface for neuralcache.

    neuralcache encode   train a distributed neural representation of one volume
    neuralcache decode   reconstruct the grid from a bundle
    neuralcache render   sort-last volume rendering of a bundle or raw volume
    neuralcache trace    forward/backward pathlines over a sequence of frames
    neuralcache run      drive a synthetic simulation through a cached workflow
    neuralcache bench    compression timing suites

Run-level configuration is a pydantic RunConfig loaded from YAML or JSON;
command-line flags override it. Every output of one command lands under
the run directory given by --out.
"""

import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from .bench import SUITES, BenchConfig, run_suite
from .cache import (EncodeSettings, NeuralVolume, RawVolume, WindowView, WorkflowConfig, WorkflowGraph,
                    negate, reverse, run_workflow_async)
from .dnr import decode_volume, train_distributed
from .drivers import create_driver
from .errors import ConfigurationError, FieldTypeError, NeuralCacheError, ShapeMismatchError
from .inr import PROFILES, get_profile
from .storage import RunStorage, load_bundle, load_volume, save_bundle, save_image, save_pathlines, save_volume
from .vis import (make_camera, make_transfer_function, random_seeds, render_dnr, render_grid,
                  trace_pathlines)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #
class DriverConfig(BaseModel):
    kind: str = "gaussian-blobs"
    params: Dict[str, Any] = Field(default_factory=dict)


class RenderConfig(BaseModel):
    camera: Dict[str, Any] = Field(default_factory=lambda: {
        "position": [2.2, 1.6, 2.4], "look_at": [0.5, 0.5, 0.5], "width": 64, "height": 64})
    transfer_function: Dict[str, Any] = Field(default_factory=lambda: {
        "points": [[0.0, 0.0, 0.0, 0.0, 0.0], [0.3, 0.2, 0.4, 1.0, 0.05],
                   [0.7, 1.0, 0.6, 0.2, 0.4], [1.0, 1.0, 1.0, 1.0, 0.8]]})
    step_size: float = 0.01
    base_step: float = 0.01
    macrocells: Optional[int] = None
    format: str = "png"

    @field_validator("camera")
    @classmethod
    def check_camera(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        make_camera(value)
        return value

    @field_validator("transfer_function")
    @classmethod
    def check_transfer_function(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        make_transfer_function(value)
        return value


class RunConfig(BaseModel):
    """Everything one command needs; flags on the command line take precedence."""
    profile: str = "desk"
    target_psnr: float = 45.0
    lam: Optional[float] = None
    ranks: List[int] = Field(default_factory=lambda: [1, 1, 1])
    ghost: int = 2
    steps: int = 100
    seed: int = 0
    window: Optional[int] = None
    max_workers: Optional[int] = None
    out: str = "runs/latest"
    driver: DriverConfig = Field(default_factory=DriverConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    workflow: Optional[WorkflowConfig] = None

    def encode_settings(self) -> EncodeSettings:
        overrides = {"seed": self.seed}
        if self.lam is not None:
            overrides["lam"] = self.lam
        return EncodeSettings(profile=get_profile(self.profile), rank_grid=tuple(self.ranks),
                              ghost_width=self.ghost, max_workers=self.max_workers, train_overrides=overrides)

    def storage(self) -> RunStorage:
        return RunStorage(self.out).initialize()


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    with p.open("r", encoding="utf-8") as fh:
        try:
            data = json.load(fh) if p.suffix == ".json" else yaml.safe_load(fh)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigurationError(f"cannot parse config {p}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"config {p} must be a mapping, got {type(data).__name__}")
    try:
        return RunConfig(**(data or {}))
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {p}: {e}") from e


def parse_ranks(text: str) -> List[int]:
    try:
        ranks = [int(v) for v in text.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected X,Y,Z integers, got '{text}'")
    if len(ranks) != 3 or any(r < 1 for r in ranks):
        raise click.BadParameter(f"expected three positive integers, got '{text}'")
    return ranks


def apply_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Copy of `cfg` with every non-None flag applied."""
    updates = {k: v for k, v in flags.items() if v is not None}
    if "ranks" in updates:
        updates["ranks"] = parse_ranks(updates["ranks"])
    return cfg.model_copy(update=updates)


def prepare_workflow(cfg: RunConfig) -> WorkflowConfig:
    """Fill render defaults and apply --window / --target-psnr to the workflow nodes."""
    if cfg.workflow is None:
        raise ConfigurationError("the run command needs a 'workflow' section in the config")
    wf = cfg.workflow.model_copy(deep=True)
    for node in wf.nodes:
        if node.op == "window" and cfg.window is not None:
            node.params["size"] = cfg.window
        elif node.op == "encode":
            node.params.setdefault("target_psnr", cfg.target_psnr)
        elif node.op == "render":
            node.params.setdefault("camera", cfg.render.camera)
            node.params.setdefault("transfer_function", cfg.render.transfer_function)
            node.params.setdefault("step_size", cfg.render.step_size)
            node.params.setdefault("base_step", cfg.render.base_step)
            node.params.setdefault("macrocells", cfg.render.macrocells)
            node.params.setdefault("format", cfg.render.format)
    return wf


def _is_bundle(path: Path) -> bool:
    return path.is_dir() and (path / "layout.json").exists()


def _load_frames(sources: Sequence[str], frame_dt: float) -> List[Any]:
    frames = []
    for k, src in enumerate(sources):
        path = Path(src)
        t = round(k * frame_dt, 12)
        if _is_bundle(path):
            dnr = load_bundle(path)
            frames.append(NeuralVolume(dnr=dnr, timestep=k, time=t, achieved_psnr=dnr.achieved_psnr,
                                       nbytes=dnr.nbytes, budget_exhausted=dnr.budget_exhausted))
        else:
            frames.append(RawVolume(volume=load_volume(path), timestep=k, time=t))
    return frames


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="YAML or JSON run configuration")
out_option = click.option("--out", default=None, help="Run directory for all outputs")


@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level: str):
    """Distributed neural representations for in situ temporal caching."""
    load_dotenv()
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@out_option
@click.option("--input", "input_path", default=None, help="Volume manifest (.json) to encode")
@click.option("--driver-step", type=int, default=None, help="Encode step K of the configured driver instead")
@click.option("--ranks", default=None, help="Rank grid X,Y,Z")
@click.option("--ghost", type=int, default=None)
@click.option("--lambda", "lam", type=float, default=None, help="Boundary loss weight")
@click.option("--target-psnr", type=float, default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None)
@click.option("--name", default="encoded", show_default=True, help="Bundle directory name")
def encode(config_path, out, input_path, driver_step, ranks, ghost, lam, target_psnr, max_steps, seed,
           profile, name):
    """Train a DNR bundle from a volume file or a driver step."""
    cfg = apply_overrides(load_config(config_path), out=out, ranks=ranks, ghost=ghost, lam=lam,
                          target_psnr=target_psnr, seed=seed, profile=profile)
    if (input_path is None) == (driver_step is None):
        raise click.UsageError("pass exactly one of --input or --driver-step")
    if input_path is not None:
        volume = load_volume(input_path)
    else:
        driver = create_driver(cfg.driver.kind, **cfg.driver.params)
        if driver_step < 1:
            raise click.UsageError("--driver-step starts at 1")
        for _ in range(driver_step):
            frame = driver.advance()
        volume = frame.volume
    storage = cfg.storage()
    settings = cfg.encode_settings()
    train_cfg = settings.profile.train_config(target_psnr=cfg.target_psnr, max_steps=max_steps,
                                              **settings.train_overrides)
    dnr = train_distributed(volume, cfg.ranks, train_cfg, encoding=settings.profile.encoding,
                            mlp=settings.profile.mlp(volume.channels), ghost_width=cfg.ghost,
                            max_workers=cfg.max_workers)
    bundle = save_bundle(dnr, storage.bundle_dir(name))
    ratio = volume.nbytes / dnr.nbytes
    for part, score, steps in zip(dnr.partitions, dnr.rank_psnr, dnr.rank_steps):
        click.echo(f"rank {part.rank}: psnr {score:.2f} dB after {steps} steps")
    click.echo(f"compression ratio {ratio:.2f} ({volume.nbytes} -> {dnr.nbytes} bytes)")
    if dnr.budget_exhausted:
        click.echo(f"budget-exhausted: target {cfg.target_psnr} dB not reached within {train_cfg.max_steps} steps")
    rows = [{"rank": p.rank, "psnr": s, "steps": n} for p, s, n in zip(dnr.partitions, dnr.rank_psnr,
                                                                      dnr.rank_steps)]
    storage.save_report(rows, {
        "bundle": str(bundle), "compression_ratio": ratio, "input_bytes": volume.nbytes,
        "parameter_bytes": dnr.nbytes, "achieved_psnr": dnr.achieved_psnr, "target_psnr": cfg.target_psnr,
        "budget_exhausted": dnr.budget_exhausted, "comm_stats": dnr.comm_stats,
    }, name="encode")


@cli.command()
@click.argument("bundle", type=click.Path(exists=True, file_okay=False))
@out_option
@click.option("--output", default=None, help="Volume manifest path (default: <out>/volumes/decoded.json)")
def decode(bundle, out, output):
    """Decode a DNR bundle back to a grid volume."""
    dnr = load_bundle(bundle)
    grid = decode_volume(dnr)
    path = Path(output) if output else RunStorage(out or RunConfig().out).initialize().volume_path("decoded")
    save_volume(grid, path)
    click.echo(f"decoded {grid.dims} x {grid.channels} -> {path}")


@cli.command()
@click.argument("source", type=click.Path(exists=True))
@config_option
@out_option
@click.option("--ranks", default=None, help="Brick layout for raw volumes, X,Y,Z")
@click.option("--step-size", type=float, default=None)
@click.option("--macrocells", type=int, default=None, help="Macro-cell resolution per partition")
@click.option("--format", "fmt", type=click.Choice(["png", "ppm"]), default=None)
@click.option("--name", default="render", show_default=True)
def render(source, config_path, out, ranks, step_size, macrocells, fmt, name):
    """Render a bundle (direct network queries) or a raw volume."""
    cfg = apply_overrides(load_config(config_path), out=out, ranks=ranks)
    rc = cfg.render
    camera = make_camera(rc.camera)
    tf = make_transfer_function(rc.transfer_function)
    step = step_size or rc.step_size
    cells = macrocells if macrocells is not None else rc.macrocells
    path = Path(source)
    if _is_bundle(path):
        image = render_dnr(load_bundle(path), camera, tf, step, rc.base_step, macrocell_resolution=cells)
    else:
        image = render_grid(load_volume(path), camera, tf, step, rank_grid=cfg.ranks, base_step=rc.base_step,
                            macrocell_resolution=cells)
    target = save_image(image.rgb, cfg.storage().image_path(name, 0, fmt or rc.format))
    click.echo(f"rendered {camera.width}x{camera.height} ({image.stats['evaluations']} evaluations) -> {target}")


@cli.command()
@click.argument("sources", nargs=-1, required=True)
@out_option
@click.option("--direction", type=click.Choice(["forward", "backward"]), default="forward", show_default=True)
@click.option("--dt", type=float, default=0.01, show_default=True, help="Integration step")
@click.option("--frame-dt", type=float, default=1.0, show_default=True, help="Time between frames")
@click.option("--max-steps", type=int, default=10000, show_default=True)
@click.option("--seeds", "seed_count", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--name", default="pathlines", show_default=True)
def trace(sources, out, direction, dt, frame_dt, max_steps, seed_count, seed, name):
    """Trace pathlines over frames given oldest first (bundles or volume manifests)."""
    frames = _load_frames(sources, frame_dt)
    window = WindowView(tuple(frames), channels=frames[0].channels)
    if direction == "backward":
        window = negate(reverse(window))
    lo, hi = frames[0].decode().bounds
    seeds = random_seeds(seed_count, lo, hi, seed)
    lines = trace_pathlines(window, seeds, dt, max_steps)
    storage = RunStorage(out or RunConfig().out).initialize()
    table, summary = save_pathlines(lines, storage.pathline_path(name, 0), {"direction": direction})
    click.echo(f"{len(lines)} pathline(s) -> {table}")


@cli.command()
@config_option
@out_option
@click.option("--steps", type=int, default=None)
@click.option("--window", type=int, default=None, help="Override every window size")
@click.option("--ranks", default=None)
@click.option("--ghost", type=int, default=None)
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--target-psnr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None)
def run(config_path, out, steps, window, ranks, ghost, lam, target_psnr, seed, profile):
    """Run a workflow over a synthetic driver and write the per-step report."""
    cfg = apply_overrides(load_config(config_path), out=out, steps=steps, window=window, ranks=ranks,
                          ghost=ghost, lam=lam, target_psnr=target_psnr, seed=seed, profile=profile)
    driver_params = dict(cfg.driver.params)
    if cfg.driver.kind != "raw":
        driver_params.setdefault("seed", cfg.seed)
    driver = create_driver(cfg.driver.kind, **driver_params)
    storage = cfg.storage()
    graph = WorkflowGraph.from_config(prepare_workflow(cfg), cfg.encode_settings(), storage)
    report = asyncio.run(run_workflow_async(driver, graph, cfg.steps))
    storage.save_report(report.rows, report.summary, name="run")
    s = report.summary
    click.echo(f"{cfg.steps} step(s); triggers {s['trigger_steps']}; peak cache {s['peak_cache_bytes']} bytes")
    if s["compression_ratio"] is not None:
        click.echo(f"mean compression ratio {s['compression_ratio']:.2f}")
    if s["budget_exhausted"]:
        click.echo(f"budget-exhausted on {s['budget_exhausted']} encode(s)")


@cli.command()
@click.argument("suite", type=click.Choice(sorted(SUITES)))
@out_option
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="desk", show_default=True)
@click.option("--target-psnr", type=float, default=35.0, show_default=True)
@click.option("--dims", default="16,16,16", show_default=True, help="Base dims X,Y,Z")
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--max-steps", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def bench(suite, out, profile, target_psnr, dims, repeats, max_steps, seed):
    """Compression timing suites: stability, weak-scaling, strong-scaling."""
    bench_cfg = BenchConfig(profile=get_profile(profile), target_psnr=target_psnr,
                            base_dims=tuple(parse_ranks(dims)), repeats=repeats, max_steps=max_steps, seed=seed)
    result = run_suite(suite, bench_cfg)
    storage = RunStorage(out or RunConfig().out).initialize()
    table, _ = storage.save_report(result.rows, result.summary, name=f"bench_{suite}")
    click.echo(f"{suite}: {json.dumps(result.summary)} -> {table}")


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #
def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (click.UsageError, ConfigurationError, ShapeMismatchError, FieldTypeError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="neuralcache",
                 standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return exit_code_for(e)
    except (NeuralCacheError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"Unexpected {type(e).__name__}: {e}")
        click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
