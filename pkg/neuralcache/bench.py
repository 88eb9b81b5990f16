"""
Benchmark suites for neural compression.

    stability       repeated encodes of one fixed field; coefficient of variation of wall time
    weak-scaling    fixed physical field, dims grow with the rank grid
    strong-scaling  fixed dims, rank grid grows

Each suite returns a BenchResult (table rows + summary) that the CLI writes
under the run directory. Trends, not magnitudes, are what these report.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dnr import train_distributed
from .drivers import GaussianBlobsDriver
from .errors import ConfigurationError
from .inr import Profile, desk_profile

logger = logging.getLogger(__name__)

RankGrid = Tuple[int, int, int]

DEFAULT_RANK_GRIDS: List[RankGrid] = [(1, 1, 1), (2, 1, 1), (2, 2, 1), (2, 2, 2)]


@dataclass
class BenchConfig:
    profile: Profile = field(default_factory=desk_profile)
    target_psnr: float = 35.0
    base_dims: Tuple[int, int, int] = (16, 16, 16)
    rank_grids: List[RankGrid] = field(default_factory=lambda: list(DEFAULT_RANK_GRIDS))
    repeats: int = 5
    ghost_width: int = 2
    field_time: float = 0.25
    seed: int = 0
    max_steps: Optional[int] = None
    max_workers: Optional[int] = None

    def __post_init__(self):
        if self.repeats < 2:
            raise ConfigurationError("bench needs repeats >= 2")
        if not self.rank_grids:
            raise ConfigurationError("bench needs at least one rank grid")


@dataclass
class BenchResult:
    suite: str
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any]


def _field(dims: Sequence[int], cfg: BenchConfig):
    driver = GaussianBlobsDriver(dims=dims, seed=cfg.seed)
    return driver.field_at(cfg.field_time)


def _encode(volume, rank_grid: RankGrid, cfg: BenchConfig) -> Tuple[Any, float]:
    train_cfg = cfg.profile.train_config(target_psnr=cfg.target_psnr, max_steps=cfg.max_steps, seed=cfg.seed)
    started = time.perf_counter()
    dnr = train_distributed(volume, rank_grid, train_cfg, encoding=cfg.profile.encoding,
                            mlp=cfg.profile.mlp(volume.channels), ghost_width=cfg.ghost_width,
                            max_workers=cfg.max_workers)
    return dnr, time.perf_counter() - started


def _row(rank_grid: RankGrid, volume, dnr, elapsed: float, **extra) -> Dict[str, Any]:
    return {
        "ranks": int(np.prod(rank_grid)),
        "rank_grid": "x".join(str(r) for r in rank_grid),
        "dims": "x".join(str(d) for d in volume.dims),
        "compress_time_s": elapsed,
        "mean_rank_steps": float(np.mean(dnr.rank_steps)),
        "max_rank_steps": int(max(dnr.rank_steps)),
        "achieved_psnr": dnr.achieved_psnr,
        "budget_exhausted": dnr.budget_exhausted,
        "input_bytes": volume.nbytes,
        "model_bytes": dnr.nbytes,
        **extra,
    }


def run_stability(cfg: BenchConfig) -> BenchResult:
    volume = _field(cfg.base_dims, cfg)
    rank_grid = cfg.rank_grids[0]
    rows = []
    for i in range(cfg.repeats):
        dnr, elapsed = _encode(volume, rank_grid, cfg)
        rows.append(_row(rank_grid, volume, dnr, elapsed, repeat=i))
    times = np.array([r["compress_time_s"] for r in rows])
    cov = float(times.std() / times.mean()) if times.mean() > 0 else 0.0
    logger.info(f"stability: {cfg.repeats} encodes, mean {times.mean():.3f}s, CoV {cov:.3f}")
    return BenchResult("stability", rows, {"mean_time_s": float(times.mean()), "cov": cov})


def run_weak_scaling(cfg: BenchConfig) -> BenchResult:
    rows = []
    for grid in cfg.rank_grids:
        dims = tuple(b * r for b, r in zip(cfg.base_dims, grid))
        volume = _field(dims, cfg)
        dnr, elapsed = _encode(volume, grid, cfg)
        rows.append(_row(grid, volume, dnr, elapsed))
        logger.info(f"weak-scaling {grid}: dims {dims}, mean rank steps {rows[-1]['mean_rank_steps']:.0f}")
    steps = [r["mean_rank_steps"] for r in rows]
    summary = {
        "mean_rank_steps": steps,
        "steps_non_increasing": bool(all(b <= a for a, b in zip(steps, steps[1:]))),
    }
    return BenchResult("weak-scaling", rows, summary)


def run_strong_scaling(cfg: BenchConfig) -> BenchResult:
    volume = _field(cfg.base_dims, cfg)
    rows = []
    for grid in cfg.rank_grids:
        dnr, elapsed = _encode(volume, grid, cfg)
        rows.append(_row(grid, volume, dnr, elapsed))
    base = rows[0]["compress_time_s"]
    for row in rows:
        row["speedup"] = base / row["compress_time_s"] if row["compress_time_s"] > 0 else float("nan")
        row["efficiency"] = row["speedup"] * rows[0]["ranks"] / row["ranks"]
        logger.info(f"strong-scaling {row['rank_grid']}: {row['compress_time_s']:.3f}s, "
                    f"speedup {row['speedup']:.2f}")
    summary = {
        "speedups": [r["speedup"] for r in rows],
        "sublinear": bool(all(r["efficiency"] < 1.0 for r in rows[1:])),
    }
    return BenchResult("strong-scaling", rows, summary)


SUITES: Dict[str, Callable[[BenchConfig], BenchResult]] = {
    "stability": run_stability,
    "weak-scaling": run_weak_scaling,
    "strong-scaling": run_strong_scaling,
}


def run_suite(suite: str, cfg: Optional[BenchConfig] = None) -> BenchResult:
    runner = SUITES.get(suite)
    if runner is None:
        raise ConfigurationError(f"unknown bench suite '{suite}' (choose from {sorted(SUITES)})")
    return runner(cfg or BenchConfig())
