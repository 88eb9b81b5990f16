"""
Consumers of cached volumes: a sort-last ray-marching volume renderer and an
RK4 pathline tracer over a temporal window.

The renderer queries each partition's network (or a reference grid) along
the part of every ray that crosses that partition, then composites the
per-rank fragments front to back by entry depth. The tracer decodes window
elements on demand and never keeps more than two decoded grids resident.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, FieldTypeError, ShapeMismatchError
from .inr import InrModel
from .volume import (
    GridVolume, Partition, ValueRange, decompose_domain, local_value_range, normalize_array,
    normalize_coords, psnr, sample_trilinear,
)

logger = logging.getLogger(__name__)

EARLY_EXIT_ALPHA = 0.99
MACROCELL_EPS = 1e-3


# --------------------------------------------------------------------------- #
# Camera & transfer function
# --------------------------------------------------------------------------- #
@dataclass
class Camera:
    position: Tuple[float, float, float]
    look_at: Tuple[float, float, float]
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 30.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        self.look_at = tuple(float(v) for v in self.look_at)
        self.up = tuple(float(v) for v in self.up)
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigurationError(f"fov must be in (0, 180), got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"image size must be positive, got {self.width}x{self.height}")
        forward = np.subtract(self.look_at, self.position)
        if np.linalg.norm(forward) == 0 or np.linalg.norm(np.cross(forward, self.up)) < 1e-12:
            raise ConfigurationError("degenerate camera basis (look_at == position or up parallel to view)")

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = np.subtract(self.look_at, self.position)
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right /= np.linalg.norm(right)
        return forward, right, np.cross(right, forward)

    def rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions, one per pixel in row-major order (top row first)."""
        forward, right, up = self.basis()
        half = math.tan(math.radians(self.fov_deg) / 2.0)
        aspect = self.width / self.height
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * half * aspect
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * half
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        dirs = forward + xx.reshape(-1, 1) * right + yy.reshape(-1, 1) * up
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(np.asarray(self.position), dirs.shape).copy()
        return origins, dirs


@dataclass
class TransferFunction:
    """Piecewise-linear map from a normalized scalar to straight (non-premultiplied) RGBA."""
    points: List[Tuple[float, float, float, float, float]]
    opacity_scale: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 5 or len(pts) < 1:
            raise ConfigurationError("transfer function needs rows of (scalar, r, g, b, a)")
        if np.any(np.diff(pts[:, 0]) < 0):
            raise ConfigurationError("transfer function control points must be sorted")
        if np.any((pts[:, 4] < 0) | (pts[:, 4] > 1)):
            raise ConfigurationError("transfer function alpha must be in [0, 1]")
        if self.opacity_scale < 0:
            raise ConfigurationError("opacity_scale must be non-negative")
        self._table = pts

    def lookup(self, s: np.ndarray) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
        xs = self._table[:, 0]
        rgba = np.stack([np.interp(s, xs, self._table[:, c]) for c in range(1, 5)], axis=-1)
        rgba[..., 3] = np.clip(rgba[..., 3] * self.opacity_scale, 0.0, 1.0)
        return rgba

    def max_alpha(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Largest alpha over each scalar interval [lo, hi] (exact for piecewise-linear maps)."""
        lo = np.clip(np.asarray(lo, dtype=np.float64), 0.0, 1.0)
        hi = np.clip(np.asarray(hi, dtype=np.float64), 0.0, 1.0)
        best = np.maximum(self.lookup(lo)[..., 3], self.lookup(hi)[..., 3])
        for x, a in zip(self._table[:, 0], self._table[:, 4]):
            inside = (lo <= x) & (x <= hi)
            best = np.where(inside, np.maximum(best, min(1.0, a * self.opacity_scale)), best)
        return best


def make_camera(params: Dict[str, Any]) -> Camera:
    """Camera from a config mapping; unknown keys or bad values raise ConfigurationError."""
    try:
        return Camera(**params)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid camera settings: {e}") from e


def make_transfer_function(params: Dict[str, Any]) -> TransferFunction:
    try:
        return TransferFunction(**params)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid transfer function settings: {e}") from e


# --------------------------------------------------------------------------- #
# Field sources
# --------------------------------------------------------------------------- #
class FieldSource(ABC):
    """Normalized scalar field over a box; counts point evaluations."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.evaluations = 0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        self.evaluations += len(points)
        return self.sample(np.clip(points, self.lo, self.hi))

    @abstractmethod
    def sample(self, points: np.ndarray) -> np.ndarray:
        pass


class GridFieldSource(FieldSource):
    def __init__(self, volume: GridVolume, value_range: Optional[ValueRange] = None,
                 box: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        if volume.channels != 1:
            raise FieldTypeError(f"rendering needs a scalar field, got {volume.channels} channels")
        lo, hi = box if box is not None else volume.bounds
        super().__init__(lo, hi)
        self.volume = volume
        self.value_range = value_range or local_value_range(volume)

    def sample(self, points: np.ndarray) -> np.ndarray:
        return normalize_array(sample_trilinear(self.volume, points), self.value_range)[:, 0]


class InrFieldSource(FieldSource):
    """Direct network inference; outputs are already in normalized value space."""

    def __init__(self, model: InrModel, partition: Partition):
        if model.mlp.output_dim != 1:
            raise FieldTypeError(f"rendering needs a scalar field, got {model.mlp.output_dim} channels")
        super().__init__(*partition.world_bounds)
        self.model = model
        self.partition = partition

    def sample(self, points: np.ndarray) -> np.ndarray:
        return self.model(normalize_coords(points, self.partition, strict=False))[:, 0].astype(np.float64)


# --------------------------------------------------------------------------- #
# Macro-cells
# --------------------------------------------------------------------------- #
@dataclass
class MacroCellGrid:
    lo: np.ndarray
    hi: np.ndarray
    resolution: int
    vmin: np.ndarray
    vmax: np.ndarray
    eps: float = MACROCELL_EPS

    @property
    def nbytes(self) -> int:
        return int(self.vmin.nbytes + self.vmax.nbytes)

    def cell_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        ext = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        idx = np.floor((points - self.lo) / ext * self.resolution).astype(np.int64)
        idx = np.clip(idx, 0, self.resolution - 1)
        return idx[:, 2], idx[:, 1], idx[:, 0]

    def empty_mask(self, tf: TransferFunction) -> np.ndarray:
        """True for cells whose whole padded value range maps to zero opacity."""
        return tf.max_alpha(self.vmin, self.vmax) <= 0.0


def build_macrocells(source: FieldSource, resolution: int = 16, samples_per_cell: int = 4,
                     eps: float = MACROCELL_EPS) -> MacroCellGrid:
    """Sample the source on a lattice shared by neighbouring cells and keep padded min/max."""
    if resolution < 1 or samples_per_cell < 2:
        raise ConfigurationError("macro-cells need resolution >= 1 and >= 2 samples per axis")
    n = resolution * (samples_per_cell - 1) + 1
    axes = [np.linspace(source.lo[a], source.hi[a], n) for a in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    values = source(np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)).reshape(n, n, n)
    p = samples_per_cell
    windows = np.lib.stride_tricks.sliding_window_view(values, (p, p, p))[::p - 1, ::p - 1, ::p - 1]
    vmin = windows.min(axis=(3, 4, 5)) - eps
    vmax = windows.max(axis=(3, 4, 5)) + eps
    return MacroCellGrid(lo=source.lo.copy(), hi=source.hi.copy(), resolution=resolution,
                         vmin=vmin, vmax=vmax, eps=eps)


# --------------------------------------------------------------------------- #
# Ray marching
# --------------------------------------------------------------------------- #
def intersect_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Slab test. Returns (t_near, t_far) clipped to t >= 0; misses have t_near >= t_far."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.maximum(np.max(np.minimum(t1, t2), axis=1), 0.0)
    t_far = np.min(np.maximum(t1, t2), axis=1)
    return t_near, t_far


def _first_sample_at_or_after(t: np.ndarray, step: float) -> np.ndarray:
    k = np.ceil(t / step)
    k = k + (k * step < t)
    k = k - ((k - 1) * step >= t)
    return k.astype(np.int64)


def march_rays(source: Callable[[np.ndarray], np.ndarray], origins: np.ndarray, dirs: np.ndarray,
               t_near: np.ndarray, t_far: np.ndarray, tf: TransferFunction, step_size: float,
               base_step: float = 1.0, early_exit: Optional[float] = EARLY_EXIT_ALPHA,
               macrocells: Optional[MacroCellGrid] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Front-to-back emission-absorption over half-open intervals [t_near, t_far).

    Samples sit at t_k = k * step_size measured from each ray origin, so any
    split of an interval assigns every sample to exactly one piece. Returns
    premultiplied color (P, 3) and opacity (P,).
    """
    if step_size <= 0 or base_step <= 0:
        raise ConfigurationError("step_size and base_step must be positive")
    n_rays = len(origins)
    color = np.zeros((n_rays, 3))
    alpha = np.zeros(n_rays)
    hit = t_far > t_near
    if not np.any(hit):
        return color, alpha
    k_start = np.where(hit, _first_sample_at_or_after(np.where(hit, t_near, 0.0), step_size), 0)
    k_end = np.where(hit, _first_sample_at_or_after(np.where(hit, t_far, 0.0), step_size), 0)
    empty = macrocells.empty_mask(tf) if macrocells is not None else None
    exponent = step_size / base_step

    for k in range(int(k_start[hit].min()), int(k_end[hit].max())):
        active = (k_start <= k) & (k < k_end)
        if early_exit is not None:
            active &= alpha < early_exit
        rays = np.flatnonzero(active)
        if rays.size == 0:
            continue
        points = origins[rays] + dirs[rays] * (k * step_size)
        if empty is not None:
            keep = ~empty[macrocells.cell_index(points)]
            rays, points = rays[keep], points[keep]
            if rays.size == 0:
                continue
        rgba = tf.lookup(source(points))
        a = 1.0 - np.power(1.0 - rgba[:, 3], exponent)
        weight = (1.0 - alpha[rays]) * a
        color[rays] += weight[:, None] * rgba[:, :3]
        alpha[rays] += weight
    return color, alpha


def ray_march(source: Callable[[np.ndarray], np.ndarray], origin: Sequence[float], direction: Sequence[float],
              t_range: Tuple[float, float], tf: TransferFunction, step_size: float,
              base_step: float = 1.0, early_exit: Optional[float] = EARLY_EXIT_ALPHA
              ) -> Tuple[np.ndarray, float]:
    """Single-ray convenience wrapper; returns (premultiplied RGB, alpha)."""
    color, alpha = march_rays(source, np.asarray([origin], dtype=np.float64),
                              np.asarray([direction], dtype=np.float64),
                              np.array([t_range[0]], dtype=np.float64), np.array([t_range[1]], dtype=np.float64),
                              tf, step_size, base_step, early_exit)
    return color[0], float(alpha[0])


# --------------------------------------------------------------------------- #
# Compositing
# --------------------------------------------------------------------------- #
@dataclass
class Fragment:
    """One rank's contribution: premultiplied color, opacity and entry depth per pixel."""
    rank: int
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray

    @property
    def nbytes(self) -> int:
        return int(self.color.nbytes + self.alpha.nbytes + self.depth.nbytes)


@dataclass
class Image:
    width: int
    height: int
    color: np.ndarray
    alpha: np.ndarray
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def rgb(self) -> np.ndarray:
        """Final pixels with the background blended behind the volume, shape (H, W, 3)."""
        bg = np.asarray(self.background, dtype=np.float64)
        return np.clip(self.color + (1.0 - self.alpha[..., None]) * bg, 0.0, 1.0)

    @property
    def rgba(self) -> np.ndarray:
        return np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)

    @property
    def nbytes(self) -> int:
        return int(self.color.nbytes + self.alpha.nbytes)


def composite_fragments(fragments: Sequence[Fragment], width: int, height: int,
                        background: Sequence[float] = (0.0, 0.0, 0.0)) -> Image:
    """Per pixel, blend fragments front to back by (entry depth, rank)."""
    n_pix = width * height
    color = np.zeros((n_pix, 3))
    alpha = np.zeros(n_pix)
    if fragments:
        depth = np.stack([f.depth for f in fragments])
        ranks = np.broadcast_to(np.array([f.rank for f in fragments])[:, None], depth.shape)
        frag_color = np.stack([f.color for f in fragments])
        frag_alpha = np.stack([f.alpha for f in fragments])
        order = np.lexsort((ranks, depth), axis=0)
        pix = np.arange(n_pix)
        for slot in range(len(fragments)):
            which = order[slot]
            c = frag_color[which, pix]
            a = frag_alpha[which, pix]
            color += (1.0 - alpha)[:, None] * c
            alpha += (1.0 - alpha) * a
    return Image(width=width, height=height, color=color.reshape(height, width, 3),
                 alpha=np.clip(alpha, 0.0, 1.0).reshape(height, width),
                 background=tuple(float(b) for b in background))


def _render_sources(sources: Sequence[Tuple[int, FieldSource]], camera: Camera, tf: TransferFunction,
                    step_size: float, base_step: float, early_exit: Optional[float],
                    macrocell_resolution: Optional[int], background: Sequence[float],
                    max_workers: Optional[int]) -> Image:
    origins, dirs = camera.rays()

    def render_rank(item):
        rank, source = item
        t_near, t_far = intersect_box(origins, dirs, source.lo, source.hi)
        cells = build_macrocells(source, macrocell_resolution) if macrocell_resolution else None
        color, alpha = march_rays(source, origins, dirs, t_near, t_far, tf, step_size, base_step,
                                  early_exit, cells)
        depth = np.where(t_far > t_near, t_near, np.inf)
        return Fragment(rank=rank, color=color, alpha=alpha, depth=depth), cells

    with ThreadPoolExecutor(max_workers=max_workers or max(1, len(sources))) as pool:
        results = list(pool.map(render_rank, sources))
    fragments = [r[0] for r in results]
    image = composite_fragments(fragments, camera.width, camera.height, background)
    image.stats = {
        "evaluations": int(sum(s.evaluations for _, s in sources)),
        "fragment_bytes": int(sum(f.nbytes for f in fragments)),
        "macrocell_bytes": int(sum(c.nbytes for _, c in results if c is not None)),
        "ranks": len(sources),
    }
    return image


def render_dnr(dnr, camera: Camera, tf: TransferFunction, step_size: float, base_step: float = 1.0,
               early_exit: Optional[float] = EARLY_EXIT_ALPHA, macrocell_resolution: Optional[int] = None,
               background: Sequence[float] = (0.0, 0.0, 0.0), max_workers: Optional[int] = None) -> Image:
    """Sort-last render straight from the per-rank networks (no decode)."""
    sources = [(part.rank, InrFieldSource(model, part)) for part, model in zip(dnr.partitions, dnr.models)]
    image = _render_sources(sources, camera, tf, step_size, base_step, early_exit, macrocell_resolution,
                            background, max_workers)
    logger.info(f"Rendered {camera.width}x{camera.height} from {len(sources)} rank(s), "
                f"{image.stats['evaluations']} network evaluations")
    return image


def render_grid(volume: GridVolume, camera: Camera, tf: TransferFunction, step_size: float,
                value_range: Optional[ValueRange] = None, rank_grid: Sequence[int] = (1, 1, 1),
                base_step: float = 1.0, early_exit: Optional[float] = EARLY_EXIT_ALPHA,
                macrocell_resolution: Optional[int] = None, background: Sequence[float] = (0.0, 0.0, 0.0),
                max_workers: Optional[int] = None) -> Image:
    """Reference render of a grid, optionally split into sort-last bricks."""
    value_range = value_range or local_value_range(volume)
    partitions = decompose_domain(volume.dims, rank_grid, 0, volume.mesh)
    sources = [(p.rank, GridFieldSource(volume, value_range, box=p.world_bounds)) for p in partitions]
    return _render_sources(sources, camera, tf, step_size, base_step, early_exit, macrocell_resolution,
                           background, max_workers)


def image_psnr(a: Image, b: Image) -> float:
    if a.rgb.shape != b.rgb.shape:
        raise ShapeMismatchError(f"image size mismatch: {a.rgb.shape} vs {b.rgb.shape}")
    return psnr(a.rgb, b.rgb)


# --------------------------------------------------------------------------- #
# Pathlines
# --------------------------------------------------------------------------- #
class Termination(Enum):
    WINDOW_EXHAUSTED = "window-exhausted"
    OUT_OF_DOMAIN = "out-of-domain"
    MAX_STEPS = "max-steps"


@dataclass
class Pathline:
    seed_id: int
    positions: np.ndarray
    times: np.ndarray
    speeds: np.ndarray
    termination: Termination

    @property
    def end(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


def rk4_step(V: Callable[[np.ndarray, float], np.ndarray], p: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step of dp/dt = V(p, t)."""
    k1 = V(p, t)
    k2 = V(p + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = V(p + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = V(p + dt * k3, t + dt)
    return p + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class DecodedGridCache:
    """LRU of decoded window elements, bounded to `maxsize` resident grids."""

    def __init__(self, maxsize: int = 2):
        if maxsize < 1:
            raise ConfigurationError("decoded grid cache needs maxsize >= 1")
        self.maxsize = maxsize
        self._grids: "OrderedDict[int, GridVolume]" = OrderedDict()
        self.decodes = 0
        self.peak_resident = 0
        self.peak_bytes = 0

    def get(self, index: int, frame) -> GridVolume:
        if index in self._grids:
            self._grids.move_to_end(index)
            return self._grids[index]
        while len(self._grids) >= self.maxsize:
            self._grids.popitem(last=False)
        grid = frame.decode()
        self.decodes += 1
        self._grids[index] = grid
        self.peak_resident = max(self.peak_resident, len(self._grids))
        self.peak_bytes = max(self.peak_bytes, sum(g.nbytes for g in self._grids.values()))
        return grid


class WindowVelocity:
    """Velocity over a window, linear in time between neighbouring elements.

    The integration parameter s runs from 0 to the window's time span; the
    physical time is t0 + direction * s, so reversed windows integrate
    backward in simulation time.
    """

    def __init__(self, frames: Sequence[Any], cache: DecodedGridCache):
        if len(frames) == 0:
            raise ConfigurationError("cannot trace over an empty window")
        self.frames = list(frames)
        self.cache = cache
        times = np.array([f.time for f in self.frames], dtype=np.float64)
        self.t0 = float(times[0])
        self.direction = -1.0 if len(times) > 1 and times[-1] < times[0] else 1.0
        self.s = np.abs(times - times[0])
        if np.any(np.diff(self.s) <= 0):
            raise ConfigurationError("window element times must be strictly monotone")
        first = cache.get(0, self.frames[0])
        if first.channels != 3:
            raise FieldTypeError(f"pathlines need a vector field, got {first.channels} channels")
        self.lo, self.hi = first.bounds
        self.span = float(self.s[-1])

    def physical_time(self, s: float) -> float:
        return self.t0 + self.direction * s

    def inside(self, p: np.ndarray) -> np.ndarray:
        tol = 1e-12 * np.maximum(1.0, self.hi - self.lo)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)

    def __call__(self, p: np.ndarray, s: float) -> np.ndarray:
        p = np.clip(p, self.lo, self.hi)
        if len(self.frames) == 1:
            return sample_trilinear(self.cache.get(0, self.frames[0]), p)
        i = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2))
        w = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        v0 = sample_trilinear(self.cache.get(i, self.frames[i]), p)
        if w == 0.0:
            return v0
        v1 = sample_trilinear(self.cache.get(i + 1, self.frames[i + 1]), p)
        return (1.0 - w) * v0 + w * v1


def trace_pathlines(window: Sequence[Any], seeds: np.ndarray, dt: float, max_steps: int = 10000,
                    cache_size: int = 2, cache: Optional[DecodedGridCache] = None) -> List[Pathline]:
    """RK4 pathlines across the window's time span, one per seed.

    Elements need `.time` and `.decode()`. For backward tracing pass the
    negated, reversed window; integration then runs forward through it.
    """
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if max_steps < 1:
        raise ConfigurationError(f"max_steps must be >= 1, got {max_steps}")
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    if seeds.shape[1] != 3:
        raise ShapeMismatchError(f"seeds must be (M, 3), got {seeds.shape}")
    cache = cache or DecodedGridCache(cache_size)
    V = WindowVelocity(window, cache)
    m = len(seeds)

    pos = seeds.copy()
    alive = V.inside(pos)
    done = np.zeros(m, dtype=bool)
    reason: List[Optional[Termination]] = [None if a else Termination.OUT_OF_DOMAIN for a in alive]
    speeds0 = np.zeros(m)
    if np.any(alive):
        speeds0[alive] = np.linalg.norm(V(pos[alive], 0.0), axis=1)
    tracks = [[(pos[i].copy(), V.physical_time(0.0), speeds0[i])] for i in range(m)]

    s = 0.0
    steps = 0
    while np.any(alive) and s < V.span and steps < max_steps:
        h = min(dt, V.span - s)
        idx = np.flatnonzero(alive)
        escaped = np.zeros(len(idx), dtype=bool)

        def velocity(p, t):
            nonlocal escaped
            escaped |= ~V.inside(p)
            return V(p, t)

        new = rk4_step(velocity, pos[idx], s, h)
        escaped |= ~V.inside(new)
        s_next = V.span if V.span - (s + h) <= 1e-12 * max(1.0, V.span) else s + h
        ok = idx[~escaped]
        pos[ok] = new[~escaped]
        if ok.size:
            sp = np.linalg.norm(V(pos[ok], s_next), axis=1)
            for j, i in enumerate(ok):
                tracks[i].append((pos[i].copy(), V.physical_time(s_next), sp[j]))
        for i in idx[escaped]:
            alive[i] = False
            reason[i] = Termination.OUT_OF_DOMAIN
        s = s_next
        steps += 1

    for i in range(m):
        if reason[i] is None:
            reason[i] = Termination.WINDOW_EXHAUSTED if s >= V.span else Termination.MAX_STEPS
    lines = []
    for i, track in enumerate(tracks):
        lines.append(Pathline(seed_id=i, positions=np.array([v[0] for v in track]),
                              times=np.array([v[1] for v in track]), speeds=np.array([v[2] for v in track]),
                              termination=reason[i]))
    logger.info(f"Traced {m} seed(s) over {steps} step(s); {cache.decodes} decode(s), "
                f"peak {cache.peak_resident} grid(s) resident")
    return lines


@dataclass
class RoundTripResult:
    backward: List[Pathline]
    forward: List[Pathline]
    errors: Dict[int, float]
    dropped: List[int]
    peak_cache_bytes: int = 0


def trace_round_trip(window, seeds: np.ndarray, dt: float, max_steps: int = 10000,
                     cache_size: int = 2) -> RoundTripResult:
    """Backward over negate(reverse(window)), then forward from the surviving endpoints."""
    from .cache import negate, reverse

    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    back_cache, fwd_cache = DecodedGridCache(cache_size), DecodedGridCache(cache_size)
    backward = trace_pathlines(negate(reverse(window)), seeds, dt, max_steps, cache=back_cache)
    kept = [line.seed_id for line in backward if line.termination is Termination.WINDOW_EXHAUSTED]
    dropped = [line.seed_id for line in backward if line.seed_id not in kept]
    if dropped:
        logger.warning(f"{len(dropped)} seed(s) left the domain during backward tracing and are ignored")
    forward: List[Pathline] = []
    errors: Dict[int, float] = {}
    if kept:
        starts = np.array([backward[i].end for i in kept])
        forward = trace_pathlines(window, starts, dt, max_steps, cache=fwd_cache)
        for line, seed_id in zip(forward, kept):
            line.seed_id = seed_id
            if line.termination is Termination.WINDOW_EXHAUSTED:
                errors[seed_id] = float(np.linalg.norm(line.end - seeds[seed_id]))
    return RoundTripResult(backward=backward, forward=forward, errors=errors, dropped=dropped,
                           peak_cache_bytes=max(back_cache.peak_bytes, fwd_cache.peak_bytes))


def pathline_deviation(line: Pathline, reference: Pathline) -> float:
    """Mean vertex distance over the shared prefix, divided by the reference path length."""
    n = min(len(line.positions), len(reference.positions))
    if n == 0:
        return 0.0
    mean = float(np.mean(np.linalg.norm(line.positions[:n] - reference.positions[:n], axis=1)))
    length = reference.length
    return mean / length if length > 0 else mean


def random_seeds(count: int, lo: Sequence[float], hi: Sequence[float], seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64), size=(count, 3))
