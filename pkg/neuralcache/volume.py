"""
Grid volumes for neuralcache.

Storage of uniform/rectilinear scalar and vector fields, domain decomposition
with ghost regions, trilinear sampling, coordinate/value normalization and the
PSNR quality metric. Everything here is immutable after construction and safe
to share between rank workers.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ConfigurationError, ConstantFieldWarning, DomainError, ShapeMismatchError,
)

logger = logging.getLogger(__name__)

Int3 = Tuple[int, int, int]
Float3 = Tuple[float, float, float]
IndexBox = Tuple[Int3, Int3]  # inclusive (lo, hi)

PSNR_CAP_DB = 200.0


# --------------------------------------------------------------------------- #
# Meshes
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class UniformMesh:
    origin: Float3 = (0.0, 0.0, 0.0)
    spacing: Float3 = (1.0, 1.0, 1.0)

    kind = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        if len(self.origin) != 3 or len(self.spacing) != 3:
            raise ConfigurationError("Uniform mesh needs 3 origin and 3 spacing values")
        if any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"Uniform mesh spacing must be positive, got {self.spacing}")

    def axis_coords(self, dims: Int3) -> List[np.ndarray]:
        return [self.origin[a] + self.spacing[a] * np.arange(dims[a], dtype=np.float64)
                for a in range(3)]

    def sub_mesh(self, lo: Int3, hi: Int3) -> "UniformMesh":
        origin = tuple(self.origin[a] + self.spacing[a] * lo[a] for a in range(3))
        return UniformMesh(origin=origin, spacing=self.spacing)


@dataclass(frozen=True, eq=False)
class RectilinearMesh:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    kind = "rectilinear"

    def __post_init__(self):
        for name in ("x", "y", "z"):
            arr = np.array(getattr(self, name), dtype=np.float64).ravel()
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise ConfigurationError(f"Rectilinear axis '{name}' must be strictly increasing")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def axis_coords(self, dims: Int3) -> List[np.ndarray]:
        axes = [self.x, self.y, self.z]
        for a in range(3):
            if axes[a].size != dims[a]:
                raise ConfigurationError(
                    f"Rectilinear axis {a} has {axes[a].size} coordinates, dims say {dims[a]}")
        return axes

    def sub_mesh(self, lo: Int3, hi: Int3) -> "RectilinearMesh":
        return RectilinearMesh(x=self.x[lo[0]:hi[0] + 1], y=self.y[lo[1]:hi[1] + 1],
                               z=self.z[lo[2]:hi[2] + 1])


Mesh = Union[UniformMesh, RectilinearMesh]


# --------------------------------------------------------------------------- #
# GridVolume
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class GridVolume:
    """Node-centered field. `values` has shape (nz, ny, nx, D), so a C-order
    ravel is the x-fastest layout used on disk."""
    dims: Int3
    values: np.ndarray
    mesh: Mesh = field(default_factory=UniformMesh)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ConfigurationError(f"dims must be 3 positive integers, got {self.dims}")
        values = np.asarray(self.values)
        nx, ny, nz = dims
        if values.ndim == 1:
            if values.size % (nx * ny * nz):
                raise ShapeMismatchError(
                    f"value array of length {values.size} is not a multiple of {nx * ny * nz}")
            values = values.reshape(nz, ny, nx, -1)
        elif values.ndim == 3:
            values = values[..., None]
        if values.shape[:3] != (nz, ny, nx) or values.ndim != 4 or values.shape[3] < 1:
            raise ShapeMismatchError(f"values shape {values.shape} does not match dims {dims}")
        values = values.view()
        values.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", values)
        self.mesh.axis_coords(dims)  # validates rectilinear lengths

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def nbytes(self) -> int:
        return int(self.values.nbytes)

    @cached_property
    def axes(self) -> List[np.ndarray]:
        return self.mesh.axis_coords(self.dims)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.array([ax[0] for ax in self.axes])
        hi = np.array([ax[-1] for ax in self.axes])
        return lo, hi

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1)

    def node_coords(self, box: Optional[IndexBox] = None) -> np.ndarray:
        """Physical coordinates of the nodes in `box` (inclusive), x-fastest order."""
        lo, hi = box if box is not None else ((0, 0, 0), tuple(d - 1 for d in self.dims))
        xs, ys, zs = (self.axes[a][lo[a]:hi[a] + 1] for a in range(3))
        zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def subvolume(self, box: IndexBox) -> "GridVolume":
        """Zero-copy view of an inclusive index box."""
        lo, hi = box
        view = self.values[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        dims = tuple(hi[a] - lo[a] + 1 for a in range(3))
        return GridVolume(dims=dims, values=view, mesh=self.mesh.sub_mesh(lo, hi))

    def with_values(self, values: np.ndarray) -> "GridVolume":
        return GridVolume(dims=self.dims, values=values, mesh=self.mesh)


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #
def _axis_cells(axis: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = axis.size
    if n == 1:
        zeros = np.zeros(p.shape, dtype=np.intp)
        return zeros, zeros, np.zeros(p.shape)
    i0 = np.clip(np.searchsorted(axis, p, side="right") - 1, 0, n - 2)
    i1 = i0 + 1
    t = (p - axis[i0]) / (axis[i1] - axis[i0])
    return i0, i1, t


def _bounds_tolerance(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return 1e-12 * np.maximum(1.0, np.abs(hi - lo))


def sample_trilinear(vol: GridVolume, p: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at physical point(s) `p` of shape (3,) or (N, 3).

    Returns (D,) for a single point, (N, D) otherwise.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ShapeMismatchError(f"points must have 3 components, got shape {pts.shape}")
    lo, hi = vol.bounds
    tol = _bounds_tolerance(lo, hi)
    outside = np.any((pts < lo - tol) | (pts > hi + tol), axis=1)
    if np.any(outside):
        bad = pts[np.argmax(outside)]
        raise DomainError(f"point {bad.tolist()} outside volume bounds {lo.tolist()}..{hi.tolist()}")

    ix0, ix1, tx = _axis_cells(vol.axes[0], pts[:, 0])
    iy0, iy1, ty = _axis_cells(vol.axes[1], pts[:, 1])
    iz0, iz1, tz = _axis_cells(vol.axes[2], pts[:, 2])
    v = vol.values
    tx, ty, tz = tx[:, None], ty[:, None], tz[:, None]
    c00 = v[iz0, iy0, ix0] * (1 - tx) + v[iz0, iy0, ix1] * tx
    c10 = v[iz0, iy1, ix0] * (1 - tx) + v[iz0, iy1, ix1] * tx
    c01 = v[iz1, iy0, ix0] * (1 - tx) + v[iz1, iy0, ix1] * tx
    c11 = v[iz1, iy1, ix0] * (1 - tx) + v[iz1, iy1, ix1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = c0 * (1 - tz) + c1 * tz
    return out[0] if single else out


# --------------------------------------------------------------------------- #
# Decomposition
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Partition:
    rank: int
    grid_index: Int3
    core_box: IndexBox
    ghost_width: int
    ghost_box: IndexBox
    world_bounds: Tuple[Float3, Float3]

    @property
    def core_dims(self) -> Int3:
        lo, hi = self.core_box
        return tuple(hi[a] - lo[a] + 1 for a in range(3))

    @property
    def ghost_dims(self) -> Int3:
        lo, hi = self.ghost_box
        return tuple(hi[a] - lo[a] + 1 for a in range(3))

    def contains_index(self, idx: Int3) -> bool:
        lo, hi = self.core_box
        return all(lo[a] <= idx[a] <= hi[a] for a in range(3))


@dataclass(frozen=True)
class Face:
    """Interior face shared by two partitions adjacent along `axis`."""
    axis: int
    lower_rank: int
    upper_rank: int
    plane: int  # node index of the face plane along `axis`
    lattice: IndexBox  # inclusive node box of the face lattice


def rank_of(grid_index: Int3, rank_grid: Int3) -> int:
    ix, iy, iz = grid_index
    return ix + rank_grid[0] * (iy + rank_grid[1] * iz)


def decompose_domain(dims: Sequence[int], rank_grid: Sequence[int], ghost_width: int,
                     mesh: Optional[Mesh] = None) -> List[Partition]:
    """Split `dims` into rank_grid bricks, x-fastest rank order, ghosts clamped at faces."""
    dims = tuple(int(d) for d in dims)
    rank_grid = tuple(int(r) for r in rank_grid)
    if len(dims) != 3 or len(rank_grid) != 3:
        raise ConfigurationError("dims and rank_grid need 3 components each")
    if any(r < 1 for r in rank_grid) or any(d < 1 for d in dims):
        raise ConfigurationError(f"invalid dims {dims} or rank grid {rank_grid}")
    if ghost_width < 0:
        raise ConfigurationError(f"ghost width must be non-negative, got {ghost_width}")
    for a in range(3):
        if dims[a] % rank_grid[a]:
            raise ConfigurationError(
                f"dims[{a}]={dims[a]} is not divisible by rank_grid[{a}]={rank_grid[a]}")

    axes = (mesh or UniformMesh()).axis_coords(dims)
    brick = tuple(dims[a] // rank_grid[a] for a in range(3))
    partitions = []
    for iz in range(rank_grid[2]):
        for iy in range(rank_grid[1]):
            for ix in range(rank_grid[0]):
                gi = (ix, iy, iz)
                lo = tuple(gi[a] * brick[a] for a in range(3))
                hi = tuple(lo[a] + brick[a] - 1 for a in range(3))
                glo = tuple(max(0, lo[a] - ghost_width) for a in range(3))
                ghi = tuple(min(dims[a] - 1, hi[a] + ghost_width) for a in range(3))
                wlo = tuple(float(axes[a][lo[a]]) for a in range(3))
                whi = tuple(float(axes[a][min(hi[a] + 1, dims[a] - 1)]) for a in range(3))
                partitions.append(Partition(
                    rank=rank_of(gi, rank_grid), grid_index=gi, core_box=(lo, hi),
                    ghost_width=ghost_width, ghost_box=(glo, ghi), world_bounds=(wlo, whi)))
    logger.debug(f"Decomposed {dims} into {len(partitions)} partitions (ghost={ghost_width})")
    return partitions


def layout_dims(partitions: Sequence[Partition]) -> Int3:
    return tuple(max(p.core_box[1][a] for p in partitions) + 1 for a in range(3))


def layout_rank_grid(partitions: Sequence[Partition]) -> Int3:
    return tuple(max(p.grid_index[a] for p in partitions) + 1 for a in range(3))


def list_shared_faces(partitions: Sequence[Partition]) -> List[Face]:
    dims = layout_dims(partitions)
    by_index = {p.grid_index: p for p in partitions}
    faces = []
    for p in sorted(partitions, key=lambda q: q.rank):
        for axis in range(3):
            nb_index = tuple(p.grid_index[a] + (1 if a == axis else 0) for a in range(3))
            nb = by_index.get(nb_index)
            if nb is None:
                continue
            plane = nb.core_box[0][axis]
            lo = list(p.core_box[0])
            hi = [min(p.core_box[1][a] + 1, dims[a] - 1) for a in range(3)]
            lo[axis] = hi[axis] = plane
            faces.append(Face(axis=axis, lower_rank=p.rank, upper_rank=nb.rank, plane=plane,
                              lattice=(tuple(lo), tuple(hi))))
    return faces


def partition_faces(part: Partition, partitions: Sequence[Partition]) -> List[Face]:
    return [f for f in list_shared_faces(partitions) if part.rank in (f.lower_rank, f.upper_rank)]


def boundary_node_indices(part: Partition, partitions: Sequence[Partition]) -> np.ndarray:
    """Global (i, j, k) node indices on the interior faces of `part`, shape (M, 3)."""
    faces = partition_faces(part, partitions)
    if not faces:
        return np.zeros((0, 3), dtype=np.int64)
    chunks = []
    for face in faces:
        lo, hi = face.lattice
        zz, yy, xx = np.meshgrid(*(np.arange(lo[a], hi[a] + 1) for a in (2, 1, 0)), indexing="ij")
        chunks.append(np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1))
    # edge nodes are shared by two faces
    return np.unique(np.concatenate(chunks), axis=0).astype(np.int64)


def index_coords(indices: np.ndarray, dims: Int3, mesh: Optional[Mesh] = None) -> np.ndarray:
    axes = (mesh or UniformMesh()).axis_coords(dims)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    return np.stack([axes[a][idx[:, a]] for a in range(3)], axis=1)


def node_owner_ranks(indices: np.ndarray, partitions: Sequence[Partition]) -> np.ndarray:
    """Rank whose core holds each global node index."""
    dims, rank_grid = layout_dims(partitions), layout_rank_grid(partitions)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    gi = [idx[:, a] // (dims[a] // rank_grid[a]) for a in range(3)]
    return rank_of(gi, rank_grid)


def extract_boundary_coords(part: Partition, partitions: Sequence[Partition],
                            mesh: Optional[Mesh] = None) -> np.ndarray:
    """Physical node coordinates on the interior faces of `part`, shape (M, 3)."""
    return index_coords(boundary_node_indices(part, partitions), layout_dims(partitions), mesh)


# --------------------------------------------------------------------------- #
# Normalization
# --------------------------------------------------------------------------- #
def _extent(part: Partition) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(part.world_bounds[0], dtype=np.float64)
    hi = np.asarray(part.world_bounds[1], dtype=np.float64)
    ext = hi - lo
    return lo, np.where(ext > 0, ext, 1.0)


def normalize_coords(p: np.ndarray, part: Partition, strict: bool = True) -> np.ndarray:
    """Affine map of the partition's core bounds onto [0,1]^3.

    With strict=False points in the ghost margin are mapped without checking
    and may land slightly outside the unit cube.
    """
    pts = np.asarray(p, dtype=np.float64)
    lo, ext = _extent(part)
    if strict:
        hi = np.asarray(part.world_bounds[1])
        tol = _bounds_tolerance(lo, hi)
        if np.any((pts < lo - tol) | (pts > hi + tol)):
            raise DomainError(f"point(s) outside partition {part.rank} bounds {part.world_bounds}")
    return (pts - lo) / ext


def denormalize_coords(u: np.ndarray, part: Partition) -> np.ndarray:
    lo, ext = _extent(part)
    return lo + np.asarray(u, dtype=np.float64) * ext


@dataclass(frozen=True)
class ValueRange:
    vmin: Tuple[float, ...]
    vmax: Tuple[float, ...]

    def __post_init__(self):
        vmin = tuple(float(v) for v in np.atleast_1d(self.vmin))
        vmax = tuple(float(v) for v in np.atleast_1d(self.vmax))
        if len(vmin) != len(vmax):
            raise ShapeMismatchError("vmin and vmax need the same number of channels")
        if any(a > b for a, b in zip(vmin, vmax)):
            raise ConfigurationError(f"value range has vmin > vmax: {vmin} > {vmax}")
        object.__setattr__(self, "vmin", vmin)
        object.__setattr__(self, "vmax", vmax)

    @property
    def channels(self) -> int:
        return len(self.vmin)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.vmin)

    @property
    def span(self) -> np.ndarray:
        return np.array(self.vmax) - np.array(self.vmin)

    def to_dict(self):
        return {"vmin": list(self.vmin), "vmax": list(self.vmax)}


def local_value_range(vol: GridVolume) -> ValueRange:
    flat = vol.values.reshape(-1, vol.channels)
    return ValueRange(vmin=tuple(flat.min(axis=0)), vmax=tuple(flat.max(axis=0)))


def normalize_array(values: np.ndarray, value_range: ValueRange) -> np.ndarray:
    span = value_range.span
    degenerate = span <= 0
    if np.any(degenerate):
        channels = np.flatnonzero(degenerate).tolist()
        logger.warning(f"Constant field on channel(s) {channels}; normalized values set to 0")
        warnings.warn(f"constant field on channel(s) {channels}", ConstantFieldWarning, stacklevel=3)
    out = (np.asarray(values, dtype=np.float64) - value_range.lo) / np.where(degenerate, 1.0, span)
    if np.any(degenerate):
        out[..., degenerate] = 0.0
    return out


def normalize_values(vol: GridVolume, value_range: ValueRange) -> GridVolume:
    if value_range.channels != vol.channels:
        raise ShapeMismatchError(
            f"value range has {value_range.channels} channels, volume has {vol.channels}")
    return vol.with_values(normalize_array(vol.values, value_range))


def denormalize_values(values: Union[GridVolume, np.ndarray],
                       value_range: ValueRange) -> Union[GridVolume, np.ndarray]:
    if isinstance(values, GridVolume):
        return values.with_values(denormalize_values(values.values, value_range))
    return value_range.lo + np.asarray(values, dtype=np.float64) * value_range.span


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #
def psnr(pred: Union[GridVolume, np.ndarray], ref: Union[GridVolume, np.ndarray]) -> float:
    """PSNR with peak 1.0 on normalized values, capped at 200 dB."""
    if isinstance(pred, GridVolume) and isinstance(ref, GridVolume):
        if pred.dims != ref.dims or pred.channels != ref.channels:
            raise ShapeMismatchError(
                f"psnr needs matching volumes: {pred.dims}x{pred.channels} vs {ref.dims}x{ref.channels}")
    a = np.asarray(pred.values if isinstance(pred, GridVolume) else pred, dtype=np.float64)
    b = np.asarray(ref.values if isinstance(ref, GridVolume) else ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))
