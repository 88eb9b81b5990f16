"""
Distributed neural representation.

One INR per partition, trained independently by in-process rank workers
between exactly two collective phases: a value-range all-reduce before
training and a metadata gather after it. Each worker only sees its own
ghost-extended brick; with a zero ghost width the face nodes a rank cannot
see are sent by their owners before training starts. Queries are routed to
the partition whose core owns the coordinate; points on shared faces belong
to the lower rank.
"""

import asyncio
import logging
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DistributedTrainingError, DomainError, ShapeMismatchError
from .inr import BoundarySamples, EncodingConfig, InrModel, MlpConfig, TrainConfig, TrainReport, train
from .volume import (
    Face, GridVolume, Mesh, Partition, ValueRange, boundary_node_indices, decompose_domain, denormalize_coords,
    denormalize_values, index_coords, layout_dims, layout_rank_grid, list_shared_faces, local_value_range,
    node_owner_ranks, normalize_array, normalize_coords, normalize_values, psnr, rank_of, sample_trilinear,
)

logger = logging.getLogger(__name__)

VALUE_RANGE_PHASE = "value-range-allreduce"
METADATA_PHASE = "metadata-gather"
FACE_EXCHANGE_PHASE = "face-exchange"
TRAINING_PHASE = "training"


# --------------------------------------------------------------------------- #
# In-process communication
# --------------------------------------------------------------------------- #
class Endpoint:
    def __init__(self, rank: int, comm: "Communicator"):
        self.rank = rank
        self._comm = comm

    def send(self, dst: int, payload: np.ndarray):
        self._comm._deliver(self.rank, dst, np.asarray(payload))

    def recv(self, src: int) -> np.ndarray:
        return self._comm._collect(src, self.rank)


class Communicator:
    """Counts every collective and point-to-point message among `size` ranks."""

    def __init__(self, size: int):
        if size < 1:
            raise ConfigurationError(f"communicator needs >= 1 rank, got {size}")
        self.size = size
        self.endpoints = [Endpoint(r, self) for r in range(size)]
        self.collective_phases: List[str] = []
        self.collective_messages = 0
        self.p2p_messages = 0
        self.p2p_bytes = 0
        self.phase: Optional[str] = None
        self.messages_by_phase: Dict[str, int] = {}
        self._mailboxes: Dict[Tuple[int, int], Deque[np.ndarray]] = {}

    def _deliver(self, src: int, dst: int, payload: np.ndarray):
        if not 0 <= dst < self.size:
            raise ConfigurationError(f"rank {src} sent to unknown rank {dst}")
        self._mailboxes.setdefault((src, dst), deque()).append(payload)
        self.p2p_messages += 1
        self.p2p_bytes += payload.nbytes
        key = self.phase or "idle"
        self.messages_by_phase[key] = self.messages_by_phase.get(key, 0) + 1
        logger.debug(f"p2p {src}->{dst} ({payload.nbytes} bytes) during {key}")

    def _collect(self, src: int, dst: int) -> np.ndarray:
        box = self._mailboxes.get((src, dst))
        if not box:
            raise DistributedTrainingError(f"rank {dst} expected a message from rank {src}", rank=dst)
        return box.popleft()

    def allreduce(self, phase: str, contributions: Sequence[Any], reducer: Callable[[Sequence[Any]], Any]) -> List[Any]:
        """Every rank contributes once and every rank receives the reduced value."""
        if len(contributions) != self.size:
            raise ConfigurationError(f"{phase}: expected {self.size} contributions, got {len(contributions)}")
        self.collective_phases.append(phase)
        self.collective_messages += self.size
        result = reducer(contributions)
        logger.info(f"Collective '{phase}' completed over {self.size} rank(s)")
        return [result] * self.size

    def gather(self, phase: str, contributions: Sequence[Any]) -> List[Any]:
        if len(contributions) != self.size:
            raise ConfigurationError(f"{phase}: expected {self.size} contributions, got {len(contributions)}")
        self.collective_phases.append(phase)
        self.collective_messages += self.size
        logger.info(f"Collective '{phase}' completed over {self.size} rank(s)")
        return list(contributions)

    def stats(self) -> Dict[str, Any]:
        return {
            "collective_phases": list(self.collective_phases),
            "collective_messages": self.collective_messages,
            "p2p_messages": self.p2p_messages,
            "p2p_bytes": self.p2p_bytes,
            "messages_by_phase": dict(self.messages_by_phase),
        }


def reduce_value_range(ranges: Sequence[ValueRange]) -> ValueRange:
    if not ranges:
        raise ConfigurationError("value range reduction needs at least one rank")
    channels = {r.channels for r in ranges}
    if len(channels) != 1:
        raise ShapeMismatchError(f"ranks disagree on channel count: {sorted(channels)}")
    vmin = np.min([r.vmin for r in ranges], axis=0)
    vmax = np.max([r.vmax for r in ranges], axis=0)
    return ValueRange(vmin=tuple(vmin), vmax=tuple(vmax))


# --------------------------------------------------------------------------- #
# Rank worker
# --------------------------------------------------------------------------- #
class RankWorker:
    """Holds one partition's ghost-extended data and trains its INR.

    Face nodes outside the ghost box (zero ghost width) are filled in by the
    ranks that own them during the face exchange.
    """

    def __init__(self, partition: Partition, partitions: Sequence[Partition], ghost: GridVolume,
                 mesh: Mesh, endpoint: Optional[Endpoint] = None):
        if ghost.dims != partition.ghost_dims:
            raise ShapeMismatchError(
                f"rank {partition.rank}: ghost data {ghost.dims} does not match ghost box {partition.ghost_dims}")
        self.partition = partition
        self.rank = partition.rank
        self.endpoint = endpoint
        self.ghost = ghost
        glo = partition.ghost_box[0]
        lo, hi = partition.core_box
        self._core_box = (tuple(lo[a] - glo[a] for a in range(3)), tuple(hi[a] - glo[a] for a in range(3)))
        self.core_coords = ghost.node_coords(self._core_box)

        self.boundary_indices = boundary_node_indices(partition, partitions)
        self.boundary_coords = index_coords(self.boundary_indices, layout_dims(partitions), mesh)
        self._boundary_values = np.full((len(self.boundary_indices), ghost.channels), np.nan)
        local = self.holds(self.boundary_indices)
        if np.any(local):
            self._boundary_values[local] = self.node_values(self.boundary_indices[local])
        owners = node_owner_ranks(self.boundary_indices, partitions)
        self.halo_sources: Dict[int, np.ndarray] = {
            int(r): np.flatnonzero((owners == r) & ~local) for r in np.unique(owners[~local])}

    def holds(self, indices: np.ndarray) -> np.ndarray:
        glo, ghi = self.partition.ghost_box
        idx = np.asarray(indices).reshape(-1, 3)
        return np.all((idx >= glo) & (idx <= ghi), axis=1)

    def node_values(self, indices: np.ndarray) -> np.ndarray:
        """Raw values at global node indices inside this rank's ghost box."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if not np.all(self.holds(idx)):
            raise DomainError(f"rank {self.rank} does not hold all requested nodes")
        rel = idx - np.asarray(self.partition.ghost_box[0])
        return np.asarray(self.ghost.values[rel[:, 2], rel[:, 1], rel[:, 0]], dtype=np.float64)

    def halo_requests(self) -> Dict[int, np.ndarray]:
        return {owner: self.boundary_indices[pos] for owner, pos in self.halo_sources.items()}

    def receive_halo(self, owner: int, values: np.ndarray):
        pos = self.halo_sources[owner]
        self._boundary_values[pos] = np.asarray(values, dtype=np.float64).reshape(len(pos), -1)

    def local_range(self) -> ValueRange:
        return local_value_range(self.ghost)

    def make_sampler(self, normalized: GridVolume) -> Callable[[np.ndarray], np.ndarray]:
        """Normalized coords -> normalized values, read from the ghost-extended data."""
        glo, ghi = normalized.bounds

        def sampler(u: np.ndarray) -> np.ndarray:
            p = np.clip(denormalize_coords(u, self.partition), glo, ghi)
            return sample_trilinear(normalized, p)

        return sampler

    def sample_bounds(self):
        glo, ghi = self.ghost.bounds
        return (normalize_coords(glo, self.partition, strict=False),
                normalize_coords(ghi, self.partition, strict=False))

    def boundary_samples(self, value_range: ValueRange) -> BoundarySamples:
        if len(self.boundary_indices) == 0:
            return BoundarySamples.empty(self.ghost.channels)
        if np.isnan(self._boundary_values).any():
            raise DistributedTrainingError(
                f"rank {self.rank} is missing face values from rank(s) {sorted(self.halo_sources)}", rank=self.rank)
        return BoundarySamples(coords=normalize_coords(self.boundary_coords, self.partition),
                               values=normalize_array(self._boundary_values, value_range))

    def core_psnr(self, model: InrModel, normalized: GridVolume) -> float:
        ref = normalized.subvolume(self._core_box).values.reshape(-1, normalized.channels)
        return psnr(model(normalize_coords(self.core_coords, self.partition)), ref)

    def train(self, value_range: ValueRange, cfg: TrainConfig, encoding: EncodingConfig,
              mlp: MlpConfig):
        normalized = normalize_values(self.ghost, value_range)
        rank_cfg = replace(cfg, seed=cfg.seed + self.rank)
        return train(
            self.make_sampler(normalized), self.boundary_samples(value_range), rank_cfg,
            encoding=encoding, mlp=replace(mlp, output_dim=self.ghost.channels),
            sample_bounds=self.sample_bounds(),
            final_eval=lambda model: self.core_psnr(model, normalized), rank=self.rank)


def exchange_face_nodes(workers: Sequence[RankWorker], comm: Communicator):
    """Owners send the face nodes their neighbours cannot see; a no-op when ghosts cover every face."""
    by_rank = {w.rank: w for w in workers}
    comm.phase = FACE_EXCHANGE_PHASE
    try:
        for worker in workers:
            for owner, indices in worker.halo_requests().items():
                by_rank[owner].endpoint.send(worker.rank, by_rank[owner].node_values(indices))
        for worker in workers:
            for owner in worker.halo_sources:
                worker.receive_halo(owner, worker.endpoint.recv(owner))
    finally:
        comm.phase = None


# --------------------------------------------------------------------------- #
# DnrModel
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class DnrModel:
    partitions: List[Partition]
    models: List[InrModel]
    value_range: ValueRange
    mesh: Mesh
    rank_psnr: List[float]
    rank_steps: List[int]
    target_psnr: float
    reports: List[Optional[TrainReport]] = field(default_factory=list)
    comm_stats: Dict[str, Any] = field(default_factory=dict)
    train_config: Optional[TrainConfig] = None

    def __post_init__(self):
        self.partitions = sorted(self.partitions, key=lambda p: p.rank)
        if len(self.models) != len(self.partitions):
            raise ConfigurationError(
                f"{len(self.models)} models for {len(self.partitions)} partitions")
        for model in self.models:
            if not model.frozen:
                model.freeze()
        self._axes = self.mesh.axis_coords(self.dims)
        brick = [self.dims[a] // self.rank_grid[a] for a in range(3)]
        self._splits = [self._axes[a][[k * brick[a] for k in range(1, self.rank_grid[a])]]
                        for a in range(3)]

    @property
    def dims(self):
        return layout_dims(self.partitions)

    @property
    def rank_grid(self):
        return layout_rank_grid(self.partitions)

    @property
    def channels(self) -> int:
        return self.models[0].mlp.output_dim

    @property
    def nbytes(self) -> int:
        return int(sum(m.nbytes for m in self.models))

    @property
    def bounds(self):
        return (np.array([ax[0] for ax in self._axes]), np.array([ax[-1] for ax in self._axes]))

    @property
    def achieved_psnr(self) -> float:
        return float(min(self.rank_psnr))

    @property
    def budget_exhausted(self) -> bool:
        return any(p < self.target_psnr for p in self.rank_psnr)

    def faces(self) -> List[Face]:
        return list_shared_faces(self.partitions)

    def owner_ranks(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo, hi = self.bounds
        tol = 1e-12 * np.maximum(1.0, np.abs(hi - lo))
        outside = np.any((pts < lo - tol) | (pts > hi + tol), axis=1)
        if np.any(outside):
            bad = pts[np.argmax(outside)]
            raise DomainError(f"point {bad.tolist()} outside DNR bounds {lo.tolist()}..{hi.tolist()}")
        gi = [np.searchsorted(self._splits[a], pts[:, a], side="left") for a in range(3)]
        return rank_of(gi, self.rank_grid)


def query(dnr: DnrModel, p: np.ndarray) -> np.ndarray:
    """Denormalized field value(s) at global physical point(s): (D,) or (N, D)."""
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise ShapeMismatchError(f"points must have 3 components, got {pts.shape}")
    owners = dnr.owner_ranks(pts)
    out = np.empty((len(pts), dnr.channels), dtype=np.float64)
    for rank in np.unique(owners):
        sel = owners == rank
        part = dnr.partitions[rank]
        u = normalize_coords(pts[sel], part, strict=False)
        out[sel] = denormalize_values(dnr.models[rank](u), dnr.value_range)
    return out[0] if single else out


def decode_to_grid(dnr: DnrModel, part: Union[Partition, int]) -> GridVolume:
    if isinstance(part, int):
        part = dnr.partitions[part]
    if part not in dnr.partitions:
        raise ConfigurationError(f"partition {part.rank} is not part of this DNR")
    lo, hi = part.core_box
    axes = dnr._axes
    xs, ys, zs = (axes[a][lo[a]:hi[a] + 1] for a in range(3))
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    values = query(dnr, coords)
    return GridVolume(dims=part.core_dims, values=values.reshape(-1), mesh=dnr.mesh.sub_mesh(lo, hi))


def decode_volume(dnr: DnrModel) -> GridVolume:
    nx, ny, nz = dnr.dims
    out = np.empty((nz, ny, nx, dnr.channels), dtype=np.float64)
    for part in dnr.partitions:
        lo, hi = part.core_box
        out[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] = decode_to_grid(dnr, part).values
    return GridVolume(dims=dnr.dims, values=out, mesh=dnr.mesh)


def volume_psnr(dnr: DnrModel, ground_truth: GridVolume) -> float:
    decoded = normalize_array(decode_volume(dnr).values, dnr.value_range)
    return psnr(decoded, normalize_array(ground_truth.values, dnr.value_range))


def _resolve_face(dnr: DnrModel, face: Union[Face, int]) -> Face:
    faces = dnr.faces()
    if isinstance(face, int):
        if not 0 <= face < len(faces):
            raise ConfigurationError(f"face index {face} out of range ({len(faces)} interior faces)")
        return faces[face]
    if face not in faces:
        raise ConfigurationError(f"{face} is not an interior face of this decomposition")
    return face


def _face_predictions(dnr: DnrModel, face: Face):
    lo, hi = face.lattice
    xs, ys, zs = (dnr._axes[a][lo[a]:hi[a] + 1] for a in range(3))
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    preds = []
    for rank in (face.lower_rank, face.upper_rank):
        part = dnr.partitions[rank]
        preds.append(dnr.models[rank](normalize_coords(coords, part, strict=False)))
    return coords, preds[0], preds[1]


def boundary_slice_differences(dnr: DnrModel, face: Union[Face, int]) -> np.ndarray:
    """Lower-rank minus upper-rank normalized predictions on a shared face lattice."""
    _, lower, upper = _face_predictions(dnr, _resolve_face(dnr, face))
    return np.asarray(lower, dtype=np.float64) - upper


def boundary_slice_psnr(dnr: DnrModel, ground_truth: GridVolume, face: Union[Face, int]) -> float:
    face = _resolve_face(dnr, face)
    _, lower, upper = _face_predictions(dnr, face)
    lo, hi = face.lattice
    truth = ground_truth.values[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
    truth = normalize_array(truth.reshape(-1, ground_truth.channels), dnr.value_range)
    return 0.5 * (psnr(lower, truth) + psnr(upper, truth))


# --------------------------------------------------------------------------- #
# Construction
# --------------------------------------------------------------------------- #
def default_worker_count(ranks: int) -> int:
    env = os.getenv("NEURALCACHE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(ranks, os.cpu_count() or 1))


async def train_distributed_async(volume: GridVolume, rank_grid: Sequence[int], cfg: TrainConfig,
                                  encoding: Optional[EncodingConfig] = None,
                                  mlp: Optional[MlpConfig] = None, ghost_width: int = 2,
                                  max_workers: Optional[int] = None) -> DnrModel:
    encoding = encoding or EncodingConfig()
    mlp = mlp or MlpConfig(output_dim=volume.channels)
    partitions = decompose_domain(volume.dims, rank_grid, ghost_width, volume.mesh)
    comm = Communicator(len(partitions))
    workers = [RankWorker(p, partitions, volume.subvolume(p.ghost_box), volume.mesh, comm.endpoints[p.rank])
               for p in partitions]

    ranges = comm.allreduce(VALUE_RANGE_PHASE, [w.local_range() for w in workers], reduce_value_range)
    value_range = ranges[0]
    exchange_face_nodes(workers, comm)

    comm.phase = TRAINING_PHASE
    loop = asyncio.get_running_loop()
    workers_n = max_workers or default_worker_count(len(workers))
    logger.info(f"Training {len(workers)} rank(s) on {workers_n} thread(s), layout {tuple(rank_grid)}")
    with ThreadPoolExecutor(max_workers=workers_n) as pool:
        futures = [loop.run_in_executor(pool, w.train, value_range, cfg, encoding, mlp) for w in workers]
        results = await asyncio.gather(*futures, return_exceptions=True)
    comm.phase = None

    for worker, result in zip(workers, results):
        if isinstance(result, BaseException):
            logger.error(f"Rank {worker.rank} aborted: {result}")
            raise DistributedTrainingError(f"rank {worker.rank} aborted: {result}", rank=worker.rank,
                                           step=getattr(result, "step", None)) from result

    models = [r[0] for r in results]
    reports = [r[1] for r in results]
    metadata = comm.gather(METADATA_PHASE, [
        {"rank": w.rank, "psnr": rep.achieved_psnr, "steps": rep.steps_taken}
        for w, rep in zip(workers, reports)])
    return DnrModel(
        partitions=partitions, models=models, value_range=value_range, mesh=volume.mesh,
        rank_psnr=[m["psnr"] for m in metadata], rank_steps=[m["steps"] for m in metadata],
        target_psnr=cfg.target_psnr, reports=reports, comm_stats=comm.stats(), train_config=cfg)


def train_distributed(volume: GridVolume, rank_grid: Sequence[int], cfg: TrainConfig,
                      encoding: Optional[EncodingConfig] = None, mlp: Optional[MlpConfig] = None,
                      ghost_width: int = 2, max_workers: Optional[int] = None) -> DnrModel:
    return asyncio.run(train_distributed_async(volume, rank_grid, cfg, encoding, mlp,
                                               ghost_width, max_workers))
