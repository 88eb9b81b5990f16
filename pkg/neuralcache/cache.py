"""
Reactive temporal caching engine.

A workflow is a DAG of named nodes (field, encode, raw, window, reverse,
negate) plus actions (render, pathline, decode) registered on triggers.
Every simulation step the engine advances the driver, lets each window
reachable from a trigger decide whether to admit the step, evaluates every
trigger condition and runs the actions of the triggers that fire. Nodes are
pulled on demand and memoized per step, so an encode node nobody consumes
never trains.
"""

import asyncio
import logging
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Awaitable, Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, Field

from .dnr import DnrModel, decode_volume, query, train_distributed_async
from .drivers import SyntheticDriver
from .errors import ConfigurationError, DistributedTrainingError, FieldTypeError, TrainingError
from .inr import Profile, desk_profile
from .volume import GridVolume, sample_trilinear

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------- #
# Cache elements
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class NeuralVolume:
    dnr: DnrModel
    timestep: int
    time: float
    achieved_psnr: float
    nbytes: int
    budget_exhausted: bool = False
    compress_time_s: float = 0.0

    @property
    def channels(self) -> int:
        return self.dnr.channels

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.dnr.bounds

    def decode(self) -> GridVolume:
        return decode_volume(self.dnr)

    def query(self, p: np.ndarray) -> np.ndarray:
        return query(self.dnr, p)


@dataclass(frozen=True, eq=False)
class RawVolume:
    """Uncompressed grid held behind the same interface as NeuralVolume."""
    volume: GridVolume
    timestep: int
    time: float

    @property
    def nbytes(self) -> int:
        return self.volume.nbytes

    @property
    def channels(self) -> int:
        return self.volume.channels

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.volume.bounds

    def decode(self) -> GridVolume:
        return self.volume

    def query(self, p: np.ndarray) -> np.ndarray:
        return sample_trilinear(self.volume, p)


@dataclass(frozen=True)
class SignedVolume:
    """A cache element whose values are multiplied by `sign` on every access."""
    base: Any
    sign: float = -1.0

    @property
    def timestep(self) -> int:
        return self.base.timestep

    @property
    def time(self) -> float:
        return self.base.time

    @property
    def nbytes(self) -> int:
        return self.base.nbytes

    @property
    def channels(self) -> int:
        return self.base.channels

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.base.bounds

    def decode(self) -> GridVolume:
        grid = self.base.decode()
        return grid.with_values(self.sign * np.asarray(grid.values, dtype=np.float64))

    def query(self, p: np.ndarray) -> np.ndarray:
        return self.sign * self.base.query(p)


CacheElement = Union[NeuralVolume, RawVolume, SignedVolume]


# --------------------------------------------------------------------------- #
# Window and views
# --------------------------------------------------------------------------- #
AdmissionFilter = Callable[[int, float], bool]


def every(n: int) -> AdmissionFilter:
    if n < 1:
        raise ConfigurationError(f"every() needs n >= 1, got {n}")
    return lambda step, t: step % n == 0


class Window:
    """Bounded FIFO of cache elements, oldest first."""

    def __init__(self, size: int, admit_filter: Optional[AdmissionFilter] = None):
        if size < 1:
            raise ConfigurationError(f"window size must be >= 1, got {size}")
        self.size = size
        self.admit_filter = admit_filter
        self._items: deque = deque()
        self.channels: Optional[int] = None

    def accepts(self, step: int, t: float) -> bool:
        return self.admit_filter is None or self.admit_filter(step, t)

    def admit(self, item: CacheElement) -> Optional[CacheElement]:
        if self._items and item.timestep <= self._items[-1].timestep:
            raise ConfigurationError(
                f"window timesteps must increase: {item.timestep} after {self._items[-1].timestep}")
        evicted = self._items.popleft() if len(self._items) == self.size else None
        self._items.append(item)
        self.channels = item.channels
        return evicted

    @property
    def nbytes(self) -> int:
        return int(sum(item.nbytes for item in self._items))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[CacheElement]:
        return iter(self._items)

    def __getitem__(self, i: int) -> CacheElement:
        return self._items[i]

    def view(self) -> "WindowView":
        return WindowView(tuple(self._items), channels=self.channels)


@dataclass(frozen=True)
class WindowView:
    """Index-remapped, sign-flagged view over a snapshot of window contents."""
    items: Tuple[CacheElement, ...]
    reversed: bool = False
    negated: bool = False
    channels: Optional[int] = None

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> CacheElement:
        n = len(self.items)
        if not -n <= i < n:
            raise IndexError(f"window index {i} out of range for length {n}")
        i %= n
        item = self.items[n - i - 1] if self.reversed else self.items[i]
        return SignedVolume(item) if self.negated else item

    def __iter__(self) -> Iterator[CacheElement]:
        return (self[i] for i in range(len(self)))

    @property
    def time_sign(self) -> int:
        return -1 if self.reversed else 1

    @property
    def nbytes(self) -> int:
        return int(sum(item.nbytes for item in self.items))


WindowLike = Union[Window, WindowView]


def _as_view(w: WindowLike) -> WindowView:
    return w.view() if isinstance(w, Window) else w


def reverse(w: WindowLike) -> WindowView:
    """Element i of the result is element N-i-1 of `w`; nothing is copied."""
    v = _as_view(w)
    return WindowView(v.items, reversed=not v.reversed, negated=v.negated, channels=v.channels)


def negate(w: WindowLike) -> WindowView:
    """Every value read through the result is multiplied by -1 (vector fields only)."""
    v = _as_view(w)
    channels = v.channels if v.channels is not None else (v.items[0].channels if v.items else None)
    if channels is not None and channels != 3:
        raise FieldTypeError(f"negate needs a vector (3-channel) window, got {channels} channel(s)")
    return WindowView(v.items, reversed=v.reversed, negated=not v.negated, channels=channels)


# --------------------------------------------------------------------------- #
# Conditions
# --------------------------------------------------------------------------- #
@dataclass
class StepContext:
    step: int
    time: float
    volume: Optional[GridVolume] = None
    memo: Dict[str, Any] = field(default_factory=dict)
    compress_time_s: float = 0.0
    vis_bytes: int = 0
    events: List[str] = field(default_factory=list)


Predicate = Callable[[StepContext], bool]


def time_gt(threshold: float) -> Predicate:
    return lambda ctx: ctx.time > threshold


def step_ge(step: int) -> Predicate:
    return lambda ctx: ctx.step >= step


class Condition:
    def __init__(self, predicate: Predicate, once: bool = False, name: str = "condition",
                 can_fire: bool = True):
        self.predicate = predicate
        self.once = once
        self.name = name
        # False only for conditions that can never hold; their actions are not pulled
        self.can_fire = can_fire
        self.fired_steps: List[int] = []

    def reset(self):
        self.fired_steps = []

    def evaluate(self, ctx: StepContext) -> bool:
        if self.once and self.fired_steps:
            return False
        if self.predicate(ctx):
            self.fired_steps.append(ctx.step)
            return True
        return False


def first(pred: Predicate) -> Condition:
    """True only at the earliest evaluated step where `pred` holds."""
    return Condition(pred, once=True, name="first")


def when(pred: Predicate) -> Condition:
    """True at every evaluated step where `pred` holds."""
    return Condition(pred, name="when")


def always() -> Condition:
    return Condition(lambda ctx: True, name="always")


def never() -> Condition:
    return Condition(lambda ctx: False, name="never", can_fire=False)


# --------------------------------------------------------------------------- #
# Nodes
# --------------------------------------------------------------------------- #
class NodeStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class NodeSpec:
    node_id: str
    op: str
    inputs: List[str] = field(default_factory=list)
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class NodeResult:
    node_id: str
    status: NodeStatus
    value: Any = None
    error: Optional[Exception] = None
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    execution_time_seconds: float = 0.0


Pull = Callable[[str], Awaitable[Any]]


@dataclass
class EncodeSettings:
    profile: Profile = field(default_factory=desk_profile)
    rank_grid: Tuple[int, int, int] = (1, 1, 1)
    ghost_width: int = 2
    max_workers: Optional[int] = None
    train_overrides: Dict[str, Any] = field(default_factory=dict)


class Node(ABC):
    arity = 1
    is_action = False
    is_stateful = False

    def __init__(self, spec: NodeSpec):
        self.spec = spec
        self.evaluations = 0
        self.results: List[NodeResult] = []

    @property
    def node_id(self) -> str:
        return self.spec.node_id

    def reset(self):
        self.evaluations = 0
        self.results = []

    async def evaluate(self, ctx: StepContext, pull: Pull) -> Any:
        inputs = [await pull(i) for i in self.spec.inputs]
        self.evaluations += 1
        return await self.compute(inputs, ctx)

    @abstractmethod
    async def compute(self, inputs: List[Any], ctx: StepContext) -> Any:
        pass

    async def run_with_monitoring(self, ctx: StepContext, pull: Pull) -> NodeResult:
        start_time = datetime.utcnow()
        started = time.perf_counter()
        try:
            value = await self.evaluate(ctx, pull)
            result = NodeResult(node_id=self.node_id, status=NodeStatus.COMPLETED, value=value)
            logger.info(f"[step {ctx.step}] Action {self.node_id} completed in "
                        f"{time.perf_counter() - started:.3f}s")
        except TrainingError:
            raise
        except Exception as e:
            logger.warning(f"[step {ctx.step}] Action {self.node_id} failed: {e}")
            result = NodeResult(node_id=self.node_id, status=NodeStatus.FAILED, error=e)
        result.start_time = start_time
        result.end_time = datetime.utcnow()
        result.execution_time_seconds = time.perf_counter() - started
        self.results.append(result)
        return result


class FieldNode(Node):
    arity = 0

    async def compute(self, inputs, ctx):
        if ctx.volume is None:
            raise ConfigurationError(f"field '{self.node_id}' read after it was released")
        return ctx.volume


class EncodeNode(Node):
    def __init__(self, spec: NodeSpec, settings: EncodeSettings):
        super().__init__(spec)
        self.settings = settings
        self.target_psnr = float(spec.params.get("target_psnr", 45.0))
        self.rank_grid = tuple(spec.params.get("ranks", settings.rank_grid))
        self.ghost_width = int(spec.params.get("ghost", settings.ghost_width))
        self.train_params = {**settings.train_overrides,
                             **{k: spec.params[k] for k in ("lam", "max_steps", "seed", "psnr_check_interval",
                                                            "check_resolution", "batch_uniform",
                                                            "batch_boundary") if k in spec.params}}

    async def compute(self, inputs, ctx):
        return await encode_volume(inputs[0], self.target_psnr, self.settings, ctx.step, ctx.time,
                                   rank_grid=self.rank_grid, ghost_width=self.ghost_width,
                                   train_params=self.train_params, ctx=ctx)


class RawNode(Node):
    async def compute(self, inputs, ctx):
        volume = inputs[0]
        copy = GridVolume(dims=volume.dims, values=np.array(volume.values, dtype=np.float32), mesh=volume.mesh)
        return RawVolume(volume=copy, timestep=ctx.step, time=ctx.time)


class WindowNode(Node):
    is_stateful = True

    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        size = int(spec.params.get("size", 0))
        stride = spec.params.get("every")
        self.window = Window(size, every(int(stride)) if stride else None)
        self.admitted = 0

    def reset(self):
        super().reset()
        self.window = Window(self.window.size, self.window.admit_filter)
        self.admitted = 0

    async def evaluate(self, ctx, pull):
        # the filter runs before the input is pulled so skipped steps never encode
        if self.window.accepts(ctx.step, ctx.time):
            item = await pull(self.spec.inputs[0])
            self.evaluations += 1
            evicted = self.window.admit(item)
            self.admitted += 1
            if evicted is not None:
                logger.debug(f"[step {ctx.step}] window {self.node_id} evicted step {evicted.timestep}")
        return self.window.view()

    async def compute(self, inputs, ctx):
        return self.window.view()


class ReverseNode(Node):
    async def compute(self, inputs, ctx):
        return reverse(inputs[0])


class NegateNode(Node):
    async def compute(self, inputs, ctx):
        return negate(inputs[0])


def _as_frames(value) -> List[CacheElement]:
    if isinstance(value, (Window, WindowView)):
        return list(value)
    return [value]


class RenderNode(Node):
    is_action = True

    def __init__(self, spec: NodeSpec, storage=None):
        super().__init__(spec)
        from .vis import make_camera, make_transfer_function

        params = spec.params
        for key in ("camera", "transfer_function"):
            if not isinstance(params.get(key), dict):
                raise ConfigurationError(f"render node '{spec.node_id}' needs a '{key}' mapping")
        self.camera = make_camera(params["camera"])
        self.tf = make_transfer_function(params["transfer_function"])
        self.step_size = float(params.get("step_size", 0.5))
        self.base_step = float(params.get("base_step", 1.0))
        self.macrocells = params.get("macrocells")
        self.fmt = params.get("format", "png")
        self.storage = storage

    async def compute(self, inputs, ctx):
        from .vis import render_dnr, render_grid

        images, peak = [], 0
        for element in _as_frames(inputs[0]):
            if isinstance(element, NeuralVolume):
                image = render_dnr(element.dnr, self.camera, self.tf, self.step_size, self.base_step,
                                   macrocell_resolution=self.macrocells)
            else:
                image = render_grid(element.decode(), self.camera, self.tf, self.step_size,
                                    base_step=self.base_step, macrocell_resolution=self.macrocells)
            peak = max(peak, image.nbytes + image.stats["fragment_bytes"] + image.stats["macrocell_bytes"])
            if self.storage is not None:
                from .storage import save_image

                save_image(image.rgb, self.storage.image_path(f"{self.node_id}_t{element.timestep:05d}",
                                                              ctx.step, self.fmt))
            images.append(image)
        ctx.vis_bytes += peak
        return images


class PathlineNode(Node):
    is_action = True

    def __init__(self, spec: NodeSpec, storage=None):
        super().__init__(spec)
        params = spec.params
        self.dt = float(params.get("dt", 0.01))
        self.max_steps = int(params.get("max_steps", 10000))
        self.seeds = params.get("seeds", {"count": 16})
        self.round_trip = bool(params.get("round_trip", False))
        self.storage = storage

    def seed_points(self, frame) -> np.ndarray:
        from .vis import random_seeds

        if "points" in self.seeds:
            return np.asarray(self.seeds["points"], dtype=np.float64)
        lo, hi = frame.bounds
        box = self.seeds.get("bbox", [lo.tolist(), hi.tolist()])
        return random_seeds(int(self.seeds.get("count", 16)), box[0], box[1], int(self.seeds.get("seed", 0)))

    async def compute(self, inputs, ctx):
        from .vis import DecodedGridCache, trace_pathlines, trace_round_trip

        window = inputs[0]
        if len(window) == 0:
            raise ConfigurationError(f"pathline action '{self.node_id}' got an empty window")
        seeds = self.seed_points(window[0])
        if self.round_trip:
            result = trace_round_trip(window, seeds, self.dt, self.max_steps)
            lines = result.backward + result.forward
            extra = {"round_trip_errors": result.errors, "dropped": result.dropped}
            cache_bytes = result.peak_cache_bytes
        else:
            cache = DecodedGridCache(2)
            lines = trace_pathlines(window, seeds, self.dt, self.max_steps, cache=cache)
            extra = {}
            cache_bytes = cache.peak_bytes
        ctx.vis_bytes += cache_bytes + int(sum(line.positions.nbytes * 2 for line in lines))
        if self.storage is not None:
            from .storage import save_pathlines

            save_pathlines(lines, self.storage.pathline_path(self.node_id, ctx.step), extra)
        return lines


class DecodeNode(Node):
    is_action = True

    def __init__(self, spec: NodeSpec, storage=None):
        super().__init__(spec)
        self.storage = storage

    async def compute(self, inputs, ctx):
        grids = []
        for element in _as_frames(inputs[0]):
            grid = element.decode()
            ctx.vis_bytes += grid.nbytes
            if self.storage is not None:
                from .storage import save_volume

                save_volume(grid, self.storage.volume_path(f"{self.node_id}_t{element.timestep:05d}", ctx.step))
            grids.append(grid)
        return grids


async def encode_volume(volume: GridVolume, target_psnr: float, settings: Optional[EncodeSettings] = None,
                        timestep: int = 0, t: float = 0.0, rank_grid: Optional[Sequence[int]] = None,
                        ghost_width: Optional[int] = None, train_params: Optional[Dict[str, Any]] = None,
                        ctx: Optional[StepContext] = None) -> NeuralVolume:
    """Train a DNR of `volume` to `target_psnr` and wrap it as a frozen NeuralVolume."""
    settings = settings or EncodeSettings()
    profile = settings.profile
    cfg = profile.train_config(target_psnr=target_psnr, **(train_params or settings.train_overrides))
    started = time.perf_counter()
    try:
        dnr = await train_distributed_async(
            volume, rank_grid or settings.rank_grid, cfg, encoding=profile.encoding,
            mlp=profile.mlp(volume.channels),
            ghost_width=settings.ghost_width if ghost_width is None else ghost_width,
            max_workers=settings.max_workers)
    except DistributedTrainingError as e:
        raise DistributedTrainingError(f"timestep {timestep}: {e}", rank=e.rank, step=e.step,
                                       timestep=timestep) from e
    elapsed = time.perf_counter() - started
    if ctx is not None:
        ctx.compress_time_s += elapsed
    nv = NeuralVolume(dnr=dnr, timestep=timestep, time=t, achieved_psnr=dnr.achieved_psnr,
                      nbytes=dnr.nbytes, budget_exhausted=dnr.budget_exhausted, compress_time_s=elapsed)
    logger.info(f"[step {timestep}] encoded {volume.nbytes} bytes into {nv.nbytes} "
                f"({volume.nbytes / nv.nbytes:.1f}x) at {nv.achieved_psnr:.2f} dB in {elapsed:.2f}s")
    return nv


# --------------------------------------------------------------------------- #
# Graph
# --------------------------------------------------------------------------- #
class NodeConfig(BaseModel):
    id: str
    op: str
    inputs: List[str] = Field(default_factory=list)
    params: Dict[str, Any] = Field(default_factory=dict)


class ConditionConfig(BaseModel):
    kind: str = "first"
    time_gt: Optional[float] = None
    step_ge: Optional[int] = None


class TriggerConfig(BaseModel):
    name: Optional[str] = None
    condition: ConditionConfig = Field(default_factory=ConditionConfig)
    actions: List[str]


class WorkflowConfig(BaseModel):
    nodes: List[NodeConfig]
    triggers: List[TriggerConfig] = Field(default_factory=list)


def build_condition(cfg: ConditionConfig) -> Condition:
    if cfg.kind == "always":
        return always()
    if cfg.kind == "never":
        return never()
    if cfg.time_gt is not None:
        pred = time_gt(cfg.time_gt)
    elif cfg.step_ge is not None:
        pred = step_ge(cfg.step_ge)
    else:
        raise ConfigurationError("condition needs time_gt or step_ge")
    if cfg.kind == "first":
        return first(pred)
    if cfg.kind == "when":
        return when(pred)
    raise ConfigurationError(f"unknown condition kind '{cfg.kind}'")


@dataclass
class Trigger:
    name: str
    condition: Condition
    actions: List[str]


class WorkflowGraph:
    def __init__(self, settings: Optional[EncodeSettings] = None, storage=None):
        self.settings = settings or EncodeSettings()
        self.storage = storage
        self.nodes: Dict[str, Node] = {}
        self.triggers: List[Trigger] = []
        self.graph = nx.DiGraph()
        self.reachable: Set[str] = set()
        self._built = False

    # registration -------------------------------------------------------------
    def _instantiate_node(self, spec: NodeSpec) -> Node:
        mapping = {
            "field": FieldNode,
            "encode": lambda s: EncodeNode(s, self.settings),
            "raw": RawNode,
            "window": WindowNode,
            "reverse": ReverseNode,
            "negate": NegateNode,
            "render": lambda s: RenderNode(s, self.storage),
            "pathline": lambda s: PathlineNode(s, self.storage),
            "decode": lambda s: DecodeNode(s, self.storage),
        }
        cls = mapping.get(spec.op)
        if not cls:
            raise ConfigurationError(f"unknown op '{spec.op}' for node '{spec.node_id}'")
        return cls(spec)

    def add_node(self, node_id: str, op: str, inputs: Sequence[str] = (), **params) -> str:
        if node_id in self.nodes:
            raise ConfigurationError(f"duplicate node id '{node_id}'")
        node = self._instantiate_node(NodeSpec(node_id=node_id, op=op, inputs=list(inputs), params=params))
        if len(node.spec.inputs) != node.arity:
            raise ConfigurationError(f"node '{node_id}' ({op}) takes {node.arity} input(s), got {len(inputs)}")
        self.nodes[node_id] = node
        self._built = False
        return node_id

    def field(self, node_id: str = "F") -> str:
        return self.add_node(node_id, "field")

    def encode(self, node_id: str, src: str, target_psnr: float = 45.0, **params) -> str:
        return self.add_node(node_id, "encode", [src], target_psnr=target_psnr, **params)

    def raw(self, node_id: str, src: str) -> str:
        return self.add_node(node_id, "raw", [src])

    def window(self, node_id: str, src: str, size: int, every: Optional[int] = None) -> str:
        return self.add_node(node_id, "window", [src], size=size, every=every)

    def reverse(self, node_id: str, src: str) -> str:
        return self.add_node(node_id, "reverse", [src])

    def negate(self, node_id: str, src: str) -> str:
        return self.add_node(node_id, "negate", [src])

    def trigger(self, actions: Union[str, Sequence[str]], condition: Condition,
                name: Optional[str] = None) -> Trigger:
        actions = [actions] if isinstance(actions, str) else list(actions)
        trig = Trigger(name=name or f"trigger{len(self.triggers)}", condition=condition, actions=actions)
        self.triggers.append(trig)
        self._built = False
        return trig

    @classmethod
    def from_config(cls, cfg: WorkflowConfig, settings: Optional[EncodeSettings] = None,
                    storage=None) -> "WorkflowGraph":
        graph = cls(settings, storage)
        for node in cfg.nodes:
            graph.add_node(node.id, node.op, node.inputs, **node.params)
        for i, trig in enumerate(cfg.triggers):
            graph.trigger(trig.actions, build_condition(trig.condition), name=trig.name or f"trigger{i}")
        return graph.build()

    # validation ---------------------------------------------------------------
    def build(self, field_channels: Optional[int] = None) -> "WorkflowGraph":
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for node in self.nodes.values():
            for src in node.spec.inputs:
                if src not in self.nodes:
                    raise ConfigurationError(f"node '{node.node_id}' reads missing input '{src}'")
                g.add_edge(src, node.node_id)
        if not nx.is_directed_acyclic_graph(g):
            raise ConfigurationError(f"workflow graph has a cycle: {nx.find_cycle(g)}")
        reachable: Set[str] = set()
        for trig in self.triggers:
            for action in trig.actions:
                if action not in self.nodes:
                    raise ConfigurationError(f"trigger '{trig.name}' references missing action '{action}'")
                if not self.nodes[action].is_action:
                    raise ConfigurationError(f"trigger '{trig.name}': '{action}' is not an action node")
                if trig.condition.can_fire:
                    reachable |= nx.ancestors(g, action) | {action}
        if field_channels is not None and field_channels != 3:
            for node in self.nodes.values():
                if isinstance(node, NegateNode):
                    raise FieldTypeError(f"negate node '{node.node_id}' needs a vector field, "
                                         f"field has {field_channels} channel(s)")
        self.graph = g
        self.reachable = reachable
        self._built = True
        logger.info(f"Workflow graph built: {len(self.nodes)} node(s), {len(self.triggers)} trigger(s), "
                    f"{len(reachable)} reachable")
        return self

    def topological_order(self) -> List[str]:
        return list(nx.topological_sort(self.graph))

    def windows(self) -> List[WindowNode]:
        return [n for n in self.nodes.values() if isinstance(n, WindowNode)]

    def evaluation_counts(self) -> Dict[str, int]:
        return {node_id: node.evaluations for node_id, node in self.nodes.items()}


# --------------------------------------------------------------------------- #
# Run
# --------------------------------------------------------------------------- #
@dataclass
class RunReport:
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any]

    def column(self, name: str) -> List[Any]:
        return [row[name] for row in self.rows]


class WorkflowEngine:
    def __init__(self, graph: WorkflowGraph, driver: SyntheticDriver):
        self.graph = graph
        self.driver = driver
        graph.build(field_channels=driver.channels)

    async def _pull(self, node_id: str, ctx: StepContext) -> Any:
        if node_id in ctx.memo:
            return ctx.memo[node_id]
        node = self.graph.nodes[node_id]
        value = await node.evaluate(ctx, lambda i: self._pull(i, ctx))
        ctx.memo[node_id] = value
        return value

    async def run(self, steps: int) -> RunReport:
        if steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {steps}")
        graph = self.graph
        for node in graph.nodes.values():
            node.reset()
        for trig in graph.triggers:
            trig.condition.reset()
        self.driver.reset()
        stateful = [n for n in graph.topological_order()
                    if n in graph.reachable and graph.nodes[n].is_stateful]
        rows: List[Dict[str, Any]] = []
        encoded: List[Tuple[int, int, NeuralVolume]] = []
        trigger_steps: Dict[str, List[int]] = {t.name: [] for t in graph.triggers}
        failures = 0

        for _ in range(steps):
            sim_start = time.perf_counter()
            frame = self.driver.advance()
            sim_time = time.perf_counter() - sim_start
            ctx = StepContext(step=frame.step, time=frame.time, volume=frame.volume)

            vis_start = time.perf_counter()
            for node_id in stateful:
                await self._pull(node_id, ctx)
            for trig in graph.triggers:
                if not trig.condition.evaluate(ctx):
                    continue
                trigger_steps[trig.name].append(ctx.step)
                ctx.events.append(f"trigger:{trig.name}")
                logger.info(f"[step {ctx.step}] trigger '{trig.name}' fired at t={ctx.time}")
                for action_id in trig.actions:
                    node = graph.nodes[action_id]
                    result = await node.run_with_monitoring(ctx, lambda i: self._pull(i, ctx))
                    ctx.memo[action_id] = result.value
                    ctx.events.append(f"{action_id}:{result.status.value}")
                    failures += result.status is NodeStatus.FAILED
            vis_time = time.perf_counter() - vis_start

            for value in ctx.memo.values():
                if isinstance(value, NeuralVolume) and value.timestep == ctx.step:
                    encoded.append((frame.volume.nbytes, value.nbytes, value))
            # the raw field is not retained past its step
            ctx.volume = None
            window_bytes = sum(w.window.nbytes for w in graph.windows() if w.node_id in graph.reachable)
            rows.append({
                "step": ctx.step, "time": ctx.time, "sim_time_s": sim_time, "vis_time_s": vis_time,
                "compress_time_s": ctx.compress_time_s,
                "analysis_time_s": max(vis_time - ctx.compress_time_s, 0.0), "window_bytes": window_bytes,
                "vis_bytes": ctx.vis_bytes, "peak_cache_bytes": window_bytes + ctx.vis_bytes,
                "events": list(ctx.events),
            })

        unique = {id(nv): (raw, packed, nv) for raw, packed, nv in encoded}.values()
        summary = {
            "steps": steps,
            "trigger_steps": trigger_steps,
            "compression_ratio": (float(np.mean([raw / packed for raw, packed, _ in unique])) if unique else None),
            "achieved_psnrs": [nv.achieved_psnr for _, _, nv in unique],
            "budget_exhausted": sum(nv.budget_exhausted for _, _, nv in unique),
            "total_compress_time_s": float(sum(r["compress_time_s"] for r in rows)),
            "peak_cache_bytes": max(r["peak_cache_bytes"] for r in rows),
            "node_evaluations": graph.evaluation_counts(),
            "action_failures": failures,
        }
        logger.info(f"Run finished: {steps} step(s), triggers {trigger_steps}, "
                    f"peak cache {summary['peak_cache_bytes']} bytes")
        return RunReport(rows=rows, summary=summary)


async def run_workflow_async(driver: SyntheticDriver, graph: WorkflowGraph, steps: int) -> RunReport:
    return await WorkflowEngine(graph, driver).run(steps)


def run_workflow(driver: SyntheticDriver, graph: WorkflowGraph, steps: int) -> RunReport:
    return asyncio.run(run_workflow_async(driver, graph, steps))
