"""
Single-partition implicit neural representation.

A multi-resolution hash-grid encoding followed by a small ReLU MLP maps a
normalized coordinate in [0,1]^3 to a normalized field value in R^D. The
forward pass, reverse-mode gradients and the Adam optimizer are written
directly against numpy so that the whole network is inspectable.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ShapeMismatchError, TrainingError
from .volume import psnr

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)

_PRIMES = np.array(HASH_PRIMES, dtype=np.uint64)
# corner c of a cell sits at offset ((c>>0)&1, (c>>1)&1, (c>>2)&1)
_CORNERS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=np.int64)


# --------------------------------------------------------------------------- #
# Configs
# --------------------------------------------------------------------------- #
@dataclass
class EncodingConfig:
    levels: int = 16
    features_per_level: int = 4
    table_size: int = 2 ** 19
    base_resolution: int = 4
    per_level_scale: float = 2.0

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1 or self.base_resolution < 1:
            raise ConfigurationError(
                f"levels, features_per_level and base_resolution must be >= 1: {self}")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigurationError(f"table_size must be a power of two, got {self.table_size}")
        if self.per_level_scale <= 1.0:
            raise ConfigurationError(f"per_level_scale must be > 1, got {self.per_level_scale}")

    @property
    def output_width(self) -> int:
        return self.levels * self.features_per_level

    def level_entries(self, level: int) -> int:
        n = level_resolution(self, level)
        return min(self.table_size, (n + 1) ** 3)

    def is_dense(self, level: int) -> bool:
        n = level_resolution(self, level)
        return (n + 1) ** 3 <= self.table_size


@dataclass
class MlpConfig:
    hidden_layers: int = 4
    neurons: int = 64
    output_dim: int = 1

    def __post_init__(self):
        if self.hidden_layers < 1 or self.neurons < 1 or self.output_dim < 1:
            raise ConfigurationError(f"MLP needs >=1 hidden layer, neuron and output: {self}")


@dataclass
class TrainConfig:
    lam: float = 0.5
    batch_uniform: int = 16384
    batch_boundary: int = 4096
    lr0: float = 1e-2
    decay_rate: float = 0.8
    decay_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    target_psnr: float = 45.0
    max_steps: int = 10000
    psnr_check_interval: int = 50
    check_resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.batch_uniform < 1 or self.batch_boundary < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.psnr_check_interval < 1 or self.decay_steps < 1 or self.check_resolution < 2:
            raise ConfigurationError("psnr_check_interval, decay_steps >= 1 and check_resolution >= 2 required")
        if self.lr0 <= 0 or self.eps <= 0:
            raise ConfigurationError("lr0 and eps must be positive")


def level_resolution(cfg: EncodingConfig, level: int) -> int:
    if not 0 <= level < cfg.levels:
        raise ConfigurationError(f"level {level} out of range [0, {cfg.levels})")
    # the small epsilon keeps exact products such as 4*1.5**2 == 9 from flooring to 8
    return int(math.floor(cfg.base_resolution * cfg.per_level_scale ** level + 1e-9))


# --------------------------------------------------------------------------- #
# Model
# --------------------------------------------------------------------------- #
class InrModel:
    """Hash-grid tables plus MLP weights. Parameter order: tables by level,
    then (weight, bias) layer by layer. Weights are stored (fan_in, fan_out)."""

    def __init__(self, encoding: EncodingConfig, mlp: MlpConfig, seed: int = 0,
                 dtype=np.float32, table_init: float = 1e-4):
        self.encoding = encoding
        self.mlp = mlp
        self.dtype = np.dtype(dtype)
        self.init = {"tables": "uniform", "table_range": float(table_init), "weights": "he-uniform",
                     "biases": "zero", "seed": int(seed)}
        rng = np.random.default_rng(seed)
        F = encoding.features_per_level
        self.tables = [
            rng.uniform(-table_init, table_init, size=(encoding.level_entries(l), F)).astype(self.dtype)
            for l in range(encoding.levels)
        ]
        widths = [encoding.output_width] + [mlp.neurons] * mlp.hidden_layers + [mlp.output_dim]
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        self.frozen = False

    @property
    def parameters(self) -> List[np.ndarray]:
        params = list(self.tables)
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def parameter_names(self) -> List[str]:
        names = [f"table_{l}" for l in range(len(self.tables))]
        for i in range(len(self.weights)):
            names.extend([f"weight_{i}", f"bias_{i}"])
        return names

    def set_parameters(self, params: Sequence[np.ndarray]):
        params = list(params)
        n_tables = len(self.tables)
        if len(params) != n_tables + 2 * len(self.weights):
            raise ShapeMismatchError(f"expected {len(self.parameters)} parameter arrays, got {len(params)}")
        for i, (old, new) in enumerate(zip(self.parameters, params)):
            if old.shape != np.shape(new):
                raise ShapeMismatchError(f"parameter {i} shape {np.shape(new)} != {old.shape}")
        self.tables = [np.asarray(p, dtype=self.dtype) for p in params[:n_tables]]
        rest = params[n_tables:]
        self.weights = [np.asarray(p, dtype=self.dtype) for p in rest[0::2]]
        self.biases = [np.asarray(p, dtype=self.dtype) for p in rest[1::2]]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters))

    @property
    def nbytes(self) -> int:
        """Size of the float32 parameter blobs."""
        return 4 * self.parameter_count

    def copy(self) -> "InrModel":
        clone = InrModel.__new__(InrModel)
        clone.encoding, clone.mlp, clone.dtype = self.encoding, self.mlp, self.dtype
        clone.init = dict(self.init)
        clone.tables = [t.copy() for t in self.tables]
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.frozen = False
        return clone

    def freeze(self) -> "InrModel":
        for p in self.parameters:
            p.flags.writeable = False
        self.frozen = True
        return self

    def __call__(self, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(pts) <= chunk:
            return inr_forward(self, pts)
        return np.concatenate([inr_forward(self, pts[i:i + chunk]) for i in range(0, len(pts), chunk)])


# --------------------------------------------------------------------------- #
# Forward pass
# --------------------------------------------------------------------------- #
def _level_stencil(model: InrModel, level: int, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Table indices (8, N) and trilinear weights (8, N) for one level."""
    cfg = model.encoding
    n = level_resolution(cfg, level)
    pos = x * n
    cell = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    frac = pos - cell
    corners = cell[None, :, :] + _CORNERS[:, None, :]
    weights = np.prod(np.where(_CORNERS[:, None, :] == 1, frac[None], 1.0 - frac[None]), axis=2)
    if cfg.is_dense(level):
        idx = corners[..., 0] + (n + 1) * (corners[..., 1] + (n + 1) * corners[..., 2])
    else:
        c = corners.astype(np.uint64)
        h = (c[..., 0] * _PRIMES[0]) ^ (c[..., 1] * _PRIMES[1]) ^ (c[..., 2] * _PRIMES[2])
        idx = (h & np.uint64(cfg.table_size - 1)).astype(np.int64)
    return idx, weights.astype(model.dtype)


def encode_features(model: InrModel, x: np.ndarray, return_stencils: bool = False):
    """Concatenated per-level features, shape (N, L*F). Inputs are clamped to [0,1]^3."""
    pts = np.clip(np.atleast_2d(np.asarray(x, dtype=np.float64)), 0.0, 1.0)
    if pts.shape[-1] != 3:
        raise ShapeMismatchError(f"coordinates must have 3 components, got {pts.shape}")
    feats, stencils = [], []
    for level, table in enumerate(model.tables):
        idx, w = _level_stencil(model, level, pts)
        feats.append(np.einsum("cn,cnf->nf", w, table[idx]))
        stencils.append((idx, w))
    features = np.concatenate(feats, axis=1)
    return (features, stencils) if return_stencils else features


def mlp_forward(model: InrModel, features: np.ndarray, return_activations: bool = False):
    h = np.atleast_2d(np.asarray(features, dtype=model.dtype))
    if h.shape[1] != model.weights[0].shape[0]:
        raise ShapeMismatchError(
            f"feature width {h.shape[1]} != MLP input width {model.weights[0].shape[0]}")
    inputs, pre = [], []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0) if i < last else z
    return (h, inputs, pre) if return_activations else h


def inr_forward(model: InrModel, x: np.ndarray) -> np.ndarray:
    return mlp_forward(model, encode_features(model, x))


# --------------------------------------------------------------------------- #
# Loss and gradients
# --------------------------------------------------------------------------- #
def _l1(pred: np.ndarray, ref: np.ndarray) -> float:
    if np.shape(pred) != np.shape(ref):
        raise ShapeMismatchError(f"prediction shape {np.shape(pred)} != reference {np.shape(ref)}")
    if np.size(pred) == 0:
        return 0.0
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - ref)))


def loss_total(pred_u, ref_u, pred_b, ref_b, lam: float) -> float:
    """(1 - lam) * L1(uniform) + lam * L1(boundary); an empty boundary set zeroes lam."""
    l_u = _l1(pred_u, ref_u)
    l_b = _l1(pred_b, ref_b)
    if np.size(pred_b) == 0:
        return l_u
    return (1.0 - lam) * l_u + lam * l_b


@dataclass
class Batch:
    x_uniform: np.ndarray
    y_uniform: np.ndarray
    x_boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    y_boundary: Optional[np.ndarray] = None
    lam: float = 0.5

    def __post_init__(self):
        self.x_uniform = np.atleast_2d(np.asarray(self.x_uniform, dtype=np.float64))
        self.y_uniform = np.asarray(self.y_uniform, dtype=np.float64).reshape(len(self.x_uniform), -1)
        self.x_boundary = np.asarray(self.x_boundary, dtype=np.float64).reshape(-1, 3)
        d = self.y_uniform.shape[1]
        if self.y_boundary is None:
            self.y_boundary = np.zeros((0, d))
        self.y_boundary = np.asarray(self.y_boundary, dtype=np.float64).reshape(len(self.x_boundary), d)

    @property
    def effective_lam(self) -> float:
        return self.lam if len(self.x_boundary) else 0.0


@dataclass
class LossTerms:
    uniform: float
    boundary: float
    total: float


@dataclass
class Gradients:
    tables: List[np.ndarray]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    loss: LossTerms

    def as_list(self) -> List[np.ndarray]:
        grads = list(self.tables)
        for gW, gb in zip(self.weights, self.biases):
            grads.extend([gW, gb])
        return grads


def backward(model: InrModel, batch: Batch) -> Gradients:
    """Forward with retained activations, then exact reverse-mode gradients of the total loss."""
    x = np.concatenate([batch.x_uniform, batch.x_boundary])
    features, stencils = encode_features(model, x, return_stencils=True)
    out, inputs, pre = mlp_forward(model, features, return_activations=True)
    nu = len(batch.x_uniform)
    pred_u, pred_b = out[:nu], out[nu:]
    lam = batch.effective_lam
    terms = LossTerms(uniform=_l1(pred_u, batch.y_uniform), boundary=_l1(pred_b, batch.y_boundary),
                      total=loss_total(pred_u, batch.y_uniform, pred_b, batch.y_boundary, batch.lam))

    d = out.shape[1]
    g = np.empty_like(out)
    # np.sign(0) == 0 gives the zero subgradient at exact fits
    g[:nu] = (1.0 - lam) * np.sign(pred_u - batch.y_uniform) / (nu * d)
    if len(pred_b):
        g[nu:] = lam * np.sign(pred_b - batch.y_boundary) / (len(pred_b) * d)

    n_layers = len(model.weights)
    grad_w: List[np.ndarray] = [None] * n_layers
    grad_b: List[np.ndarray] = [None] * n_layers
    for i in reversed(range(n_layers)):
        grad_w[i] = (inputs[i].T @ g).astype(model.dtype)
        grad_b[i] = g.sum(axis=0).astype(model.dtype)
        g = g @ model.weights[i].T
        if i > 0:
            g = g * (pre[i - 1] > 0)

    F = model.encoding.features_per_level
    grad_tables = []
    for level, (idx, w) in enumerate(stencils):
        g_level = g[:, level * F:(level + 1) * F]
        contrib = w[..., None] * g_level[None]
        entries = len(model.tables[level])
        flat_idx = idx.ravel()
        grad = np.stack([np.bincount(flat_idx, weights=contrib[..., f].ravel(), minlength=entries)
                         for f in range(F)], axis=1)
        grad_tables.append(grad.astype(model.dtype))
    return Gradients(tables=grad_tables, weights=grad_w, biases=grad_b, loss=terms)


def loss_and_gradients(model: InrModel, batch: Batch) -> Tuple[LossTerms, Gradients]:
    grads = backward(model, batch)
    return grads.loss, grads


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #
def lr_at(cfg: TrainConfig, step: int) -> float:
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    return cfg.lr0 * cfg.decay_rate ** (step // cfg.decay_steps)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p, dtype=np.float64) for p in params],
                   v=[np.zeros_like(p, dtype=np.float64) for p in params],
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: List[np.ndarray], grads: Sequence[np.ndarray],
              lr: float) -> List[np.ndarray]:
    """Bias-corrected Adam update, applied in place to `params`."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError(
            f"Adam got {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeMismatchError(f"Adam shape mismatch: param {p.shape}, grad {np.shape(g)}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
@dataclass
class BoundarySamples:
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            values = values.reshape(len(self.coords), -1) if values.size else values.reshape(len(self.coords), 1)
        if len(values) != len(self.coords):
            raise ShapeMismatchError(f"{len(values)} boundary values for {len(self.coords)} coordinates")
        self.values = values

    def __len__(self):
        return len(self.coords)

    @classmethod
    def empty(cls, channels: int = 1) -> "BoundarySamples":
        return cls(coords=np.zeros((0, 3)), values=np.zeros((0, channels)))


@dataclass
class TrainReport:
    steps_taken: int
    loss_uniform: float
    loss_boundary: float
    loss_total: float
    achieved_psnr: float
    check_psnr: float
    target_psnr: float
    wall_time_s: float
    stop_reason: str
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def budget_exhausted(self) -> bool:
        return self.achieved_psnr < self.target_psnr

    def to_dict(self) -> Dict:
        return {
            "steps_taken": self.steps_taken, "loss_uniform": self.loss_uniform,
            "loss_boundary": self.loss_boundary, "loss_total": self.loss_total,
            "achieved_psnr": self.achieved_psnr, "check_psnr": self.check_psnr,
            "target_psnr": self.target_psnr, "wall_time_s": self.wall_time_s,
            "stop_reason": self.stop_reason, "budget_exhausted": self.budget_exhausted,
            "history": list(self.history),
        }


def check_lattice(resolution: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, resolution)
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


Sampler = Callable[[np.ndarray], np.ndarray]


def train(sampler: Sampler, boundary_samples: Optional[BoundarySamples], cfg: TrainConfig,
          encoding: Optional[EncodingConfig] = None, mlp: Optional[MlpConfig] = None,
          sample_bounds: Tuple[Sequence[float], Sequence[float]] = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
          final_eval: Optional[Callable[[InrModel], float]] = None, rank: Optional[int] = None,
          dtype=np.float32) -> Tuple[InrModel, TrainReport]:
    """Fit one INR to `sampler` (normalized coords -> normalized values).

    Uniform samples are drawn fresh every step from `sample_bounds`; boundary
    samples are drawn with replacement from `boundary_samples`. Training stops
    at the first check interval whose check-lattice PSNR reaches the target,
    or after cfg.max_steps steps. `final_eval`, when given, supplies the
    reported PSNR (the full-grid metric) for the finished model.
    """
    started = time.perf_counter()
    tag = f"rank {rank}" if rank is not None else "inr"
    check_points = check_lattice(cfg.check_resolution)
    check_ref = np.asarray(sampler(check_points), dtype=np.float64).reshape(len(check_points), -1)
    channels = check_ref.shape[1]
    mlp = mlp or MlpConfig(output_dim=channels)
    if mlp.output_dim != channels:
        raise ShapeMismatchError(f"MLP output_dim {mlp.output_dim} != sampler channels {channels}")
    encoding = encoding or EncodingConfig()
    boundary = boundary_samples if boundary_samples is not None else BoundarySamples.empty(channels)
    if len(boundary) and boundary.values.shape[1] != channels:
        raise ShapeMismatchError("boundary sample width does not match sampler channels")

    rng = np.random.default_rng(cfg.seed)
    model = InrModel(encoding, mlp, seed=cfg.seed, dtype=dtype)
    state = AdamState.zeros_like(model.parameters, cfg.beta1, cfg.beta2, cfg.eps)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in sample_bounds)
    logger.info(f"[{tag}] training to {cfg.target_psnr} dB (max {cfg.max_steps} steps, "
                f"lambda={cfg.lam}, {len(boundary)} boundary nodes)")

    history: List[Dict[str, float]] = []
    check_psnr = float("-inf")
    stop_reason = "max_steps"
    terms = LossTerms(0.0, 0.0, 0.0)
    steps = 0
    for step in range(cfg.max_steps):
        xu = rng.uniform(lo, hi, size=(cfg.batch_uniform, 3))
        yu = sampler(xu)
        if len(boundary):
            pick = rng.integers(0, len(boundary), size=cfg.batch_boundary)
            batch = Batch(xu, yu, boundary.coords[pick], boundary.values[pick], lam=cfg.lam)
        else:
            batch = Batch(xu, yu, lam=cfg.lam)
        terms, grads = loss_and_gradients(model, batch)
        if not math.isfinite(terms.total):
            raise TrainingError(f"[{tag}] non-finite loss {terms.total} at step {step}", step=step, rank=rank)
        params = model.parameters
        adam_step(state, params, grads.as_list(), lr_at(cfg, step))
        steps = step + 1
        if steps % cfg.psnr_check_interval == 0 or steps == cfg.max_steps:
            check_psnr = psnr(model(check_points), check_ref)
            history.append({"step": steps, "loss": terms.total, "psnr": check_psnr})
            logger.debug(f"[{tag}] step {steps}: loss={terms.total:.6f} check_psnr={check_psnr:.2f}")
            if check_psnr >= cfg.target_psnr:
                stop_reason = "target"
                break

    achieved = final_eval(model) if final_eval is not None else check_psnr
    report = TrainReport(
        steps_taken=steps, loss_uniform=terms.uniform, loss_boundary=terms.boundary,
        loss_total=terms.total, achieved_psnr=float(achieved), check_psnr=check_psnr,
        target_psnr=cfg.target_psnr, wall_time_s=time.perf_counter() - started,
        stop_reason=stop_reason, history=history)
    if report.budget_exhausted:
        logger.warning(f"[{tag}] budget exhausted after {steps} steps at {achieved:.2f} dB "
                       f"(target {cfg.target_psnr})")
    else:
        logger.info(f"[{tag}] reached {achieved:.2f} dB in {steps} steps")
    return model, report


# --------------------------------------------------------------------------- #
# Profiles
# --------------------------------------------------------------------------- #
@dataclass
class Profile:
    name: str
    encoding: EncodingConfig
    hidden_layers: int
    neurons: int
    batch_uniform: int
    batch_boundary: int
    max_steps: int

    def mlp(self, output_dim: int = 1) -> MlpConfig:
        return MlpConfig(hidden_layers=self.hidden_layers, neurons=self.neurons, output_dim=output_dim)

    def train_config(self, **overrides) -> TrainConfig:
        params = {"batch_uniform": self.batch_uniform, "batch_boundary": self.batch_boundary,
                  "max_steps": self.max_steps}
        params.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**params)


def desk_profile() -> Profile:
    return Profile(
        name="desk",
        encoding=EncodingConfig(levels=8, features_per_level=2, table_size=2 ** 14,
                                base_resolution=4, per_level_scale=1.5),
        hidden_layers=2, neurons=32, batch_uniform=4096, batch_boundary=1024, max_steps=2000)


def full_profile() -> Profile:
    return Profile(
        name="full",
        encoding=EncodingConfig(levels=16, features_per_level=4, table_size=2 ** 19,
                                base_resolution=4, per_level_scale=2.0),
        hidden_layers=4, neurons=64, batch_uniform=16384, batch_boundary=4096, max_steps=10000)


# "paper" is an alias of "full"
PROFILES: Dict[str, Callable[[], Profile]] = {"desk": desk_profile, "full": full_profile, "paper": full_profile}


def get_profile(name: str) -> Profile:
    factory = PROFILES.get(name)
    if factory is None:
        raise ConfigurationError(f"unknown profile '{name}' (choose from {sorted(PROFILES)})")
    return factory()
