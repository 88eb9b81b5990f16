"""
Synthetic simulation drivers.

Each driver produces one GridVolume per step; step k has simulation time
round(k * dt, 12) so that threshold triggers fire on the intended step.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError
from .volume import GridVolume, UniformMesh

logger = logging.getLogger(__name__)


@dataclass
class Frame:
    step: int
    time: float
    volume: GridVolume


def step_time(step: int, dt: float) -> float:
    return round(step * dt, 12)


class SyntheticDriver(ABC):
    kind: str = "abstract"
    channels: int = 1

    def __init__(self, dims: Sequence[int], dt: float, seed: int = 0):
        if dt <= 0:
            raise ConfigurationError(f"driver dt must be positive, got {dt}")
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise ConfigurationError(f"driver dims must be 3 integers >= 2, got {dims}")
        self.dt = float(dt)
        self.seed = seed
        self.step = 0

    def reset(self):
        self.step = 0

    def advance(self) -> Frame:
        self.step += 1
        t = step_time(self.step, self.dt)
        return Frame(step=self.step, time=t, volume=self.field_at(t))

    @abstractmethod
    def field_at(self, t: float) -> GridVolume:
        pass


class AnalyticDriver(SyntheticDriver):
    """Drivers with a closed-form field; `evaluate` works at arbitrary points."""
    lo: float = 0.0
    hi: float = 1.0

    @property
    def mesh(self) -> UniformMesh:
        spacing = tuple((self.hi - self.lo) / (n - 1) for n in self.dims)
        return UniformMesh(origin=(self.lo,) * 3, spacing=spacing)

    @abstractmethod
    def evaluate(self, points: np.ndarray, t: float) -> np.ndarray:
        pass

    def field_at(self, t: float) -> GridVolume:
        mesh = self.mesh
        axes = mesh.axis_coords(self.dims)
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        points = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        values = self.evaluate(points, t).astype(np.float32)
        return GridVolume(dims=self.dims, values=values.reshape(-1), mesh=mesh)


class GaussianBlobsDriver(AnalyticDriver):
    """K Gaussians drifting on smooth bounded orbits inside the unit cube."""
    kind = "gaussian-blobs"
    channels = 1

    def __init__(self, dims: Sequence[int] = (32, 32, 32), dt: float = 0.005, blobs: int = 4,
                 sigma: float = 0.12, speed: float = 2.0, seed: int = 0):
        super().__init__(dims, dt, seed)
        if blobs < 1 or sigma <= 0:
            raise ConfigurationError("gaussian-blobs needs blobs >= 1 and sigma > 0")
        rng = np.random.default_rng(seed)
        self.sigma = float(sigma)
        self.amplitudes = rng.uniform(0.5, 1.0, size=blobs)
        self.phases = rng.uniform(0.0, 2.0 * math.pi, size=(blobs, 3))
        self.frequencies = speed * rng.uniform(0.5, 1.5, size=(blobs, 3))

    def centers(self, t: float) -> np.ndarray:
        return 0.5 + 0.25 * np.sin(self.phases + self.frequencies * t)

    def evaluate(self, points: np.ndarray, t: float) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts))
        for amp, c in zip(self.amplitudes, self.centers(t)):
            out += amp * np.exp(-np.sum((pts - c) ** 2, axis=1) / (2.0 * self.sigma ** 2))
        return out[:, None]


class TaylorGreenDriver(AnalyticDriver):
    """Taylor-Green vortex velocity on [0, 2*pi]^3 with optional viscous decay."""
    kind = "taylor-green"
    channels = 3
    hi = 2.0 * math.pi

    def __init__(self, dims: Sequence[int] = (32, 32, 32), dt: float = 0.05, viscosity: float = 0.0,
                 seed: int = 0):
        super().__init__(dims, dt, seed)
        if viscosity < 0:
            raise ConfigurationError("viscosity must be non-negative")
        self.viscosity = float(viscosity)

    def evaluate(self, points: np.ndarray, t: float) -> np.ndarray:
        pts = np.atleast_2d(points)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        decay = math.exp(-2.0 * self.viscosity * t)
        u = np.sin(x) * np.cos(y) * np.cos(z) * decay
        v = -np.cos(x) * np.sin(y) * np.cos(z) * decay
        return np.stack([u, v, np.zeros_like(u)], axis=1)


class RawSequenceDriver(SyntheticDriver):
    """Replays a directory of volume manifests in name order."""
    kind = "raw"

    def __init__(self, source: Union[str, Path, Sequence[Union[str, Path]]], dt: float = 1.0):
        from .storage import load_volume

        paths = sorted(Path(source).glob("*.json")) if isinstance(source, (str, Path)) else [Path(p) for p in source]
        if not paths:
            raise ConfigurationError(f"no volume manifests found in {source}")
        self._load = load_volume
        self.paths: List[Path] = list(paths)
        first = load_volume(self.paths[0])
        super().__init__(first.dims, dt)
        self.channels = first.channels

    def field_at(self, t: float) -> GridVolume:
        index = self.step - 1
        if index >= len(self.paths):
            raise ConfigurationError(f"raw sequence exhausted after {len(self.paths)} step(s)")
        return self._load(self.paths[index])


def create_driver(kind: str, **params) -> SyntheticDriver:
    drivers = {
        "gaussian-blobs": GaussianBlobsDriver,
        "taylor-green": TaylorGreenDriver,
        "raw": RawSequenceDriver,
    }
    cls = drivers.get(kind.lower())
    if not cls:
        raise ConfigurationError(f"Unsupported driver: {kind}")
    try:
        driver = cls(**params)
    except TypeError as e:
        raise ConfigurationError(f"invalid parameters for driver '{kind}': {e}") from e
    logger.info(f"Driver '{kind}' ready: dims={driver.dims}, dt={driver.dt}, channels={driver.channels}")
    return driver
