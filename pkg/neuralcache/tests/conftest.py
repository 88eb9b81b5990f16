import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neuralcache.inr import EncodingConfig, MlpConfig, TrainConfig
from neuralcache.volume import GridVolume, UniformMesh

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def smooth_field(dims=(16, 16, 16), channels=1):
    """Sum of two Gaussians on the unit cube, values in (0, 1]."""
    nx, ny, nz = dims
    mesh = UniformMesh(origin=(0.0, 0.0, 0.0), spacing=(1.0 / (nx - 1), 1.0 / (ny - 1), 1.0 / (nz - 1)))
    xs, ys, zs = mesh.axis_coords(dims)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    base = (np.exp(-((xx - 0.3) ** 2 + (yy - 0.4) ** 2 + (zz - 0.5) ** 2) / 0.05)
            + 0.5 * np.exp(-((xx - 0.7) ** 2 + (yy - 0.6) ** 2 + (zz - 0.4) ** 2) / 0.03))
    values = np.stack([base * (c + 1) for c in range(channels)], axis=-1)
    return GridVolume(dims=dims, values=values.astype(np.float32), mesh=mesh)


@pytest.fixture
def small_volume():
    return smooth_field((8, 8, 8))


@pytest.fixture
def tiny_encoding():
    return EncodingConfig(levels=2, features_per_level=2, table_size=16, base_resolution=2, per_level_scale=2.0)


@pytest.fixture
def tiny_mlp():
    return MlpConfig(hidden_layers=1, neurons=8, output_dim=1)


@pytest.fixture
def quick_train():
    return TrainConfig(batch_uniform=256, batch_boundary=64, max_steps=20, psnr_check_interval=10,
                       check_resolution=4, target_psnr=45.0)
