# neuralcache/__init__.py
from .errors import (ConfigurationError, ConstantFieldWarning, DistributedTrainingError, DomainError,
                     FieldTypeError, FormatError, NeuralCacheError, ShapeMismatchError, TrainingError)
from .volume import (GridVolume, Partition, RectilinearMesh, UniformMesh, ValueRange, decompose_domain,
                     extract_boundary_coords, normalize_coords, normalize_values, psnr, sample_trilinear)
from .inr import EncodingConfig, InrModel, MlpConfig, TrainConfig, get_profile, loss_total, train
from .dnr import DnrModel, decode_to_grid, query, train_distributed, train_distributed_async
from .cache import (NeuralVolume, Window, WorkflowGraph, every, first, negate, reverse, run_workflow,
                    run_workflow_async)
from .vis import Camera, TransferFunction, ray_march, render_dnr, render_grid, rk4_step, trace_pathlines
from .drivers import create_driver
from .storage import RunStorage, load_bundle, load_volume, save_bundle, save_volume

__version__ = "0.1.0"
