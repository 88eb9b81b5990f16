"""
On-disk formats for neuralcache.

- Volumes: raw little-endian float32 values plus a JSON manifest
- INR checkpoints: magic, JSON header, float32 parameter blobs
- DNR bundles: directory with layout.json and one checkpoint per rank
- Images (PPM P6 / PNG), pathline CSV + JSON summary, run report tables
- RunStorage: the single output directory of one command
"""

import csv
import dataclasses
import json
import logging
import re
import struct
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, FormatError
from .inr import EncodingConfig, InrModel, MlpConfig
from .volume import GridVolume, Mesh, Partition, RectilinearMesh, UniformMesh, ValueRange

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VOLUME_FORMAT = "neuralcache-volume"
BUNDLE_FORMAT = "neuralcache-bundle"
FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"NCINR\x00"


def to_json_serializable(obj: Any) -> Any:
    """Recursively convert objects to JSON-serializable format"""
    if isinstance(obj, Enum):
        return obj.value
    elif isinstance(obj, datetime):
        return obj.isoformat()
    elif isinstance(obj, Path):
        return str(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, np.generic):
        return obj.item()
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_json_serializable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    elif isinstance(obj, (list, tuple)):
        return [to_json_serializable(item) for item in obj]
    elif isinstance(obj, dict):
        return {str(k): to_json_serializable(v) for k, v in obj.items()}
    return obj


def write_json(obj: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_json_serializable(obj), indent=2, sort_keys=True))
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e


# --------------------------------------------------------------------------- #
# Meshes
# --------------------------------------------------------------------------- #
def mesh_to_dict(mesh: Mesh) -> Dict[str, Any]:
    if isinstance(mesh, UniformMesh):
        return {"type": "uniform", "origin": list(mesh.origin), "spacing": list(mesh.spacing)}
    return {"type": "rectilinear", "x": mesh.x.tolist(), "y": mesh.y.tolist(), "z": mesh.z.tolist()}


def mesh_from_dict(data: Dict[str, Any]) -> Mesh:
    kind = data.get("type")
    if kind == "uniform":
        return UniformMesh(origin=tuple(data["origin"]), spacing=tuple(data["spacing"]))
    if kind == "rectilinear":
        return RectilinearMesh(x=np.array(data["x"]), y=np.array(data["y"]), z=np.array(data["z"]))
    raise FormatError(f"unknown mesh type: {kind!r}")


# --------------------------------------------------------------------------- #
# Volumes
# --------------------------------------------------------------------------- #
def _volume_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    manifest = path if path.suffix == ".json" else path.with_suffix(".json")
    return manifest, manifest.with_suffix(".raw")


def save_volume(vol: GridVolume, path: PathLike) -> Path:
    """Write `<stem>.raw` and its `<stem>.json` manifest; returns the manifest path."""
    manifest_path, raw_path = _volume_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(vol.values, dtype="<f4").tobytes())
    write_json({
        "format": VOLUME_FORMAT, "version": FORMAT_VERSION, "dims": list(vol.dims),
        "channels": vol.channels, "mesh": mesh_to_dict(vol.mesh), "value_layout": "x-fastest",
        "dtype": "float32-le", "data_file": raw_path.name,
    }, manifest_path)
    logger.info(f"Volume {vol.dims}x{vol.channels} written → {manifest_path}")
    return manifest_path


def load_volume(path: PathLike) -> GridVolume:
    manifest_path, _ = _volume_paths(path)
    if not manifest_path.exists():
        raise FormatError(f"volume manifest not found: {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != VOLUME_FORMAT:
        raise FormatError(f"{manifest_path}: not a {VOLUME_FORMAT} manifest")
    if manifest.get("value_layout") != "x-fastest" or manifest.get("dtype") != "float32-le":
        raise FormatError(f"{manifest_path}: unsupported layout/dtype")
    try:
        dims = tuple(int(d) for d in manifest["dims"])
        channels = int(manifest["channels"])
        raw_path = manifest_path.parent / manifest["data_file"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{manifest_path}: incomplete manifest ({e})") from e
    data = np.fromfile(raw_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2] * channels
    if data.size != expected:
        raise FormatError(f"{raw_path}: {data.size} values, manifest implies {expected}")
    return GridVolume(dims=dims, values=data.astype(np.float32), mesh=mesh_from_dict(manifest["mesh"]))


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
def partition_to_dict(part: Partition) -> Dict[str, Any]:
    return to_json_serializable(dataclasses.asdict(part))


def partition_from_dict(data: Dict[str, Any]) -> Partition:
    def box(b):
        return (tuple(b[0]), tuple(b[1]))

    return Partition(rank=int(data["rank"]), grid_index=tuple(data["grid_index"]),
                     core_box=box(data["core_box"]), ghost_width=int(data["ghost_width"]),
                     ghost_box=box(data["ghost_box"]),
                     world_bounds=(tuple(data["world_bounds"][0]), tuple(data["world_bounds"][1])))


def save_checkpoint(model: InrModel, path: PathLike, value_range: Optional[ValueRange] = None,
                    partition: Optional[Partition] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = model.parameters
    header = {
        "version": FORMAT_VERSION,
        "encoding": dataclasses.asdict(model.encoding),
        "mlp": dataclasses.asdict(model.mlp),
        "init": model.init,
        "value_range": value_range.to_dict() if value_range else None,
        "partition": partition_to_dict(partition) if partition else None,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in zip(model.parameter_names(), params)],
        "dtype": "float32-le",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: PathLike) -> Tuple[InrModel, Dict[str, Any]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 4:
        raise FormatError(f"{path}: truncated checkpoint header")
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header") from e
    offset += header_len
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")

    init = header.get("init") or {}
    try:
        model = InrModel(EncodingConfig(**header["encoding"]), MlpConfig(**header["mlp"]),
                         seed=init.get("seed", 0), dtype=np.float32, table_init=init.get("table_range", 1e-4))
    except (KeyError, TypeError, ConfigurationError) as e:
        raise FormatError(f"{path}: invalid model description in checkpoint header") from e
    params = []
    for spec in header["parameters"]:
        count = int(np.prod(spec["shape"]))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"{path}: truncated parameter '{spec['name']}'")
        params.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
                      .reshape(spec["shape"]).astype(np.float32))
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    model.set_parameters(params)
    return model, header


# --------------------------------------------------------------------------- #
# Bundles
# --------------------------------------------------------------------------- #
def save_bundle(dnr, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ranks = []
    for part, model, score, steps in zip(dnr.partitions, dnr.models, dnr.rank_psnr, dnr.rank_steps):
        name = f"rank_{part.rank:04d}.ckpt"
        save_checkpoint(model, directory / name, dnr.value_range, part)
        ranks.append({**partition_to_dict(part), "psnr": score, "steps": steps, "checkpoint": name})
    write_json({
        "format": BUNDLE_FORMAT, "version": FORMAT_VERSION, "dims": list(dnr.dims),
        "rank_grid": list(dnr.rank_grid), "mesh": mesh_to_dict(dnr.mesh),
        "value_range": dnr.value_range.to_dict(), "target_psnr": dnr.target_psnr,
        "parameter_bytes": dnr.nbytes, "ranks": ranks,
    }, directory / "layout.json")
    logger.info(f"DNR bundle with {len(ranks)} rank(s) written → {directory}")
    return directory


def load_bundle(directory: PathLike):
    from .dnr import DnrModel

    directory = Path(directory)
    layout_path = directory / "layout.json"
    if not layout_path.exists():
        raise FormatError(f"{directory}: missing layout.json")
    layout = read_json(layout_path)
    if layout.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"{layout_path}: not a {BUNDLE_FORMAT} layout")
    entries = sorted(layout["ranks"], key=lambda r: r["rank"])
    partitions = [partition_from_dict(r) for r in entries]
    models = [load_checkpoint(directory / r["checkpoint"])[0] for r in entries]
    vr = layout["value_range"]
    return DnrModel(
        partitions=partitions, models=models, value_range=ValueRange(vr["vmin"], vr["vmax"]),
        mesh=mesh_from_dict(layout["mesh"]), rank_psnr=[float(r["psnr"]) for r in entries],
        rank_steps=[int(r["steps"]) for r in entries], target_psnr=float(layout["target_psnr"]))


# --------------------------------------------------------------------------- #
# Images, pathlines, tables
# --------------------------------------------------------------------------- #
def to_rgb8(pixels: np.ndarray, background: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Float RGB in [0,1] to uint8; RGBA input is treated as straight alpha over `background`."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[-1] == 4:
        alpha = pixels[..., 3:4]
        rgb = pixels[..., :3] * alpha + np.asarray(background) * (1.0 - alpha)
    else:
        rgb = pixels
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def save_ppm(rgb8: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = rgb8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb8, dtype=np.uint8).tobytes())
    return path


def load_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    header = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if header is None:
        raise FormatError(f"{path}: not an 8-bit P6 image")
    w, h = int(header.group(1)), int(header.group(2))
    pixels = np.frombuffer(data[header.end():], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise FormatError(f"{path}: pixel payload size mismatch")
    return pixels.reshape(h, w, 3)


def save_png(rgb8: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.ascontiguousarray(rgb8, dtype=np.uint8)).save(path)
    return path


def save_image(pixels: np.ndarray, path: PathLike, background: Sequence[float] = (0.0, 0.0, 0.0)) -> Path:
    path = Path(path)
    rgb8 = to_rgb8(pixels, background)
    if path.suffix.lower() == ".png":
        return save_png(rgb8, path)
    if path.suffix.lower() == ".ppm":
        return save_ppm(rgb8, path)
    raise FormatError(f"unsupported image format: {path.suffix}")


PATHLINE_COLUMNS = ["seed_id", "step", "x", "y", "z", "t", "speed"]


def save_pathlines(pathlines, path: PathLike, extra_summary: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
    """Vertex table CSV plus `<stem>.json` summary with one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PATHLINE_COLUMNS)
        for line in pathlines:
            for step, (pos, t, speed) in enumerate(zip(line.positions, line.times, line.speeds)):
                writer.writerow([line.seed_id, step, *(repr(float(c)) for c in pos), repr(float(t)),
                                 repr(float(speed))])
    summary = {
        "pathlines": [{"seed_id": line.seed_id, "vertices": len(line.times),
                       "termination": line.termination.value} for line in pathlines],
        **(extra_summary or {}),
    }
    summary_path = write_json(summary, path.with_suffix(".json"))
    logger.info(f"{len(pathlines)} pathline(s) written → {path}")
    return path, summary_path


def read_pathline_table(path: PathLike) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("seed_id", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_table(rows: Sequence[Dict[str, Any]], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (json.dumps(to_json_serializable(v)) if isinstance(v, (list, dict)) else v)
                             for k, v in row.items()})
    return path


class RunStorage:
    """All outputs of one command live under `root`."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def initialize(self) -> "RunStorage":
        for sub in ("images", "pathlines", "bundles", "volumes"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        logger.info(f"Run directory ready → {self.root}")
        return self

    def image_path(self, name: str, step: int, fmt: str = "png") -> Path:
        return self.root / "images" / f"{name}_step{step:05d}.{fmt}"

    def pathline_path(self, name: str, step: int) -> Path:
        return self.root / "pathlines" / f"{name}_step{step:05d}.csv"

    def bundle_dir(self, name: str, step: Optional[int] = None) -> Path:
        suffix = f"_step{step:05d}" if step is not None else ""
        return self.root / "bundles" / f"{name}{suffix}"

    def volume_path(self, name: str, step: Optional[int] = None) -> Path:
        suffix = f"_step{step:05d}" if step is not None else ""
        return self.root / "volumes" / f"{name}{suffix}.json"

    def save_report(self, rows: Sequence[Dict[str, Any]], summary: Dict[str, Any],
                    name: str = "report") -> Tuple[Path, Path]:
        table = write_table(rows, self.root / f"{name}.csv")
        summary_path = write_json(summary, self.root / f"{name}.json")
        logger.info(f"Report written → {table}")
        return table, summary_path
