"""On-disk formats: twin datasets, denoiser checkpoints, ensemble snapshots and run manifests."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from services.denoiser import MlpDenoiser, flatten_params, param_count, unflatten_params
from services.dynamics import ObservationModel, TwinDataset, system_from_parameters
from services.schedule import NoiseSchedule
from utils.errors import InvalidDataError, MissingInputError, ShapeMismatchError
from utils.logging import get_logger

logger = get_logger(__name__)

FLOAT_FORMAT = '%.17g'
CHECKPOINT_FORMAT = "mlp-denoiser/1"
SNAPSHOT_FORMAT = "ensemble-snapshot/1"

TRUTH_FILE = "truth.csv"
OBSERVATIONS_FILE = "observations.csv"
DATASET_FILE = "dataset.json"
MANIFEST_FILE = "manifest.json"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"Required input not found: {path}")
    return path


def _write_json(payload: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(_require(path), "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidDataError(f"Cannot parse {path}: {e}")


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    """CSV with round-trip float precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_table(path: Path, required: Iterable[str] = ()) -> pd.DataFrame:
    """Read a CSV table, rejecting empty files and missing columns"""
    path = _require(Path(path))
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise InvalidDataError(f"{path} is empty")
    except pd.errors.ParserError as e:
        raise InvalidDataError(f"Cannot parse {path}: {e}")

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InvalidDataError(f"{path} lacks columns {missing}")
    if frame.empty:
        raise InvalidDataError(f"{path} has no rows")
    return frame


def _state_frame(values: np.ndarray, steps: np.ndarray, prefix: str) -> pd.DataFrame:
    frame = pd.DataFrame(values, columns=[f"{prefix}{i}" for i in range(values.shape[1])])
    frame.insert(0, "step", steps.astype(int))
    return frame


def write_dataset(dataset: TwinDataset, out_dir: Path, extra: Optional[Dict[str, Any]] = None) -> List[Path]:
    """truth.csv, observations.csv and the dataset.json sidecar"""
    out_dir = Path(out_dir)
    K = dataset.steps
    truth = write_table(_state_frame(dataset.truth, np.arange(K + 1), "x"), out_dir / TRUTH_FILE)
    observations = write_table(_state_frame(dataset.observations, np.arange(1, K + 1), "y"),
                               out_dir / OBSERVATIONS_FILE)
    sidecar = {
        "system": dataset.system.parameters(),
        "observation": {**dataset.obs.parameters(), "H": dataset.obs.H.tolist(),
                        "H_shape": list(dataset.obs.H.shape)},
        "seed": dataset.seed,
        "steps": K,
        "spin_up_steps": dataset.spin_up_steps,
        **(extra or {}),
    }
    meta = _write_json(sidecar, out_dir / DATASET_FILE)
    logger.info(f"Wrote dataset with K={K} to {out_dir}")
    return [truth, observations, meta]


def read_dataset(data_dir: Path) -> TwinDataset:
    data_dir = Path(data_dir)
    meta = _read_json(data_dir / DATASET_FILE)
    truth = read_table(data_dir / TRUTH_FILE, required=["step"])
    observations = read_table(data_dir / OBSERVATIONS_FILE, required=["step"])

    system = system_from_parameters(meta["system"])
    obs_meta = meta["observation"]
    obs = ObservationModel(H=np.asarray(obs_meta["H"]), noise_std=np.asarray(obs_meta["noise_std"]))

    truth_values = truth.drop(columns="step").to_numpy(dtype=np.float64)
    obs_values = observations.drop(columns="step").to_numpy(dtype=np.float64)
    if truth_values.shape[1] != system.dim or obs_values.shape[1] != obs.m:
        raise ShapeMismatchError(
            f"Dataset columns ({truth_values.shape[1]} states, {obs_values.shape[1]} observations) "
            f"disagree with {DATASET_FILE} (d={system.dim}, m={obs.m})")
    if truth_values.shape[0] != obs_values.shape[0] + 1:
        raise InvalidDataError(
            f"Expected K+1 truth rows for K observation rows, got {truth_values.shape[0]} and "
            f"{obs_values.shape[0]}")

    return TwinDataset(truth=truth_values, observations=obs_values, system=system, obs=obs,
                       seed=meta["seed"], spin_up_steps=meta.get("spin_up_steps", 0))


def dataset_files(data_dir: Path) -> List[Path]:
    data_dir = Path(data_dir)
    return [data_dir / TRUTH_FILE, data_dir / OBSERVATIONS_FILE, data_dir / DATASET_FILE]


def _encode(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _decode(path: Path) -> np.ndarray:
    return np.frombuffer(_require(path).read_bytes(), dtype="<f8").astype(np.float64)


def checkpoint_paths(path: Path):
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(model: MlpDenoiser, path: Path) -> List[Path]:
    """JSON header plus flat little-endian float64 parameters"""
    header_path, bin_path = checkpoint_paths(path)
    payload = _encode(flatten_params(model.layers))
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(payload)
    header = {
        "format": CHECKPOINT_FORMAT,
        "activation": "silu",
        "widths": model.widths,
        "sigma_data": model.sigma_data,
        "data_mean": model.data_mean.tolist(),
        "schedule_hash": model.schedule.schedule_hash(),
        "param_count": model.param_count,
        "params_sha256": hashlib.sha256(payload).hexdigest(),
    }
    _write_json(header, header_path)
    return [header_path, bin_path]


def load_checkpoint(path: Path, schedule: NoiseSchedule) -> MlpDenoiser:
    """Load a checkpoint, validating format, architecture, checksum and schedule"""
    header_path, bin_path = checkpoint_paths(path)
    header = _read_json(header_path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise InvalidDataError(f"{header_path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if header["schedule_hash"] != schedule.schedule_hash():
        raise ShapeMismatchError(
            f"Checkpoint was trained for schedule {header['schedule_hash']}, "
            f"configured schedule is {schedule.schedule_hash()}")

    widths = header["widths"]
    if header["param_count"] != param_count(widths):
        raise ShapeMismatchError(f"Header param_count {header['param_count']} does not match widths {widths}")

    payload = _require(bin_path).read_bytes()
    if hashlib.sha256(payload).hexdigest() != header["params_sha256"]:
        raise InvalidDataError(f"Checksum mismatch for {bin_path}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)

    return MlpDenoiser(widths=widths, layers=unflatten_params(flat, widths),
                       sigma_data=header["sigma_data"], data_mean=np.asarray(header["data_mean"]),
                       schedule=schedule)


def save_snapshots(ensembles: np.ndarray, steps: List[int], path: Path) -> List[Path]:
    """(S, N, d) ensembles in the checkpoint array encoding"""
    header_path, bin_path = checkpoint_paths(path)
    ensembles = np.asarray(ensembles, dtype=np.float64)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(_encode(ensembles))
    _write_json({"format": SNAPSHOT_FORMAT, "shape": list(ensembles.shape), "steps": list(steps)},
                header_path)
    return [header_path, bin_path]


def load_snapshots(path: Path):
    header_path, bin_path = checkpoint_paths(path)
    header = _read_json(header_path)
    values = _decode(bin_path)
    shape = tuple(header["shape"])
    if values.size != int(np.prod(shape)):
        raise ShapeMismatchError(f"{bin_path} holds {values.size} values, header says {shape}")
    return values.reshape(shape), header["steps"]


def write_manifest(out_dir: Path, command: str, config: Dict[str, Any], seeds: Dict[str, int],
                   inputs: Iterable[Path], outputs: Iterable[Path]) -> Path:
    """Record one command in manifest.json: resolved config, seeds and content hashes, no timestamps"""
    out_dir = Path(out_dir)
    input_hashes = {str(p): sha256_file(Path(p)) for p in sorted(map(str, inputs))}
    combined = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in input_hashes.items()).encode()).hexdigest()
    output_hashes = {Path(p).name: sha256_file(Path(p)) for p in sorted(map(str, outputs))}
    entry = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": input_hashes,
        "input_hash": combined,
        "outputs": output_hashes,
    }
    path = out_dir / MANIFEST_FILE
    manifest = _read_json(path) if path.exists() else {"commands": {}}
    manifest.setdefault("commands", {})[command] = entry
    return _write_json(manifest, path)


def read_manifest(out_dir: Path, command: Optional[str] = None) -> Dict[str, Any]:
    """The whole manifest, or the entry of one command"""
    manifest = _read_json(Path(out_dir) / MANIFEST_FILE)
    if command is None:
        return manifest
    if command not in manifest.get("commands", {}):
        raise MissingInputError(f"No {command} entry in {Path(out_dir) / MANIFEST_FILE}")
    return manifest["commands"][command]
