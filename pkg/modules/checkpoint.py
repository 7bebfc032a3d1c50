# modules/checkpoint.py

"""
Checkpoint Module

File layout:
    b"MLANETCK" | uint32 LE format version | uint64 LE header length |
    JSON header (utf-8) | little-endian float64 blob | sha256 of everything before it

The header carries the model config, the hidden and spherical-harmonic irreps
strings, a name -> (offset, shape) manifest into the blob, per-species reference
energies, optimizer scalars, training progress and RNG state.
"""

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from modules.config import ModelConfig, from_dict
from modules.errors import CheckpointError, ConfigurationError
from modules.file_utils import atomic_write_bytes
from modules.mlanet_model import MLANet

LOG = logging.getLogger(__name__)

MAGIC = b"MLANETCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    model: MLANet
    optimizer_state: Optional[Dict[str, Any]]
    train_state: Optional[Dict[str, Any]]
    rng_state: Optional[Dict[str, Any]]
    header: Dict[str, Any]


def _pack(arrays: List[Tuple[str, np.ndarray]]) -> Tuple[List[Dict[str, Any]], bytes]:
    manifest, chunks, offset = [], [], 0
    for name, array in arrays:
        flat = np.ascontiguousarray(array, dtype="<f8").reshape(-1)
        manifest.append({"name": name, "offset": offset, "shape": list(np.shape(array))})
        chunks.append(flat.tobytes())
        offset += flat.size
    return manifest, b"".join(chunks)


def save_checkpoint(path: str, model: MLANet, optimizer_state: Optional[Dict[str, Any]] = None,
                    train_state: Optional[Dict[str, Any]] = None,
                    rng_state: Optional[Dict[str, Any]] = None) -> None:
    """
    optimizer_state: {"step": int, "m": {name: array}, "v": {name: array}} or None.
    """
    arrays = [(name, p.data) for name, p in model.params.items()]
    optimizer_header = None
    if optimizer_state is not None:
        optimizer_header = {"step": int(optimizer_state["step"])}
        for moment in ("m", "v"):
            for name, value in optimizer_state[moment].items():
                arrays.append((f"optimizer.{moment}.{name}", value))

    manifest, blob = _pack(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "irreps": {"hidden": str(model.hidden), "sh": str(model.sh_spec)},
        "manifest": manifest,
        "reference_energies": model.reference_energies.tolist(),
        "optimizer": optimizer_header,
        "train_state": train_state,
        "rng": rng_state,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + blob
    atomic_write_bytes(path, body + hashlib.sha256(body).digest())
    LOG.info(f"✅ Saved checkpoint {path} ({len(manifest)} arrays, {len(blob) // 8} floats)")


def read_header(data: bytes, path: str = "<bytes>") -> Tuple[Dict[str, Any], memoryview]:
    """Validate magic, version and checksum; return the header and the blob."""
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: file too short to be a checkpoint ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")

    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}")
    return header, memoryview(body)[start + header_len:]


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")

    header, blob = read_header(data, path)
    try:
        config = from_dict(ModelConfig, header["config"], "checkpoint.config")
    except ConfigurationError as e:
        raise CheckpointError(f"{path}: stored config is invalid: {e}")

    if expected_config is not None and dataclasses.asdict(expected_config) != dataclasses.asdict(config):
        raise CheckpointError(f"{path}: architecture mismatch\n  checkpoint: {dataclasses.asdict(config)}\n"
                              f"  expected:   {dataclasses.asdict(expected_config)}")

    values = np.frombuffer(blob, dtype="<f8")
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        stop = entry["offset"] + size
        if stop > values.size:
            raise CheckpointError(f"{path}: manifest entry {entry['name']} runs past the blob")
        arrays[entry["name"]] = values[entry["offset"]:stop].reshape(entry["shape"]).astype(np.float64)

    model = MLANet(config)
    params = {name: value for name, value in arrays.items() if not name.startswith("optimizer.")}
    try:
        model.load_state_dict(params)
    except ConfigurationError as e:
        raise CheckpointError(f"{path}: {e}")
    model.set_reference_energies(np.asarray(header["reference_energies"]))

    optimizer_state = None
    if header.get("optimizer") is not None:
        optimizer_state = {"step": header["optimizer"]["step"], "m": {}, "v": {}}
        for name, value in arrays.items():
            for moment in ("m", "v"):
                prefix = f"optimizer.{moment}."
                if name.startswith(prefix):
                    optimizer_state[moment][name[len(prefix):]] = value

    LOG.info(f"✅ Loaded checkpoint {path} (hidden={header['irreps']['hidden']}, {model.num_parameters()} parameters)")
    return Checkpoint(model=model, optimizer_state=optimizer_state, train_state=header.get("train_state"),
                      rng_state=header.get("rng"), header=header)
