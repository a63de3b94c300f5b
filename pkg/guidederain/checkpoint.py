"""
Checkpoint files.

Layout::

    GUIDEDERAIN-CHECKPOINT 1\\n
    <manifest length in bytes>\\n
    <YAML manifest>
    <little-endian float32 blobs>

The manifest records the ModelConfig, every array's name, shape, dtype,
byte offset and size, and the ADAM hyperparameters and step counter.
Offsets are relative to the first blob byte. Saving is deterministic, so
identical runs produce identical files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import logging

import numpy as np
import yaml

from .network import AblationMode, ModelConfig
from .optim import AdamState
from .params import ParamStore


logger = logging.getLogger(__name__)

MAGIC = b"GUIDEDERAIN-CHECKPOINT 1\n"
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    """Raised when a checkpoint is malformed or does not fit the requested model."""
    pass


@dataclass
class Checkpoint:
    """Everything a checkpoint file holds."""
    config: ModelConfig
    params: ParamStore
    state: Optional[AdamState] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def _entries(arrays: List[Tuple[str, np.ndarray]], offset: int) -> Tuple[List[dict], List[bytes], int]:
    entries, blobs = [], []
    for name, array in arrays:
        blob = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
        entries.append({
            "name": name,
            "shape": [int(d) for d in array.shape],
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(
    path,
    config: ModelConfig,
    params: ParamStore,
    state: Optional[AdamState] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write parameters (and optionally optimizer state) to a checkpoint file.

    Args:
        path: Destination file
        config: Model configuration the parameters belong to
        params: Parameters to save
        state: ADAM state to save alongside
        extra: Small YAML-serializable run metadata (epoch, seed, ...)

    Returns:
        The written path
    """
    path = Path(path)
    param_entries, blobs, offset = _entries(list(params.items()), 0)
    manifest: Dict[str, Any] = {
        "model": config.to_dict(),
        "params": param_entries,
        "extra": dict(extra or {}),
    }
    if state is not None:
        moments = [(f"m/{n}", state.m[n]) for n in params if n in state.m]
        moments += [(f"v/{n}", state.v[n]) for n in params if n in state.v]
        moment_entries, moment_blobs, offset = _entries(moments, offset)
        manifest["optimizer"] = {
            "t": state.t,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "moments": moment_entries,
        }
        blobs.extend(moment_blobs)

    header = yaml.safe_dump(manifest, sort_keys=False).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header)}\n".encode("ascii"))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    logger.debug(f"Checkpoint written to {path} ({offset} blob bytes)")
    return path


def _read_array(blob: bytes, entry: dict) -> np.ndarray:
    start, nbytes = int(entry["offset"]), int(entry["nbytes"])
    if start < 0 or start + nbytes > len(blob):
        raise CheckpointError(f"Blob for '{entry['name']}' lies outside the file")
    array = np.frombuffer(blob[start:start + nbytes], dtype=BLOB_DTYPE)
    shape = tuple(entry["shape"])
    if array.size != int(np.prod(shape)):
        raise CheckpointError(f"Blob for '{entry['name']}' does not match shape {list(shape)}")
    return array.reshape(shape).astype(np.float32)


def load_checkpoint(path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: If the file is missing or malformed
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"Not a guidederain checkpoint: {path}")

    try:
        length_end = raw.index(b"\n", len(MAGIC))
        header_len = int(raw[len(MAGIC):length_end])
        header_start = length_end + 1
        manifest = yaml.safe_load(raw[header_start:header_start + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["model"])
    except (ValueError, KeyError, TypeError, yaml.YAMLError) as e:
        raise CheckpointError(f"Malformed checkpoint manifest in {path}: {e}")
    blob = raw[header_start + header_len:]

    params = ParamStore(dtype=np.float32)
    for entry in manifest.get("params", []):
        params.add(entry["name"], _read_array(blob, entry))

    state = None
    optimizer = manifest.get("optimizer")
    if optimizer:
        state = AdamState(
            t=int(optimizer["t"]),
            beta1=float(optimizer["beta1"]),
            beta2=float(optimizer["beta2"]),
            eps=float(optimizer["eps"]),
        )
        for entry in optimizer.get("moments", []):
            kind, name = entry["name"].split("/", 1)
            target = state.m if kind == "m" else state.v
            target[name] = _read_array(blob, entry)

    logger.debug(f"Loaded checkpoint {path}: {len(params)} arrays, mode {config.ablation.label}")
    return Checkpoint(config=config, params=params, state=state, extra=manifest.get("extra") or {})


def check_mode(checkpoint: Checkpoint, mode: Optional[AblationMode]) -> None:
    """
    Verify a requested ablation mode matches the checkpoint's.

    Raises:
        CheckpointError: On mismatch
    """
    if mode is None:
        return
    saved = checkpoint.config.ablation
    if (saved.topology, saved.no_dilated_streams) != (mode.topology, mode.no_dilated_streams):
        raise CheckpointError(
            f"Checkpoint was trained as {saved.label} but {mode.label} was requested"
        )
