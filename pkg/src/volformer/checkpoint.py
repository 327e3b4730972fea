"""Versioned checkpoint container.

Layout: an ASCII manifest, one entry per line, closed by ``END``, then the
raw little-endian payload the manifest points into::

    VOLFORMER-CKPT 1
    step 120
    config_hash 3f09c2a1b5d4e678
    blob model_config 0 143
    blob train_config 143 201
    blob rng_state 344 160
    tensor param/shallow.weight f4 12,1,3,3,3 504 1296
    ...
    END

Entries are written in a fixed order so that saving a loaded checkpoint
reproduces the file byte for byte.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, from_text, to_text
from .errors import ConfigError, DataError

MAGIC = "VOLFORMER-CKPT"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_TAGS = {np.dtype("float32"): "f4", np.dtype("float64"): "f8"}


class CheckpointError(DataError):
    """A checkpoint file is malformed or does not fit the requested model."""


@dataclass
class Checkpoint:
    step: int
    params: dict  # name -> ndarray
    adam_m: dict
    adam_v: dict
    rng_state: dict
    model_config: ModelConfig
    train_config: TrainConfig

    @property
    def config_hash(self):
        return self.model_config.hash()

    def equals(self, other):
        """Bit-exact comparison of every field."""
        if (self.step, self.rng_state, self.model_config, self.train_config) != (
            other.step,
            other.rng_state,
            other.model_config,
            other.train_config,
        ):
            return False
        for a, b in ((self.params, other.params), (self.adam_m, other.adam_m), (self.adam_v, other.adam_v)):
            if list(a) != list(b):
                return False
            if any(a[k].dtype != b[k].dtype or a[k].tobytes() != b[k].tobytes() for k in a):
                return False
        return True


def to_bytes(ckpt):
    blobs = [
        ("model_config", to_text(ckpt.model_config).encode("utf-8")),
        ("train_config", to_text(ckpt.train_config).encode("utf-8")),
        ("rng_state", json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")),
    ]
    tensors = []
    for group, arrays in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise CheckpointError(f"cannot store {group}/{name} of dtype {arr.dtype}")
            tensors.append((f"{group}/{name}", arr))
    lines = [f"{MAGIC} {VERSION}", f"step {int(ckpt.step)}", f"config_hash {ckpt.config_hash}"]
    chunks = []
    offset = 0
    for name, raw in blobs:
        lines.append(f"blob {name} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    for name, arr in tensors:
        tag = _TAGS[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"tensor {name} {tag} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks)


def save_checkpoint(ckpt, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def _parse_manifest(raw, path):
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError(f"{path}: manifest has no END marker")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: manifest is not ASCII") from None
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if head[1] != str(VERSION):
        raise CheckpointError(f"{path}: unsupported checkpoint version {head[1]}")
    return lines[1:], raw[end + len(b"\nEND\n") :]


def from_bytes(raw, path="<bytes>"):
    lines, payload = _parse_manifest(raw, path)
    step = stored_hash = None
    blobs, groups = {}, {"param": {}, "adam_m": {}, "adam_v": {}}

    def chunk(offset, size):
        offset, size = int(offset), int(size)
        if offset < 0 or size < 0 or offset + size > len(payload):
            raise CheckpointError(f"{path}: entry points past the end of the payload")
        return payload[offset : offset + size]

    try:
        for line in lines:
            parts = line.split(" ")
            if parts[0] == "step":
                step = int(parts[1])
            elif parts[0] == "config_hash":
                stored_hash = parts[1]
            elif parts[0] == "blob":
                blobs[parts[1]] = chunk(parts[2], parts[3]).decode("utf-8")
            elif parts[0] == "tensor":
                group, name = parts[1].split("/", 1)
                dtype = _DTYPES[parts[2]]
                shape = tuple(int(n) for n in parts[3].split(",")) if parts[3] else ()
                data = chunk(parts[4], parts[5])
                arr = np.frombuffer(data, dtype=dtype).reshape(shape)
                groups[group][name] = arr.astype(dtype.newbyteorder("="))
            else:
                raise CheckpointError(f"{path}: unknown manifest entry {parts[0]!r}")
    except (IndexError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc})") from None
    missing = {"model_config", "train_config", "rng_state"} - set(blobs)
    if step is None or stored_hash is None or missing:
        raise CheckpointError(f"{path}: manifest incomplete")
    model_cfg = from_text(ModelConfig, blobs["model_config"])
    if model_cfg.hash() != stored_hash:
        raise CheckpointError(f"{path}: stored config hash does not match its model config")
    return Checkpoint(
        step=step,
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        rng_state=json.loads(blobs["rng_state"]),
        model_config=model_cfg,
        train_config=from_text(TrainConfig, blobs["train_config"]),
    )


def load_checkpoint(path, expect_model=None):
    """Read a checkpoint; with ``expect_model`` the stored config hash must match it."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    ckpt = from_bytes(raw, path)
    if expect_model is not None and expect_model.hash() != ckpt.config_hash:
        raise ConfigError(
            f"{path}: checkpoint was trained with model config {ckpt.config_hash}, "
            f"requested config hashes to {expect_model.hash()}"
        )
    return ckpt
