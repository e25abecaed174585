"""Binary checkpoint container for named tensors with lineage metadata.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"STYLBRDG"
    8       4     format version (uint32)
    12      8     header length H (uint64)
    20      H     header: UTF-8 JSON, sorted keys, compact separators
    20+H    ...   tensor data, concatenated in header order, row-major,
                  little-endian float32 / int64
    end-32  32    sha256 of every preceding byte

The header holds ``kind`` ("generator", "discriminator" or "latent"),
``config``, ``metadata`` and a ``tensors`` table of
``{name, dtype, shape, offset, nbytes}`` where ``offset`` is relative to the
start of the tensor data. The same file written twice is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .generator import GeneratorConfig, GeneratorModel

MAGIC = b"STYLBRDG"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_LEN = 32
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    """Corrupt, truncated or otherwise unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(kind: str, tensors: dict, config=None, metadata=None) -> bytes:
    table, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for tensor {name!r}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = _canonical_json({"kind": kind, "config": config, "metadata": metadata or {},
                              "tensors": table})
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes):
    """Parse and verify a container; returns ``(header, {name: ndarray})``."""
    if len(raw) < _PREFIX.size + _DIGEST_LEN:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    body, digest = raw[:-_DIGEST_LEN], raw[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("content digest mismatch (file truncated or modified)")
    start = _PREFIX.size + hlen
    if start > len(body):
        raise CheckpointError("header length exceeds file size")
    try:
        header = json.loads(body[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    data = body[start:]
    tensors = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(data):
            raise CheckpointError(f"tensor {name!r} runs past end of data")
        arr = np.frombuffer(data[lo:lo + n], dtype=_DTYPES[entry["dtype"]])
        tensors[name] = arr.astype(entry["dtype"]).reshape(entry["shape"])
    return header, tensors


def write_container(path, kind, tensors, config=None, metadata=None) -> str:
    raw = encode(kind, tensors, config, metadata)
    Path(path).write_bytes(raw)
    return raw[-_DIGEST_LEN:].hex()


def read_container(path, kind=None):
    header, tensors = decode(Path(path).read_bytes())
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {header['kind']}")
    return header, tensors


def _load_state(module, tensors):
    expected = dict(module.state_dict())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor table mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"shape mismatch for {name!r}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})


def save_checkpoint(model: GeneratorModel, path) -> str:
    """Write a generator checkpoint; returns the file's content digest."""
    return write_container(path, "generator", dict(model.state_dict()),
                           model.config.to_dict(), model.metadata)


def load_checkpoint(path) -> GeneratorModel:
    header, tensors = read_container(path, "generator")
    model = GeneratorModel(GeneratorConfig.from_dict(header["config"]),
                           seed=header["metadata"].get("init_seed", 0))
    _load_state(model, tensors)
    model.metadata = header["metadata"]
    return model


def save_discriminator(disc, path) -> str:
    return write_container(path, "discriminator", dict(disc.state_dict()), disc.config.to_dict())


def load_discriminator(path):
    from .training import Discriminator

    header, tensors = read_container(path, "discriminator")
    disc = Discriminator(GeneratorConfig.from_dict(header["config"]))
    _load_state(disc, tensors)
    return disc
