"""Checkpoint persistence, format "RAPA1".

Layout (all integers little-endian):

    bytes 0..4    magic b"RAPA1"
    bytes 5..8    format version (uint32)
    bytes 9..16   header length H (uint64)
    next H bytes  JSON header: {"config", "seed", "epoch", "manifest"}
    rest          parameter blob, float32 little-endian

The manifest lists (name, shape, offset) per parameter, offsets strictly
increasing into the blob. Parameters are float32 in memory too, so
load(save(net)) reproduces forward outputs bit-identically. The stored
seed rebuilds the network's init streams, which also restores the fixed
partitions of the random-fixed scheme.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import Network, NetworkConfig
from .numcore import SeededRng

__all__ = ["CheckpointError", "MAGIC", "VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RAPA1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def save_checkpoint(path: str, net: Network, seed: int, epoch: int) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in net.parameters().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "config": net.cfg.to_dict(),
            "seed": int(seed),
            "epoch": int(epoch),
            "manifest": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)


def network_init_rng(seed: int) -> SeededRng:
    """The init stream a run derives from its seed; checkpoint loading uses
    the same derivation so fixed partitions are reproduced."""
    return SeededRng(seed).derive("net-init")


def load_checkpoint(path: str) -> tuple[Network, int, int]:
    """Returns (network, seed, epoch); validates structure byte by byte."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated before header (size {len(raw)})")
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}; expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}; expected {VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 9)
    header_start = len(MAGIC) + 12
    blob_start = header_start + header_len
    if blob_start > len(raw):
        raise CheckpointError(
            f"{path}: truncated header at byte offset {len(raw)} (need {blob_start})"
        )
    try:
        header = json.loads(raw[header_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    for key in ("config", "seed", "epoch", "manifest"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")

    blob = raw[blob_start:]
    state: dict[str, np.ndarray] = {}
    prev_end = 0
    for entry in header["manifest"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if offset != prev_end:
            raise CheckpointError(
                f"{path}: manifest offset {offset} for {name!r} is not contiguous "
                f"(expected {prev_end}); offsets must be strictly increasing"
            )
        size = int(np.prod(shape, dtype=np.int64)) * 4
        end = offset + size
        if end > len(blob):
            raise CheckpointError(
                f"{path}: truncated blob at byte offset {blob_start + len(blob)} "
                f"({name!r} needs bytes up to {blob_start + end})"
            )
        state[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=offset).reshape(shape)
        prev_end = end
    if prev_end != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - prev_end} trailing bytes after blob")

    cfg = NetworkConfig.from_dict(header["config"])
    seed = int(header["seed"])
    net = Network(cfg, network_init_rng(seed))
    net.load_state(state)
    return net, seed, int(header["epoch"])
