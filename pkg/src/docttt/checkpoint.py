"""Bit-exact binary checkpoints for parameters, optimizer moments, run state.

Format (little endian throughout):
    magic   4 bytes  "DTTT"
    version u32
    count   u32      number of entries
    entries:
        name_len u16, name bytes (utf-8)
        dtype    u8   (0 = float32, 1 = float64, 2 = int64)
        rank     u8
        dims     u32 * rank
        payload  raw array bytes
    checksum u32     crc32 over all payload bytes, in entry order

save -> load -> save is byte-identical; any corruption surfaces as a
distinct error rather than silently reinterpreted data.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ArchConfig, ModelParams
from .tensor import ParamSet, Tensor

MAGIC = b"DTTT"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays in sorted-name order (deterministic bytes)."""
    crc = 0
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        crc = zlib.crc32(payload, crc)
        chunks.append(payload)
    chunks.append(struct.pack("<I", crc & 0xFFFFFFFF))
    Path(path).write_bytes(b"".join(chunks))


def read_entries(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        out = view[pos : pos + n]
        pos += n
        return out

    if len(blob) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not a checkpoint file)")
    pos = 4
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    entries: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} in entry {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes)
        crc = zlib.crc32(payload, crc)
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    (stored_crc,) = struct.unpack("<I", take(4))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    if stored_crc != (crc & 0xFFFFFFFF):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return entries


# -- train-state adapters --------------------------------------------------------


def save_checkpoint(state, path) -> None:
    """Serialize a TrainState: parameters, Adam moments, counters."""
    entries: dict[str, np.ndarray] = {}
    params = state.params
    for prefix, pset in (
        ("shared", params.shared),
        ("primary", params.primary),
        ("auxiliary", params.auxiliary),
    ):
        for name, tensor in pset.items():
            entries[f"param/{prefix}/{name}"] = tensor.data
    for name, arr in state.adam_m.items():
        entries[f"adam_m/{name}"] = arr
    for name, arr in state.adam_v.items():
        entries[f"adam_v/{name}"] = arr
    entries["state/step"] = np.array([state.step], dtype=np.int64)
    entries["state/seed"] = np.array([state.seed], dtype=np.int64)
    entries["state/phase"] = np.array([state.phase], dtype=np.int64)
    write_entries(path, entries)


def load_checkpoint(path, arch: ArchConfig):
    """Rebuild a TrainState; shapes come from the stored entries."""
    from .meta import TrainState

    entries = read_entries(path)
    shared, primary, auxiliary = ParamSet(), ParamSet(), ParamSet()
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    step = seed = phase = 0
    for name, arr in entries.items():
        if name.startswith("param/"):
            _, prefix, pname = name.split("/", 2)
            target = {"shared": shared, "primary": primary, "auxiliary": auxiliary}[prefix]
            target[pname] = Tensor(arr, requires_grad=True)
        elif name.startswith("adam_m/"):
            adam_m[name.split("/", 1)[1]] = arr
        elif name.startswith("adam_v/"):
            adam_v[name.split("/", 1)[1]] = arr
        elif name == "state/step":
            step = int(arr[0])
        elif name == "state/seed":
            seed = int(arr[0])
        elif name == "state/phase":
            phase = int(arr[0])
        else:
            raise CheckpointError(f"{path}: unexpected entry {name!r}")
    params = ModelParams(shared, primary, auxiliary, arch)
    return TrainState(
        params=params, adam_m=adam_m, adam_v=adam_v, step=step, seed=seed, phase=phase
    )
