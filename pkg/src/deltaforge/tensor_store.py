"""Tensor-file container: bit-exact reading and writing of checkpoints.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of JSON
(tensor name -> dtype/shape/data_offsets, plus an optional ``__metadata__``
string map), then the concatenated row-major tensor buffer.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import IoFailure, MalformedHeader, OffsetOverlap, UnsupportedDtype

# dtype name -> (file tag, storage numpy dtype). bf16 is kept as raw uint16 words.
DTYPES = {
    "fp32": ("F32", np.dtype("<f4")),
    "fp16": ("F16", np.dtype("<f2")),
    "bf16": ("BF16", np.dtype("<u2")),
    "u8": ("U8", np.dtype("u1")),
}
_FROM_TAG = {tag: name for name, (tag, _) in DTYPES.items()}
FLOAT_DTYPES = ("fp32", "fp16", "bf16")

FP16_MAX = float(np.finfo(np.float16).max)  # 65504.0
BF16_MAX = float(np.array([0x7F7F0000], dtype=np.uint32).view(np.float32)[0])

METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8


def itemsize(dtype: str) -> int:
    return DTYPES[dtype][1].itemsize


@dataclass(eq=False)
class Tensor:
    """A dense row-major tensor. ``data`` holds the storage representation."""

    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise UnsupportedDtype(f"unsupported dtype {self.dtype!r}")
        storage = DTYPES[self.dtype][1]
        if self.data.dtype != storage:
            raise UnsupportedDtype(
                f"{self.dtype} tensor needs {storage} storage, got {self.data.dtype}"
            )
        if self.data.ndim < 1:
            raise ValueError("tensors must have rank >= 1")
        self.data = np.ascontiguousarray(self.data)

    @classmethod
    def from_array(cls, array, dtype: str | None = None) -> "Tensor":
        """Wrap a numpy array, casting floats to ``dtype`` (default fp32)."""
        arr = np.asarray(array)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if dtype is None:
            dtype = "u8" if arr.dtype == np.uint8 else "fp32"
        if dtype == "u8":
            return cls("u8", arr.astype(np.uint8))
        return cls(dtype, _encode(arr.astype(np.float32), dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def to_float32(self) -> np.ndarray:
        if self.dtype == "u8":
            raise UnsupportedDtype("u8 tensors carry packed bits, not numbers")
        return _decode(self.data, self.dtype)

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor(dtype={self.dtype}, shape={list(self.shape)})"


@dataclass(eq=False)
class ModelCheckpoint:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            list(self.tensors) == list(other.tensors)
            and all(self.tensors[k] == other.tensors[k] for k in self.tensors)
            and self.metadata == other.metadata
        )

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())

    def digest(self) -> str:
        return checkpoint_digest(self)


def checkpoint_digest(ckpt: ModelCheckpoint) -> str:
    """sha256 over names, dtypes, shapes and raw bytes; metadata is ignored."""
    h = hashlib.sha256()
    for name, t in ckpt.tensors.items():
        h.update(name.encode("utf-8") + b"\0")
        h.update(f"{t.dtype}:{','.join(map(str, t.shape))}\0".encode())
        h.update(t.tobytes())
    return h.hexdigest()


# --- casting -----------------------------------------------------------------


def _encode(x: np.ndarray, dtype: str) -> np.ndarray:
    """fp32 values -> storage representation, round-to-nearest-even, saturating."""
    if dtype == "fp32":
        return x.astype("<f4")
    if dtype == "fp16":
        # clip keeps NaN and maps overflow (incl. inf) to the largest finite value
        return np.clip(x, -FP16_MAX, FP16_MAX).astype("<f2")
    if dtype == "bf16":
        clipped = np.clip(x, -BF16_MAX, BF16_MAX).astype(np.float32)
        bits = clipped.view(np.uint32).astype(np.uint64)
        rounded = ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16).astype(np.uint16)
        nan = np.isnan(clipped)
        if nan.any():
            rounded[nan] = ((bits[nan] >> 16).astype(np.uint16) & 0x8000) | 0x7FC0
        return rounded.astype("<u2")
    raise UnsupportedDtype(f"cannot encode floats as {dtype}")


def _decode(data: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "fp32":
        return data.astype(np.float32)
    if dtype == "fp16":
        return data.astype(np.float32)
    if dtype == "bf16":
        return (data.astype(np.uint32) << 16).view(np.float32)
    raise UnsupportedDtype(f"cannot decode {dtype} as floats")


def cast(t: Tensor, dtype: str) -> Tensor:
    """Convert between float dtypes with round-to-nearest-even and saturation."""
    if t.dtype not in FLOAT_DTYPES:
        raise UnsupportedDtype(f"cannot cast from {t.dtype}")
    if dtype not in FLOAT_DTYPES:
        raise UnsupportedDtype(f"cannot cast to {dtype}")
    if dtype == t.dtype:
        return Tensor(dtype, t.data.copy())
    return Tensor(dtype, _encode(t.to_float32(), dtype))


# --- file format -------------------------------------------------------------


def serialize(ckpt: ModelCheckpoint) -> bytes:
    header: dict = {}
    if ckpt.metadata:
        for k, v in ckpt.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise MalformedHeader("metadata must map strings to strings")
        header[METADATA_KEY] = dict(ckpt.metadata)
    offset = 0
    for name, t in ckpt.tensors.items():
        if not isinstance(name, str) or not name or name == METADATA_KEY:
            raise MalformedHeader(f"invalid tensor name {name!r}")
        header[name] = {
            "dtype": DTYPES[t.dtype][0],
            "shape": list(t.shape),
            "data_offsets": [offset, offset + t.nbytes],
        }
        offset += t.nbytes
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    blob += b" " * ((-len(blob)) % _HEADER_ALIGN)
    parts = [struct.pack("<Q", len(blob)), blob]
    parts.extend(t.tobytes() for t in ckpt.tensors.values())
    return b"".join(parts)


def deserialize(raw: bytes) -> ModelCheckpoint:
    if len(raw) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length field")
    (n,) = struct.unpack("<Q", raw[:8])
    if n > len(raw) - 8:
        raise MalformedHeader(f"header length {n} points past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    buffer = memoryview(raw)[8 + n :]
    entries = []
    for name, info in header.items():
        if not name:
            raise MalformedHeader("empty tensor name")
        try:
            tag, shape, (begin, end) = info["dtype"], info["shape"], info["data_offsets"]
        except (KeyError, TypeError, ValueError):
            raise MalformedHeader(f"bad header entry for {name!r}") from None
        if tag not in _FROM_TAG:
            raise UnsupportedDtype(f"{name!r}: unsupported dtype {tag!r}")
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(d, int) and d >= 0 for d in shape)
        ):
            raise MalformedHeader(f"{name!r}: shape must be a non-empty list of extents")
        if not all(isinstance(o, int) for o in (begin, end)) or not 0 <= begin <= end:
            raise MalformedHeader(f"{name!r}: bad data_offsets {info['data_offsets']}")
        dtype = _FROM_TAG[tag]
        if end - begin != math.prod(shape) * itemsize(dtype):
            raise MalformedHeader(f"{name!r}: data_offsets disagree with shape and dtype")
        entries.append((name, dtype, shape, begin, end))

    prev_end = 0
    for name, _, _, begin, end in sorted(entries, key=lambda e: (e[3], e[4])):
        if begin < prev_end:
            raise OffsetOverlap(f"{name!r} overlaps a preceding tensor")
        if end > len(buffer):
            raise OffsetOverlap(f"{name!r} extends past end of file")
        prev_end = end
    declared = sum(e[4] - e[3] for e in entries)
    if declared != len(buffer):
        raise MalformedHeader(
            f"payload is {len(buffer)} bytes but tensors declare {declared}"
        )

    tensors = {}
    for name, dtype, shape, begin, end in entries:
        arr = np.frombuffer(buffer[begin:end], dtype=DTYPES[dtype][1]).reshape(shape)
        tensors[name] = Tensor(dtype, arr.copy())
    return ModelCheckpoint(tensors, dict(metadata))


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from None
    return deserialize(raw)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Serialize atomically: write a sibling temp file, then rename over ``path``."""
    payload = serialize(ckpt)
    atomic_write_bytes(path, payload)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from None
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def from_arrays(arrays: Mapping[str, np.ndarray], dtype: str = "fp32", metadata=None) -> ModelCheckpoint:
    return ModelCheckpoint(
        {name: Tensor.from_array(a, dtype) for name, a in arrays.items()},
        dict(metadata or {}),
    )
