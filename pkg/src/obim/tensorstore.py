"""Bit-exact reading and writing of checkpoint containers.

Container layout: an 8-byte little-endian unsigned header size N, then N
bytes of UTF-8 JSON mapping tensor name to ``{"dtype", "shape",
"data_offsets"}``, then the raw little-endian tensor payloads. Offsets are
relative to the first byte after the header and must tile the payload
contiguously from 0 with no gaps or overlaps. ``F32`` and ``F16`` are the
only accepted dtypes; 16-bit floats are widened to 32-bit on read and never
written back narrowed. An optional ``__metadata__`` string-to-string object
in the header is preserved verbatim on round-trip.
"""
from __future__ import annotations

import json
import struct
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyMapError,
    MalformedHeaderError,
    MissingTensorError,
    NonFiniteError,
    OffsetError,
    ShapeMismatchError,
    UnsupportedDtypeError,
)
from .util import _FNV_OFFSET, fnv1a64

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}
_ENTRY_KEYS = {"dtype", "shape", "data_offsets"}


class TensorMap:
    """Immutable, name-keyed collection of float32 tensors.

    Iteration is lexicographic by name regardless of insertion order. The
    fingerprint is a 64-bit FNV-1a over the sorted names, shapes, and raw
    float32 data bytes; metadata does not participate.
    """

    def __init__(self, entries: Mapping[str, np.ndarray],
                 metadata: Mapping[str, str] | None = None):
        tensors: dict[str, np.ndarray] = {}
        for name in sorted(entries):
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            arr = np.array(entries[name], dtype=np.float32, order="C", copy=True)
            if arr.size == 0:
                raise ValueError(f"tensor '{name}' has zero elements")
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"tensor '{name}' contains non-finite elements")
            arr.flags.writeable = False
            tensors[name] = arr
        if metadata is not None:
            if not all(isinstance(k, str) and isinstance(v, str)
                       for k, v in metadata.items()):
                raise ValueError("metadata must map strings to strings")
        self._tensors = tensors
        self.metadata: dict[str, str] = dict(metadata or {})
        self._fingerprint: int | None = None

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.metadata != other.metadata or self.names() != other.names():
            return False
        return all(
            a.shape == other[name].shape and a.tobytes() == other[name].tobytes()
            for name, a in self.items()
        )

    @property
    def fingerprint(self) -> int:
        if self._fingerprint is None:
            h = _FNV_OFFSET
            for name, arr in self.items():
                h = fnv1a64(name.encode("utf-8") + b"\x00", h)
                h = fnv1a64(struct.pack("<Q", arr.ndim), h)
                h = fnv1a64(b"".join(struct.pack("<Q", s) for s in arr.shape), h)
                h = fnv1a64(arr.tobytes(), h)
            self._fingerprint = h
        return self._fingerprint

    @property
    def fingerprint_hex(self) -> str:
        return f"{self.fingerprint:016x}"

    def total_elements(self) -> int:
        return sum(arr.size for arr in self._tensors.values())


def read_checkpoint(path) -> TensorMap:
    """Load a checkpoint container, widening 16-bit floats to 32-bit.

    Raises MalformedHeaderError, OffsetError, UnsupportedDtypeError, or
    NonFiniteError on the corresponding container defects.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise MalformedHeaderError("file too short to hold a header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise MalformedHeaderError(
            f"declared header length {header_len} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"),
                            object_pairs_hook=_reject_duplicate_keys)
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, MalformedHeaderError):
            raise
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")

    metadata = header.pop("__metadata__", None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()):
            raise MalformedHeaderError("__metadata__ must map strings to strings")
    if not header:
        raise MalformedHeaderError("container lists no tensors")

    payload = raw[8 + header_len:]
    intervals: list[tuple[int, int, str]] = []
    for name, desc in header.items():
        if not isinstance(desc, dict) or set(desc) != _ENTRY_KEYS:
            raise MalformedHeaderError(
                f"tensor '{name}': entry must have exactly dtype/shape/data_offsets")
        dtype_tag = desc["dtype"]
        if dtype_tag not in _DTYPES:
            raise UnsupportedDtypeError(f"tensor '{name}': unsupported dtype {dtype_tag!r}")
        shape = desc["shape"]
        if not isinstance(shape, list) or not all(_is_int(s) and s >= 0 for s in shape):
            raise MalformedHeaderError(f"tensor '{name}': shape must be non-negative integers")
        count = 1
        for s in shape:
            count *= s
        if count == 0:
            raise MalformedHeaderError(f"tensor '{name}' has zero elements")
        offs = desc["data_offsets"]
        if not (isinstance(offs, list) and len(offs) == 2 and all(_is_int(o) for o in offs)):
            raise MalformedHeaderError(f"tensor '{name}': data_offsets must be [begin, end]")
        begin, end = offs
        nbytes = count * _DTYPES[dtype_tag].itemsize
        if begin < 0 or end < begin:
            raise OffsetError(f"tensor '{name}': invalid data_offsets [{begin}, {end}]")
        if end - begin != nbytes:
            raise OffsetError(
                f"tensor '{name}': data_offsets span {end - begin} bytes, "
                f"shape/dtype require {nbytes}")
        if end > len(payload):
            raise OffsetError(f"tensor '{name}': data_offsets extend past end of file")
        intervals.append((begin, end, name))

    intervals.sort()
    cursor = 0
    for begin, end, name in intervals:
        if begin < cursor:
            raise OffsetError(f"tensor '{name}' overlaps preceding data")
        if begin > cursor:
            raise OffsetError(f"gap in payload before tensor '{name}'")
        cursor = end
    if cursor != len(payload):
        raise OffsetError("payload has trailing bytes not covered by any tensor")

    entries: dict[str, np.ndarray] = {}
    for name, desc in header.items():
        dt = _DTYPES[desc["dtype"]]
        begin, end = desc["data_offsets"]
        arr = np.frombuffer(payload[begin:end], dtype=dt).reshape(desc["shape"])
        if dt.itemsize == 2:
            arr = arr.astype("<f4")
        entries[name] = arr
    return TensorMap(entries, metadata)


def write_checkpoint(tmap: TensorMap, path) -> None:
    """Serialize a TensorMap; header keys come out in lexicographic order.

    Round-trip is bit-exact: read_checkpoint(write_checkpoint(m)) reproduces
    the map, its metadata, and its fingerprint.
    """
    if len(tmap) == 0:
        raise EmptyMapError("refusing to write an empty checkpoint")
    header: dict = {}
    if tmap.metadata:
        header["__metadata__"] = dict(sorted(tmap.metadata.items()))
    offset = 0
    blobs: list[bytes] = []
    for name, arr in tmap.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        offset += len(data)
        blobs.append(data)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def validate_compat(maps: Sequence[TensorMap]) -> None:
    """Check that all maps share one tensor-name and shape universe.

    Models merged together must come from the same backbone, so their
    checkpoints must agree exactly on names and shapes.
    """
    if len(maps) < 2:
        raise ValueError("validate_compat needs at least two maps")
    ref = maps[0]
    ref_names = set(ref.names())
    for i, other in enumerate(maps[1:], start=1):
        names = set(other.names())
        if names != ref_names:
            diff = sorted(ref_names.symmetric_difference(names))
            raise MissingTensorError(
                f"maps 0 and {i} disagree on tensor names: {diff[:8]}")
        for name in ref.names():
            if ref[name].shape != other[name].shape:
                raise ShapeMismatchError(
                    f"tensor '{name}': shape {ref[name].shape} in map 0 "
                    f"vs {other[name].shape} in map {i}")


def _reject_duplicate_keys(pairs):
    seen = set()
    for key, _ in pairs:
        if key in seen:
            raise MalformedHeaderError(f"duplicate tensor name '{key}' in header")
        seen.add(key)
    return dict(pairs)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)
