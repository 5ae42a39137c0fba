"""ZDC1 binary container.

Layout: one line of UTF-8 JSON (terminated by ``\\n``) holding
``{"magic", "version", "metadata", "arrays"}``, followed immediately by the
raw little-endian payloads of every array in descriptor order. Offsets in the
descriptors are relative to the first byte after the header newline.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = "ZDC1"
VERSION = 1
EXTENSION = ".zdc1"

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
}
_KIND_TO_NAME = {(dt.kind, dt.itemsize): name for name, dt in DTYPES.items()}


class ContainerError(Exception):
    pass


class BadMagic(ContainerError):
    pass


class VersionUnsupported(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


class MalformedHeader(ContainerError):
    pass


class UnsupportedDtype(ContainerError):
    pass


class DuplicateName(ContainerError):
    pass


@dataclass(frozen=True)
class ArrayDescriptor:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dtype": self.dtype,
            "shape": list(self.shape),
            "byte_offset": self.byte_offset,
            "byte_length": self.byte_length,
        }


@dataclass
class Container:
    metadata: dict[str, Any]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def format_kind(self) -> str | None:
        return self.metadata.get("format_kind")

    def descriptors(self) -> list[ArrayDescriptor]:
        return _describe(self.arrays)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Container):
            return NotImplemented
        if self.version != other.version or self.metadata != other.metadata:
            return False
        if list(self.arrays) != list(other.arrays):
            return False
        return all(
            _as_disk(self.arrays[k])[1].tobytes() == _as_disk(other.arrays[k])[1].tobytes()
            and self.arrays[k].shape == other.arrays[k].shape
            for k in self.arrays
        )


def dtype_name(arr: np.ndarray) -> str:
    try:
        return _KIND_TO_NAME[(arr.dtype.kind, arr.dtype.itemsize)]
    except KeyError:
        raise UnsupportedDtype(f"unsupported dtype {arr.dtype}") from None


def _as_disk(arr: np.ndarray) -> tuple[str, np.ndarray]:
    name = dtype_name(arr)
    return name, np.ascontiguousarray(arr, dtype=DTYPES[name])


def _describe(arrays: Mapping[str, np.ndarray]) -> list[ArrayDescriptor]:
    out = []
    offset = 0
    for name, arr in arrays.items():
        dname = dtype_name(arr)
        length = DTYPES[dname].itemsize * math.prod(arr.shape)
        out.append(ArrayDescriptor(name, dname, tuple(int(s) for s in arr.shape), offset, length))
        offset += length
    return out


def encode_container(metadata: Mapping[str, Any], arrays: Mapping[str, np.ndarray] | list) -> bytes:
    """Serialize to the on-disk byte string (deterministic for equal inputs)."""
    if isinstance(arrays, Mapping):
        items = list(arrays.items())
    else:
        items = list(arrays)
    seen: set[str] = set()
    for name, _ in items:
        if not isinstance(name, str) or not name:
            raise MalformedHeader(f"invalid array name {name!r}")
        if name in seen:
            raise DuplicateName(f"duplicate array name {name!r}")
        seen.add(name)
    ordered = {name: np.asarray(arr) for name, arr in items}
    descriptors = _describe(ordered)
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "metadata": dict(metadata),
        "arrays": [d.to_json() for d in descriptors],
    }
    try:
        line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"metadata is not JSON-serializable: {exc}") from exc
    if "\n" in line:
        raise MalformedHeader("header must be a single line")
    parts = [line.encode("utf-8"), b"\n"]
    parts.extend(_as_disk(arr)[1].tobytes() for arr in ordered.values())
    return b"".join(parts)


def write_container(path: str | os.PathLike, metadata: Mapping[str, Any], arrays) -> None:
    data = encode_container(metadata, arrays)
    Path(path).write_bytes(data)


def decode_container(data: bytes) -> Container:
    if data[:1] != b"{":
        if data[:4] != MAGIC.encode():
            raise BadMagic("file does not start with a ZDC1 header")
    newline = data.find(b"\n")
    if newline < 0:
        raise MalformedHeader("header line is not newline-terminated")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    if header.get("magic") != MAGIC:
        raise BadMagic(f"bad magic {header.get('magic')!r}")
    version = header.get("version")
    if version != VERSION:
        raise VersionUnsupported(f"unsupported container version {version!r}")
    metadata = header.get("metadata")
    descs = header.get("arrays")
    if not isinstance(metadata, dict) or not isinstance(descs, list):
        raise MalformedHeader("header needs object 'metadata' and list 'arrays'")

    payload = memoryview(data)[newline + 1 :]
    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for raw in descs:
        try:
            name = raw["name"]
            dname = raw["dtype"]
            shape = tuple(int(s) for s in raw["shape"])
            offset = int(raw["byte_offset"])
            length = int(raw["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeader(f"bad array descriptor {raw!r}") from exc
        if dname not in DTYPES:
            raise UnsupportedDtype(f"unsupported dtype {dname!r}")
        if name in arrays:
            raise DuplicateName(f"duplicate array name {name!r}")
        if any(s < 0 for s in shape):
            raise MalformedHeader(f"negative dimension in {name!r}")
        if length != DTYPES[dname].itemsize * math.prod(shape):
            raise MalformedHeader(f"byte_length of {name!r} disagrees with dtype and shape")
        if offset != expected_offset:
            raise MalformedHeader(f"array {name!r} is not contiguous with its predecessor")
        if offset + length > len(payload):
            raise TruncatedPayload(
                f"array {name!r} needs bytes [{offset}, {offset + length}) "
                f"but payload has {len(payload)}"
            )
        chunk = payload[offset : offset + length]
        arr = np.frombuffer(chunk, dtype=DTYPES[dname]).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        expected_offset = offset + length
    if expected_offset != len(payload):
        raise MalformedHeader(
            f"payload has {len(payload) - expected_offset} trailing bytes"
        )
    return Container(metadata=metadata, arrays=arrays, version=version)


def read_container(path: str | os.PathLike) -> Container:
    return decode_container(Path(path).read_bytes())
