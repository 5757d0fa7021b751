"""``.acet`` tensor files and the model manifest.

Layout::

    b"ACE1" | header_len (u64, little-endian) | header (UTF-8 JSON) | payload

The header maps each tensor name to ``{"dtype", "shape", "offset",
"nbytes"}``. Tensors are laid out in sorted-name order with no gaps, and the
JSON is canonical (sorted keys, no whitespace), so writing the same tensors
twice gives identical bytes. Top-level header values that are not tensor
entries (e.g. ``"pattern"`` on mask files) are metadata and are ignored by
:func:`read_tensors`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"ACE1"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}
_PREFIX = len(MAGIC) + 8


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class MalformedHeaderError(ContainerError):
    pass


class OverlappingTensorsError(ContainerError):
    pass


class NameCollisionError(ContainerError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _is_tensor_entry(value: Any) -> bool:
    return isinstance(value, dict) and {"dtype", "shape", "offset", "nbytes"} <= value.keys()


def encode_tensors(
    tensors: Mapping[str, Any],
    dtype: str | Mapping[str, str] = "f64",
    metadata: Mapping[str, Any] | None = None,
) -> bytes:
    """Serialize tensors to the in-memory file image.

    ``dtype`` is either one storage dtype for all tensors or a per-name map.
    f32 storage rounds float64 values to nearest, ties to even.
    """
    if not tensors:
        raise ContainerError("refusing to write an empty tensor map")
    metadata = dict(metadata or {})
    header: dict[str, Any] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if not name:
            raise ContainerError("tensor names must be non-empty")
        if name in metadata:
            raise NameCollisionError(f"tensor name {name!r} collides with a metadata key")
        code = dtype if isinstance(dtype, str) else dtype.get(name, "f64")
        if code not in DTYPES:
            raise ContainerError(f"unsupported storage dtype {code!r}")
        arr = np.asarray(tensors[name])
        if code == "u8":
            if arr.dtype != np.bool_ and np.any((arr < 0) | (arr > 255) | (arr != np.round(arr))):
                raise ContainerError(f"tensor {name!r} does not fit in u8")
        elif not np.all(np.isfinite(arr)):
            raise ContainerError(f"tensor {name!r} has non-finite values")
        raw = np.ascontiguousarray(arr.astype(DTYPES[code])).tobytes()
        header[name] = {"dtype": code, "shape": [int(s) for s in arr.shape], "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header.update(metadata)
    head = canonical_json(header)
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def write_tensors(
    path: str | os.PathLike,
    tensors: Mapping[str, Any],
    dtype: str | Mapping[str, str] = "f64",
    metadata: Mapping[str, Any] | None = None,
) -> None:
    blob = encode_tensors(tensors, dtype, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> dict[str, Any]:
    """Parse and validate the header, returning it with payload bounds checked."""
    header, _, _ = _open_checked(path)
    return header


def _open_checked(path):
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX)
        if len(prefix) < len(MAGIC) or prefix[: len(MAGIC)] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {prefix[:4]!r}, expected {MAGIC!r}")
        if len(prefix) < _PREFIX:
            raise TruncatedFileError(f"{path}: file ends inside the header length field")
        (header_len,) = struct.unpack("<Q", prefix[len(MAGIC):])
        if header_len > size - _PREFIX:
            raise TruncatedFileError(f"{path}: header_len {header_len} exceeds file size {size}")
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedHeaderError(f"{path}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")

    entries = sorted(
        ((name, v) for name, v in header.items() if _is_tensor_entry(v)),
        key=lambda kv: kv[1]["offset"],
    )
    end = 0
    for name, e in entries:
        code = e["dtype"]
        if code not in DTYPES:
            raise MalformedHeaderError(f"{path}: tensor {name!r} has unknown dtype {code!r}")
        shape, off, nbytes = e["shape"], e["offset"], e["nbytes"]
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise MalformedHeaderError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        if not (isinstance(off, int) and isinstance(nbytes, int) and off >= 0 and nbytes >= 0):
            raise MalformedHeaderError(f"{path}: tensor {name!r} has invalid offset/nbytes")
        if int(np.prod(shape, dtype=np.int64)) * DTYPES[code].itemsize != nbytes:
            raise MalformedHeaderError(f"{path}: tensor {name!r} nbytes {nbytes} disagrees with shape {shape}")
        if off < end:
            raise OverlappingTensorsError(f"{path}: tensor {name!r} at offset {off} overlaps previous range ending at {end}")
        end = off + nbytes
    payload_len = size - _PREFIX - header_len
    declared = sum(e["nbytes"] for _, e in entries)
    if end > payload_len or declared > payload_len:
        raise TruncatedFileError(f"{path}: payload holds {payload_len} bytes, header declares {max(end, declared)}")
    if declared != payload_len:
        raise MalformedHeaderError(f"{path}: payload length {payload_len} != sum of nbytes {declared}")
    return header, entries, _PREFIX + header_len


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load every tensor. Floats come back as float64, masks as uint8."""
    _, entries, start = _open_checked(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        for name, e in entries:
            f.seek(start + e["offset"])
            raw = f.read(e["nbytes"])
            if len(raw) != e["nbytes"]:
                raise TruncatedFileError(f"{path}: short read for tensor {name!r}")
            arr = np.frombuffer(raw, dtype=DTYPES[e["dtype"]]).reshape(e["shape"])
            out[name] = arr.astype(np.float64) if e["dtype"] != "u8" else arr.copy()
    return out


def tensor_dtypes(path: str | os.PathLike) -> dict[str, str]:
    return {name: e["dtype"] for name, e in read_header(path).items() if _is_tensor_entry(e)}


@dataclass
class ModelManifest:
    vocab_size: int = 259
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    context_len: int = 128
    layer_names: list[str] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        for key in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "context_len"):
            if getattr(self, key) < 1:
                raise ValueError(f"manifest field {key} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_json(self) -> bytes:
        return canonical_json(asdict(self))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelManifest":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        m = cls(**known)
        m.validate()
        return m


def write_manifest(path: str | os.PathLike, manifest: ModelManifest) -> None:
    manifest.validate()
    Path(path).write_bytes(manifest.to_json())


def read_manifest(path: str | os.PathLike) -> ModelManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: manifest is not valid JSON: {exc}") from None
    return ModelManifest.from_dict(data)
