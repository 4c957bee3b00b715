"""Binary tensor files and dataset manifests.

The tensor file format is the wire contract between the matching engine and
any offline feature exporter.  Byte layout (all integers little-endian):

==========  ========  =====================================================
offset      size      field
==========  ========  =====================================================
0           4         magic ``b"GLFT"``
4           2         format version (u16), currently 1
6           1         dtype code (u8), 0 = float32 little-endian
7           1         rank (u8), at most 6
8           4*rank    dims (u32 each), row-major payload order
...         4         metadata byte length (u32)
...         var       metadata, UTF-8 JSON object
...         4*prod    payload, float32 little-endian, row-major
==========  ========  =====================================================

Round-trips are bit-exact for every float32 payload, including NaN payloads
and signed zeros.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from aeroloc.errors import DataFormatError

MAGIC = b"GLFT"
VERSION = 1
DTYPE_FLOAT32 = 0
MAX_RANK = 6

_HEAD = struct.Struct("<4sHBB")


def write_tensor(path: str | Path, data: np.ndarray, metadata: dict | None = None) -> None:
    """Write ``data`` as a float32 tensor file at ``path``.

    ``data`` may be any real-valued array; it is converted to little-endian
    float32.  ``metadata`` must be JSON-serialisable.  Identical inputs
    produce byte-identical files.
    """
    arr = np.asarray(data)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_RANK:
        raise DataFormatError(f"tensor rank {arr.ndim} exceeds maximum {MAX_RANK}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")

    blob = bytearray()
    blob += _HEAD.pack(MAGIC, VERSION, DTYPE_FLOAT32, arr.ndim)
    blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += payload.tobytes()
    Path(path).write_bytes(bytes(blob))


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a tensor file, returning ``(data, metadata)``.

    ``data`` comes back as float32 with the stored dims; the payload bytes
    are preserved exactly.  Raises :class:`DataFormatError` on any header or
    length violation, reporting byte offsets for truncation.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise DataFormatError(
            f"{path}: file too short for header ({len(raw)} bytes < {_HEAD.size})"
        )
    magic, version, dtype, rank = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    if dtype != DTYPE_FLOAT32:
        raise DataFormatError(f"{path}: unsupported dtype code {dtype}")
    if rank > MAX_RANK:
        raise DataFormatError(f"{path}: rank {rank} exceeds maximum {MAX_RANK}")

    offset = _HEAD.size
    need = offset + 4 * rank + 4
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated header at byte {len(raw)}, need {need}")
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    (meta_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) < offset + meta_len:
        raise DataFormatError(
            f"{path}: truncated metadata at byte {len(raw)}, need {offset + meta_len}"
        )
    try:
        metadata = json.loads(raw[offset : offset + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: invalid metadata JSON: {exc}") from exc
    offset += meta_len

    count = 1
    for d in dims:
        count *= d
    expected = offset + 4 * count
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload length mismatch, file has {len(raw)} bytes, "
            f"expected {expected} (payload starts at byte {offset})"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
    return data.copy(), metadata


# ---------------------------------------------------------------------------
# Dataset manifests


def load_manifest(path: str | Path) -> dict:
    """Load and validate a dataset manifest.

    A manifest is a JSON object with a ``map`` entry (source dims, geo
    reference, tile parameters) and a ``frames`` list.  Frame ids must be
    unique and every frame must name an ``image`` or ``features`` path.
    Relative paths are resolved against the manifest's directory; existence
    is checked lazily by the consumer so a single broken file only fails its
    own frame.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: cannot read manifest: {exc}") from exc
    if not isinstance(doc, dict) or "frames" not in doc or "map" not in doc:
        raise DataFormatError(f"{path}: manifest must contain 'map' and 'frames'")

    map_entry = doc["map"]
    for key in ("width", "height", "georef"):
        if key not in map_entry:
            raise DataFormatError(f"{path}: map entry missing '{key}'")

    base = path.parent
    seen: set[str] = set()
    for frame in doc["frames"]:
        fid = frame.get("frame_id")
        if not fid:
            raise DataFormatError(f"{path}: frame without frame_id")
        if fid in seen:
            raise DataFormatError(f"{path}: duplicate frame_id {fid!r}")
        seen.add(fid)
        if "gt_lat" not in frame or "gt_lon" not in frame:
            raise DataFormatError(f"{path}: frame {fid} missing geo ground truth")
        if not frame.get("image") and not frame.get("features"):
            raise DataFormatError(f"{path}: frame {fid} has neither image nor features path")
        for key in ("image", "features"):
            if frame.get(key):
                frame[key] = str((base / frame[key]).resolve())
    if map_entry.get("path"):
        map_entry["path"] = str((base / map_entry["path"]).resolve())
    return doc


def save_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
