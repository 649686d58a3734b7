"""Bit-exact binary formats.

Tensor file (.rsft), all integers little-endian:

    bytes 0-3   magic "RSFT"
    byte  4     version (1)
    byte  5     dtype code: 1 = float32, 2 = float64
    byte  6     ndim
    byte  7     reserved (0)
    8 ..        ndim x u64 dims
    ..          payload: row-major scalars, little-endian

Weight bundle (.rsfw): a small fixed header, a canonical-JSON manifest, then
the named parameter tensors as concatenated tensor files. The manifest holds
the model config, seed, dtype, merged flag and a byte-offset table, so a
loader can rebuild the model structure and then map every parameter block.

    bytes 0-3   magic "RSFW"
    byte  4     version (1)
    byte  5     merged flag (0/1)
    bytes 6-7   reserved (0)
    bytes 8-11  u32 manifest length
    12 ..       manifest JSON (UTF-8, sorted keys, compact separators)
    ..          parameter blocks at the offsets listed in the manifest

Both formats round-trip bitwise. Density maps export to 16-bit binary PGM
(big-endian samples, per the PGM specification).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .density import DensityMap, PointAnnotations
from .errors import FormatError, ValidationError

TENSOR_MAGIC = b"RSFT"
BUNDLE_MAGIC = b"RSFW"
FORMAT_VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize an array to tensor-file bytes."""
    arr = np.asarray(array)
    code = _CODE_FOR_KIND.get(arr.dtype)
    if code is None:
        raise ValidationError(f"cannot serialize dtype {arr.dtype}; use float32/float64")
    if arr.ndim > 255:
        raise ValidationError("tensor rank exceeds format limit of 255")
    header = TENSOR_MAGIC + struct.pack("<BBBB", FORMAT_VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def tensor_from_bytes(data: bytes, base_offset: int = 0) -> np.ndarray:
    """Parse tensor-file bytes; FormatError carries the failing byte offset."""

    def fail(message: str, offset: int):
        raise FormatError(message, offset=base_offset + offset)

    if len(data) < 8:
        fail(f"truncated header: {len(data)} bytes", len(data))
    if data[:4] != TENSOR_MAGIC:
        fail(f"bad magic {data[:4]!r}", 0)
    version, code, ndim, reserved = struct.unpack("<BBBB", data[4:8])
    if version != FORMAT_VERSION:
        fail(f"unsupported version {version}", 4)
    if code not in _DTYPE_CODES:
        fail(f"unknown dtype code {code}", 5)
    if reserved != 0:
        fail(f"reserved byte is {reserved}", 7)
    dims_end = 8 + 8 * ndim
    if len(data) < dims_end:
        fail("truncated dimension table", len(data))
    dims = struct.unpack(f"<{ndim}Q", data[8:dims_end])
    dtype = _DTYPE_CODES[code]
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + count * dtype.itemsize
    if len(data) != expected:
        fail(f"payload length {len(data) - dims_end} != expected {count * dtype.itemsize}",
             min(len(data), dims_end))
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=dims_end)
    arr = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(dims)
    if not np.all(np.isfinite(arr)):
        fail("payload contains non-finite values", dims_end)
    return arr


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_bundle(path, meta: dict, params: list[tuple[str, np.ndarray]], merged: bool) -> None:
    """Write a weight bundle: `meta` is embedded verbatim in the manifest."""
    names = [name for name, _ in params]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate parameter names in bundle")
    blocks = []
    entries = []
    offset = 0
    for name, arr in params:
        block = tensor_bytes(arr)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(block),
            }
        )
        blocks.append(block)
        offset += len(block)
    manifest = dict(meta)
    manifest["format_version"] = FORMAT_VERSION
    manifest["merged"] = bool(merged)
    manifest["params"] = entries
    body = _canonical_json(manifest)
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<BBH", FORMAT_VERSION, int(merged), 0))
        fh.write(struct.pack("<I", len(body)))
        fh.write(body)
        for block in blocks:
            fh.write(block)


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a weight bundle; returns (manifest, name -> array)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError(f"truncated bundle header: {len(data)} bytes", offset=len(data))
    if data[:4] != BUNDLE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", offset=0)
    version, merged_flag, reserved = struct.unpack("<BBH", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if reserved != 0:
        raise FormatError(f"reserved bytes are {reserved}", offset=6)
    (manifest_len,) = struct.unpack("<I", data[8:12])
    body_end = 12 + manifest_len
    if len(data) < body_end:
        raise FormatError("truncated manifest", offset=len(data))
    try:
        manifest = json.loads(data[12:body_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", offset=12) from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("params"), list):
        raise FormatError("manifest missing parameter table", offset=12)
    if bool(manifest.get("merged")) != bool(merged_flag):
        raise FormatError("merged flag disagrees between header and manifest", offset=5)
    payload = data[body_end:]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        try:
            name = entry["name"]
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
            shape = tuple(int(d) for d in entry["shape"])
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed manifest entry: {exc}", offset=12) from None
        if offset < 0 or nbytes < 8 or offset + nbytes > len(payload):
            raise FormatError(
                f"parameter {name!r} block out of range", offset=body_end + max(offset, 0)
            )
        arr = tensor_from_bytes(payload[offset : offset + nbytes], base_offset=body_end + offset)
        if arr.shape != shape:
            raise FormatError(
                f"parameter {name!r} shape {arr.shape} != manifest {shape}",
                offset=body_end + offset,
            )
        if name in tensors:
            raise FormatError(f"duplicate parameter {name!r}", offset=body_end + offset)
        tensors[name] = arr
    return manifest, tensors


def load_annotations(path) -> PointAnnotations:
    """Read {"image", "width", "height", "points": [[x, y], ...]} JSON."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"annotation file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("annotation document must be a JSON object")
    for key in ("width", "height", "points"):
        if key not in doc:
            raise FormatError(f"annotation document missing {key!r}")
    width, height = doc["width"], doc["height"]
    if not isinstance(width, int) or not isinstance(height, int):
        raise FormatError("width and height must be integers")
    points = doc["points"]
    if not isinstance(points, list):
        raise FormatError("points must be a list of [x, y] pairs")
    for i, pt in enumerate(points):
        if (
            not isinstance(pt, (list, tuple))
            or len(pt) != 2
            or not all(isinstance(v, (int, float)) for v in pt)
        ):
            raise FormatError(f"point {i} is not an [x, y] number pair")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return PointAnnotations(width=width, height=height, points=pts)


def export_pgm(dm: DensityMap, path, scale: str | float = "auto") -> None:
    """Write a 16-bit binary PGM (P5) visualization of a density map.

    scale="auto" min-max scales to the full 16-bit range; a numeric scale
    divides values by that cap (clipping at 1).
    """
    values = dm.values
    if scale == "auto":
        top = float(values.max()) if values.size else 0.0
        norm = values / top if top > 0 else np.zeros_like(values)
    else:
        cap = float(scale)
        if cap <= 0:
            raise ValidationError(f"fixed scale must be positive, got {cap}")
        norm = np.clip(values / cap, 0.0, 1.0)
    quantized = np.round(norm * 65535.0).astype(">u2")
    header = f"P5\n{dm.w} {dm.h}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes())
