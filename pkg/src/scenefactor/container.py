"""Single-file binary container: header JSON + raw little-endian arrays.

Byte layout (all integers little-endian):

    bytes 0..7    magic (8 bytes, caller-chosen)
    bytes 8..11   format version, uint32
    bytes 12..19  header length in bytes, uint64
    ...           header: UTF-8 JSON object
    ...           array payloads, concatenated in order

The writer records each array's dtype, shape, byte length, and CRC32 under
the reserved header key ``__arrays__``; the reader uses that table to slice
and verify the payload. Dtypes are stored as explicit little-endian numpy
strings (e.g. "<f4"), so files are portable across machines.
"""

import json
import struct
import zlib

import numpy as np


class ContainerError(Exception):
    """Base class for container read/write failures."""


class BadHeaderError(ContainerError):
    """Magic bytes or header JSON are invalid."""


class VersionError(ContainerError):
    """The file's format version is not supported."""


class TruncatedFileError(ContainerError):
    """The file ends before its declared payload does."""


class ChecksumError(ContainerError):
    """An array's stored CRC32 does not match its bytes."""


_PREFIX = struct.Struct("<8sIQ")


def _le_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    return dt.str


def write_container(path: str, magic: bytes, version: int, header: dict,
                    arrays: list) -> list:
    """Write header + arrays; returns the per-array descriptor manifest."""
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    manifest = []
    payloads = []
    for arr in arrays:
        arr = np.asarray(arr)
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({
            "dtype": _le_dtype(arr),
            "shape": shape,
            "nbytes": len(data),
            "crc32": zlib.crc32(data) & 0xFFFFFFFF,
        })
        payloads.append(data)
    full_header = dict(header)
    full_header["__arrays__"] = manifest
    header_bytes = json.dumps(full_header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(header_bytes)))
        fh.write(header_bytes)
        for data in payloads:
            fh.write(data)
    return manifest


def read_container(path: str, magic: bytes, supported_versions=(1,),
                   verify_checksums: bool = True):
    """Read and verify a container; returns (version, header, arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed prefix")
    got_magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if got_magic != magic:
        raise BadHeaderError(f"{path}: bad magic bytes {got_magic!r}")
    if version not in supported_versions:
        raise VersionError(f"{path}: version {version} not in {tuple(supported_versions)}")
    header_end = _PREFIX.size + header_len
    if len(blob) < header_end:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(blob[_PREFIX.size:header_end].decode("utf-8"))
        manifest = header["__arrays__"]
    except (ValueError, KeyError) as exc:
        raise BadHeaderError(f"{path}: unparsable header ({exc})") from exc

    arrays = []
    offset = header_end
    for i, entry in enumerate(manifest):
        end = offset + entry["nbytes"]
        if len(blob) < end:
            raise TruncatedFileError(f"{path}: array {i} truncated")
        data = blob[offset:end]
        if verify_checksums and (zlib.crc32(data) & 0xFFFFFFFF) != entry["crc32"]:
            raise ChecksumError(f"{path}: array {i} fails its CRC32 check")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]))
        arrays.append(arr.reshape(entry["shape"]).copy())
        offset = end
    if offset != len(blob):
        raise BadHeaderError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return version, header, arrays
