"""Dataset serialization: lossless single-file storage of video sequences.

File = container (see ``container.py``) with magic ``b"SCNEVID\\x00"``. The
header stores the shared (T, H, W), presence flags for masks/camera, the
per-scene spec echoes, and the per-array CRC32 manifest written at save time.
Per scene the payload holds frames (<f4), then masks (<u1) and camera (<f4)
when present — so every scene's checksums can be re-verified independently.
"""

import numpy as np

from .container import (BadHeaderError, ChecksumError, ContainerError,
                        TruncatedFileError, VersionError, read_container,
                        write_container)
from .synth import VideoSequence

MAGIC = b"SCNEVID\x00"
VERSION = 1


class ShapeMismatchError(ContainerError):
    """Sequences disagree on shape or ground-truth presence."""


def write_dataset(sequences: list, path: str) -> list:
    """Write sequences to ``path``; returns the checksum manifest."""
    if not sequences:
        raise ValueError("refusing to write an empty dataset")
    first = sequences[0]
    t, h, w = first.shape
    has_masks = first.masks is not None
    has_camera = first.camera is not None
    arrays = []
    metas = []
    for i, seq in enumerate(sequences):
        if seq.shape != (t, h, w):
            raise ShapeMismatchError(f"sequence {i} shape {seq.shape} != {(t, h, w)}")
        if (seq.masks is not None) != has_masks or (seq.camera is not None) != has_camera:
            raise ShapeMismatchError(f"sequence {i} ground-truth presence differs from sequence 0")
        frames = np.asarray(seq.frames, dtype=np.float32)
        if frames.shape != (t, h, w, 3):
            raise ShapeMismatchError(f"sequence {i} frames shape {frames.shape}")
        arrays.append(frames)
        if has_masks:
            masks = np.asarray(seq.masks, dtype=np.uint8)
            if masks.shape != (t, h, w):
                raise ShapeMismatchError(f"sequence {i} masks shape {masks.shape}")
            arrays.append(masks)
        if has_camera:
            camera = np.asarray(seq.camera, dtype=np.float32)
            if camera.shape != (t, 2):
                raise ShapeMismatchError(f"sequence {i} camera shape {camera.shape}")
            arrays.append(camera)
        metas.append(seq.meta)
    header = {
        "kind": "video_dataset",
        "num_sequences": len(sequences),
        "frames": t, "height": h, "width": w,
        "has_masks": has_masks, "has_camera": has_camera,
        "metas": metas,
    }
    return write_container(path, MAGIC, VERSION, header, arrays)


def read_dataset(path: str, verify_checksums: bool = True) -> list:
    """Read a dataset file back into VideoSequence objects (bit-exact)."""
    _, header, arrays = read_container(path, MAGIC, (VERSION,),
                                       verify_checksums=verify_checksums)
    try:
        n = header["num_sequences"]
        t, h, w = header["frames"], header["height"], header["width"]
        has_masks, has_camera = header["has_masks"], header["has_camera"]
        metas = header["metas"]
    except KeyError as exc:
        raise BadHeaderError(f"{path}: missing header field {exc}") from exc
    per_seq = 1 + int(has_masks) + int(has_camera)
    if len(arrays) != n * per_seq:
        raise ShapeMismatchError(
            f"{path}: header promises {n * per_seq} arrays, payload has {len(arrays)}")
    sequences = []
    cursor = 0
    for i in range(n):
        frames = arrays[cursor]; cursor += 1
        if frames.shape != (t, h, w, 3):
            raise ShapeMismatchError(f"{path}: sequence {i} frames shape {frames.shape}")
        masks = camera = None
        if has_masks:
            masks = arrays[cursor]; cursor += 1
            if masks.shape != (t, h, w):
                raise ShapeMismatchError(f"{path}: sequence {i} masks shape {masks.shape}")
        if has_camera:
            camera = arrays[cursor]; cursor += 1
            if camera.shape != (t, 2):
                raise ShapeMismatchError(f"{path}: sequence {i} camera shape {camera.shape}")
        sequences.append(VideoSequence(frames=frames, masks=masks, camera=camera,
                                       meta=metas[i]))
    return sequences


def read_manifest(path: str) -> list:
    """Return the checksum manifest stored in a dataset file (no verification)."""
    _, header, _ = read_container(path, MAGIC, (VERSION,), verify_checksums=False)
    return header["__arrays__"]


__all__ = [
    "MAGIC", "VERSION", "write_dataset", "read_dataset", "read_manifest",
    "ContainerError", "BadHeaderError", "VersionError", "TruncatedFileError",
    "ChecksumError", "ShapeMismatchError",
]
