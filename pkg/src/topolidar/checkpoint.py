"""Binary containers for named float64 tensors.

Layout (all integers little-endian):

    magic    4 bytes, b"TLDM" for checkpoints, b"TLRI" for image dumps
    version  u32
    count    u32
    then per tensor, in insertion order:
        name_len  u32
        name      UTF-8 bytes
        rank      u32
        dims      rank x u64
        payload   prod(dims) x f64 (little-endian, C order)

Checkpoints are plain dicts of arrays; model/optimizer code decides what
the names mean. Readers reject wrong magic and unknown versions.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError, VersionError

MAGIC_CHECKPOINT = b"TLDM"
MAGIC_IMAGE = b"TLRI"
FORMAT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], magic: bytes = MAGIC_CHECKPOINT) -> None:
    chunks = [magic, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arrlike in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() below emits C order either way
        arr = np.asarray(arrlike, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path, magic: bytes = MAGIC_CHECKPOINT) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != magic:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
            pos += 8 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = blob[pos:pos + 8 * n]
            if len(payload) != 8 * n:
                raise struct.error("payload short")
            pos += 8 * n
        except (struct.error, UnicodeDecodeError) as exc:
            raise DataFormatError(f"{path}: corrupt tensor record: {exc}") from None
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if pos != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - pos} trailing bytes after last record")
    return out
