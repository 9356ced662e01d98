"""Bit-exact binary containers for rasters and parameter checkpoints.

Raster layout (all integers little-endian):

    offset  size  field
    0       4     magic "MRST"
    4       2     version, u16 = 1
    6       1     dtype code, u8: 0 = float32, 1 = uint8 labels
    7       1     reserved, u8 = 0
    8       4     c, u32
    12      4     h, u32
    16      4     w, u32
    20      n     payload, row-major c then h then w
    20+n    4     CRC32 of payload (zlib)

Checkpoints use the same framing with magic "MCKP": a u32-length JSON
manifest describing every entry (name, shape, dtype, role, flags) plus
run metadata, followed by the concatenated value and velocity payloads
and a trailing CRC32 of the whole payload block.  Loading either format
verifies sizes and checksums and reports the byte offset of any
truncation.  Writes go to a temporary file that is renamed into place.
"""

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import DataError
from .params import ParamStore

RASTER_MAGIC = b"MRST"
CKPT_MAGIC = b"MCKP"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

_HEADER = struct.Struct("<4sHBBIII")


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_raster(path, array):
    """Write a (c, h, w) float32 raster or (h, w)/(c, h, w) uint8 label
    map."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DataError(f"raster must be (c, h, w), got shape {a.shape}")
    if a.dtype == np.float64:
        a = a.astype(np.float32)
    if a.dtype not in _CODES:
        raise DataError(f"unsupported raster dtype {a.dtype}")
    payload = np.ascontiguousarray(a).tobytes()
    header = _HEADER.pack(RASTER_MAGIC, VERSION, _CODES[a.dtype], 0,
                          a.shape[0], a.shape[1], a.shape[2])
    crc = struct.pack("<I", zlib.crc32(payload))
    _atomic_write(path, header + payload + crc)


def load_raster(path):
    """Read a raster, verifying header, length and checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise DataError(
            f"{path}: truncated header, {len(blob)} bytes < {_HEADER.size}"
        )
    magic, version, code, _, c, h, w = _HEADER.unpack_from(blob)
    if magic != RASTER_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    n = c * h * w * dtype.itemsize
    end = _HEADER.size + n
    if len(blob) < end + 4:
        raise DataError(
            f"{path}: truncated at byte {len(blob)}, expected {end + 4} "
            f"for shape ({c}, {h}, {w})"
        )
    payload = blob[_HEADER.size:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) != crc:
        raise DataError(f"{path}: CRC mismatch, payload corrupt")
    return np.frombuffer(payload, dtype=dtype).reshape(c, h, w).copy()


def load_labels(path):
    """Read a single-band uint8 label raster as (h, w)."""
    a = load_raster(path)
    if a.dtype != np.uint8 or a.shape[0] != 1:
        raise DataError(
            f"{path}: expected a single-band uint8 label raster, got "
            f"{a.dtype} with shape {a.shape}"
        )
    return a[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, store: ParamStore, meta=None):
    """Serialize every parameter entry (values and velocities) plus a
    metadata dict; round-trips bit-exactly."""
    entries = []
    chunks = []
    for name, e in store.items():
        entries.append({
            "name": name,
            "shape": list(e.value.shape),
            "dtype": e.value.dtype.str,
            "trainable": e.trainable,
            "decay": e.decay,
            "role": e.role,
        })
        chunks.append(np.ascontiguousarray(e.value).tobytes())
        chunks.append(np.ascontiguousarray(e.velocity).tobytes())
    manifest = json.dumps(
        {"meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode()
    payload = b"".join(chunks)
    head = struct.pack("<4sHHI", CKPT_MAGIC, VERSION, 0, len(manifest))
    crc = struct.pack("<I", zlib.crc32(payload))
    _atomic_write(path, head + manifest + payload + crc)


def load_checkpoint(path):
    """Read a checkpoint.  Returns ``(store, meta)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header, {len(blob)} bytes < 12")
    magic, version, _, mlen = struct.unpack_from("<4sHHI", blob)
    if magic != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + mlen:
        raise DataError(f"{path}: truncated manifest at byte {len(blob)}")
    manifest = json.loads(blob[12:12 + mlen])
    store = ParamStore()
    pos = 12 + mlen
    for spec in manifest["entries"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) * dtype.itemsize
        if len(blob) < pos + 2 * n:
            raise DataError(
                f"{path}: truncated at byte {len(blob)}, entry "
                f"{spec['name']!r} needs through byte {pos + 2 * n}"
            )
        value = np.frombuffer(blob[pos:pos + n], dtype=dtype).reshape(shape).copy()
        velocity = np.frombuffer(blob[pos + n:pos + 2 * n],
                                 dtype=dtype).reshape(shape).copy()
        pos += 2 * n
        entry = store.add(spec["name"], value, trainable=spec["trainable"],
                          decay=spec["decay"], role=spec["role"])
        entry.velocity = velocity
    if len(blob) < pos + 4:
        raise DataError(f"{path}: truncated CRC at byte {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, pos)
    if zlib.crc32(blob[12 + mlen:pos]) != crc:
        raise DataError(f"{path}: CRC mismatch, payload corrupt")
    return store, manifest["meta"]
