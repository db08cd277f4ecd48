"""Flat binary checkpoint container.

Layout: 4-byte magic ``EXPX``, one version byte, then records to EOF.
Each record: u16 LE name length, UTF-8 name, u8 ndim, ndim u32 LE dims,
then the float32 LE payload.  Record names are namespaced by a known
section prefix so stale or foreign files fail loudly.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"EXPX"
VERSION = 1

# every record name must start with one of these
SECTION_PREFIXES = ("caee.", "modnet.", "teacher.", "adam.", "queue.", "state.", "meta.")


class CheckpointError(ValueError):
    """Bad magic, wrong version, truncation, or unknown record section."""


def _check_name(name: str):
    if not name.startswith(SECTION_PREFIXES):
        raise CheckpointError(
            f"record {name!r} has no known section prefix {SECTION_PREFIXES}")


def write_checkpoint(path, records: dict[str, np.ndarray]):
    """Serialize records; atomic via temp file + rename."""
    blobs = [MAGIC, bytes([VERSION])]
    for name, arr in records.items():
        _check_name(name)
        a = np.asarray(arr, dtype="<f4")   # tobytes() serializes C-order
        if a.ndim > 255:
            raise CheckpointError(f"record {name!r} has too many dimensions")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"record name too long: {name[:40]!r}…")
        blobs.append(struct.pack("<H", len(nb)))
        blobs.append(nb)
        blobs.append(bytes([a.ndim]))
        blobs.append(struct.pack(f"<{a.ndim}I", *a.shape))
        blobs.append(a.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(blobs))
    os.replace(tmp, path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 5:
        raise CheckpointError("truncated header")
    if data[4] != VERSION:
        raise CheckpointError(f"unsupported version {data[4]}, expected {VERSION}")

    records: dict[str, np.ndarray] = {}
    pos = 5
    n = len(data)

    def need(k, what):
        if pos + k > n:
            raise CheckpointError(f"truncated record ({what})")

    while pos < n:
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen, "name")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        _check_name(name)
        if name in records:
            raise CheckpointError(f"duplicate record {name!r}")
        need(1, "ndim")
        ndim = data[pos]
        pos += 1
        need(4 * ndim, "dims")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = 1
        for d in shape:
            count *= d
        need(4 * count, "payload")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        records[name] = arr.copy()
    return records
