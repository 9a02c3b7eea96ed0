"""Binary container for named float64 arrays plus a JSON manifest.

Layout::

    b"CONSLT1"                      7-byte magic
    uint64 little-endian            manifest length in bytes
    manifest                        UTF-8 JSON
    array payload                   raw little-endian float64, C order

The manifest holds ``{"arrays": [{"name", "shape", "offset"}], "meta": {...}}``
where ``offset`` counts bytes from the start of the payload. Loading a file
written by ``save_arrays`` reproduces every array bit for bit.
"""
import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"CONSLT1"
_LE_F64 = np.dtype("<f8")


def save_arrays(path, arrays, meta=None):
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())


def load_arrays(path):
    """Return ``(arrays, meta)`` with arrays in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint container (bad magic)", path)
    head = len(MAGIC) + 8
    if len(blob) < head:
        raise ParseError("truncated header", path)
    (mlen,) = struct.unpack("<Q", blob[len(MAGIC):head])
    try:
        manifest = json.loads(blob[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt manifest: {exc}", path) from None
    payload = memoryview(blob)[head + mlen:]
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * n
        if stop > len(payload):
            raise ParseError(f"array {e['name']!r} runs past end of file", path)
        arr = np.frombuffer(payload[start:stop], dtype=_LE_F64).astype(np.float64)
        arrays[e["name"]] = arr.reshape(shape)
    return arrays, manifest.get("meta", {})
