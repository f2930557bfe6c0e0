"""FPGX checkpoint container.

Byte layout (all integers little-endian)::

    0       4   magic  b"FPGX"
    4       4   u32    format version (1)
    8       8   u64    header length N
    16      N   UTF-8 JSON header: config, meta, tensor table
    16+N    *   payload: raw little-endian tensors, back to back

Each tensor-table entry gives ``name, dtype, shape, offset, length`` with
``offset`` relative to the payload start. Offsets must tile the payload
exactly: no gaps, no overlap, and the file ends where the payload ends.
"""

import json
import os
import struct
import tempfile

import numpy as np

from . import __version__
from .errors import BadMagic, CorruptTable, ShapeMismatch, StructureError, VersionMismatch
from .transformer import ModelConfig, ModelParams

MAGIC = b"FPGX"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temp file and rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(params, meta=None):
    meta = dict(meta or {})
    meta.setdefault("tool_version", __version__)
    table = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise StructureError(f"{name}: unsupported dtype {dt}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": params.config.to_dict(), "meta": meta, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(params, meta, path):
    atomic_write(path, encode_checkpoint(params, meta))


def decode_checkpoint(blob):
    if len(blob) < _PREFIX.size:
        raise CorruptTable("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if start > len(blob):
        raise CorruptTable("header runs past end of file")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        table = header["tensors"]
        config = ModelConfig.from_dict(header["config"])
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError, StructureError) as e:
        raise CorruptTable(f"unreadable header: {e}") from e
    payload_len = len(blob) - start
    expected = 0
    for entry in sorted(table, key=lambda e: e["offset"]):
        if entry["offset"] != expected:
            raise CorruptTable(f"{entry['name']}: offset {entry['offset']} leaves a gap or overlaps (expected {expected})")
        if entry["dtype"] not in _DTYPES:
            raise CorruptTable(f"{entry['name']}: unknown dtype {entry['dtype']}")
        size = int(np.prod(entry["shape"])) * np.dtype(_DTYPES[entry["dtype"]]).itemsize
        if entry["length"] != size:
            raise CorruptTable(f"{entry['name']}: length {entry['length']} != shape size {size}")
        expected += entry["length"]
    if expected != payload_len:
        raise CorruptTable(f"payload is {payload_len} bytes, table describes {expected}")
    _check_lineage(config, meta)
    shapes = config.shapes()
    names = [e["name"] for e in table]
    if sorted(names) != sorted(shapes):
        raise ShapeMismatch("tensor names do not match the embedded config")
    tensors = {}
    for entry in table:
        if tuple(entry["shape"]) != shapes[entry["name"]]:
            raise ShapeMismatch(f"{entry['name']}: shape {tuple(entry['shape'])} != config {shapes[entry['name']]}")
        a = start + entry["offset"]
        arr = np.frombuffer(blob, dtype=_DTYPES[entry["dtype"]], count=int(np.prod(entry["shape"])), offset=a)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return ModelParams(config, {n: tensors[n] for n in shapes}), meta


def _check_lineage(config, meta):
    lineage = meta.get("lineage") or []
    prev = None
    for i, ev in enumerate(lineage):
        before, after = list(ev["mlp_dims_before"]), list(ev["mlp_dims_after"])
        if prev is not None and before != prev:
            raise ShapeMismatch(f"lineage entry {i} does not continue from entry {i - 1}")
        plan = ev["plan"]
        layers = range(len(before)) if plan["layers"] == "all" else plan["layers"]
        want = list(before)
        for n in layers:
            want[n] = before[n] * plan["k"]
        if want != after:
            raise ShapeMismatch(f"lineage entry {i}: dims {after} do not follow from plan")
        prev = after
    if prev is not None and list(config.mlp_dims) != prev:
        raise ShapeMismatch(f"config mlp_dims {list(config.mlp_dims)} disagree with lineage {prev}")


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    return decode_checkpoint(blob)
