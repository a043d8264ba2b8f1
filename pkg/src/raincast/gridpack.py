"""Flat binary containers for gridded fields and model checkpoints.

Layout shared by both container kinds:

    [8-byte little-endian unsigned header length]
    [UTF-8 JSON header]
    [raw little-endian payload]

Field files carry one variable as row-major float32. Checkpoint files carry
a list of named arrays (declared dtype each) concatenated in header order
plus an arbitrary JSON config block. Everything is little-endian regardless
of host byte order, so files move between machines unchanged.
"""
from __future__ import annotations

import json
import struct
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import GridPackError
from .grid import GridField

_LEN_FMT = "<Q"
_LEN_SIZE = 8
_MAX_HEADER = 64 * 1024 * 1024

_CKPT_DTYPES = {"<f4", "<f8", "<i8"}


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise GridPackError(f"truncated file: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def _read_header(fh) -> dict:
    raw_len = _read_exact(fh, _LEN_SIZE, "header length")
    (hlen,) = struct.unpack(_LEN_FMT, raw_len)
    if hlen == 0 or hlen > _MAX_HEADER:
        raise GridPackError(f"implausible header length {hlen}")
    raw = _read_exact(fh, hlen, "header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridPackError(f"corrupt header: {exc}") from exc
    if not isinstance(header, dict):
        raise GridPackError("corrupt header: not a JSON object")
    return header


def _write_with_header(path, header: dict, payload: bytes):
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_LEN_FMT, len(raw)))
        fh.write(raw)
        fh.write(payload)


def write_gridpack(field: GridField, path, extra: dict | None = None):
    """Write one field as float32. Values wider than float32 are narrowed."""
    header = {
        "format": "gridpack",
        "version": 1,
        "variable": field.name,
        "unit_tag": field.unit_tag,
        "shape": list(field.values.shape),
        "dim_names": list(field.dims),
        "lat0": field.lat0,
        "lon0": field.lon0,
        "dlat": field.dlat,
        "dlon": field.dlon,
        "timestamp": field.timestamp.isoformat() if field.timestamp else None,
    }
    if extra:
        header.update(extra)
    payload = np.ascontiguousarray(field.values, dtype="<f4").tobytes()
    _write_with_header(path, header, payload)


def read_gridpack(path) -> GridField:
    """Read a field file back; raises GridPackError on any malformation."""
    path = Path(path)
    if not path.exists():
        raise GridPackError(f"no such file: {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh)
        for key in ("format", "shape", "dim_names", "lat0", "lon0", "dlat", "dlon", "unit_tag"):
            if key not in header:
                raise GridPackError(f"corrupt header: missing {key!r}")
        if header["format"] != "gridpack":
            raise GridPackError(f"not a gridpack file (format={header['format']!r})")
        shape = tuple(int(n) for n in header["shape"])
        nbytes = int(np.prod(shape)) * 4
        payload = _read_exact(fh, nbytes, "payload")
        if fh.read(1):
            raise GridPackError("trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape)
    ts = header.get("timestamp")
    return GridField(
        values=values.copy(),
        dims=tuple(header["dim_names"]),
        lat0=float(header["lat0"]),
        lon0=float(header["lon0"]),
        dlat=float(header["dlat"]),
        dlon=float(header["dlon"]),
        unit_tag=header["unit_tag"],
        name=header.get("variable", ""),
        timestamp=datetime.fromisoformat(ts) if ts else None,
    )


def read_gridpack_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def save_checkpoint(path, arrays: dict, config: dict):
    """Write named arrays plus a JSON config block.

    Arrays keep their dtype (float32, float64, or int64) and are stored
    little-endian in header order, so the round trip is bit exact.
    """
    entries = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt.str not in _CKPT_DTYPES:
            raise GridPackError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        chunks.append(data)
    header = {"format": "raincast-ckpt", "version": 1, "config": config, "arrays": entries}
    _write_with_header(path, header, b"".join(chunks))


def load_checkpoint(path):
    """Read arrays and config back; returns (arrays dict, config dict)."""
    path = Path(path)
    if not path.exists():
        raise GridPackError(f"no such file: {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if header.get("format") != "raincast-ckpt":
            raise GridPackError("not a checkpoint file")
        arrays = {}
        for entry in header.get("arrays", []):
            shape = tuple(int(n) for n in entry["shape"])
            dt = np.dtype(entry["dtype"])
            nbytes = int(np.prod(shape)) * dt.itemsize
            buf = _read_exact(fh, nbytes, f"array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        if fh.read(1):
            raise GridPackError("trailing bytes after payload")
    return arrays, header.get("config", {})
