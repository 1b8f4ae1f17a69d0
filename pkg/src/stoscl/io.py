"""Persistence: binary snapshots, CSV tables and run manifests.

Snapshot layout (little endian)::

    b"TSCL" | version u8 | N u8 | M u32 | count u32 | times f64[count] | values f64[count * M**N]
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, IntegrityError

__all__ = [
    "MAGIC",
    "VERSION",
    "write_snapshots",
    "read_snapshots",
    "write_csv",
    "read_csv",
    "file_hash",
    "Manifest",
]

MAGIC = b"TSCL"
VERSION = 1
_HEADER = struct.Struct("<4sBBII")


def write_snapshots(path, times, values, N: int, M: int) -> None:
    """Write ``values`` of shape ``(count, M, ..., M)`` with their ``times``."""
    values = np.asarray(values, dtype="<f8")
    times = np.asarray(times, dtype="<f8")
    count = len(times)
    if values.shape != (count,) + (M,) * N:
        raise ArgumentError("snapshot array shape does not match (count, M^N)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, N, M, count))
        fh.write(times.tobytes())
        fh.write(values.tobytes())


def read_snapshots(path):
    """Return ``(times, values, N, M)``; raises ``IntegrityError`` on a malformed file."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, N, M, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a snapshot file")
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported snapshot version {version}")
    n_vals = count * M**N
    expect = _HEADER.size + 8 * (count + n_vals)
    if len(data) != expect:
        raise IntegrityError(f"{path}: size {len(data)} does not match header ({expect})")
    off = _HEADER.size
    times = np.frombuffer(data, "<f8", count, off).copy()
    values = np.frombuffer(data, "<f8", n_vals, off + 8 * count).reshape((count,) + (M,) * N).copy()
    return times, values, N, M


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


@dataclass
class Manifest:
    """Run record; ``files`` maps every emitted file (except the manifest) to its sha256."""

    run_id: str
    tool_version: str
    command: str
    config: dict
    seed_root: int
    started: str = ""
    finished: str = ""
    paths: list = field(default_factory=list)
    files: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    NAME = "manifest.json"

    def hash_outputs(self, outdir) -> None:
        outdir = Path(outdir)
        self.files = {
            p.name: file_hash(p)
            for p in sorted(outdir.iterdir())
            if p.is_file() and p.name != self.NAME
        }

    def write(self, outdir) -> Path:
        path = Path(outdir) / self.NAME
        body = {k: v for k, v in self.__dict__.items()}
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default))
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, outdir) -> "Manifest":
        path = Path(outdir) / cls.NAME
        if not path.exists():
            raise ArgumentError(f"{outdir}: no {cls.NAME}; is this a run directory?")
        return cls(**json.loads(path.read_text()))

    def verify(self, outdir) -> list:
        """Names of files whose hash differs or that are missing or unlisted."""
        outdir = Path(outdir)
        present = {p.name for p in outdir.iterdir() if p.is_file() and p.name != self.NAME}
        bad = sorted(present ^ set(self.files))
        bad += [n for n in sorted(present & set(self.files)) if file_hash(outdir / n) != self.files[n]]
        return bad
